import os

# acceptance criteria append "PASS|FAIL <criterion>: <detail>" lines here
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def pytest_configure(config):
    os.environ.setdefault("SHRINKMATCH_RUNDIR", os.path.join(str(config.rootpath), ".pytest_runs"))
