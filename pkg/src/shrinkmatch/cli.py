"""``shrinkmatch`` command line: gen-data, train, eval, ablate, oracle-check.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .data import save_csv, save_npz, save_superclass_map
from .errors import ConfigError, ShrinkMatchError
from .trainer import Trainer, config_hash, load_checkpoint, run

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("shrinkmatch")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_args(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda-u", dest="lambda_u", type=float)
    p.add_argument("--labels-per-class", dest="labels_per_class", type=int)
    p.add_argument("--iters", dest="iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", help="comma list of ablation tokens")
    p.add_argument("--da", choices=("on", "off"))
    p.add_argument("--label-mode", dest="s_label_mode", choices=("hard", "soft"),
                   help="label type of the shrunk uncertain loss")
    p.add_argument("--u-label-mode", dest="u_label_mode", choices=("hard", "soft"),
                   help="label type of the certain loss")
    p.add_argument("--eval-every", dest="eval_every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shrinkmatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write the synthetic dataset to disk")
    _add_config_args(g)
    g.add_argument("--out", required=True, help="output file (.csv or .npz)")

    t = sub.add_parser("train", help="train one run")
    _add_config_args(t)
    t.add_argument("--run-dir", help="explicit run directory (default: <root>/<variant>_s<seed>_<hash>)")

    e = sub.add_parser("eval", help="evaluate a run directory or checkpoint")
    e.add_argument("target", help="run directory or .smck checkpoint")
    e.add_argument("--config", help="config file (default: <run dir>/config.conf)")

    a = sub.add_parser("ablate", help="run a variant x tau x seed grid")
    _add_config_args(a)
    a.add_argument("--variants", help="';'-separated variant list (names or token lists)")
    a.add_argument("--taus", help="comma list of thresholds")
    a.add_argument("--seeds", help="comma list of seeds")
    a.add_argument("--workers", type=int)
    a.add_argument("--out", help="table path (default: <root>/ablate_<hash>/table.csv)")

    o = sub.add_parser("oracle-check", help="run the brute-force property checks")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--quick", action="store_true", help="smaller instance counts")
    o.add_argument("--only", action="append", help="restrict to a named check (repeatable)")
    return parser


def _settings(args) -> cfgmod.Settings:
    s = cfgmod.load(getattr(args, "config", None), getattr(args, "overrides", []))
    flags = {k: getattr(args, k, None) for k in ("tau", "gamma", "lambda_u", "labels_per_class", "iterations",
                                                   "seed", "s_label_mode", "u_label_mode", "eval_every")}
    run_cfg = replace(s.run, **{k: v for k, v in flags.items() if v is not None})
    if getattr(args, "da", None):
        run_cfg = replace(run_cfg, da=args.da == "on")
    s = replace(s, run=run_cfg)
    if getattr(args, "ablation", None) is not None:
        s = cfgmod.apply(s, "ablation", args.ablation)
    a = s.ablate
    if getattr(args, "variants", None):
        a = replace(a, variants=tuple(v.strip() for v in args.variants.split(";") if v.strip()))
    if getattr(args, "taus", None):
        a = replace(a, taus=tuple(float(t) for t in args.taus.split(",") if t.strip()))
    if getattr(args, "seeds", None):
        a = replace(a, seeds=tuple(int(t) for t in args.seeds.split(",") if t.strip()))
    if getattr(args, "workers", None):
        a = replace(a, workers=args.workers)
    s = replace(s, ablate=a)
    s.effective_run()  # validate early
    s.data.validate()
    return s


def _summary(result, cfg) -> dict:
    f = result.final
    return {"variant": cfg.variant, "seed": cfg.seed, "iterations": cfg.iterations,
            "teacher_top1": f.teacher_top1, "teacher_topk": f.teacher_topk,
            "student_top1": f.student_top1, "student_topk": f.student_topk, "mg": f.mg}


def cmd_gen_data(args) -> int:
    s = _settings(args)
    ds = s.dataset()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".npz":
        save_npz(ds, out)
    else:
        save_csv(ds, out)
        save_superclass_map(ds.superclass_of, out.with_name(out.stem + "_superclasses.csv"))
    print(f"wrote {len(ds.labels)} samples ({ds.n_classes} classes, {ds.n_superclasses} superclasses) to {out}")
    return EXIT_OK


def _train_one(settings: cfgmod.Settings, run_dir: Path, dataset=None) -> dict:
    cfg = settings.effective_run()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.conf").write_text(cfgmod.dump(settings))
    result = run(cfg, dataset if dataset is not None else settings.dataset(), run_dir)
    summary = _summary(result, cfg)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _default_run_dir(settings) -> Path:
    cfg = settings.effective_run()
    h = config_hash({"run": cfg.to_dict(), "data": cfgmod.dump(settings)})[:8]
    return cfgmod.run_root() / f"{cfg.variant}_s{cfg.seed}_{h}"


def cmd_train(args) -> int:
    s = _settings(args)
    run_dir = Path(args.run_dir) if args.run_dir else _default_run_dir(s)
    summary = _train_one(s, run_dir)
    print(f"{summary['variant']} seed={summary['seed']} teacher_top1={summary['teacher_top1']:.4f} "
          f"student_top1={summary['student_top1']:.4f} run_dir={run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    target = Path(args.target)
    ckpt = target / "final.smck" if target.is_dir() else target
    conf = Path(args.config) if args.config else ckpt.parent / "config.conf"
    if not conf.exists():
        raise ConfigError(f"no config found at {conf}; pass --config", "config")
    s = cfgmod.load(conf)
    cfg = s.effective_run()
    trainer = Trainer(cfg, s.dataset())
    trainer.load(ckpt)
    acc = trainer.evaluate()
    _, stored_cfg, _ = load_checkpoint(ckpt)
    if stored_cfg != cfg.to_dict():
        print("warning: checkpoint config differs from the config file", file=sys.stderr)
    out = {"checkpoint": str(ckpt), "iteration": trainer.state.iteration, **acc}
    print(json.dumps(out))
    summary = ckpt.parent / "summary.json"
    if summary.exists():
        logged = json.loads(summary.read_text())
        if logged.get("teacher_top1") != acc["teacher_top1"]:
            print(f"warning: logged teacher_top1 {logged.get('teacher_top1')} != {acc['teacher_top1']}",
                  file=sys.stderr)
    return EXIT_OK


def _ablate_cell(payload):
    """Run one grid cell; never raises so that the grid survives failures."""
    settings, run_dir = payload
    try:
        return {"ok": True, **_train_one(settings, Path(run_dir))}
    except Exception as exc:  # recorded as a failure marker in the table
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc()}


def ablation_grid(settings: cfgmod.Settings):
    """Yield ``(variant name, tau, seed, cell settings)`` for the configured grid."""
    taus = settings.ablate.taus or (settings.run.tau,)
    for name in settings.ablate.variants:
        tokens = cfgmod.variant_tokens(name)
        for tau in taus:
            for seed in settings.ablate.seeds:
                cell = replace(settings, run=replace(settings.run, tau=tau, seed=seed))
                cell = cfgmod.apply(cell, "ablation", ",".join(filter(None, [*settings.ablation, tokens])))
                yield name, tau, seed, cell


def write_table(path: Path, rows: dict, seeds) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "tau", *[f"seed_{s}" for s in seeds], "mean", "n_ok", "failed"])
        for (name, tau), cells in rows.items():
            vals = [cells.get(s) for s in seeds]
            ok = [v for v in vals if isinstance(v, float)]
            mean = sum(ok) / len(ok) if ok else float("nan")
            failed = [str(s) for s, v in zip(seeds, vals) if not isinstance(v, float)]
            w.writerow([name, repr(tau), *[repr(v) if isinstance(v, float) else "FAIL" for v in vals],
                        repr(mean) if not math.isnan(mean) else "nan", len(ok), " ".join(failed)])


def cmd_ablate(args) -> int:
    s = _settings(args)
    grid = list(ablation_grid(s))
    for _, _, _, cell in grid:
        cell.effective_run()
    h = config_hash({"grid": cfgmod.dump(s)})[:8]
    root = cfgmod.run_root() / f"ablate_{h}"
    out = Path(args.out) if args.out else root / "table.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    payloads = []
    for name, tau, seed, cell in grid:
        safe = name.replace(",", "+").replace(" ", "") or "full"
        payloads.append((cell, str(root / f"{safe}_tau{tau}_s{seed}")))
    if s.ablate.workers > 1:
        with ProcessPoolExecutor(max_workers=s.ablate.workers) as ex:
            results = list(ex.map(_ablate_cell, payloads))
    else:
        results = [_ablate_cell(p) for p in payloads]
    rows: dict = {}
    n_fail = 0
    for (name, tau, seed, _), res in zip(grid, results):
        cells = rows.setdefault((name, tau), {})
        if res["ok"]:
            cells[seed] = float(res["teacher_top1"])
        else:
            n_fail += 1
            cells[seed] = None
            print(f"cell {name} tau={tau} seed={seed} failed: {res['error']}", file=sys.stderr)
    write_table(out, rows, s.ablate.seeds)
    print(f"wrote {len(rows)} rows to {out}" + (f" ({n_fail} failed cells)" if n_fail else ""))
    return EXIT_RUNTIME if n_fail else EXIT_OK


def cmd_oracle_check(args) -> int:
    from . import oracle

    unknown = [n for n in (args.only or []) if n not in oracle.CHECKS]
    if unknown:
        raise ConfigError(f"unknown check(s) {unknown}; choose from {list(oracle.CHECKS)}", "only")
    results = oracle.run_all(args.seed, quick=args.quick, only=args.only)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"oracle-check failed: {', '.join(failed)}")
        return EXIT_RUNTIME
    print("oracle-check passed")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "oracle-check": cmd_oracle_check}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ShrinkMatchError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
