import math

import numpy as np
import pytest

from shrinkmatch.data import BlobConfig, generate_confusable_blobs
from shrinkmatch.errors import CheckpointError, ConfigError, NonFiniteLossError, ShapeError
from shrinkmatch.losses import supervised_loss
from shrinkmatch.nn import backward, forward_with_cache, init_params
from shrinkmatch.trainer import (SGD, RunConfig, Trainer, composite_loss, init_state, load_checkpoint,
                                 lr_schedule, read_checkpoint, run, uncertain_gate)

from .fixmatch_reference import FixMatchReference
from .helpers import central_diff, max_rel_error, min_abs_preactivation, randomize_biases

COS_7PI_16 = 0.19509032201612827  # mpmath

TINY_DATA = BlobConfig(n_classes=6, n_superclasses=2, dim=6, per_class=40, intra_spacing=1.5,
                       inter_spacing=4.0, seed=1)
TINY = RunConfig(batch_size=4, batch_size_u=28, iterations=60, eval_every=20, hidden=12, aux_hidden=10,
                 labels_per_class=2, tau=0.7, gamma=0.9, top_k=3)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_confusable_blobs(TINY_DATA)


def test_lr_schedule_examples():
    cfg = RunConfig(iterations=1000)
    assert lr_schedule(0, cfg) == 0.03
    assert lr_schedule(1000, cfg) == pytest.approx(0.03 * COS_7PI_16, rel=1e-12)
    assert abs(lr_schedule(1000, cfg) / 0.03 - 0.1951) < 1e-4
    vals = [lr_schedule(k, cfg) for k in range(0, 1001, 10)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_lr_schedule_warmup_and_plain():
    cfg = RunConfig(iterations=100, warmup=10)
    assert lr_schedule(0, cfg) == pytest.approx(0.003)
    assert lr_schedule(9, cfg) == pytest.approx(0.03)
    assert lr_schedule(10, cfg) == 0.03
    plain = RunConfig(iterations=100, cosine="plain")
    assert lr_schedule(100, plain) == pytest.approx(0.0, abs=1e-15)
    assert lr_schedule(50, plain) == pytest.approx(0.015)


@pytest.mark.parametrize("field,value", [("tau", 1.0), ("tau", 0.0), ("gamma", 1.0), ("batch_size", 0),
                                         ("lambda_u", -1.0), ("u_label_mode", "x"), ("iterations", -1)])
def test_config_validation(field, value):
    with pytest.raises(ConfigError) as e:
        RunConfig(**{field: value}).validate()
    assert e.value.field == field


def test_ablation_tokens_and_variant_names():
    base = RunConfig().with_ablation("no-shrink,no-aux")
    assert base.variant == "baseline" and not base.uncertain_branch
    assert RunConfig().variant == "shrinkmatch"
    assert RunConfig().with_ablation(["no-p1", "soft-label"]).variant == "shrinkmatch[no-p1,soft-label]"
    assert RunConfig().with_ablation("no-shrink,no-aux,direct-uncertain").variant == \
        "shrinkmatch[no-shrink,no-aux,direct-uncertain]"
    with pytest.raises(ConfigError):
        RunConfig().with_ablation("no-such-flag")


def test_uncertain_gate_variants():
    assert uncertain_gate(RunConfig(), 10, 0.25) == 0.25
    assert uncertain_gate(RunConfig(principle2=False), 10, 0.25) == 1.0
    ls = RunConfig(linear_scheduling=True, ls_mu=2.0, ls_iters=100)
    assert uncertain_gate(ls, 0, 0.9) == 0.0
    assert uncertain_gate(ls, 50, 0.9) == 1.0
    assert uncertain_gate(ls, 500, 0.9) == 2.0


def test_sgd_nesterov_by_hand():
    from shrinkmatch.nn import ParamSet

    p = ParamSet({"a.w": np.array([1.0]), "a.b": np.array([1.0])})
    opt = SGD(p, momentum=0.5, weight_decay=0.1, nesterov=True)
    opt.step(p, {"a.w": np.array([2.0]), "a.b": np.array([2.0])}, lr=0.1)
    # weights: g = 2 + 0.1; buf = 2.1; step = g + 0.5 * buf
    assert p["a.w"][0] == pytest.approx(1.0 - 0.1 * (2.1 + 0.5 * 2.1))
    # biases are not decayed
    assert p["a.b"][0] == pytest.approx(1.0 - 0.1 * (2.0 + 0.5 * 2.0))


def _toy_batch(seed, n_classes=4, in_dim=5):
    rng = np.random.default_rng(seed)
    while True:
        params = randomize_biases(init_params(in_dim, n_classes, hidden=7, n_backbone=2, aux_hidden=6,
                                              rng=rng), rng)
        xl, us = rng.normal(size=(3, in_dim)), rng.normal(size=(8, in_dim))
        if min_abs_preactivation(params, np.concatenate([xl, us])) > 1e-3:
            break
    yl = rng.integers(0, n_classes, 3)
    # weak logits with a spread of confidences so both branches are populated
    weak = rng.normal(size=(8, n_classes)) * rng.uniform(0.5, 1.5, size=(8, 1))
    weak[:3, 0] += 8.0
    return params, xl, yl, us, weak


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("ablation", ["", "no-aux", "soft-label"])
def test_composite_gradient_matches_finite_differences(seed, ablation):
    params, xl, yl, us, weak = _toy_batch(seed)
    cfg = RunConfig(tau=0.8, lambda_u=0.7).with_ablation(ablation)
    parts, grads = composite_loss(params, cfg, xl, yl, us, weak, weak, 0.6)
    assert parts["mask"].any() and (~parts["mask"]).any()

    def f(name, v):
        p = params.copy()
        p.values[name] = v
        return composite_loss(p, cfg, xl, yl, us, weak, weak, 0.6)[0]["total"]

    for name in params:
        fd = central_diff(lambda v, name=name: f(name, v), params[name].copy())
        assert max_rel_error(grads[name], fd) < 1e-4, name


@pytest.mark.parametrize("seed", range(5))
def test_head_isolation(seed):
    params, xl, yl, us, weak = _toy_batch(seed)
    cfg = RunConfig(tau=0.8)
    parts, with_s = composite_loss(params, cfg, xl, yl, us, weak, weak, 0.9)
    assert parts["loss_s"] > 0
    _, without_s = composite_loss(params, cfg, xl, yl, us, weak, weak, 0.0)
    # L_x + L_u never reach the aux head
    assert all(np.all(without_s[k] == 0) for k in params if k.startswith("aux."))
    # L_s never reaches the main head
    assert np.array_equal(with_s["main.w"], without_s["main.w"])
    assert np.array_equal(with_s["main.b"], without_s["main.b"])
    # but it does reach the shared backbone
    assert not np.array_equal(with_s["backbone.0.w"], without_s["backbone.0.w"])


def test_without_aux_head_shrunk_loss_uses_main_head():
    params, xl, yl, us, weak = _toy_batch(0)
    cfg = RunConfig(tau=0.8, aux_head=False)
    _, g1 = composite_loss(params, cfg, xl, yl, us, weak, weak, 0.9)
    _, g0 = composite_loss(params, cfg, xl, yl, us, weak, weak, 0.0)
    assert not np.array_equal(g1["main.w"], g0["main.w"])
    assert all(np.all(g1[k] == 0) for k in params if k.startswith("aux."))


def test_baseline_matches_independent_fixmatch(tiny_ds):
    cfg = TINY.with_ablation("no-shrink,no-aux")
    tr = Trainer(cfg, tiny_ds)
    ref = FixMatchReference(tr.state.student.values, cfg.n_backbone, tau=cfg.tau, lr=cfg.lr,
                            iterations=cfg.iterations)
    # a second iterator over the same stream feeds the reference
    twin = Trainer(cfg, tiny_ds).iterator
    for _ in range(40):
        rep = tr.step()
        lab, unl = next(twin)
        lx, lu, tot = ref.step(lab.features, lab.labels, unl.weak, unl.strong)
        assert (rep.loss_x, rep.loss_u, rep.loss_s, rep.total) == (lx, lu, 0.0, tot)


def test_lambda_zero_is_supervised_only(tiny_ds):
    cfg = TINY.__class__(**{**TINY.to_dict(), "lambda_u": 0.0})
    tr = Trainer(cfg, tiny_ds)
    params = tr.state.student.copy()
    opt = SGD(params, cfg.momentum, cfg.weight_decay, cfg.nesterov)
    twin = Trainer(cfg, tiny_ds).iterator
    for k in range(30):
        tr.step()
        lab, _ = next(twin)
        out, cache = forward_with_cache(params, lab.features, heads=("main",))
        _, g = supervised_loss(out["main"], lab.labels)
        opt.step(params, backward(params, cache, {"main": g}), lr_schedule(k, cfg))
    # same arithmetic up to matmul blocking on a taller batch
    for name in params:
        np.testing.assert_allclose(tr.state.student[name], params[name], rtol=1e-10, atol=1e-12)


def test_report_partition_and_ratio_ema(tiny_ds):
    tr = Trainer(TINY, tiny_ds)
    for _ in range(30):
        rep = tr.step()
        assert rep.n_certain + rep.n_uncertain == TINY.batch_size_u
        assert rep.certain_ratio == rep.n_certain / TINY.batch_size_u
        assert rep.cutoffs.size == rep.n_uncertain
        assert rep.loss_x >= 0 and rep.loss_u >= 0 and rep.loss_s >= 0
    mg = 0.0
    for m in tr.steps["m"]:
        mg = TINY.gamma * mg + (1 - TINY.gamma) * m
    assert tr.state.tracker.value == pytest.approx(mg, abs=1e-9)


def test_runs_are_deterministic(tiny_ds):
    a, b = run(TINY, tiny_ds), run(TINY, tiny_ds)
    assert len(a.rows) == len(b.rows)
    assert all(_rows_equal(x, y) for x, y in zip(a.rows, b.rows))
    assert np.array_equal(a.steps["loss_s"], b.steps["loss_s"])


def _rows_equal(x, y):
    # NaN-aware field comparison (empty windows log NaN)
    for k, v in x.__dict__.items():
        w = y.__dict__[k]
        if isinstance(v, float) and math.isnan(v):
            if not math.isnan(w):
                return False
        elif v != w:
            return False
    return True


def test_zero_iteration_run(tiny_ds):
    res = run(TINY.__class__(**{**TINY.to_dict(), "iterations": 0}), tiny_ds)
    assert len(res.rows) == 1 and res.rows[0].iteration == 0
    assert math.isnan(res.rows[0].uncertain_ratio)


def test_eval_cadence(tiny_ds):
    res = run(TINY, tiny_ds)
    assert [r.iteration for r in res.rows] == [0, 20, 40, 60]


def test_checkpoint_resume_reproduces_losses(tiny_ds, tmp_path):
    cfg = TINY.__class__(**{**TINY.to_dict(), "iterations": 150})
    a = Trainer(cfg, tiny_ds)
    for _ in range(50):
        a.step()
    a.save(tmp_path / "c.smck")
    ref = [a.step().total for _ in range(100)]
    b = Trainer(cfg, tiny_ds)
    b.load(tmp_path / "c.smck")
    assert b.state.iteration == 50
    assert [b.step().total for _ in range(100)] == ref
    for k in a.state.teacher:
        assert np.array_equal(a.state.teacher[k], b.state.teacher[k])


def test_checkpoint_roundtrip_is_exact(tiny_ds, tmp_path):
    tr = Trainer(TINY, tiny_ds)
    for _ in range(7):
        tr.step()
    tr.save(tmp_path / "c.smck")
    state, cfg, it = load_checkpoint(tmp_path / "c.smck", like=tr.state)
    assert cfg == TINY.to_dict()
    assert state.tracker.value == tr.state.tracker.value and state.tracker.steps == 7
    assert np.array_equal(state.alignment.running_mean, tr.state.alignment.running_mean)
    for k in tr.state.student:
        assert np.array_equal(state.optimizer.buffers[k], tr.state.optimizer.buffers[k])


def test_checkpoint_corruption(tiny_ds, tmp_path):
    tr = Trainer(TINY, tiny_ds)
    path = tmp_path / "c.smck"
    tr.save(path)
    raw = path.read_bytes()
    (tmp_path / "trunc.smck").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "trunc.smck")
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    (tmp_path / "flip.smck").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        read_checkpoint(tmp_path / "flip.smck")
    (tmp_path / "magic.smck").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "magic.smck")
    (tmp_path / "empty.smck").write_bytes(b"")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "empty.smck")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.smck")


def test_checkpoint_version_mismatch(tiny_ds, tmp_path):
    import struct
    import zlib

    tr = Trainer(TINY, tiny_ds)
    path = tmp_path / "c.smck"
    tr.save(path)
    raw = bytearray(path.read_bytes()[:-4])
    raw[8:12] = struct.pack("<I", 99)
    raw += struct.pack("<I", zlib.crc32(bytes(raw)) & 0xFFFFFFFF)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 99"):
        read_checkpoint(path)


def test_checkpoint_class_mismatch(tiny_ds, tmp_path):
    tr = Trainer(TINY, tiny_ds)
    tr.save(tmp_path / "c.smck")
    other = init_state(TINY, tiny_ds.dim, tiny_ds.n_classes + 2)
    with pytest.raises(ShapeError, match="main"):
        load_checkpoint(tmp_path / "c.smck", like=other)


def test_non_finite_loss_aborts_with_dump(tiny_ds, tmp_path):
    tr = Trainer(TINY, tiny_ds, run_dir=tmp_path)
    tr.state.student.values["main.w"][:] = 1e308
    with pytest.raises(NonFiniteLossError) as e:
        tr.step()
    assert e.value.dump_path is not None
    with np.load(e.value.dump_path) as z:
        assert z["strong"].shape == (TINY.batch_size_u, tiny_ds.dim)


def test_run_writes_metrics_and_final_checkpoint(tiny_ds, tmp_path):
    res = run(TINY, tiny_ds, run_dir=tmp_path)
    from shrinkmatch.metrics import read_csv

    rows = read_csv(tmp_path / "metrics.csv")
    assert len(rows) == len(res.rows)
    assert rows[-1]["teacher_top1"] == pytest.approx(res.final.teacher_top1, abs=1e-12)
    header, _ = read_checkpoint(tmp_path / "final.smck")
    assert header["iteration"] == TINY.iterations


def test_eval_row_is_recomputable_from_checkpoint(tiny_ds, tmp_path):
    cfg = TINY.__class__(**{**TINY.to_dict(), "checkpoint_every": 20})
    tr = Trainer(cfg, tiny_ds, run_dir=tmp_path)
    res = tr.run()
    fresh = Trainer(cfg, tiny_ds)
    fresh.load(tmp_path / "ckpt_0000040.smck")
    acc = fresh.evaluate()
    row = next(r for r in res.rows if r.iteration == 40)
    assert acc["teacher_top1"] == row.teacher_top1 and acc["student_topk"] == row.student_topk
