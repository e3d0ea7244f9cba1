"""ShrinkMatch training loop.

One step: weak view through the main head (detached) -> optional distribution
alignment -> certain mask -> L_u on main-head strong logits -> shrunk L_s on
aux-head strong logits -> L_x -> one backward pass -> SGD step -> m_g update
-> teacher update.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import tempfile
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import Augmenter, BatchIterator, Dataset, LabeledBatch, UnlabeledBatch, split
from .errors import CheckpointError, ConfigError, InvalidInputError, NonFiniteLossError, ShapeError
from .losses import (AlignmentState, BatchLossReport, aligned_logits, certain_loss, supervised_loss,
                     total_loss, uncertain_loss)
from .metrics import EvalRow, MetricWriter, WindowAccumulator, topk_accuracy
from .nn import ParamSet, backward, forward, forward_with_cache, init_params
from .state import EmaTracker, make_teacher, update_teacher

log = logging.getLogger(__name__)

ABLATION_TOKENS = ("no-shrink", "no-aux", "no-p1", "no-p2", "linear-sched", "soft-label", "direct-uncertain")


@dataclass(frozen=True)
class RunConfig:
    tau: float = 0.95
    gamma: float = 0.999
    lambda_u: float = 1.0
    batch_size: int = 16
    batch_size_u: int = 112
    iterations: int = 20000
    lr: float = 0.03
    warmup: int = 0
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    cosine: str = "fixmatch"          # fixmatch: cos(7 pi k / 16 K); plain: half-cosine to 0
    u_label_mode: str = "hard"        # label type of the certain loss L_u
    da: bool = True
    da_momentum: float = 0.999
    da_threshold: bool = True         # decide certainty on aligned (True) or raw (False) confidence
    # uncertain-branch switches
    shrink: bool = True
    aux_head: bool = True
    principle1: bool = True           # weight by original-space confidence
    principle2: bool = True           # gate by global certain ratio m_g
    linear_scheduling: bool = False   # gate ramps 0 -> ls_mu over ls_iters instead
    ls_mu: float = 1.0
    ls_iters: int = 0                 # 0 = total iterations
    s_label_mode: str = "hard"        # label type of the uncertain loss L_s
    direct_uncertain: bool = False    # with shrink and aux off: learn uncertain samples in full space
    # model
    hidden: int = 64
    n_backbone: int = 2
    aux_hidden: int = 64
    # data / protocol
    labels_per_class: int = 4
    weak_noise: float = 0.05
    strong_noise: float = 0.5
    mask_fraction: float = 0.25
    eval_every: int = 500
    checkpoint_every: int = 0
    top_k: int = 5
    seed: int = 0

    def validate(self) -> "RunConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(msg, name)

        need(0.0 < self.tau < 1.0, "tau", "must lie in (0, 1)")
        need(0.0 <= self.gamma < 1.0, "gamma", "must lie in [0, 1)")
        need(self.lambda_u >= 0.0, "lambda_u", "must be >= 0")
        need(0.0 <= self.da_momentum < 1.0, "da_momentum", "must lie in [0, 1)")
        for name in ("batch_size", "batch_size_u", "hidden", "n_backbone", "aux_hidden",
                     "labels_per_class", "eval_every", "top_k"):
            need(getattr(self, name) > 0, name, "must be positive")
        for name in ("iterations", "warmup", "checkpoint_every", "ls_iters"):
            need(getattr(self, name) >= 0, name, "must be >= 0")
        need(self.lr > 0, "lr", "must be positive")
        need(self.cosine in ("fixmatch", "plain"), "cosine", "must be 'fixmatch' or 'plain'")
        need(self.u_label_mode in ("hard", "soft"), "u_label_mode", "must be 'hard' or 'soft'")
        need(self.s_label_mode in ("hard", "soft"), "s_label_mode", "must be 'hard' or 'soft'")
        need(0.0 <= self.mask_fraction <= 1.0, "mask_fraction", "must lie in [0, 1]")
        need(self.weak_noise >= 0 and self.strong_noise >= 0, "weak_noise", "noise scales must be >= 0")
        return self

    @property
    def uncertain_branch(self) -> bool:
        return self.shrink or self.aux_head or self.direct_uncertain

    def with_ablation(self, tokens) -> "RunConfig":
        if isinstance(tokens, str):
            tokens = [t.strip() for t in tokens.split(",") if t.strip()]
        unknown = [t for t in tokens if t not in ABLATION_TOKENS]
        if unknown:
            raise ConfigError(f"unknown ablation token(s) {unknown}; choose from {list(ABLATION_TOKENS)}",
                              "ablation")
        changes = {}
        for t in tokens:
            if t == "no-shrink":
                changes["shrink"] = False
            elif t == "no-aux":
                changes["aux_head"] = False
            elif t == "no-p1":
                changes["principle1"] = False
            elif t == "no-p2":
                changes["principle2"] = False
            elif t == "linear-sched":
                changes["linear_scheduling"] = True
            elif t == "soft-label":
                changes["s_label_mode"] = "soft"
            elif t == "direct-uncertain":
                changes["direct_uncertain"] = True
        return replace(self, **changes)

    @property
    def variant(self) -> str:
        if not self.uncertain_branch:
            return "baseline"
        parts = []
        if not self.shrink:
            parts.append("no-shrink")
        if not self.aux_head:
            parts.append("no-aux")
        if self.linear_scheduling:
            parts.append("linear-sched")
        if not self.principle1:
            parts.append("no-p1")
        if not self.principle2 and not self.linear_scheduling:
            parts.append("no-p2")
        if self.s_label_mode == "soft":
            parts.append("soft-label")
        if self.direct_uncertain and not (self.shrink or self.aux_head):
            parts.append("direct-uncertain")
        return "shrinkmatch" + (f"[{','.join(parts)}]" if parts else "")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# optimisation


def lr_schedule(iteration: int, config: RunConfig) -> float:
    """Linear warmup to ``lr`` then cosine decay (FixMatch ``cos(7 pi k / 16 K)`` by default)."""
    eta0 = config.lr
    if iteration < config.warmup:
        return eta0 * (iteration + 1) / config.warmup
    span = max(config.iterations - config.warmup, 1)
    progress = min(iteration - config.warmup, span) / span
    if config.cosine == "plain":
        return eta0 * 0.5 * (1.0 + math.cos(math.pi * progress))
    return eta0 * math.cos(7.0 * math.pi * progress / 16.0)


class SGD:
    """SGD with (Nesterov) momentum; weight decay on weight matrices only."""

    def __init__(self, params: ParamSet, momentum=0.9, weight_decay=5e-4, nesterov=True):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.buffers = {k: np.zeros_like(v) for k, v in params.values.items()}

    def step(self, params: ParamSet, grads: dict, lr: float):
        mu = self.momentum
        for name, p in params.values.items():
            g = grads[name]
            if self.weight_decay and name.endswith(".w"):
                g = g + self.weight_decay * p
            buf = self.buffers[name]
            buf *= mu
            buf += g
            p -= lr * (g + mu * buf if self.nesterov else buf)


# --------------------------------------------------------------------------
# state and step


@dataclass
class TrainerState:
    student: ParamSet
    teacher: ParamSet
    tracker: EmaTracker
    alignment: AlignmentState
    optimizer: SGD
    iteration: int = 0


def init_state(config: RunConfig, in_dim: int, n_classes: int) -> TrainerState:
    root = np.random.SeedSequence(config.seed)
    init_ss = root.spawn(2)[1]
    student = init_params(in_dim, n_classes, config.hidden, config.n_backbone, config.aux_hidden,
                          rng=np.random.default_rng(init_ss))
    return TrainerState(
        student=student,
        teacher=make_teacher(student),
        tracker=EmaTracker(config.gamma),
        alignment=AlignmentState(n_classes, config.da_momentum),
        optimizer=SGD(student, config.momentum, config.weight_decay, config.nesterov),
    )


def uncertain_gate(config: RunConfig, iteration: int, mg: float) -> float:
    if config.linear_scheduling:
        horizon = config.ls_iters or config.iterations
        return config.ls_mu * min(1.0, iteration / max(horizon, 1))
    return mg if config.principle2 else 1.0


def composite_loss(params: ParamSet, config: RunConfig, xl, yl, us, label_logits, threshold_logits, gate):
    """Loss ``L_x + lambda_u (L_u + L_s)`` with weak-view targets held fixed.

    Returns ``(parts, grads)`` where ``parts`` holds the individual losses and
    masks. This is the function whose parameter gradient is checked against
    finite differences.
    """
    n_lab = xl.shape[0]
    s_head = "aux" if config.aux_head else "main"
    use_s = config.uncertain_branch
    heads = ("main", "aux") if use_s and config.aux_head else ("main",)
    out, cache = forward_with_cache(params, np.concatenate([xl, us]), heads=heads)
    main = out["main"]
    loss_x, gx = supervised_loss(main[:n_lab], yl)
    loss_u, mask, gu = certain_loss(label_logits, main[n_lab:], config.tau, config.u_label_mode,
                                    mask_logits=threshold_logits)
    lam = config.lambda_u
    dmain = np.zeros_like(main)
    dmain[:n_lab] = gx
    dmain[n_lab:] = lam * gu
    dl = {"main": dmain}
    loss_s, details = 0.0, {"uncertain": np.flatnonzero(~mask), "weights": np.zeros(0),
                            "cutoffs": np.zeros(0, dtype=np.int64)}
    if use_s:
        strong_s = out[s_head][n_lab:]
        loss_s, gs, details = uncertain_loss(
            threshold_logits, strong_s, config.tau, gate, confidence_weight=config.principle1,
            shrink=config.shrink, label_mode=config.s_label_mode, return_details=True)
        if s_head == "aux":
            daux = np.zeros_like(out["aux"])
            daux[n_lab:] = lam * gs
            dl["aux"] = daux
        else:
            dmain[n_lab:] += lam * gs
    grads = backward(params, cache, dl)
    parts = {"loss_x": loss_x, "loss_u": loss_u, "loss_s": loss_s,
             "total": total_loss(loss_x, loss_u, loss_s, lam), "mask": mask, **details}
    return parts, grads


def weak_targets(state: TrainerState, config: RunConfig, weak_view, update_alignment=True):
    """Detached weak-view logits used for labels and for the certainty decision."""
    weak = forward(state.student, weak_view, "main")
    if not config.da:
        return weak, weak
    aligned = aligned_logits(weak, state.alignment, update=update_alignment)
    return aligned, (aligned if config.da_threshold else weak)


def _dump_batch(lab: LabeledBatch, unl: UnlabeledBatch, dump_dir) -> str:
    d = Path(dump_dir) if dump_dir else Path(tempfile.gettempdir())
    path = d / f"nonfinite_batch_{int(time.time() * 1000)}.npz"
    try:
        np.savez(path, labeled=lab.features, labels=lab.labels, weak=unl.weak, strong=unl.strong,
                 index=unl.index)
    except OSError:
        return None
    return str(path)


def train_step(state: TrainerState, lab: LabeledBatch, unl: UnlabeledBatch, config: RunConfig,
               dump_dir=None) -> tuple[TrainerState, BatchLossReport]:
    gate = uncertain_gate(config, state.iteration, state.tracker.value)
    try:
        label_logits, thr_logits = weak_targets(state, config, unl.weak)
        parts, grads = composite_loss(state.student, config, lab.features, lab.labels, unl.strong,
                                      label_logits, thr_logits, gate)
    except InvalidInputError as exc:
        # the loss functions reject NaN/Inf logits before a loss value exists
        raise NonFiniteLossError(f"non-finite logits at iteration {state.iteration}: {exc}",
                                 _dump_batch(lab, unl, dump_dir)) from exc
    if not math.isfinite(parts["total"]):
        raise NonFiniteLossError(f"non-finite loss at iteration {state.iteration}: "
                                 f"L_x={parts['loss_x']} L_u={parts['loss_u']} L_s={parts['loss_s']}",
                                 _dump_batch(lab, unl, dump_dir))
    state.optimizer.step(state.student, grads, lr_schedule(state.iteration, config))
    mask = parts["mask"]
    n_u = mask.size
    n_certain = int(mask.sum())
    m = n_certain / n_u
    state.tracker.update(m)
    update_teacher(state.teacher, state.student, config.gamma)
    state.iteration += 1
    report = BatchLossReport(
        loss_x=parts["loss_x"], loss_u=parts["loss_u"], loss_s=parts["loss_s"], total=parts["total"],
        certain_ratio=m, n_certain=n_certain, n_uncertain=n_u - n_certain,
        per_sample_weights=parts["weights"], cutoffs=parts["cutoffs"], certain_mask=mask,
        pseudo_labels=label_logits.argmax(axis=1), gate=gate,
    )
    return state, report


# --------------------------------------------------------------------------
# full runs


@dataclass
class RunResult:
    state: TrainerState
    rows: list
    steps: dict = field(default_factory=dict)   # per-step scalar history

    @property
    def final(self) -> EvalRow:
        return self.rows[-1]


class Trainer:
    """Owns the data split, batch stream, state and metric aggregation of one run."""

    def __init__(self, config: RunConfig, dataset: Dataset, run_dir=None):
        self.config = config.validate()
        self.dataset = dataset
        self.split = split(dataset, config.labels_per_class, config.seed)
        self.augmenter = Augmenter(self.split.feature_std, config.weak_noise, config.strong_noise,
                                   config.mask_fraction)
        data_ss = np.random.SeedSequence(config.seed).spawn(2)[0]
        self.iterator = BatchIterator(self.split.labeled, self.split.unlabeled, config.batch_size,
                                      config.batch_size_u, data_ss, self.augmenter)
        self.state = init_state(config, dataset.dim, dataset.n_classes)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.window = WindowAccumulator(dataset.n_classes, dataset.superclass_of)
        self.steps = {k: [] for k in ("loss_x", "loss_u", "loss_s", "m", "mg", "n_uncertain", "removed_sum")}

    def step(self) -> BatchLossReport:
        lab, unl = next(self.iterator)
        _, report = train_step(self.state, lab, unl, self.config, dump_dir=self.run_dir)
        self.window.add(report, self.split.unlabeled.hidden_labels(unl.index))
        s = self.steps
        s["loss_x"].append(report.loss_x)
        s["loss_u"].append(report.loss_u)
        s["loss_s"].append(report.loss_s)
        s["m"].append(report.certain_ratio)
        s["mg"].append(self.state.tracker.value)
        s["n_uncertain"].append(report.n_uncertain)
        s["removed_sum"].append(int(report.removed_counts.sum()))
        return report

    def evaluate(self) -> dict:
        test = self.split.test
        k = min(self.config.top_k, self.dataset.n_classes)
        out = {}
        for who, params in (("student", self.state.student), ("teacher", self.state.teacher)):
            logits = forward(params, test.features, "main")
            out[f"{who}_top1"] = topk_accuracy(logits, test.labels, 1)
            out[f"{who}_topk"] = topk_accuracy(logits, test.labels, k)
        return out

    def eval_row(self) -> EvalRow:
        acc = self.evaluate()
        row = self.window.row(self.state.iteration, acc["student_top1"], acc["student_topk"],
                              acc["teacher_top1"], acc["teacher_topk"], self.state.tracker.value)
        self.window.reset()
        return row

    def save(self, path):
        save_checkpoint(path, self.state, self.config, self.iterator.get_state())

    def load(self, path):
        state, cfg, iter_state = load_checkpoint(path, like=self.state)
        if cfg != self.config.to_dict():
            log.warning("checkpoint config differs from the trainer config")
        self.state = state
        self.iterator.set_state(iter_state)

    def run(self, until=None, writer: MetricWriter = None) -> RunResult:
        cfg = self.config
        until = cfg.iterations if until is None else until
        rows = []

        def record():
            row = self.eval_row()
            rows.append(row)
            if writer is not None:
                writer.write(row)

        if self.state.iteration == 0:
            record()
        while self.state.iteration < until:
            self.step()
            it = self.state.iteration
            if it % cfg.eval_every == 0 or it == until:
                record()
            if self.run_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                self.save(self.run_dir / f"ckpt_{it:07d}.smck")
        steps = {k: np.asarray(v) for k, v in self.steps.items()}
        return RunResult(self.state, rows, steps)


def run(config: RunConfig, dataset: Dataset, run_dir=None) -> RunResult:
    """Train for ``config.iterations`` steps, evaluating every ``eval_every``.

    With a ``run_dir`` the metric rows go to ``metrics.jsonl`` / ``metrics.csv``
    and the final state to ``final.smck``.
    """
    trainer = Trainer(config, dataset, run_dir)
    if run_dir is None:
        return trainer.run()
    run_dir = Path(run_dir)
    with MetricWriter(run_dir) as writer:
        result = trainer.run(writer=writer)
    trainer.save(run_dir / "final.smck")
    return result


# --------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC | u32 version | u64 header length | JSON header | tensor bytes | u32 crc32
# The header carries the config, its sha256, scalar state, RNG states and a
# tensor index (name, dtype, shape, offset, nbytes).

MAGIC = b"SHRKMCH\x00"
VERSION = 1


def _state_tensors(state: TrainerState, iter_state: dict) -> dict:
    t = {}
    for k, v in state.student.values.items():
        t[f"student/{k}"] = v
    for k, v in state.teacher.values.items():
        t[f"teacher/{k}"] = v
    for k, v in state.optimizer.buffers.items():
        t[f"momentum/{k}"] = v
    t["da/running_mean"] = state.alignment.running_mean
    t["da/target"] = state.alignment.target
    t["iter/lab_perm"] = np.asarray(iter_state["lab_perm"], dtype=np.int64)
    t["iter/unl_perm"] = np.asarray(iter_state["unl_perm"], dtype=np.int64)
    return t


def save_checkpoint(path, state: TrainerState, config: RunConfig, iter_state: dict):
    cfg = config.to_dict()
    tensors = _state_tensors(state, iter_state)
    index, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.replace(">", "<"), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": cfg, "config_hash": config_hash(cfg), "iteration": state.iteration,
        "mg": state.tracker.value, "mg_steps": state.tracker.steps, "gamma": state.tracker.momentum,
        "da_momentum": state.alignment.momentum,
        "optimizer": {"momentum": state.optimizer.momentum, "weight_decay": state.optimizer.weight_decay,
                      "nesterov": state.optimizer.nesterov},
        "rng": {k: iter_state[k] for k in ("lab_rng", "unl_rng", "aug_rng")},
        "iter_pos": {"lab_pos": iter_state["lab_pos"], "unl_pos": iter_state["unl_pos"]},
        "tensors": index,
    }
    hbytes = json.dumps(header).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Parse and verify a checkpoint file; returns ``(header, tensors)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    fixed = len(MAGIC) + 12
    if len(data) < fixed + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or truncated)")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC):fixed])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or truncated)")
    try:
        header = json.loads(data[fixed:fixed + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if config_hash(header["config"]) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    base = fixed + hlen
    tensors = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        raw = data[start:start + t["nbytes"]]
        if len(raw) != t["nbytes"] or start + t["nbytes"] > len(data) - 4:
            raise CheckpointError(f"{path}: tensor {t['name']} truncated")
        tensors[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    return header, tensors


def load_checkpoint(path, like: TrainerState = None):
    """Restore ``(TrainerState, config dict, iterator state)``.

    With ``like`` the stored parameter shapes must match it exactly.
    """
    header, tensors = read_checkpoint(path)

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    student = ParamSet(group("student/"))
    teacher = ParamSet(group("teacher/"))
    if like is not None:
        want = like.student.shapes()
        got = student.shapes()
        if want != got:
            diff = sorted(k for k in set(want) | set(got) if want.get(k) != got.get(k))
            raise ShapeError(f"checkpoint parameter shapes differ from the model: "
                             + ", ".join(f"{k}: {got.get(k)} vs {want.get(k)}" for k in diff))
    opt_cfg = header["optimizer"]
    optimizer = SGD(student, opt_cfg["momentum"], opt_cfg["weight_decay"], opt_cfg["nesterov"])
    optimizer.buffers = group("momentum/")
    n_classes = student.n_classes
    state = TrainerState(
        student=student, teacher=teacher,
        tracker=EmaTracker(header["gamma"], header["mg"], header["mg_steps"]),
        alignment=AlignmentState(n_classes, header["da_momentum"], tensors["da/running_mean"],
                                 tensors["da/target"]),
        optimizer=optimizer, iteration=header["iteration"],
    )
    iter_state = {"lab_perm": tensors["iter/lab_perm"], "unl_perm": tensors["iter/unl_perm"],
                  **header["iter_pos"], **header["rng"]}
    return state, header["config"], iter_state
