"""Evaluation diagnostics and append-only JSONL/CSV metric logs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError


def topk_accuracy(logits, labels, k: int = 1) -> float:
    """Fraction of rows whose label is among the ``k`` largest logits (ties to lower index)."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    c = z.shape[1]
    if not (1 <= k <= c):
        raise ValueError(f"k={k} outside [1, {c}]")
    if z.shape[0] == 0:
        return float("nan")
    top = np.argsort(-z, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def superclass_accuracy(pseudo_labels, true_labels, superclass_of) -> float:
    superclass_of = np.asarray(superclass_of, dtype=np.int64)
    pseudo = np.asarray(pseudo_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pseudo.size == 0:
        return float("nan")
    bad = [int(c) for c in np.union1d(pseudo, true) if c < 0 or c >= superclass_of.size]
    if bad:
        raise ConfigError(f"classes {bad} are not in the superclass map", "superclass_of")
    return float(np.mean(superclass_of[pseudo] == superclass_of[true]))


def removed_class_stats(cutoffs, n_classes: int):
    """Mean and histogram (index = removed count, 0..C-1) of ``K - 2``.

    An empty batch yields ``(nan, zeros)``.
    """
    removed = np.asarray(cutoffs, dtype=np.int64) - 2
    hist = np.bincount(removed, minlength=n_classes) if removed.size else np.zeros(n_classes, dtype=np.int64)
    mean = float(removed.mean()) if removed.size else float("nan")
    return mean, hist


# --------------------------------------------------------------------------
# evaluation rows


@dataclass
class EvalRow:
    iteration: int
    student_top1: float
    student_topk: float
    teacher_top1: float
    teacher_topk: float
    pl_acc_certain: float
    pl_acc_certain_super: float
    pl_acc_uncertain: float
    pl_acc_uncertain_super: float
    uncertain_ratio: float
    removed_mean: float
    n_uncertain: int
    loss_x: float
    loss_u: float
    loss_s: float
    mg: float
    removed_hist: list

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class WindowAccumulator:
    """Aggregates per-step batch statistics between two evaluations."""

    def __init__(self, n_classes: int, superclass_of):
        self.n_classes = n_classes
        self.superclass_of = np.asarray(superclass_of, dtype=np.int64)
        self.reset()

    def reset(self):
        self.steps = 0
        self.sums = {"loss_x": 0.0, "loss_u": 0.0, "loss_s": 0.0}
        self.n_u = 0
        self.n_unc = 0
        self.counts = {k: 0 for k in ("cert", "cert_ok", "cert_sup", "unc_ok", "unc_sup")}
        self.hist = np.zeros(self.n_classes, dtype=np.int64)

    def add(self, report, true_labels):
        self.steps += 1
        self.sums["loss_x"] += report.loss_x
        self.sums["loss_u"] += report.loss_u
        self.sums["loss_s"] += report.loss_s
        self.n_u += report.batch_size_u
        self.n_unc += report.n_uncertain
        mask = report.certain_mask
        pl = report.pseudo_labels
        ok = pl == true_labels
        sup = self.superclass_of[pl] == self.superclass_of[true_labels]
        self.counts["cert"] += int(mask.sum())
        self.counts["cert_ok"] += int(ok[mask].sum())
        self.counts["cert_sup"] += int(sup[mask].sum())
        self.counts["unc_ok"] += int(ok[~mask].sum())
        self.counts["unc_sup"] += int(sup[~mask].sum())
        if report.cutoffs.size:
            self.hist += np.bincount(report.cutoffs - 2, minlength=self.n_classes)

    def row(self, iteration, student_top1, student_topk, teacher_top1, teacher_topk, mg) -> EvalRow:
        def ratio(a, b):
            return a / b if b else float("nan")

        n_cert = self.counts["cert"]
        n_hist = int(self.hist.sum())
        removed_mean = ratio(float(np.dot(np.arange(self.n_classes), self.hist)), n_hist)
        return EvalRow(
            iteration=int(iteration),
            student_top1=student_top1, student_topk=student_topk,
            teacher_top1=teacher_top1, teacher_topk=teacher_topk,
            pl_acc_certain=ratio(self.counts["cert_ok"], n_cert),
            pl_acc_certain_super=ratio(self.counts["cert_sup"], n_cert),
            pl_acc_uncertain=ratio(self.counts["unc_ok"], self.n_unc),
            pl_acc_uncertain_super=ratio(self.counts["unc_sup"], self.n_unc),
            uncertain_ratio=ratio(self.n_unc, self.n_u),
            removed_mean=removed_mean,
            n_uncertain=int(self.n_unc),
            loss_x=ratio(self.sums["loss_x"], self.steps),
            loss_u=ratio(self.sums["loss_u"], self.steps),
            loss_s=ratio(self.sums["loss_s"], self.steps),
            mg=float(mg),
            removed_hist=[int(v) for v in self.hist],
        )


# --------------------------------------------------------------------------
# files


def _csv_cell(value):
    if isinstance(value, list):
        return " ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class MetricWriter:
    """Appends EvalRows to ``<stem>.jsonl`` and ``<stem>.csv`` line by line."""

    def __init__(self, directory, stem: str = "metrics"):
        self.directory = Path(directory)
        self.jsonl_path = self.directory / f"{stem}.jsonl"
        self.csv_path = self.directory / f"{stem}.csv"
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            self._jsonl = self.jsonl_path.open("w", buffering=1)
            self._csv = self.csv_path.open("w", buffering=1, newline="")
        except OSError as exc:
            raise OSError(f"cannot open metric files in {self.directory}: {exc}") from exc
        self._csv.write(",".join(EvalRow.columns()) + "\n")

    def write(self, row: EvalRow):
        d = asdict(row)
        # each record goes out as a single write so tailing readers never see half a line
        self._jsonl.write(json.dumps({k: _json_safe(v) for k, v in d.items()}) + "\n")
        self._csv.write(",".join(_csv_cell(d[c]) for c in EvalRow.columns()) + "\n")

    def close(self):
        self._jsonl.close()
        self._csv.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def emit(rows, directory, stem: str = "metrics"):
    with MetricWriter(directory, stem) as w:
        for r in rows:
            w.write(r)
    return Path(directory) / f"{stem}.csv"


def read_csv(path) -> list[dict]:
    out = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if k == "removed_hist":
                    row[k] = [int(t) for t in v.split()] if v else []
                elif k in ("iteration", "n_uncertain"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            out.append(row)
    return out


def read_jsonl(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.endswith("\n")]
