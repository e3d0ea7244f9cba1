"""Training-wide moving averages: the global certain ratio and the EMA teacher."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidInputError, ShapeError
from .nn import ParamSet


@dataclass
class EmaTracker:
    """Global certain ratio ``m_g``, an un-bias-corrected EMA starting at 0."""

    momentum: float = 0.999
    value: float = 0.0
    steps: int = 0

    def __post_init__(self):
        if not (0.0 <= self.momentum < 1.0):
            raise InvalidInputError(f"momentum must lie in [0, 1), got {self.momentum}")

    def update(self, m: float) -> float:
        if not (0.0 <= m <= 1.0):
            raise InvalidInputError(f"certain ratio must lie in [0, 1], got {m}")
        self.value = self.momentum * self.value + (1.0 - self.momentum) * m
        self.steps += 1
        return self.value


def update_ratio(tracker: EmaTracker, m: float) -> EmaTracker:
    tracker.update(m)
    return tracker


def update_teacher(teacher: ParamSet, student: ParamSet, momentum: float) -> ParamSet:
    """In place: ``theta_t <- momentum * theta_t + (1 - momentum) * theta_s``."""
    if teacher.shapes() != student.shapes():
        raise ShapeError("teacher and student parameter shapes differ")
    for name, t in teacher.values.items():
        s = student.values[name]
        t *= momentum
        t += (1.0 - momentum) * s
    return teacher


def make_teacher(student: ParamSet) -> ParamSet:
    return ParamSet({k: v.copy() for k, v in student.values.items()})


__all__ = ["EmaTracker", "update_ratio", "update_teacher", "make_teacher"]
