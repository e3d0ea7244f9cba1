"""Dense float64 building blocks: stable softmax / cross-entropy and a small
feed-forward classifier with a main linear head and an auxiliary MLP head.

Gradients are derived by hand for the fixed architecture::

    x -> [Linear, ReLU] x n_backbone -> features h
    h -> Linear                          (main head)
    h -> Linear, ReLU, Linear, ReLU, Linear   (aux head, 3 layers)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ShapeError

HEADS = ("main", "aux")


def _as_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidInputError(f"need at least 2 classes, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits contain NaN or Inf")
    return z


def log_softmax(logits) -> np.ndarray:
    z = _as_logits(logits)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis, computed with max-subtraction."""
    z = _as_logits(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def confidence(logits):
    """Top-1 softmax probability (scalar for a vector, array for a batch)."""
    p = softmax(logits).max(axis=-1)
    return float(p) if p.ndim == 0 else p


def cross_entropy_hard(logits, target: int) -> tuple[float, np.ndarray]:
    """``-log softmax(logits)[target]`` and its gradient w.r.t. the logits."""
    z = _as_logits(logits)
    if z.ndim != 1:
        raise ShapeError("cross_entropy_hard expects a single logit vector")
    c = z.shape[0]
    if not (0 <= int(target) < c):
        raise IndexError(f"target {target} out of range for {c} classes")
    logp = log_softmax(z)
    grad = np.exp(logp)
    grad[int(target)] -= 1.0
    return float(-logp[int(target)]), grad


def cross_entropy_soft(logits, target) -> tuple[float, np.ndarray]:
    z = _as_logits(logits)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"target shape {t.shape} != logits shape {z.shape}")
    if np.any(t < 0) or not np.allclose(t.sum(axis=-1), 1.0, atol=1e-9):
        raise InvalidInputError("soft target must be a probability vector")
    logp = log_softmax(z)
    loss = -(t * logp).sum(axis=-1)
    grad = np.exp(logp) * t.sum(axis=-1, keepdims=True) - t
    return (float(loss) if loss.ndim == 0 else loss), grad


def hard_ce_rows(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise hard CE for a batch; returns per-row losses and d(loss_i)/d(logits_i)."""
    logp = log_softmax(logits)
    rows = np.arange(logp.shape[0])
    losses = -logp[rows, targets]
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return losses, grad


def soft_ce_rows(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logp = log_softmax(logits)
    losses = -(targets * logp).sum(axis=1)
    grad = np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets
    return losses, grad


# --------------------------------------------------------------------------
# parameters


@dataclass
class ParamSet:
    """Named float64 parameter tensors with gradient slots of the same shape."""

    values: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            self.values[k] = np.asarray(v, dtype=np.float64)
        if not self.grads:
            self.zero_grad()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.values.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.values.items()},
                        {k: g.copy() for k, g in self.grads.items()})

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.values.items()}

    @property
    def n_backbone(self) -> int:
        return sum(1 for k in self.values if k.startswith("backbone.") and k.endswith(".w"))

    @property
    def n_classes(self) -> int:
        return self.values["main.w"].shape[1]

    @property
    def in_dim(self) -> int:
        return self.values["backbone.0.w"].shape[0]


def init_params(in_dim: int, n_classes: int, hidden: int = 64, n_backbone: int = 2,
                aux_hidden: int = 64, rng=None) -> ParamSet:
    """He-initialised weights, zero biases."""
    rng = np.random.default_rng(rng)
    values: dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out, gain=2.0):
        values[f"{name}.w"] = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))
        values[f"{name}.b"] = np.zeros(fan_out)

    width = in_dim
    for i in range(n_backbone):
        linear(f"backbone.{i}", width, hidden)
        width = hidden
    linear("main", hidden, n_classes, gain=1.0)
    linear("aux.0", hidden, aux_hidden)
    linear("aux.1", aux_hidden, aux_hidden)
    linear("aux.2", aux_hidden, n_classes, gain=1.0)
    return ParamSet(values)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]        # input to each backbone layer
    pre: list[np.ndarray]           # pre-activations of each backbone layer
    features: np.ndarray
    aux_inputs: list[np.ndarray] = field(default_factory=list)
    aux_pre: list[np.ndarray] = field(default_factory=list)


def _check_input(params: ParamSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input width {params.in_dim}")
    return x


def forward_with_cache(params: ParamSet, x, heads=HEADS) -> tuple[dict[str, np.ndarray], ForwardCache]:
    x = _check_input(params, x)
    inputs, pre = [], []
    a = x
    for i in range(params.n_backbone):
        inputs.append(a)
        z = a @ params[f"backbone.{i}.w"] + params[f"backbone.{i}.b"]
        pre.append(z)
        a = np.maximum(z, 0.0)
    cache = ForwardCache(inputs, pre, a)
    out = {}
    for head in heads:
        if head == "main":
            out["main"] = a @ params["main.w"] + params["main.b"]
        elif head == "aux":
            b = a
            for j in range(3):
                cache.aux_inputs.append(b)
                z = b @ params[f"aux.{j}.w"] + params[f"aux.{j}.b"]
                if j < 2:
                    cache.aux_pre.append(z)
                    b = np.maximum(z, 0.0)
                else:
                    b = z
            out["aux"] = b
        else:
            raise ValueError(f"unknown head {head!r}")
    return out, cache


def forward(params: ParamSet, x, head: str = "main") -> np.ndarray:
    """Logits of one head for a batch (or a single sample, returned as a 1-row batch)."""
    out, _ = forward_with_cache(params, x, heads=(head,))
    return out[head]


def backward(params: ParamSet, cache: ForwardCache, dlogits: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Back-propagate upstream logit gradients into every parameter.

    Parameters not reachable from any supplied head get exact zeros. The
    result is also written into ``params.grads``.
    """
    grads = {k: np.zeros_like(v) for k, v in params.values.items()}
    dh = np.zeros_like(cache.features)
    h = cache.features
    if "main" in dlogits and dlogits["main"] is not None:
        g = dlogits["main"]
        grads["main.w"] = h.T @ g
        grads["main.b"] = g.sum(axis=0)
        dh = dh + g @ params["main.w"].T
    if "aux" in dlogits and dlogits["aux"] is not None:
        if not cache.aux_inputs:
            raise ValueError("aux head was not evaluated in the forward pass")
        g = dlogits["aux"]
        for j in (2, 1, 0):
            if j < 2:
                g = g * (cache.aux_pre[j] > 0)
            grads[f"aux.{j}.w"] = cache.aux_inputs[j].T @ g
            grads[f"aux.{j}.b"] = g.sum(axis=0)
            g = g @ params[f"aux.{j}.w"].T
        dh = dh + g
    g = dh
    for i in reversed(range(params.n_backbone)):
        g = g * (cache.pre[i] > 0)
        grads[f"backbone.{i}.w"] = cache.inputs[i].T @ g
        grads[f"backbone.{i}.b"] = g.sum(axis=0)
        if i > 0:
            g = g @ params[f"backbone.{i}.w"].T
    params.grads = grads
    return grads
