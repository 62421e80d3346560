"""Classifier machinery: linear heads, cross-entropy, dropout, Adam, imprinting.

Gradients are analytic throughout; every gradient path here is covered by a
finite-difference check in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    CoverageError,
    DegenerateInputError,
    RngStream,
    ShapeError,
    ValidationError,
    as_generator,
)


@dataclass(frozen=True, eq=False)
class LinearHead:
    """Affine classifier: logits = W x + b, with W of shape (C_out, D)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ShapeError(
                f"weight {w.shape} and bias {b.shape} are not a (C_out, D) / "
                f"(C_out,) pair"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("head parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class ImprintedHead:
    """A frozen base head plus a novel head stacked on its logits."""

    base: LinearHead
    novel: LinearHead


def init_head(
    rng: RngStream | np.random.Generator,
    n_out: int,
    in_dim: int,
    scale: float | None = None,
) -> LinearHead:
    """Random head; the default scale is the usual 1/sqrt(fan_in)."""
    gen = as_generator(rng)
    if scale is None:
        scale = 1.0 / np.sqrt(in_dim)
    return LinearHead(scale * gen.standard_normal((n_out, in_dim)), np.zeros(n_out))


def linear_forward(head: LinearHead, x: np.ndarray) -> np.ndarray:
    """Logits for one vector (D,) or a batch (N, D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != head.in_dim:
        raise ShapeError(
            f"input shape {x.shape} does not match head weight "
            f"{head.weight.shape}"
        )
    return x @ head.weight.T + head.bias


def softmax_xent(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of one logit vector; returns (loss, dloss/dlogits).

    Uses max subtraction, so arbitrarily large logits do not overflow.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError(f"logits must be a vector, got shape {z.shape}")
    k = z.shape[0]
    if not 0 <= label < k:
        raise ValidationError(f"label {label} out of range for {k} classes")
    shifted = z - z.max()
    log_norm = np.log(np.sum(np.exp(shifted)))
    loss = float(log_norm - shifted[label])
    dlogits = np.exp(shifted - log_norm)
    dlogits[label] -= 1.0
    return loss, dlogits


def softmax_xent_batch(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows; dlogits already carries the 1/N factor."""
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    dlogits = np.exp(shifted - log_norm[:, None])
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / n


def dropout_mask(
    rng: RngStream | np.random.Generator, p: float, dim: int
) -> np.ndarray:
    """Inverted dropout mask: 0 with probability p, else 1/(1-p).

    Training-mode only; evaluation applies no mask at all.
    """
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout probability must be in [0, 1), got {p}")
    gen = as_generator(rng)
    keep = gen.random(dim) >= p
    return keep.astype(np.float64) / (1.0 - p)


@dataclass
class AdamState:
    """First/second-moment accumulators and step counter for named params."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float) -> "AdamState":
        state = cls(lr=lr)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """One Adam update with bias correction; returns the new parameters."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"param {name!r}: grad shape {g.shape} != param shape {p.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def imprint(
    support_logits: list[tuple[np.ndarray, int]], n_way: int
) -> LinearHead:
    """Novel head initialized from support logits.

    Row k is the L2-normalized mean of class k's logit vectors (for one shot,
    just the normalized logits); the bias starts at zero.  Rows act as class
    templates: a query scores highest on the template it is most similar to.
    """
    if n_way < 1:
        raise ValidationError("n_way must be >= 1")
    groups: list[list[np.ndarray]] = [[] for _ in range(n_way)]
    for z, k in support_logits:
        if not 0 <= k < n_way:
            raise ValidationError(f"class index {k} out of range for {n_way}-way")
        groups[k].append(np.asarray(z, dtype=np.float64))
    rows = []
    for k, zs in enumerate(groups):
        if not zs:
            raise CoverageError(f"class {k} has no support logits to imprint")
        mean = np.mean(zs, axis=0)
        norm = float(np.linalg.norm(mean))
        if norm <= 1e-300:
            raise DegenerateInputError(
                f"class {k}: mean support logits have zero norm"
            )
        rows.append(mean / norm)
    w = np.stack(rows)
    return LinearHead(w, np.zeros(n_way))


def train_head(
    features: list[tuple[np.ndarray, int]],
    init: LinearHead,
    iters: int,
    lr: float,
    dropout_p: float,
    rng: RngStream | np.random.Generator,
) -> LinearHead:
    """Full-batch Adam on mean cross-entropy for exactly ``iters`` steps.

    Dropout, when enabled, is applied to the input features at every step;
    the returned head is deterministic in (data, init, rng).
    """
    if iters < 0:
        raise ValidationError("iters must be >= 0")
    if not features:
        raise CoverageError("empty feature set")
    x = np.stack([np.asarray(f, dtype=np.float64) for f, _ in features])
    y = np.array([lab for _, lab in features], dtype=np.intp)
    n, d = x.shape
    k = init.n_out
    if d != init.in_dim:
        raise ShapeError(
            f"feature dim {d} does not match head input dim {init.in_dim}"
        )
    present = set(int(lab) for lab in y)
    missing = sorted(set(range(k)) - present)
    if missing:
        raise CoverageError(f"no samples for class(es) {missing}")
    if iters == 0:
        return init

    gen = as_generator(rng)
    # augmented parameter: bias folded in as a last column against a 1s input;
    # Adam is inlined with in-place updates because this loop dominates
    # per-episode adaptation cost during large evaluations
    p = np.concatenate([init.weight, init.bias[:, None]], axis=1)
    x1 = np.concatenate([x, np.ones((n, 1))], axis=1)
    rows = np.arange(n)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    denom = np.empty_like(p)
    for t in range(1, iters + 1):
        if dropout_p > 0.0:
            mask = (gen.random((n, d)) >= dropout_p) / (1.0 - dropout_p)
            xa = np.concatenate([x * mask, np.ones((n, 1))], axis=1)
        else:
            xa = x1
        logits = xa @ p.T
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        logits[rows, y] -= 1.0
        dp = logits.T @ xa
        dp /= n
        m *= beta1
        m += (1.0 - beta1) * dp
        np.square(dp, out=dp)
        v *= beta2
        v += (1.0 - beta2) * dp
        np.divide(v, 1.0 - beta2**t, out=denom)
        np.sqrt(denom, out=denom)
        denom += eps
        p -= (lr / (1.0 - beta1**t)) * m / denom
    return LinearHead(p[:, :-1], p[:, -1])
