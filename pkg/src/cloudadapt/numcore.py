"""Float64 array math with hand-derived layer gradients.

All public operations take and return C-contiguous float64 numpy arrays.
Gradients are written out by hand so that each one can be checked against
central finite differences; there is no autodiff graph anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

_U64 = (1 << 64) - 1

# epsilon inside log() of the cross entropy; the backward pass accounts
# for it exactly so finite differences agree to machine precision
LOG_EPS = 1e-12


class ParameterError(ValueError):
    """An argument violates an operation's contract."""


class DimensionError(ValueError):
    """Array shapes do not conform."""


def as_f64(x) -> Array:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def derive_seed(seed: int, tag: int) -> int:
    """Stable 64-bit child seed for namespacing independent rng streams."""
    ss = np.random.SeedSequence(entropy=seed & _U64, spawn_key=(1, tag & _U64))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class RngState:
    """Counter-based deterministic random source.

    Every draw instantiates a fresh PCG64 keyed by (seed, counter) and bumps
    the counter, so the full state is two integers and a given (seed, counter)
    pair reproduces the same values on every platform regardless of what was
    drawn before.
    """

    seed: int
    counter: int = 0

    def _gen(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=self.seed & _U64, spawn_key=(0, self.counter)
        )
        self.counter += 1
        return np.random.Generator(np.random.PCG64(ss))

    def random(self, shape=None) -> Array:
        return self._gen().random(shape)

    def uniform(self, low: float, high: float, shape=None) -> Array:
        return self._gen().uniform(low, high, shape)

    def normal(self, loc: float = 0.0, scale: float = 1.0, shape=None) -> Array:
        return self._gen().normal(loc, scale, shape)

    def integers(self, low: int, high: int, shape=None) -> Array:
        return self._gen().integers(low, high, size=shape)

    def permutation(self, n: int) -> Array:
        return self._gen().permutation(n)

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)

    def fork(self, tag: int) -> "RngState":
        """Independent child stream; does not advance this state."""
        return RngState(derive_seed(self.seed, tag))


# ---------------------------------------------------------------------------
# layers


def linear_forward(x: Array, w: Array, b: Array) -> Array:
    x, w, b = as_f64(x), as_f64(w), as_f64(b)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(
            f"linear expects x (B,I), w (I,O), b (O,); got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(
            f"non-conforming linear shapes: x {x.shape} @ w {w.shape} + b {b.shape}"
        )
    return x @ w + b


def linear_backward(x: Array, w: Array, dout: Array):
    """Gradients of a linear layer: returns (dx, dw, db)."""
    if dout.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(
            f"dout shape {dout.shape} does not match output ({x.shape[0]}, {w.shape[1]})"
        )
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0)
    return dx, dw, db


def relu(z: Array) -> Array:
    return np.maximum(z, 0.0)


def relu_backward(z: Array, dout: Array) -> Array:
    # subgradient 0 at z == 0
    return dout * (z > 0.0)


def dropout_forward(x: Array, rate: float, rng: RngState):
    """Inverted dropout.  Returns (y, mask) with mask in {0, 1/(1-rate)}.

    rate == 0 is the identity and draws nothing from rng.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_f64(x)
    if rate == 0.0:
        return x.copy(), np.ones_like(x)
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout: Array, mask: Array) -> Array:
    return dout * mask


def softmax(logits: Array) -> Array:
    logits = as_f64(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax expects (B,C) logits, got {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels: Array, n_classes: int) -> Array:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ParameterError(f"labels must be a 1-d integer array, got {labels.dtype} {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ParameterError(
            f"label out of range [0, {n_classes}): min {labels.min()}, max {labels.max()}"
        )
    return labels


def cross_entropy(probs: Array, labels: Array) -> float:
    """Mean of -log(p[label] + eps) over the batch."""
    probs = as_f64(probs)
    if probs.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B,C) probs, got {probs.shape}")
    labels = _check_labels(labels, probs.shape[1])
    if labels.shape[0] != probs.shape[0]:
        raise DimensionError(
            f"{probs.shape[0]} prob rows vs {labels.shape[0]} labels"
        )
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(np.mean(-np.log(picked + LOG_EPS)))


def softmax_cross_entropy_backward(probs: Array, labels: Array) -> Array:
    """d cross_entropy(softmax(z), labels) / dz evaluated at probs = softmax(z).

    The log epsilon is carried through exactly, so this matches finite
    differences of the composed forward to machine precision.
    """
    probs = as_f64(probs)
    labels = _check_labels(labels, probs.shape[1])
    n = probs.shape[0]
    rows = np.arange(n)
    p_y = probs[rows, labels]
    # s_r = sum_k p_k g_k where g is nonzero only at the label column
    s = -p_y / (n * (p_y + LOG_EPS))
    dz = -probs * s[:, None]
    dz[rows, labels] += s
    return dz


def grl_backward(dout: Array, lam: float) -> Array:
    """Gradient reversal: identity forward, -lam * upstream backward."""
    return -lam * as_f64(dout)


def sgd_step(params, grads, lr: float):
    """One plain SGD step, p <- p - lr * g.

    Accepts a single array or a sequence of arrays; returns new arrays in
    the same structure.  Elementwise, hence order-independent.
    """
    if lr <= 0.0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    single = isinstance(params, np.ndarray)
    ps = [params] if single else list(params)
    gs = [grads] if single else list(grads)
    if len(ps) != len(gs):
        raise DimensionError(f"{len(ps)} params vs {len(gs)} grads")
    out = []
    for p, g in zip(ps, gs):
        if p.shape != g.shape:
            raise DimensionError(f"param shape {p.shape} vs grad shape {g.shape}")
        out.append(p - lr * g)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# finite-difference checking


def fd_gradient(loss_fn: Callable[[], float], param: Array, eps: float = 1e-6) -> Array:
    """Central-difference gradient of loss_fn with respect to param (in place)."""
    g = np.zeros_like(param)
    flat = param.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        f_plus = loss_fn()
        flat[i] = keep - eps
        f_minus = loss_fn()
        flat[i] = keep
        gf[i] = (f_plus - f_minus) / (2.0 * eps)
    return g


def max_relative_error(analytic: Array, numeric: Array, floor: float = 1e-3) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements.

    The floor keeps near-zero gradients from inflating the ratio with pure
    finite-difference roundoff; a genuine sign or scale bug still shows up.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise DimensionError(f"analytic {a.shape} vs numeric {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(
    params: Sequence[Array],
    analytic: Sequence[Array],
    loss_fn: Callable[[], float],
    eps: float = 1e-6,
) -> float:
    """Max relative error between analytic grads and central differences.

    params are perturbed in place (and restored), so loss_fn must read them
    by reference.
    """
    if len(params) != len(analytic):
        raise DimensionError(f"{len(params)} params vs {len(analytic)} analytic grads")
    worst = 0.0
    for p, a in zip(params, analytic):
        numeric = fd_gradient(loss_fn, p, eps)
        worst = max(worst, max_relative_error(a, numeric))
    return worst
