"""Learned additive input prompt with uncertainty-weighted EMA updates.

The prompt is a small parameter vector added to every input before it
reaches a network:

    x_star = x + phi

Two layouts: "full_vector" stores one value per input dimension, "prefix"
stores k values for the first k dimensions and contributes exactly zero
elsewhere.  The cloud refreshes the prompt by blending the previous value
with the gradient-updated candidate, weighted by how uncertain the device
was on the batch:

    beta    = clamp(alpha - batch_v_unc, 0, 1)
    phi_new = beta * phi_prev + (1 - beta) * phi_candidate

so noisy batches move the prompt more and calm batches barely move it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Array, DimensionError, ParameterError, as_f64

LAYOUTS = ("full_vector", "prefix")


@dataclass
class Prompt:
    values: Array
    layout: str = "full_vector"
    width: int = 0          # input width the prompt applies to
    alpha: float = 0.999

    def __post_init__(self):
        self.values = as_f64(self.values)
        if self.values.ndim != 1:
            raise ParameterError(f"prompt values must be 1-d, got shape {self.values.shape}")
        if self.layout not in LAYOUTS:
            raise ParameterError(f"unknown layout {self.layout!r}, expected one of {LAYOUTS}")
        if self.width <= 0:
            raise ParameterError(f"prompt width must be positive, got {self.width}")
        k = self.values.shape[0]
        if self.layout == "full_vector" and k != self.width:
            raise ParameterError(f"full_vector prompt needs {self.width} values, got {k}")
        if self.layout == "prefix" and not 0 < k <= self.width:
            raise ParameterError(f"prefix length {k} out of range (0, {self.width}]")
        if not 0.0 < self.alpha <= 1.0:
            raise ParameterError(f"alpha must be in (0, 1], got {self.alpha}")

    @property
    def n_values(self) -> int:
        return int(self.values.shape[0])

    @property
    def byte_size(self) -> int:
        return 8 * self.n_values


def zero_prompt(width: int, layout: str = "full_vector", prefix_k: int | None = None,
                alpha: float = 0.999) -> Prompt:
    if layout == "prefix":
        k = prefix_k if prefix_k is not None else max(1, width // 4)
    else:
        k = width
    return Prompt(np.zeros(k), layout, width, alpha)


def full_values(p: Prompt) -> Array:
    """The prompt as a width-long vector, zero outside a prefix layout."""
    if p.layout == "full_vector":
        return p.values.copy()
    out = np.zeros(p.width)
    out[: p.n_values] = p.values
    return out


def apply(x: Array, p: Prompt) -> Array:
    """x + phi, broadcast over the batch.  Never mutates x."""
    x = as_f64(x)
    if x.ndim != 2 or x.shape[1] != p.width:
        raise DimensionError(f"input shape {x.shape} does not match prompt width {p.width}")
    return x + full_values(p)[None, :]


def beta(batch_v_unc: float, alpha: float) -> float:
    """Blend weight clamp(alpha - batch_v_unc, 0, 1)."""
    if batch_v_unc < 0.0:
        raise ParameterError(f"batch uncertainty must be >= 0, got {batch_v_unc}")
    return float(min(max(alpha - batch_v_unc, 0.0), 1.0))


def u_ema_update(prev: Prompt, candidate: Prompt, batch_v_unc: float) -> Prompt:
    """Blend the previous prompt with the updated candidate.

    Convex combination, so every element of the result lies between the
    corresponding prev and candidate elements.
    """
    if prev.layout != candidate.layout or prev.width != candidate.width:
        raise ParameterError(
            f"layout mismatch: {prev.layout}/{prev.width} vs {candidate.layout}/{candidate.width}"
        )
    if prev.n_values != candidate.n_values:
        raise ParameterError(f"{prev.n_values} vs {candidate.n_values} prompt values")
    b = beta(batch_v_unc, prev.alpha)
    blended = b * prev.values + (1.0 - b) * candidate.values
    return Prompt(blended, prev.layout, prev.width, prev.alpha)


def input_grad_to_prompt(dx: Array, p: Prompt) -> Array:
    """Collapse a (B, width) input gradient into the prompt's own shape.

    d(x + phi)/d phi is the identity on the covered dimensions, so the
    prompt gradient is the row sum, sliced to the prefix if applicable.
    """
    dx = as_f64(dx)
    if dx.ndim != 2 or dx.shape[1] != p.width:
        raise DimensionError(f"gradient shape {dx.shape} does not match prompt width {p.width}")
    full = dx.sum(axis=0)
    if p.layout == "prefix":
        return full[: p.n_values]
    return full
