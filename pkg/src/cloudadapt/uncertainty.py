"""Uncertainty scoring and uplink sample selection.

The score for a sample is the population standard deviation of the
probability assigned to its predicted class across n stochastic forward
passes:

    score = sqrt(mean_i (p_i - mean(p))^2)

where the predicted class is the argmax of the elementwise mean probability
vector (ties resolve to the lowest index).  Probabilities live in [0, 1],
so the score is bounded by 0.5.
"""

from __future__ import annotations

import numpy as np

from .numcore import Array, ParameterError, RngState, as_f64

AGGREGATES = ("predicted_class", "class_mean")

_ROW_SUM_TOL = 1e-8


def _check_runs(runs: Array) -> Array:
    runs = as_f64(runs)
    if runs.ndim != 2:
        raise ParameterError(f"expected (n_passes, n_classes) probabilities, got {runs.shape}")
    if runs.shape[0] < 2:
        raise ParameterError(f"need at least 2 passes, got {runs.shape[0]}")
    if runs.min() < -1e-12:
        raise ParameterError("negative probability in a run")
    sums = runs.sum(axis=1)
    bad = np.abs(sums - 1.0) > _ROW_SUM_TOL
    if bad.any():
        i = int(np.argmax(bad))
        raise ParameterError(f"run {i} is not normalized (sum {sums[i]:.6g})")
    return runs


def v_unc(prob_runs: Array, aggregate: str = "predicted_class") -> float:
    """Uncertainty of one sample from its per-pass probability vectors."""
    runs = _check_runs(np.asarray(prob_runs))
    if aggregate not in AGGREGATES:
        raise ParameterError(f"unknown aggregate {aggregate!r}, expected one of {AGGREGATES}")
    # a bitwise-constant sequence has population std exactly 0, but the
    # float mean of n copies can be off by an ulp; snap those to zero so
    # degenerate (no-dropout) passes never leak a phantom spread
    if aggregate == "predicted_class":
        c = int(np.argmax(runs.mean(axis=0)))
        p = runs[:, c]
        if np.all(p == p[0]):
            return 0.0
        return float(np.sqrt(np.mean((p - p.mean()) ** 2)))
    # class_mean: average the per-class population std over all classes
    std = runs.std(axis=0)
    std[np.all(runs == runs[0:1], axis=0)] = 0.0
    return float(np.mean(std))


def batch_v_unc(prob_runs: list[Array], aggregate: str = "predicted_class") -> Array:
    """Vectorized v_unc for a batch: prob_runs is n arrays of shape (B, C)."""
    arr = as_f64(np.stack(prob_runs))  # (n, B, C)
    if arr.ndim != 3:
        raise ParameterError(f"expected n stacked (B,C) arrays, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ParameterError(f"need at least 2 passes, got {arr.shape[0]}")
    if aggregate not in AGGREGATES:
        raise ParameterError(f"unknown aggregate {aggregate!r}, expected one of {AGGREGATES}")
    # same exactness guard as v_unc: constant passes score exactly 0
    if aggregate == "predicted_class":
        mean = arr.mean(axis=0)                      # (B, C)
        cls = np.argmax(mean, axis=1)                # ties -> lowest index
        p = arr[:, np.arange(arr.shape[1]), cls]     # (n, B)
        out = p.std(axis=0)
        out[np.all(p == p[0:1], axis=0)] = 0.0
        return out
    std = arr.std(axis=0)                            # (B, C)
    std[np.all(arr == arr[0:1], axis=0)] = 0.0
    return std.mean(axis=1)


def confidence_score(probs: Array) -> float:
    """Max class probability of a single prediction vector."""
    probs = as_f64(probs)
    if probs.ndim != 1:
        raise ParameterError(f"expected a 1-d probability vector, got {probs.shape}")
    return float(probs.max())


def select_uplink(inputs: Array, scores: Array, threshold: float):
    """Split sample indices into (selected, rejected) by score > threshold.

    Strictly greater than, so threshold 0 still drops exact-zero scores and
    a threshold above the 0.5 bound selects nothing.  Original order is
    preserved within each partition.
    """
    inputs = np.asarray(inputs)
    scores = as_f64(scores)
    if threshold < 0.0:
        raise ParameterError(f"threshold must be >= 0, got {threshold}")
    if scores.ndim != 1 or len(inputs) != len(scores):
        raise ParameterError(
            f"{len(inputs)} samples vs {len(scores)} scores"
        )
    picked = scores > threshold
    selected = [i for i in range(len(scores)) if picked[i]]
    rejected = [i for i in range(len(scores)) if not picked[i]]
    return selected, rejected


def select_confidence(confidences: Array, frac: float):
    """Pick the floor(frac*n) least confident samples (ties: lowest index)."""
    confidences = as_f64(confidences)
    if not 0.0 <= frac <= 1.0:
        raise ParameterError(f"frac must be in [0, 1], got {frac}")
    n = len(confidences)
    k = int(np.floor(frac * n))
    order = np.argsort(confidences, kind="stable")
    chosen = set(int(i) for i in order[:k])
    selected = [i for i in range(n) if i in chosen]
    rejected = [i for i in range(n) if i not in chosen]
    return selected, rejected


def select_random(n: int, frac: float, rng: RngState):
    """Uniformly random floor(frac*n)-subset."""
    if not 0.0 <= frac <= 1.0:
        raise ParameterError(f"frac must be in [0, 1], got {frac}")
    k = int(np.floor(frac * n))
    chosen = set(int(i) for i in rng.permutation(n)[:k])
    selected = [i for i in range(n) if i in chosen]
    rejected = [i for i in range(n) if i not in chosen]
    return selected, rejected


def select_baseline(
    inputs: Array,
    strategy: str,
    frac: float,
    rng: RngState | None = None,
    confidences: Array | None = None,
):
    """Dispatch for the non-uncertainty selection strategies."""
    n = len(inputs)
    if strategy == "all":
        return list(range(n)), []
    if strategy == "confidence":
        if confidences is None:
            raise ParameterError("confidence selection needs per-sample confidences")
        return select_confidence(confidences, frac)
    if strategy == "random":
        if rng is None:
            raise ParameterError("random selection needs an RngState")
        return select_random(n, frac, rng)
    raise ParameterError(f"unknown selection strategy {strategy!r}")
