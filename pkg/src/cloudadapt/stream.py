"""Synthetic source task and the corrupted target stream.

The base task is a Gaussian cluster classification problem: one center per
class, isotropic within-class noise.  The target stream revisits an ordered
list of corruption domains for a number of rounds, drawing fresh samples
every batch.  Labels ride along in each Batch strictly for harness-side
scoring; the adaptation code paths only ever see the input arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Array, DimensionError, ParameterError, RngState, as_f64, derive_seed

KINDS = ("bias", "gauss_noise", "rotate", "scale", "mask")

_TAG_CENTERS = 11
_TAG_SOURCE = 12
_TAG_TARGET = 13
_TAG_MASK = 14


@dataclass(frozen=True)
class DomainSpec:
    """One corruption: a kind tag and a severity knob.

    bias         adds severity to every dimension
    gauss_noise  adds N(0, severity^2) noise
    rotate       rotates the (0, 1) coordinate plane by severity radians
    scale        multiplies inputs by severity
    mask         zeroes a fixed seed-determined subset of round(severity*dim) dims
    """

    kind: str
    severity: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown corruption kind {self.kind!r}, expected one of {KINDS}")
        if self.severity <= 0.0:
            raise ParameterError(f"severity must be positive, got {self.severity}")
        if self.kind == "rotate" and not self.severity < np.pi:
            raise ParameterError(f"rotation angle must be in (0, pi), got {self.severity}")
        if self.kind == "mask" and not self.severity < 1.0:
            raise ParameterError(f"mask fraction must be in (0, 1), got {self.severity}")


@dataclass(frozen=True)
class TaskConfig:
    dim: int = 16
    classes: int = 4
    center_scale: float = 2.0
    within_noise: float = 0.5

    def __post_init__(self):
        if self.dim < 2:
            raise ParameterError(f"need dim >= 2, got {self.dim}")
        if self.classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.classes}")
        if self.within_noise < 0.0:
            raise ParameterError(f"within_noise must be >= 0, got {self.within_noise}")


@dataclass
class BaseTask:
    dim: int
    classes: int
    centers: Array          # (classes, dim)
    within_noise: float


def make_task(cfg: TaskConfig, seed: int) -> BaseTask:
    rng = RngState(derive_seed(seed, _TAG_CENTERS))
    centers = rng.normal(0.0, cfg.center_scale, (cfg.classes, cfg.dim))
    # pairwise distinct centers; a continuous draw violating this is a bug
    for i in range(cfg.classes):
        for j in range(i + 1, cfg.classes):
            if np.allclose(centers[i], centers[j]):
                raise ParameterError(f"degenerate task: centers {i} and {j} coincide")
    return BaseTask(cfg.dim, cfg.classes, centers, cfg.within_noise)


def gen_source(task: BaseTask, n: int, seed: int) -> tuple[Array, Array]:
    """n labeled source samples with class counts differing by at most one."""
    if n < task.classes:
        raise ParameterError(f"need at least {task.classes} samples, got {n}")
    rng = RngState(derive_seed(seed, _TAG_SOURCE))
    labels = np.arange(n, dtype=np.int64) % task.classes
    noise = rng.normal(0.0, 1.0, (n, task.dim)) * task.within_noise
    return task.centers[labels] + noise, labels


def _mask_dims(dim: int, severity: float, seed: int) -> Array:
    """Fixed masked subset for a given (seed, dim, severity); counter-free so
    every batch of the same stream zeroes the same dimensions."""
    k = int(round(severity * dim))
    k = min(max(k, 0), dim)
    tag = _TAG_MASK ^ (int(round(severity * 1e9)) & 0xFFFFFFFF)
    sub = RngState(derive_seed(seed, tag))
    return np.sort(sub.permutation(dim)[:k])


def corrupt(x: Array, spec: DomainSpec, rng: RngState | None = None) -> Array:
    """Apply one corruption domain to a batch of inputs (never mutates x)."""
    x = as_f64(x)
    if x.ndim != 2:
        raise DimensionError(f"expected a (B, dim) batch, got {x.shape}")
    if spec.kind == "bias":
        return x + spec.severity
    if spec.kind == "scale":
        return x * spec.severity
    if spec.kind == "rotate":
        if x.shape[1] < 2:
            raise DimensionError(f"rotation needs dim >= 2, got {x.shape[1]}")
        c, s = np.cos(spec.severity), np.sin(spec.severity)
        out = x.copy()
        out[:, 0] = c * x[:, 0] - s * x[:, 1]
        out[:, 1] = s * x[:, 0] + c * x[:, 1]
        return out
    if spec.kind == "gauss_noise":
        if rng is None:
            raise ParameterError("gauss_noise corruption needs an RngState")
        return x + rng.normal(0.0, spec.severity, x.shape)
    # mask
    if rng is None:
        raise ParameterError("mask corruption needs an RngState (for the fixed subset seed)")
    out = x.copy()
    dims = _mask_dims(x.shape[1], spec.severity, rng.seed)
    out[:, dims] = 0.0
    return out


# Benchmark severities: rotate and mask displace whole classes across the
# frozen decision boundary (large drop, low draw-to-draw variance); bias
# degrades both models partially; gauss_noise stays mild but feeds the
# uncertainty signal; scale leaves a ReLU net's argmax nearly alone and
# serves as the stable easy domain.
DEFAULT_DOMAINS = (
    DomainSpec("bias", 3.0),
    DomainSpec("gauss_noise", 1.5),
    DomainSpec("rotate", 2.5),
    DomainSpec("scale", 1.8),
    DomainSpec("mask", 0.55),
)


@dataclass(frozen=True)
class StreamConfig:
    domains: tuple[DomainSpec, ...] = DEFAULT_DOMAINS
    rounds: int = 10
    batches_per_domain: int = 25
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.domains:
            raise ParameterError("need at least one domain")
        if self.rounds < 1 or self.batches_per_domain < 1 or self.batch_size < 1:
            raise ParameterError(
                f"rounds/batches_per_domain/batch_size must be positive, got "
                f"{self.rounds}/{self.batches_per_domain}/{self.batch_size}"
            )

    @property
    def total_batches(self) -> int:
        return self.rounds * len(self.domains) * self.batches_per_domain


@dataclass(frozen=True)
class Batch:
    inputs: Array
    labels: Array          # harness-only ground truth
    domain_id: int
    round_idx: int         # 1-based
    index: int             # 0-based position within (round, domain)


class DomainStream:
    """Deterministic iterator over the corrupted target stream."""

    def __init__(self, task: BaseTask, config: StreamConfig):
        self.task = task
        self.config = config
        self._rng = RngState(derive_seed(config.seed, _TAG_TARGET))
        self._cursor = 0

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        cfg = self.config
        if self._cursor >= cfg.total_batches:
            raise StopIteration
        per_round = len(cfg.domains) * cfg.batches_per_domain
        round_idx = self._cursor // per_round + 1
        within = self._cursor % per_round
        domain_id = within // cfg.batches_per_domain
        index = within % cfg.batches_per_domain
        self._cursor += 1

        task = self.task
        # balanced label draw per batch: keeps per-cell accuracy estimates
        # free of label-count noise, so a frozen model scores the same in
        # every round up to within-class sampling
        base = np.arange(cfg.batch_size, dtype=np.int64) % task.classes
        labels = base[self._rng.permutation(cfg.batch_size)]
        clean = task.centers[labels] + self._rng.normal(
            0.0, 1.0, (cfg.batch_size, task.dim)
        ) * task.within_noise
        inputs = corrupt(clean, cfg.domains[domain_id], self._rng)
        return Batch(inputs, labels, domain_id, round_idx, index)
