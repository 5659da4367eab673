"""Device-side runtime: test first, then score, select, and ship.

The device never trains.  Each batch is predicted in deterministic mode
before anything else happens, so recorded accuracy always reflects the
model as it stood when the data arrived.  Uplinked samples are the
original inputs, not the prompted ones; the cloud re-applies its own
prompt.  Parameter downlinks swap in atomically between batches and are
version-gated so a stale or replayed message can never roll the model
back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import Network, mc_predict, predict
from .numcore import Array, DimensionError, ParameterError, RngState, as_f64
from .prompt import Prompt, apply
from .uncertainty import batch_v_unc, select_baseline, select_uplink
from .wire import DownlinkMsg, UplinkMsg

STRATEGY_KINDS = ("ugs", "confidence", "random", "all")


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "ugs"
    frac: float = 0.5       # used by confidence and random

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ParameterError(f"unknown strategy {self.kind!r}, expected one of {STRATEGY_KINDS}")
        if not 0.0 <= self.frac <= 1.0:
            raise ParameterError(f"frac must be in [0, 1], got {self.frac}")


@dataclass
class DeviceStepResult:
    predictions: Array      # deterministic class probabilities on x + prompt
    scores: Array           # per-sample v_unc
    selected: list[int]
    uplink: UplinkMsg | None


class Device:
    """Lightweight endpoint holding the current model, prompt, and threshold."""

    def __init__(
        self,
        net: Network,
        prompt: Prompt,
        rng: RngState,
        threshold: float = 0.008,
        strategy: SelectionStrategy = SelectionStrategy(),
        n_passes: int = 10,
        aggregate: str = "predicted_class",
    ):
        if threshold < 0.0:
            raise ParameterError(f"threshold must be >= 0, got {threshold}")
        if n_passes < 2:
            raise ParameterError(f"need at least 2 passes for a spread, got {n_passes}")
        if prompt.width != net.spec.in_width:
            raise DimensionError(
                f"prompt width {prompt.width} does not match network input {net.spec.in_width}"
            )
        self.net = net
        self.prompt = prompt
        self.rng = rng
        self.threshold = threshold
        self.strategy = strategy
        self.n_passes = n_passes
        self.aggregate = aggregate
        self.model_version = 0

    def step(self, inputs: Array) -> DeviceStepResult:
        """One batch: predict, score, select, and build the uplink message."""
        inputs = as_f64(inputs)
        x_star = apply(inputs, self.prompt)

        # graded before any learning signal exists for this batch
        predictions = predict(self.net, x_star)

        runs = mc_predict(self.net, x_star, self.n_passes, self.rng)
        scores = batch_v_unc(runs, self.aggregate)

        kind = self.strategy.kind
        if kind == "ugs":
            selected, _ = select_uplink(inputs, scores, self.threshold)
        elif kind == "confidence":
            selected, _ = select_baseline(
                inputs, "confidence", self.strategy.frac,
                confidences=predictions.max(axis=1),
            )
        elif kind == "random":
            selected, _ = select_baseline(inputs, "random", self.strategy.frac, rng=self.rng)
        else:
            selected, _ = select_baseline(inputs, "all", 1.0)

        uplink = None
        if selected:
            # ship the raw inputs; the prompt stays on this side of the link
            uplink = UplinkMsg(inputs[selected], scores[selected])
        return DeviceStepResult(predictions, scores, selected, uplink)

    def apply_downlink(self, msg: DownlinkMsg) -> bool:
        """Atomically adopt newer parameters; False rejects a stale version."""
        if msg.version <= self.model_version:
            return False
        if len(msg.layers) != self.net.spec.n_layers:
            raise DimensionError(
                f"downlink has {len(msg.layers)} layers, network has {self.net.spec.n_layers}"
            )
        new_w, new_b = [], []
        for i, (w, b) in enumerate(msg.layers):
            if w.shape != self.net.weights[i].shape or b.shape != self.net.biases[i].shape:
                raise DimensionError(
                    f"downlink layer {i} shapes {w.shape}/{b.shape} do not match "
                    f"{self.net.weights[i].shape}/{self.net.biases[i].shape}"
                )
            new_w.append(w.copy())
            new_b.append(b.copy())
        if msg.prompt_width != self.prompt.width or msg.prompt_layout != self.prompt.layout:
            raise DimensionError(
                f"downlink prompt {msg.prompt_layout}/{msg.prompt_width} does not match "
                f"device prompt {self.prompt.layout}/{self.prompt.width}"
            )
        new_prompt = Prompt(
            msg.prompt_values.copy(), msg.prompt_layout, msg.prompt_width, self.prompt.alpha
        )
        # all validated; swap everything at once
        self.net.weights = new_w
        self.net.biases = new_b
        self.prompt = new_prompt
        self.model_version = msg.version
        return True
