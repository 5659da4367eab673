"""Cloud-side trainer: adversarial teacher, distilled student, learned prompt.

Each uplink batch drives one update in a fixed order:

    1. teacher_step        supervised source loss plus domain alignment
    2. make_pseudo_labels  teacher labels the target batch (post-step teacher)
    3. student_step        cross entropy on the confident pseudo labels
    4. prompt_step         gradient candidate blended by batch uncertainty

The teacher objective is

    L_sup(teacher(x_s + phi), y_s)  and  L_align(disc(features), domain)

where the alignment term reaches the teacher and the prompt through a
gradient reversal: the discriminator itself descends L_align, while
everything upstream of the features receives -lambda_align * lambda_grl
times the alignment gradient and therefore ascends it.  Source domain rows
are labeled 0 and target rows 1.  Prompt gradients from the teacher and
student losses accumulate across steps 1 and 3 and are spent in step 4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .models import (
    Network,
    backward_pass,
    clone_params,
    forward_pass,
    param_count,
    predict,
)
from .numcore import (
    Array,
    DimensionError,
    ParameterError,
    RngState,
    as_f64,
    cross_entropy,
    grl_backward,
    sgd_step,
    softmax_cross_entropy_backward,
)
from .prompt import Prompt, apply, beta as blend_beta, input_grad_to_prompt, u_ema_update
from .wire import DownlinkMsg, UplinkMsg


@dataclass
class PseudoBatch:
    inputs: Array           # prompted target inputs x_star
    labels: Array           # teacher argmax per sample
    kept: Array             # bool mask, True where teacher confidence passed

    @property
    def kept_fraction(self) -> float:
        return float(self.kept.mean()) if len(self.kept) else 0.0


@dataclass
class CloudUpdateRecord:
    update: int
    n_samples: int
    l_sup: float
    l_align: float
    l_stu: float
    kept_fraction: float
    batch_v_unc: float
    blend_beta: float
    version_emitted: int | None


class CloudTrainer:
    """Holds the teacher, student, discriminator, prompt, and source data."""

    def __init__(
        self,
        teacher: Network,
        student: Network,
        discriminator: Network,
        prompt: Prompt,
        source_x: Array,
        source_y: Array,
        rng: RngState,
        lr_teacher: float = 0.01,
        lr_student: float = 0.01,
        lr_prompt: float = 0.01,
        lambda_align: float = 0.1,
        lambda_grl: float = 1.0,
        pl_threshold: float = 0.8,
        sync_interval: int = 10,
        u_ema: bool = True,
        on_update: Callable[[CloudUpdateRecord], None] | None = None,
    ):
        if not 0.0 < pl_threshold < 1.0:
            raise ParameterError(f"pl_threshold must be in (0, 1), got {pl_threshold}")
        if sync_interval < 1:
            raise ParameterError(f"sync_interval must be >= 1, got {sync_interval}")
        if lambda_align < 0.0 or lambda_grl <= 0.0:
            raise ParameterError(
                f"need lambda_align >= 0 and lambda_grl > 0, got {lambda_align}, {lambda_grl}"
            )
        if param_count(teacher) <= param_count(student):
            raise ParameterError(
                f"teacher must out-size the student: {param_count(teacher)} vs {param_count(student)}"
            )
        if discriminator.spec.in_width != teacher.feature_width:
            raise DimensionError(
                f"discriminator input {discriminator.spec.in_width} does not match "
                f"teacher feature width {teacher.feature_width}"
            )
        source_x, source_y = as_f64(source_x), np.asarray(source_y)
        if len(source_x) == 0 or len(source_x) != len(source_y):
            raise ParameterError(
                f"bad source set: {len(source_x)} inputs, {len(source_y)} labels"
            )
        self.teacher = teacher
        self.student = student
        self.discriminator = discriminator
        self.prompt = prompt
        self.source_x = source_x
        self.source_y = source_y
        self.rng = rng
        self.lr_teacher = lr_teacher
        self.lr_student = lr_student
        self.lr_prompt = lr_prompt
        self.lambda_align = lambda_align
        self.lambda_grl = lambda_grl
        self.pl_threshold = pl_threshold
        self.sync_interval = sync_interval
        self.u_ema = u_ema
        self.on_update = on_update
        self.update_count = 0
        self.version = 0
        self._prompt_accum: Array | None = None
        self._last_beta = float("nan")

    # ------------------------------------------------------------------
    def _accumulate_prompt_grad(self, dx: Array):
        g = input_grad_to_prompt(dx, self.prompt)
        self._prompt_accum = g if self._prompt_accum is None else self._prompt_accum + g

    def sample_source(self, n: int) -> tuple[Array, Array]:
        """Source minibatch drawn with replacement."""
        idx = self.rng.integers(0, len(self.source_x), n)
        return self.source_x[idx], self.source_y[idx]

    def teacher_step(self, x_t: Array):
        """One adversarial teacher update; returns (l_sup, l_align) or None.

        Empty batches are a no-op.  With lambda_align == 0 the alignment
        term vanishes entirely and this is plain supervised source training.
        """
        x_t = as_f64(x_t)
        if len(x_t) == 0:
            return None
        x_s, y_s = self.sample_source(len(x_t))
        xs_star = apply(x_s, self.prompt)
        xt_star = apply(x_t, self.prompt)

        cache_s = forward_pass(self.teacher, xs_star)
        cache_t = forward_pass(self.teacher, xt_star)
        l_sup = cross_entropy(cache_s.probs, y_s)

        rev = self.lambda_align * self.lambda_grl
        if self.lambda_align > 0.0:
            feats = np.vstack([cache_s.feature, cache_t.feature])
            domain_y = np.concatenate([
                np.zeros(len(x_s), dtype=np.int64),
                np.ones(len(x_t), dtype=np.int64),
            ])
            dcache = forward_pass(self.discriminator, feats)
            l_align = cross_entropy(dcache.probs, domain_y)
            d_dlogits = softmax_cross_entropy_backward(dcache.probs, domain_y)
            d_gw, d_gb, dfeat = backward_pass(self.discriminator, dcache, d_dlogits)
            # reversal: features (and the prompt behind them) ascend L_align
            dfeat_s = grl_backward(dfeat[: len(x_s)], rev)
            dfeat_t = grl_backward(dfeat[len(x_s):], rev)
        else:
            l_align = 0.0
            d_gw = d_gb = None
            dfeat_s = dfeat_t = None

        dlogits_s = softmax_cross_entropy_backward(cache_s.probs, y_s)
        gw_s, gb_s, dx_s = backward_pass(self.teacher, cache_s, dlogits_s, dfeature=dfeat_s)
        if dfeat_t is not None:
            gw_t, gb_t, dx_t = backward_pass(self.teacher, cache_t, None, dfeature=dfeat_t)
            gw = [a + b for a, b in zip(gw_s, gw_t)]
            gb = [a + b for a, b in zip(gb_s, gb_t)]
        else:
            gw, gb, dx_t = gw_s, gb_s, None

        if self.lr_teacher > 0.0:
            self.teacher.weights = sgd_step(self.teacher.weights, gw, self.lr_teacher)
            self.teacher.biases = sgd_step(self.teacher.biases, gb, self.lr_teacher)
            if d_gw is not None:
                self.discriminator.weights = sgd_step(self.discriminator.weights, d_gw, self.lr_teacher)
                self.discriminator.biases = sgd_step(self.discriminator.biases, d_gb, self.lr_teacher)

        self._accumulate_prompt_grad(dx_s)
        if dx_t is not None:
            self._accumulate_prompt_grad(dx_t)
        return l_sup, l_align

    def make_pseudo_labels(self, x_t: Array) -> PseudoBatch:
        """Label the prompted target batch with the current (post-step) teacher."""
        x_t = as_f64(x_t)
        x_star = apply(x_t, self.prompt)
        probs = predict(self.teacher, x_star)
        conf = probs.max(axis=1)
        labels = probs.argmax(axis=1).astype(np.int64)
        kept = conf >= self.pl_threshold
        return PseudoBatch(x_star, labels, kept)

    def student_step(self, pseudo: PseudoBatch) -> float:
        """Distill the kept pseudo labels into the student; returns the loss."""
        if not pseudo.kept.any():
            return 0.0
        x = pseudo.inputs[pseudo.kept]
        y = pseudo.labels[pseudo.kept]
        cache = forward_pass(self.student, x)
        loss = cross_entropy(cache.probs, y)
        dlogits = softmax_cross_entropy_backward(cache.probs, y)
        gw, gb, dx = backward_pass(self.student, cache, dlogits)
        if self.lr_student > 0.0:
            self.student.weights = sgd_step(self.student.weights, gw, self.lr_student)
            self.student.biases = sgd_step(self.student.biases, gb, self.lr_student)
        # only the kept rows carry gradient back to the prompt
        full_dx = np.zeros((len(pseudo.kept), self.prompt.width))
        full_dx[pseudo.kept] = dx
        self._accumulate_prompt_grad(full_dx)
        return loss

    def prompt_step(self, batch_v_unc: float) -> bool:
        """Spend the accumulated prompt gradient; False when there is none."""
        if self._prompt_accum is None:
            return False
        candidate_values = self.prompt.values - self.lr_prompt * self._prompt_accum
        candidate = Prompt(candidate_values, self.prompt.layout, self.prompt.width, self.prompt.alpha)
        if self.u_ema:
            self._last_beta = blend_beta(batch_v_unc, self.prompt.alpha)
            self.prompt = u_ema_update(self.prompt, candidate, batch_v_unc)
        else:
            self._last_beta = 0.0
            self.prompt = candidate
        self._prompt_accum = None
        return True

    def make_downlink(self) -> DownlinkMsg:
        return DownlinkMsg(
            self.version,
            tuple((w.copy(), b.copy()) for w, b in zip(self.student.weights, self.student.biases)),
            self.prompt.layout,
            self.prompt.width,
            self.prompt.values.copy(),
        )

    def update(self, msg: UplinkMsg) -> DownlinkMsg | None:
        """Run the full four-step update for one uplink batch.

        Emits a downlink every sync_interval updates, with a strictly
        increasing version number.
        """
        if msg.count == 0:
            return None
        if msg.width != self.teacher.spec.in_width:
            raise DimensionError(
                f"uplink width {msg.width} does not match teacher input {self.teacher.spec.in_width}"
            )
        losses = self.teacher_step(msg.inputs)
        l_sup, l_align = losses if losses is not None else (0.0, 0.0)
        pseudo = self.make_pseudo_labels(msg.inputs)
        l_stu = self.student_step(pseudo)
        batch_v = float(msg.scores.mean())
        self.prompt_step(batch_v)
        self.update_count += 1

        out = None
        emitted = None
        if self.update_count % self.sync_interval == 0:
            self.version += 1
            emitted = self.version
            out = self.make_downlink()

        if self.on_update is not None:
            self.on_update(CloudUpdateRecord(
                update=self.update_count,
                n_samples=msg.count,
                l_sup=l_sup,
                l_align=l_align,
                l_stu=l_stu,
                kept_fraction=pseudo.kept_fraction,
                batch_v_unc=batch_v,
                blend_beta=self._last_beta,
                version_emitted=emitted,
            ))
        return out


def teacher_objective(trainer: CloudTrainer, x_s: Array, y_s: Array, x_t: Array) -> float:
    """Scalar the teacher parameters descend: L_sup - rev * L_align.

    The discriminator's own objective is +L_align.  Exposed for gradient
    checking; evaluates with the current prompt, no parameter updates.
    """
    xs_star = apply(x_s, trainer.prompt)
    xt_star = apply(x_t, trainer.prompt)
    cache_s = forward_pass(trainer.teacher, xs_star)
    l_sup = cross_entropy(cache_s.probs, y_s)
    if trainer.lambda_align == 0.0:
        return l_sup
    cache_t = forward_pass(trainer.teacher, xt_star)
    feats = np.vstack([cache_s.feature, cache_t.feature])
    domain_y = np.concatenate([
        np.zeros(len(x_s), dtype=np.int64),
        np.ones(len(x_t), dtype=np.int64),
    ])
    l_align = cross_entropy(predict(trainer.discriminator, feats), domain_y)
    return l_sup - trainer.lambda_align * trainer.lambda_grl * l_align
