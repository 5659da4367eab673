"""MLP classifiers built on the hand-differentiated layers.

A network is a stack of linear layers with ReLU and inverted dropout after
every hidden layer and a bare linear head.  The activation feeding the head
doubles as the feature vector for the domain discriminator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    Array,
    DimensionError,
    ParameterError,
    RngState,
    as_f64,
    cross_entropy,
    dropout_backward,
    dropout_forward,
    fd_gradient,
    linear_backward,
    linear_forward,
    max_relative_error,
    relu,
    relu_backward,
    softmax,
    softmax_cross_entropy_backward,
)


@dataclass(frozen=True)
class MLPSpec:
    """Architecture: layer widths from input to class count, one dropout rate."""

    layer_widths: tuple[int, ...]
    dropout_rate: float = 0.0

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ParameterError(f"need at least input and output widths, got {self.layer_widths}")
        if any(w <= 0 for w in self.layer_widths):
            raise ParameterError(f"layer widths must be positive, got {self.layer_widths}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]


@dataclass
class Network:
    spec: MLPSpec
    weights: list[Array]
    biases: list[Array]
    # index of the layer whose post-activation output is the feature vector;
    # defaults to the last hidden layer (the head's input)
    feature_cut: int = field(default=-1)

    def __post_init__(self):
        if self.feature_cut == -1:
            self.feature_cut = self.spec.n_layers - 2
        if not -1 <= self.feature_cut < self.spec.n_layers:
            raise ParameterError(
                f"feature_cut {self.feature_cut} out of range for {self.spec.n_layers} layers"
            )

    @property
    def feature_width(self) -> int:
        return self.spec.layer_widths[self.feature_cut + 1]


def build_network(spec: MLPSpec, rng: RngState) -> Network:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(spec, weights, biases)


def clone_params(net: Network) -> Network:
    return Network(
        net.spec,
        [w.copy() for w in net.weights],
        [b.copy() for b in net.biases],
        net.feature_cut,
    )


def param_count(net: Network) -> int:
    return sum(w.size for w in net.weights) + sum(b.size for b in net.biases)


@dataclass
class ForwardCache:
    x: Array
    pre: list[Array]          # pre-activations per hidden layer
    post: list[Array]         # activations after relu (+ dropout) per hidden layer
    masks: list[Array | None]
    feature: Array
    logits: Array
    probs: Array


def forward_pass(net: Network, x: Array, stochastic: bool = False, rng: RngState | None = None) -> ForwardCache:
    x = as_f64(x)
    if x.ndim != 2 or x.shape[1] != net.spec.in_width:
        raise DimensionError(
            f"input shape {x.shape} does not match network input width {net.spec.in_width}"
        )
    if stochastic and net.spec.dropout_rate > 0.0 and rng is None:
        raise ParameterError("stochastic forward with dropout needs an RngState")
    pre, post, masks = [], [], []
    a = x
    n_hidden = net.spec.n_layers - 1
    for i in range(n_hidden):
        z = linear_forward(a, net.weights[i], net.biases[i])
        h = relu(z)
        if stochastic and net.spec.dropout_rate > 0.0:
            h, mask = dropout_forward(h, net.spec.dropout_rate, rng)
        else:
            mask = None
        pre.append(z)
        post.append(h)
        masks.append(mask)
        a = h
    logits = linear_forward(a, net.weights[-1], net.biases[-1])
    probs = softmax(logits)
    feature = x if net.feature_cut < 0 else post[net.feature_cut]
    return ForwardCache(x, pre, post, masks, feature, logits, probs)


def predict(net: Network, x: Array, stochastic: bool = False, rng: RngState | None = None) -> Array:
    """Class probabilities, one row per input."""
    return forward_pass(net, x, stochastic=stochastic, rng=rng).probs


def mc_predict(net: Network, x: Array, n: int, rng: RngState) -> list[Array]:
    """n stochastic passes over the same inputs; returns n probability arrays.

    The passes run as one batched forward with independent dropout masks per
    replica, which is equivalent to n sequential stochastic passes.
    """
    if n < 1:
        raise ParameterError(f"need at least one pass, got n={n}")
    x = as_f64(x)
    if net.spec.dropout_rate == 0.0:
        # without dropout every pass is the same computation; sharing one
        # forward keeps the spread exactly zero (a tiled matmul can differ
        # by an ulp between rows and fake a nonzero spread)
        probs = predict(net, x)
        return [probs.copy() for _ in range(n)]
    tiled = np.tile(x, (n, 1))
    probs = predict(net, tiled, stochastic=True, rng=rng)
    b = x.shape[0]
    return [probs[i * b : (i + 1) * b] for i in range(n)]


def features(net: Network, x: Array) -> Array:
    """Deterministic activations at the feature cut (the head's input)."""
    return forward_pass(net, x).feature


def backward_pass(
    net: Network,
    cache: ForwardCache,
    dlogits: Array | None,
    dfeature: Array | None = None,
):
    """Backprop through the cached forward.

    dlogits seeds the head; dfeature, if given, is added to the gradient at
    the feature activation on the way down (this is where the reversed
    alignment signal enters).  Either may be None.  Returns
    (grads_w, grads_b, dx) with zeros for layers above the injection point
    when dlogits is None.
    """
    L = net.spec.n_layers
    grads_w = [np.zeros_like(w) for w in net.weights]
    grads_b = [np.zeros_like(b) for b in net.biases]
    if dlogits is None and dfeature is None:
        raise ParameterError("nothing to backpropagate")

    # gradient wrt the activation at level i (post[i]); level -1 is the input
    da = None
    top = L - 2  # highest hidden level
    if dlogits is not None:
        a_in = cache.post[top] if top >= 0 else cache.x
        d_in, dw, db = linear_backward(a_in, net.weights[-1], as_f64(dlogits))
        grads_w[-1] = dw
        grads_b[-1] = db
        da = d_in
        level = top
    else:
        da = np.zeros_like(cache.post[net.feature_cut] if net.feature_cut >= 0 else cache.x)
        level = net.feature_cut

    while True:
        if dfeature is not None and level == net.feature_cut:
            da = da + as_f64(dfeature)
            dfeature = None
        if level < 0:
            break
        dh = da if cache.masks[level] is None else dropout_backward(da, cache.masks[level])
        dz = relu_backward(cache.pre[level], dh)
        a_in = cache.post[level - 1] if level - 1 >= 0 else cache.x
        da, dw, db = linear_backward(a_in, net.weights[level], dz)
        grads_w[level] = dw
        grads_b[level] = db
        level -= 1

    return grads_w, grads_b, da


def discriminator_loss(disc: Network, feat_src: Array, feat_tgt: Array) -> float:
    """Cross entropy of the domain discriminator, source rows labeled 0, target 1."""
    feat_src, feat_tgt = as_f64(feat_src), as_f64(feat_tgt)
    for f in (feat_src, feat_tgt):
        if f.ndim != 2 or f.shape[1] != disc.spec.in_width:
            raise DimensionError(
                f"feature shape {f.shape} does not match discriminator input width {disc.spec.in_width}"
            )
    stacked = np.vstack([feat_src, feat_tgt])
    y = np.concatenate([
        np.zeros(feat_src.shape[0], dtype=np.int64),
        np.ones(feat_tgt.shape[0], dtype=np.int64),
    ])
    return cross_entropy(predict(disc, stacked), y)


def discriminator_grads(disc: Network, feat_src: Array, feat_tgt: Array):
    """Loss plus gradients wrt discriminator params and both feature blocks."""
    feat_src, feat_tgt = as_f64(feat_src), as_f64(feat_tgt)
    stacked = np.vstack([feat_src, feat_tgt])
    y = np.concatenate([
        np.zeros(feat_src.shape[0], dtype=np.int64),
        np.ones(feat_tgt.shape[0], dtype=np.int64),
    ])
    cache = forward_pass(disc, stacked)
    loss = cross_entropy(cache.probs, y)
    dlogits = softmax_cross_entropy_backward(cache.probs, y)
    gw, gb, dfeat = backward_pass(disc, cache, dlogits)
    n_src = feat_src.shape[0]
    return loss, gw, gb, dfeat[:n_src], dfeat[n_src:]


def grad_check_against(net: Network, gw: list[Array], gb: list[Array],
                       loss_fn, eps: float = 1e-6) -> float:
    """Max relative error of supplied analytic weight/bias gradients against
    central differences of loss_fn, which must read the live net."""
    worst = 0.0
    for p, a in zip(net.weights + net.biases, gw + gb):
        numeric = fd_gradient(loss_fn, p, eps)
        worst = max(worst, max_relative_error(a, numeric))
    return worst


def network_grad_check(net: Network, x: Array, labels: Array, eps: float = 1e-6) -> float:
    """Max relative error of the analytic cross-entropy gradient vs central
    differences, over every weight and bias (deterministic mode)."""
    x = as_f64(x)
    labels = np.asarray(labels)

    def loss_fn() -> float:
        return cross_entropy(predict(net, x), labels)

    cache = forward_pass(net, x)
    dlogits = softmax_cross_entropy_backward(cache.probs, labels)
    gw, gb, _ = backward_pass(net, cache, dlogits)
    return grad_check_against(net, gw, gb, loss_fn, eps)


# default architectures for the benchmark task (16 inputs, 4 classes)
def default_student_spec(dim: int = 16, classes: int = 4) -> MLPSpec:
    return MLPSpec((dim, 32, 32, classes), dropout_rate=0.1)


def default_teacher_spec(dim: int = 16, classes: int = 4) -> MLPSpec:
    return MLPSpec((dim, 128, 128, 64, classes), dropout_rate=0.1)


def default_discriminator_spec(feature_width: int = 64) -> MLPSpec:
    return MLPSpec((feature_width, 32, 2), dropout_rate=0.0)
