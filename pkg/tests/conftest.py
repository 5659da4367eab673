import numpy as np
import pytest

from cloudadapt.models import MLPSpec, build_network
from cloudadapt.numcore import RngState


@pytest.fixture
def rng():
    return RngState(12345)


@pytest.fixture
def small_net():
    """Deterministic 3-6-5-4 classifier with small random biases so no
    pre-activation sits on the relu kink."""
    net = build_network(MLPSpec((3, 6, 5, 4), 0.0), RngState(77))
    r = RngState(78)
    net.biases = [r.normal(0.0, 0.1, b.shape) for b in net.biases]
    return net


def make_net(widths, dropout=0.0, seed=7, debias=True):
    net = build_network(MLPSpec(tuple(widths), dropout), RngState(seed))
    if debias:
        r = RngState(seed + 1)
        net.biases = [r.normal(0.0, 0.1, b.shape) for b in net.biases]
    return net


def kink_free_inputs(net, shape, seed=9, margin=1e-4):
    """Random inputs whose forward pass keeps clear of relu kinks, so
    finite differences are trustworthy."""
    from cloudadapt.models import forward_pass

    r = RngState(seed)
    for _ in range(100):
        x = r.normal(0.0, 1.0, shape)
        cache = forward_pass(net, x)
        if min(float(np.min(np.abs(z))) for z in cache.pre) > margin:
            return x
    raise AssertionError("no kink-free draw found")
