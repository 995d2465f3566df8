import numpy as np
import pytest
import scipy.ndimage as ndi

from sipde.conv import adjoint_weights, conv_forward, conv_input_grad, conv_kernel_grad


def reference_conv(x, w):
    """Per-channel-pair zero-padded correlation via scipy, as the oracle."""
    c_out, c_in = w.shape[:2]
    out = np.zeros((c_out,) + x.shape[1:])
    for o in range(c_out):
        for c in range(c_in):
            out[o] += ndi.correlate(x[c], w[o, c], mode="constant", cval=0.0)
    return out


@pytest.mark.parametrize("c_in,c_out", [(1, 1), (1, 4), (4, 4), (4, 1), (3, 5)])
def test_forward_matches_scipy(rng, c_in, c_out):
    x = rng.standard_normal((c_in, 10, 12))
    w = rng.standard_normal((c_out, c_in, 3, 3))
    got = conv_forward(x, w)
    ref = reference_conv(x, w)
    assert np.abs(got - ref).max() <= 1e-13 * max(1.0, np.abs(ref).max())


def test_forward_channel_mismatch(rng):
    with pytest.raises(ValueError):
        conv_forward(rng.standard_normal((2, 5, 5)), rng.standard_normal((1, 3, 3, 3)))


def test_adjoint_inner_product(rng):
    x = rng.standard_normal((3, 9, 9))
    w = rng.standard_normal((2, 3, 3, 3))
    y = rng.standard_normal((2, 9, 9))
    lhs = float(np.sum(conv_forward(x, w) * y))
    rhs = float(np.sum(x * conv_input_grad(y, w)))
    assert abs(lhs - rhs) <= 1e-12 * np.linalg.norm(x) * np.linalg.norm(y)


def test_adjoint_weights_involution(rng):
    w = rng.standard_normal((2, 3, 3, 3))
    assert np.array_equal(adjoint_weights(adjoint_weights(w)), w)


def test_kernel_grad_matches_finite_differences(rng):
    x = rng.standard_normal((2, 7, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    g = rng.standard_normal((3, 7, 7))
    dw = conv_kernel_grad(x, g)
    # objective J(w) = sum(g * conv(x, w)) is linear in w, so FD is exact
    step = 1e-6
    r = np.random.default_rng(99)
    for _ in range(12):
        o, c, a, b = r.integers(3), r.integers(2), r.integers(3), r.integers(3)
        wp = w.copy()
        wp[o, c, a, b] += step
        wm = w.copy()
        wm[o, c, a, b] -= step
        jp = float(np.sum(g * conv_forward(x, wp)))
        jm = float(np.sum(g * conv_forward(x, wm)))
        fd = (jp - jm) / (2 * step)
        assert abs(fd - dw[o, c, a, b]) <= 1e-6 * max(1.0, abs(fd))
