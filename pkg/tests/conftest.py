"""Shared oracles and helpers.

The convolution oracle below is an independent brute-force nested-loop
implementation used to freeze expected values; it never shares code with
the library's GEMM-based kernels.
"""

import numpy as np
import pytest


def conv3d_bruteforce(x, w, b, kernel, stride, dilation, groups, padding):
    """Reference cross-correlation: plain loops over every output voxel."""
    n, ci, D, H, W = x.shape
    co = w.shape[0]
    cig = ci // groups
    kd, kh, kw = kernel
    sd, sh, sw = stride
    dd, dh, dw = dilation
    pd, ph, pw = padding
    od = (D + 2 * pd - dd * (kd - 1) - 1) // sd + 1
    oh = (H + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    ow = (W + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = np.zeros((n, co, od, oh, ow), dtype=np.float64)
    for ni in range(n):
        for oc in range(co):
            gi = oc // (co // groups)
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        acc = 0.0
                        for ic in range(cig):
                            for a in range(kd):
                                for bb in range(kh):
                                    for c in range(kw):
                                        acc += (
                                            xp[ni, gi * cig + ic,
                                               z * sd + a * dd,
                                               y * sh + bb * dh,
                                               xx * sw + c * dw]
                                            * w[oc, ic, a, bb, c]
                                        )
                        out[ni, oc, z, y, xx] = acc + (0.0 if b is None else b[oc])
    return out


def distinct_random(rng, shape, gap=1e-2):
    """Random values with pairwise gaps >= gap, for max/pool FD checks."""
    n = int(np.prod(shape))
    base = np.arange(n, dtype=np.float64) * gap * 3.0
    return (base[rng.permutation(n)] + rng.uniform(0, gap)).reshape(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
