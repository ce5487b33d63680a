import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.signal import correlate

from bssdistill import _kernels as K

pytestmark = pytest.mark.skipif(not K._HAVE_NUMBA, reason="numba not installed")


@pytest.fixture
def arrays():
    rng = np.random.default_rng(0)
    return rng.standard_normal((3, 2, 7, 6)), rng.standard_normal((4, 2, 3, 2)), rng.standard_normal((3, 4, 5, 5))


def test_conv_forward_matches_scipy(arrays):
    x, w, _ = arrays
    out = K.conv2d_forward_np(x, w)
    ref = np.stack([
        np.stack([sum(correlate(x[n, c], w[f, c], mode="valid") for c in range(2)) for f in range(4)])
        for n in range(3)
    ])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_backends_agree(arrays):
    x, w, g = arrays
    w = w[:, :, :3, :2]
    np.testing.assert_allclose(K.conv2d_forward_np(x, w), K.conv2d_forward_nb(x, w), atol=1e-12)
    g = np.random.default_rng(1).standard_normal((3, 4, 5, 5))
    np.testing.assert_allclose(K.conv2d_backward_input_np(g, w, 7, 6), K.conv2d_backward_input_nb(g, w, 7, 6), atol=1e-12)
    np.testing.assert_allclose(K.conv2d_backward_weight_np(x, g, 3, 2), K.conv2d_backward_weight_nb(x, g, 3, 2), atol=1e-12)
    for a, b in zip(K.maxpool2d_forward_np(x, 2), K.maxpool2d_forward_nb(x, 2)):
        np.testing.assert_array_equal(a, b)
    out, idx = K.maxpool2d_forward_np(x, 2)
    gp = np.random.default_rng(2).standard_normal(out.shape)
    np.testing.assert_array_equal(K.maxpool2d_backward_np(gp, idx, 2, 7, 6), K.maxpool2d_backward_nb(gp, idx, 2, 7, 6))


def test_maxpool_first_maximum_wins():
    x = np.zeros((1, 1, 2, 2))
    for fwd in (K.maxpool2d_forward_np, K.maxpool2d_forward_nb):
        out, idx = fwd(x, 2)
        assert out[0, 0, 0, 0] == 0 and idx[0, 0, 0, 0] == 0


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba")])
def test_environment_flag_selects_backend(flag, expected):
    env = dict(os.environ, BSSDISTILL_PURE_NUMPY=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from bssdistill import _kernels; print(_kernels.backend())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected
