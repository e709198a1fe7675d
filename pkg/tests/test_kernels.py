import os
import subprocess
import sys

import numpy as np
import pytest

from tempered_dp import _kernels

pytestmark = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")

CASES = [(3, 1), (2, 2), (4, 2), (8, 2), (3, 3)]  # (window, stride)


def _padded(rng, k, s, dtype):
    ho = wo = 5
    hp = (ho - 1) * s + k
    return rng.standard_normal((3, hp, hp + 1, 4)).astype(dtype), hp, ho, wo


@pytest.mark.parametrize("k,s", CASES)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_col2im_bit_identical(k, s, dtype):
    rng = np.random.default_rng(k * 10 + s)
    xp, hp, ho, wo = _padded(rng, k, s, dtype)
    wo = (xp.shape[2] - k) // s + 1
    np_k, nb_k = _kernels.kernels("numpy"), _kernels.kernels("numba")
    cols = np_k["im2col"](xp, k, s, ho, wo)
    np.testing.assert_array_equal(cols, nb_k["im2col"](xp, k, s, ho, wo))
    d = rng.standard_normal(cols.shape).astype(dtype)
    args = (d, hp, xp.shape[2], xp.shape[3], k, s, ho, wo)
    np.testing.assert_array_equal(np_k["col2im"](*args), nb_k["col2im"](*args))


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    k, s = 3, 2
    xp, hp, ho, wo = _padded(rng, k, s, np.float64)
    wo = (xp.shape[2] - k) // s + 1
    cols = _kernels.im2col(xp, k, s, ho, wo)
    d = rng.standard_normal(cols.shape)
    back = _kernels.col2im(d, hp, xp.shape[2], xp.shape[3], k, s, ho, wo)
    assert np.sum(cols * d) == pytest.approx(np.sum(xp * back), rel=1e-12)


@pytest.mark.parametrize("k,s", CASES)
def test_pooling_bit_identical(k, s):
    rng = np.random.default_rng(100 + k * 10 + s)
    xp, hp, ho, wo = _padded(rng, k, s, np.float32)
    wo = (xp.shape[2] - k) // s + 1
    np_k, nb_k = _kernels.kernels("numpy"), _kernels.kernels("numba")
    y1, a1 = np_k["maxpool"](xp, k, s, ho, wo)
    y2, a2 = nb_k["maxpool"](xp, k, s, ho, wo)
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(a1, a2)
    dout = rng.standard_normal(y1.shape).astype(np.float32)
    np.testing.assert_array_equal(
        np_k["maxpool_backward"](dout, a1, hp, xp.shape[2], k, s),
        nb_k["maxpool_backward"](dout, a2, hp, xp.shape[2], k, s),
    )
    count = np.full((ho, wo), float(k * k), dtype=np.float32)
    np.testing.assert_array_equal(np_k["avgpool"](xp, count, k, s, ho, wo),
                                  nb_k["avgpool"](xp, count, k, s, ho, wo))
    np.testing.assert_array_equal(
        np_k["avgpool_backward"](dout, count, hp, xp.shape[2], k, s),
        nb_k["avgpool_backward"](dout, count, hp, xp.shape[2], k, s),
    )


def test_maxpool_ties_pick_first():
    xp = np.zeros((1, 2, 2, 1), dtype=np.float32)
    for name in ("numpy", "numba"):
        _, arg = _kernels.kernels(name)["maxpool"](xp, 2, 2, 1, 1)
        assert arg[0, 0, 0, 0] == 0


_SCRIPT = """
import hashlib, numpy as np
from tempered_dp import nn, _kernels
from tempered_dp.tensor import RngStream
net = nn.build_mnist_net(nn.TANH)
theta = nn.init_params(net, RngStream(0))
x = np.random.default_rng(0).random((4, 28, 28, 1), dtype=np.float32)
g = nn.per_example_gradients(net, theta, x, np.arange(4))
print(_kernels.BACKEND, hashlib.sha256(g.tobytes()).hexdigest())
"""


def test_env_flag_selects_backend_and_gradients_agree():
    out = {}
    for name in ("numpy", "numba"):
        env = dict(os.environ, TEMPERED_DP_BACKEND=name)
        res = subprocess.run([sys.executable, "-c", _SCRIPT], env=env, check=True,
                             capture_output=True, text=True)
        backend, digest = res.stdout.split()
        assert backend == name
        out[name] = digest
    assert out["numpy"] == out["numba"]


def test_bad_backend_name_is_rejected():
    env = dict(os.environ, TEMPERED_DP_BACKEND="cuda")
    res = subprocess.run([sys.executable, "-c", "import tempered_dp"], env=env,
                         capture_output=True, text=True)
    assert res.returncode != 0
    assert "TEMPERED_DP_BACKEND" in res.stderr
