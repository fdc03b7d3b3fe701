import os
import subprocess
import sys

import numpy as np
import pytest

from obalex import _pykernels as py
from obalex import kernels

try:
    from obalex import _ckernels as c
except ImportError:  # extension not built
    c = None

needs_compiled = pytest.mark.skipif(c is None, reason="compiled kernels not built")

CONV_CASES = [
    # (n, cin, h, w, cout, k, stride, pad)
    (1, 1, 5, 5, 1, 3, 1, 0),
    (2, 3, 8, 7, 4, 3, 1, 1),
    (2, 2, 9, 9, 3, 3, 2, 1),
    (3, 4, 6, 6, 2, 1, 1, 0),
    (1, 2, 7, 5, 2, 5, 2, 2),
]


def _conv_inputs(case, seed=0):
    n, cin, h, w, cout, k, stride, pad = case
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, cin, h, w))
    wt = rng.normal(size=(cout, cin, k, k))
    b = rng.normal(size=cout)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    dout = rng.normal(size=(n, cout, ho, wo))
    return x, wt, b, dout, stride, pad


def naive_conv(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for f in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    patch = xp[i, :, y * stride:y * stride + k, xx * stride:xx * stride + k]
                    out[i, f, y, xx] = (patch * w[f]).sum() + b[f]
    return out


@pytest.mark.parametrize("case", CONV_CASES)
def test_python_conv_matches_loops(case):
    x, w, b, _, stride, pad = _conv_inputs(case)
    np.testing.assert_allclose(py.conv2d_forward(x, w, b, stride, pad), naive_conv(x, w, b, stride, pad),
                               rtol=1e-12, atol=1e-12)


@needs_compiled
@pytest.mark.parametrize("case", CONV_CASES)
def test_conv_backends_agree(case):
    x, w, b, dout, stride, pad = _conv_inputs(case)
    np.testing.assert_allclose(c.conv2d_forward(x, w, b, stride, pad), py.conv2d_forward(x, w, b, stride, pad),
                               rtol=1e-12, atol=1e-12)
    for a, e in zip(c.conv2d_backward(x, w, dout, stride, pad), py.conv2d_backward(x, w, dout, stride, pad)):
        assert a.shape == e.shape
        np.testing.assert_allclose(a, e, rtol=1e-12, atol=1e-12)


@needs_compiled
@pytest.mark.parametrize("size,stride", [(2, 2), (3, 1), (2, 1)])
def test_maxpool_backends_agree(size, stride):
    rng = np.random.default_rng(size * 10 + stride)
    x = rng.normal(size=(2, 3, 7, 6))
    x[0, 0, :2, :2] = 1.0  # ties resolve to the first maximum in both
    out_c, arg_c = c.maxpool_forward(x, size, stride)
    out_p, arg_p = py.maxpool_forward(x, size, stride)
    np.testing.assert_array_equal(out_c, out_p)
    np.testing.assert_array_equal(arg_c, arg_p)
    dout = rng.normal(size=out_c.shape)
    np.testing.assert_allclose(c.maxpool_backward(dout, arg_c, x.shape), py.maxpool_backward(dout, arg_p, x.shape),
                               rtol=1e-14, atol=1e-14)


def test_maxpool_tie_takes_first():
    x = np.ones((1, 1, 2, 2))
    _, arg = py.maxpool_forward(x, 2, 2)
    assert arg.ravel().tolist() == [0]


@needs_compiled
def test_dense_backends_agree():
    rng = np.random.default_rng(7)
    x, w, b, dout = rng.normal(size=(5, 11)), rng.normal(size=(3, 11)), rng.normal(size=3), rng.normal(size=(5, 3))
    np.testing.assert_allclose(c.dense_forward(x, w, b), py.dense_forward(x, w, b), rtol=1e-12)
    for a, e in zip(c.dense_backward(x, w, dout), py.dense_backward(x, w, dout)):
        np.testing.assert_allclose(a, e, rtol=1e-12, atol=1e-13)


def _backend_in_subprocess(env_value):
    env = dict(os.environ)
    if env_value is None:
        env.pop("OBALEX_PURE_PYTHON", None)
    else:
        env["OBALEX_PURE_PYTHON"] = env_value
    out = subprocess.run([sys.executable, "-c", "import obalex.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_pure_python_switch():
    assert _backend_in_subprocess("1") == "python"


@needs_compiled
def test_compiled_is_default():
    assert _backend_in_subprocess(None) == "compiled"
    assert kernels.BACKEND in ("compiled", "python")


def test_training_agrees_across_backends(tmp_path):
    """A short training run gives the same weights under either backend, to rounding."""
    script = (
        "import numpy as np\n"
        "from obalex.tinynet import toy_vgg, train, TrainConfig\n"
        "rng = np.random.default_rng(0)\n"
        "x = rng.uniform(size=(12, 1, 16, 16)); y = np.arange(12) % 2\n"
        "net, _ = train(toy_vgg((1, 16, 16), hidden=8), x, y, TrainConfig(epochs=2, batch_size=4))\n"
        "np.save(__import__('sys').argv[1], net.parameter_vector().astype(np.float64))\n"
    )
    results = []
    for flag in ("1", "0"):
        path = tmp_path / f"params_{flag}.npy"
        env = dict(os.environ, OBALEX_PURE_PYTHON=flag)
        subprocess.run([sys.executable, "-c", script, str(path)], env=env, check=True)
        results.append(np.load(path))
    np.testing.assert_allclose(results[0], results[1], rtol=0, atol=1e-6)
