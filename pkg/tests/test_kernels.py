import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carnet import _npkernels as npk

ck = pytest.importorskip("carnet._ckernels")


def _geom(seed):
    r = np.random.default_rng(seed)
    k = int(r.integers(1, 4))
    s = int(r.integers(1, 3))
    p = int(r.integers(0, k))
    h, w = int(r.integers(k, 12)), int(r.integers(k, 12))
    x = r.standard_normal((int(r.integers(1, 3)), int(r.integers(1, 4)), h, w)).astype(np.float32)
    return x, k, s, p


@pytest.mark.parametrize("seed", range(25))
def test_im2col_col2im_match(seed):
    x, k, s, p = _geom(seed)
    a = ck.im2col(x, k, k, s, s, p, p)
    b = npk.im2col(x, k, k, s, s, p, p)
    assert np.array_equal(a, b)
    cols = np.random.default_rng(seed).standard_normal(a.shape).astype(np.float32)
    ca = ck.col2im(cols, x.shape, k, k, s, s, p, p)
    cb = npk.col2im(cols, x.shape, k, k, s, s, p, p)
    np.testing.assert_allclose(ca, cb, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_maxpool_match(seed):
    r = np.random.default_rng(seed)
    x = r.integers(-3, 3, (2, 3, 8, 10)).astype(np.float32)  # many ties
    ya, ia = ck.maxpool2_forward(x)
    yb, ib = npk.maxpool2_forward(x)
    assert np.array_equal(ya, yb) and np.array_equal(ia, ib)
    g = r.standard_normal(ya.shape).astype(np.float32)
    assert np.array_equal(ck.maxpool2_backward(g, ia, x.shape), npk.maxpool2_backward(g, ib, x.shape))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(1, 5))
def test_batchnorm_match(seed, n, c):
    r = np.random.default_rng(seed)
    x = (r.standard_normal((n, c, 5, 6)) * 3 + 1).astype(np.float32)
    gamma, beta = r.standard_normal(c), r.standard_normal(c)
    fa = ck.bn_train_forward(x, gamma, beta, 1e-5)
    fb = npk.bn_train_forward(x, gamma, beta, 1e-5)
    for a, b in zip(fa, fb):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)
    g = r.standard_normal(x.shape).astype(np.float32)
    ba = ck.bn_train_backward(g, fa[1], gamma, fa[4])
    bb = npk.bn_train_backward(g, fb[1], gamma, fb[4])
    for a, b in zip(ba, bb):
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4)


def test_float64_inputs_accepted():
    x, k, s, p = _geom(3)
    x = x.astype(np.float64)
    assert np.array_equal(ck.im2col(x, k, k, s, s, p, p), npk.im2col(x, k, k, s, s, p, p))


def test_benchmark_script_runs(capsys):
    import importlib.util
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    assert mod.main(["--no-step", "--repeat", "1"]) == 0
    assert "adam step" in capsys.readouterr().out
