import numpy as np
import pytest

from deepfpc import _backend, _pykernels
from deepfpc.fpc import default_init
from deepfpc.sensing import generate_gaussian_matrix, generate_sparse_signal, measure

compiled = pytest.importorskip("deepfpc._kernels")


def _instance(seed, m=32, n=24):
    phi = generate_gaussian_matrix(m, n, seed=seed)
    y = measure(phi, generate_sparse_signal(n, 3, seed=seed + 1000))
    return phi, y


@pytest.mark.parametrize("seed", range(5))
def test_single_step_agrees(seed):
    phi, y = _instance(seed)
    x = default_init(phi, y)
    a, b = x.copy(), x.copy()
    fa = _backend.fpc_iterations(phi, y, a, 0.05, 0.02, 1, impl=compiled)
    fb = _backend.fpc_iterations(phi, y, b, 0.05, 0.02, 1, impl=_pykernels)
    assert fa == fb
    np.testing.assert_allclose(a, b, atol=1e-13)


@pytest.mark.parametrize("seed", range(3))
def test_short_runs_agree(seed):
    # summation order differs, so long runs may part ways at a sign flip
    phi, y = _instance(seed)
    x = default_init(phi, y)
    a, b = x.copy(), x.copy()
    _backend.fpc_iterations(phi, y, a, 0.05, 0.02, 10, impl=compiled)
    _backend.fpc_iterations(phi, y, b, 0.05, 0.02, 10, impl=_pykernels)
    np.testing.assert_allclose(a, b, atol=1e-10)


@pytest.mark.parametrize("impl", [compiled, _pykernels], ids=["cython", "python"])
def test_degenerate_steps_are_flagged(impl):
    phi = np.eye(3)
    x = np.array([0.6, 0.8, 0.0])
    flagged = _backend.fpc_iterations(phi, np.ones(3), x, 0.1, 50.0, 4, impl=impl)
    assert flagged == 4
    np.testing.assert_array_equal(x, [0.6, 0.8, 0.0])


@pytest.mark.parametrize("impl", [compiled, _pykernels], ids=["cython", "python"])
def test_half_threshold_retry(impl):
    # |v| = 1.0 lies between nu/2 and nu: the retry keeps the iterate alive
    phi = np.eye(2)
    x = np.array([1.0, 0.0])
    flagged = _backend.fpc_iterations(phi, np.array([1.0, -1.0]), x, 0.1, 1.5, 1, impl=impl)
    assert flagged == 0
    np.testing.assert_allclose(x, [1.0, 0.0])


@pytest.mark.parametrize("impl", [compiled, _pykernels], ids=["cython", "python"])
def test_rows_equal_loop(impl):
    phi, _ = _instance(7)
    ys = np.stack([_instance(s)[1] for s in range(4)])
    xs = np.ascontiguousarray(np.stack([default_init(phi, y) for y in ys]))
    loop = xs.copy()
    flags = _backend.fpc_iterations_rows(phi, ys, xs, 0.05, 0.02, 30, impl=impl)
    for t in range(4):
        row = loop[t].copy()
        assert flags[t] == _backend.fpc_iterations(phi, ys[t], row, 0.05, 0.02, 30, impl=impl)
        np.testing.assert_array_equal(xs[t], row)


def test_backend_name():
    assert _backend.BACKEND in ("cython", "python")
