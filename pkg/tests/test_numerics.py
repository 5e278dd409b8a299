import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deepufm import _kernels
from deepufm.numerics import (
    ConvergenceError,
    fit_scale,
    flatten,
    gaussian_matrix,
    kron,
    make_rng,
    pinv,
    sym_eig,
    unflatten,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def small_matrix(max_side=4):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite)
    )


@settings(max_examples=40, deadline=None)
@given(small_matrix(), small_matrix())
def test_kron_index_law(a, b):
    k = kron(a, b)
    p2, q2 = b.shape
    for x, u, y, v in itertools.product(range(a.shape[0]), range(a.shape[1]), range(p2), range(q2)):
        assert k[p2 * x + y, q2 * u + v] == a[x, u] * b[y, v]


@settings(max_examples=30, deadline=None)
@given(small_matrix(), small_matrix())
def test_kron_backends_agree(a, b):
    np.testing.assert_array_equal(_kernels.kron_numba(a, b), _kernels.kron_numpy(a, b))


def test_kron_eigenvalues_are_pairwise_products(rng):
    a = rng.standard_normal((4, 4))
    a = a + a.T
    b = rng.standard_normal((3, 3))
    b = b @ b.T
    ea, eb = np.linalg.eigvalsh(a), np.linalg.eigvalsh(b)
    expected = np.sort(np.outer(ea, eb).ravel())[::-1]
    np.testing.assert_allclose(sym_eig(kron(a, b)).values, expected, atol=1e-10)


def test_kron_mixed_product(rng):
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((4, 5))
    c, d = rng.standard_normal((2, 3)), rng.standard_normal((5, 2))
    np.testing.assert_allclose(kron(a, b) @ kron(c, d), kron(a @ c, b @ d), atol=1e-12)


def test_flatten_row_major_and_roundtrip(rng):
    w = rng.standard_normal((3, 5))
    v = flatten(w)
    for x in range(3):
        for y in range(5):
            assert v[5 * x + y] == w[x, y]
    np.testing.assert_array_equal(unflatten(v, 3, 5), w)
    with pytest.raises(ValueError):
        unflatten(v, 4, 4)


def test_kron_vec_identity(rng):
    # vec(B X A^T) = (B ⊗ A) vec(X) for the row-major vec
    b, x, a = rng.standard_normal((3, 4)), rng.standard_normal((4, 5)), rng.standard_normal((2, 5))
    np.testing.assert_allclose(flatten(b @ x @ a.T), kron(b, a) @ flatten(x), atol=1e-12)


@pytest.mark.parametrize("method", ["jacobi", "lapack"])
@pytest.mark.parametrize("n", [1, 2, 5, 17])
def test_sym_eig_reconstructs(rng, method, n):
    s = rng.standard_normal((n, n))
    s = s + s.T
    es = sym_eig(s, method=method)
    assert np.all(np.diff(es.values) <= 1e-12)
    np.testing.assert_allclose(es.vectors @ np.diag(es.values) @ es.vectors.T, s, atol=1e-10)
    np.testing.assert_allclose(es.vectors.T @ es.vectors, np.eye(n), atol=1e-10)
    np.testing.assert_allclose(es.values, np.sort(np.linalg.eigvalsh(s))[::-1], atol=1e-10)


@pytest.mark.parametrize("solver", [_kernels.jacobi_eigh_numba, _kernels.jacobi_eigh_numpy])
def test_jacobi_backends_match_lapack(rng, solver):
    for n in (3, 8, 21):
        s = rng.standard_normal((n, n))
        s = s + s.T
        vals, vecs, off, sweeps = solver(s, 1e-12, 100)
        assert sweeps < 100
        np.testing.assert_allclose(np.sort(vals), np.linalg.eigvalsh(s), atol=1e-10)
        np.testing.assert_allclose(vecs @ np.diag(vals) @ vecs.T, s, atol=1e-10)


def test_jacobi_handles_repeated_eigenvalues(rng):
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    s = q @ np.diag([2.0, 2.0, 2.0, 1.0, 0.0, 0.0]) @ q.T
    es = sym_eig(s, method="jacobi")
    np.testing.assert_allclose(es.values, [2, 2, 2, 1, 0, 0], atol=1e-12)


def test_sym_eig_rejects_asymmetric_and_raises_on_no_convergence(rng, monkeypatch):
    with pytest.raises(ValueError):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        sym_eig(np.ones((2, 3)))
    import deepufm.numerics as nm

    monkeypatch.setattr(nm, "JACOBI_MAX_SWEEPS", 1)
    s = rng.standard_normal((10, 10))
    with pytest.raises(ConvergenceError):
        sym_eig(s + s.T, method="jacobi")


def test_pinv_projector_and_penrose(rng):
    x = rng.standard_normal((6, 3))
    s = x @ x.T
    p = pinv(s)
    np.testing.assert_allclose(s @ p @ s, s, atol=1e-9)
    np.testing.assert_allclose(p @ s @ p, p, atol=1e-9)
    proj = s @ p
    np.testing.assert_allclose(proj @ proj, proj, atol=1e-9)
    assert abs(np.trace(proj) - 3) < 1e-9
    np.testing.assert_allclose(p, np.linalg.pinv(s, rcond=1e-8, hermitian=True), atol=1e-9)
    np.testing.assert_array_equal(pinv(np.zeros((3, 3))), np.zeros((3, 3)))


def test_fit_scale_exact_and_grid_oracle(rng):
    b = rng.standard_normal((4, 3))
    fit = fit_scale(2.5 * b, b)
    assert abs(fit.alpha - 2.5) < 1e-14 and fit.residual < 1e-14
    a = rng.standard_normal((4, 3))
    fit = fit_scale(a, b)
    grid = np.linspace(fit.alpha - 1, fit.alpha + 1, 20001)
    errs = [np.linalg.norm(a - g * b) for g in grid]
    assert abs(grid[int(np.argmin(errs))] - fit.alpha) <= 1e-4
    with pytest.raises(ValueError):
        fit_scale(a, np.zeros_like(a))


def test_rng_is_reproducible_and_gaussian():
    a = gaussian_matrix(make_rng(7), 200, 200, 0.5)
    b = gaussian_matrix(make_rng(7), 200, 200, 0.5)
    np.testing.assert_array_equal(a, b)
    assert abs(a.mean()) < 0.01
    assert abs(a.std() - 0.5) < 0.01
    assert not np.array_equal(a, gaussian_matrix(make_rng(8), 200, 200, 0.5))
    with pytest.raises(ValueError):
        make_rng(-1)
