import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plumemu.eof import (EofBasis, fit_eof, jacobi_svd, load_basis, reconstruct,
                         regress_coefficients, save_basis)
from plumemu.errors import DimensionError, RankDeficiencyError
from plumemu.plume import GridSpec, Plume, PlumeSet


def frob2(a):
    return float(np.sum(a * a))


def test_rank_one_exact():
    rng = np.random.default_rng(0)
    B = np.outer(rng.normal(size=7), rng.normal(size=5))
    basis = fit_eof(B, 1)
    assert np.sqrt(frob2(reconstruct(basis, basis.train_coeffs) - B)) < 1e-10


def test_full_rank_exact():
    rng = np.random.default_rng(1)
    for shape in [(6, 4), (4, 6), (5, 5)]:
        B = rng.normal(size=shape)
        basis = fit_eof(B, min(shape))
        assert np.sqrt(frob2(reconstruct(basis, basis.train_coeffs) - B)) < 1e-10


def test_eckart_young_and_eigen_oracle():
    rng = np.random.default_rng(2)
    B = rng.normal(size=(5, 4))
    # independent oracle: eigenvalues of B'B are the squared singular values
    evals = np.sort(np.linalg.eigvalsh(B.T @ B))[::-1]
    oracle_s = np.sqrt(np.clip(evals, 0, None))
    full = fit_eof(B, 4)
    np.testing.assert_allclose(full.singular_values, oracle_s, rtol=1e-12)
    for r in range(1, 5):
        basis = fit_eof(B, r)
        err2 = frob2(reconstruct(basis, basis.train_coeffs) - B)
        assert err2 == pytest.approx(np.sum(oracle_s[r:] ** 2), rel=1e-8, abs=1e-20)


def test_basis_invariants():
    rng = np.random.default_rng(3)
    B = rng.normal(size=(12, 30))
    basis = fit_eof(B, 6)
    np.testing.assert_allclose(basis.right_vectors @ basis.right_vectors.T, np.eye(6), atol=1e-8)
    assert np.all(np.diff(basis.singular_values) <= 0)
    assert basis.train_coeffs.shape == (12, 6)


def test_rank_out_of_range():
    with pytest.raises(ValueError):
        fit_eof(np.ones((3, 4)), 4)
    with pytest.raises(ValueError):
        fit_eof(np.ones((3, 4)), 0)


def test_rank_deficient_matrix_gets_orthonormal_completion():
    rng = np.random.default_rng(4)
    B = np.outer(rng.normal(size=6), rng.normal(size=8))
    U, s, Vt = jacobi_svd(B)
    np.testing.assert_allclose(Vt @ Vt.T, np.eye(6), atol=1e-10)
    np.testing.assert_allclose(U.T @ U, np.eye(6), atol=1e-10)
    assert np.all(s[1:] == 0)
    with pytest.raises(RankDeficiencyError):
        regress_coefficients(fit_eof(B, 2), B)


def test_reconstruct_examples():
    basis = EofBasis(np.array([2.0, 1.0]), np.array([[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]]),
                     np.zeros((3, 2)))
    assert np.all(reconstruct(basis, np.zeros((4, 2))) == 0)
    coeffs = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    loop = np.zeros((3, 3))
    for i in range(3):
        for k in range(3):
            for g in range(2):
                loop[i, k] += coeffs[i, g] * basis.singular_values[g] * basis.right_vectors[g, k]
    np.testing.assert_allclose(reconstruct(basis, coeffs), loop, rtol=1e-15)
    with pytest.raises(DimensionError):
        reconstruct(basis, np.zeros((1, 3)))


def test_reconstruct_training_row_and_plumeset_output():
    rng = np.random.default_rng(5)
    g = GridSpec(4, 3, 0, 0, 1, 1)
    ps = PlumeSet(g, tuple(Plume(g, rng.random(12)) for _ in range(6)))
    basis = fit_eof(ps, 3)
    out = reconstruct(basis, basis.train_coeffs[2])
    assert isinstance(out, PlumeSet) and out.grid == g
    B = ps.matrix()
    U, s, Vt = np.linalg.svd(B)
    best = (U[:, :3] * s[:3]) @ Vt[:3]
    np.testing.assert_allclose(out[0].vector, best[2], atol=1e-10)


def test_regression_examples():
    rng = np.random.default_rng(6)
    B = rng.normal(size=(8, 10))
    basis = fit_eof(B, 3)
    c = np.array([[0.3, -1.2, 2.0]])
    in_span = reconstruct(basis, c)
    np.testing.assert_allclose(regress_coefficients(basis, in_span), c, atol=1e-12)
    # orthogonal complement of the span
    x = rng.normal(size=10)
    x -= basis.right_vectors.T @ (basis.right_vectors @ x)
    np.testing.assert_allclose(regress_coefficients(basis, x), 0.0, atol=1e-12)
    # random plume vs explicit normal equations on the design E = D_r V_r'
    b = rng.normal(size=(1, 10))
    E = basis.eofs
    normal = np.linalg.solve(E @ E.T, E @ b.T).T
    got = regress_coefficients(basis, b)
    np.testing.assert_allclose(got, normal, rtol=1e-10)
    resid = b - reconstruct(basis, got)
    np.testing.assert_allclose(basis.right_vectors @ resid.T, 0.0, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_properties(seed):
    rng = np.random.default_rng(seed)
    n, k = rng.integers(3, 9), rng.integers(3, 12)
    B = rng.normal(size=(n, k))
    errors = []
    for r in range(1, min(n, k) + 1):
        b = fit_eof(B, r)
        errors.append(frob2(reconstruct(b, b.train_coeffs) - B))
    assert all(e2 <= e1 + 1e-10 for e1, e2 in zip(errors, errors[1:]))
    basis = fit_eof(B, max(1, min(n, k) - 1))
    X = rng.normal(size=(4, k))
    once = reconstruct(basis, regress_coefficients(basis, X))
    twice = reconstruct(basis, regress_coefficients(basis, once))
    np.testing.assert_allclose(twice, once, atol=1e-8)
    perm = rng.permutation(n)
    np.testing.assert_allclose(jacobi_svd(B[perm])[1], jacobi_svd(B)[1], atol=1e-10)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    g = GridSpec(3, 2, -1.0, 2.0, 0.5, 0.25)
    ps = PlumeSet(g, tuple(Plume(g, rng.random(6)) for _ in range(4)))
    basis = fit_eof(ps, 2)
    save_basis(tmp_path / "b.eof", basis)
    back = load_basis(tmp_path / "b.eof")
    assert back.grid == g
    for a in ("singular_values", "right_vectors", "train_coeffs"):
        np.testing.assert_array_equal(getattr(back, a), getattr(basis, a))
    assert (tmp_path / "b.eof").read_bytes().startswith(b"EOFBASIS1")
