"""Empirical orthogonal functions from a one-sided Jacobi SVD.

The plume matrix ``B`` (N plumes × K cells) is decomposed directly, without
removing a mean, so ``B ≈ U_r D_r V_rᵀ`` with ``U_r`` holding the per-plume
coefficients.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, RankDeficiencyError, SvdConvergenceError
from .plume import GridSpec, Plume, PlumeSet

MAGIC = b"EOFBASIS1"
DEFAULT_RANK = 20


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of ``range(n)`` (n even) covering every pair once across n-1 rounds."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_svd(A: np.ndarray, tol: float | None = None, max_sweeps: int = 80
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``A = U @ diag(s) @ Vt`` by Hestenes one-sided Jacobi rotations.

    Rotations are applied to the columns of ``A`` (or of ``A.T`` when ``A`` is
    wide) until every column pair is orthogonal to relative ``tol`` (default
    ``rows * eps``, the rounding floor of the inner products).  Disjoint
    pairs are rotated together in round-robin order.  Singular values come back
    sorted in decreasing order; directions for zero singular values are
    completed to an orthonormal set.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise DimensionError("jacobi_svd", expected="2-D matrix", got=A.shape)
    m, n = A.shape
    if m < n:
        U, s, Vt = jacobi_svd(A.T, tol, max_sweeps)
        return Vt.T, s, U.T
    if tol is None:
        tol = m * np.finfo(float).eps
    # rows of W are the columns being orthogonalised; rows of V track the rotations
    n_pad = n + (n % 2)
    W = np.zeros((n_pad, m))
    W[:n] = A.T
    V = np.eye(n_pad)
    rounds = _round_robin(n_pad) if n_pad > 1 else []
    for sweep in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            wp, wq = W[p], W[q]
            alpha = np.einsum("ij,ij->i", wp, wp)
            beta = np.einsum("ij,ij->i", wq, wq)
            gamma = np.einsum("ij,ij->i", wp, wq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q, alpha, beta, gamma = p[active], q[active], alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = W[p], W[q]
            W[p] = c[:, None] * wp - s[:, None] * wq
            W[q] = s[:, None] * wp + c[:, None] * wq
            vp, vq = V[p], V[q]
            V[p] = c[:, None] * vp - s[:, None] * vq
            V[q] = s[:, None] * vp + c[:, None] * vq
        if not rotated:
            break
    else:
        raise SvdConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    W, V = W[:n], V[:n, :n]
    sigma = np.sqrt(np.einsum("ij,ij->i", W, W))
    order = np.argsort(-sigma, kind="stable")
    sigma, W, V = sigma[order], W[order], V[order]
    U = np.zeros((n, m))
    small = sigma <= sigma[0] * max(m, n) * np.finfo(float).eps
    U[~small] = W[~small] / sigma[~small, None]
    sigma = np.where(small, 0.0, sigma)
    if small.any():
        U = _complete_orthonormal(U, ~small)
    return U.T, sigma, V


def _complete_orthonormal(rows: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the rows not flagged ``good`` by unit vectors orthogonal to the rest."""
    out = rows.copy()
    basis = [r for r, g in zip(rows, good) if g]
    dim = rows.shape[1]
    candidate = 0
    for i in np.flatnonzero(~good):
        while True:
            e = np.zeros(dim)
            e[candidate % dim] = 1.0
            candidate += 1
            for b in basis:
                e -= np.dot(b, e) * b
            for b in basis:  # second pass for numerical orthogonality
                e -= np.dot(b, e) * b
            norm = np.linalg.norm(e)
            if norm > 1e-6:
                break
        out[i] = e / norm
        basis.append(out[i])
    return out


@dataclass(frozen=True, eq=False)
class EofBasis:
    singular_values: np.ndarray   # (r,), non-increasing
    right_vectors: np.ndarray     # (r, K), orthonormal rows
    train_coeffs: np.ndarray      # (N, r), rows of U_r
    grid: GridSpec | None = None

    @property
    def r(self) -> int:
        return len(self.singular_values)

    @property
    def K(self) -> int:
        return self.right_vectors.shape[1]

    @property
    def eofs(self) -> np.ndarray:
        """``D_r V_rᵀ``: the spatial patterns scaled by their singular values."""
        return self.singular_values[:, None] * self.right_vectors


def fit_eof(B, r: int = DEFAULT_RANK) -> EofBasis:
    grid = B.grid if isinstance(B, PlumeSet) else None
    M = B.matrix() if isinstance(B, PlumeSet) else np.asarray(B, dtype=np.float64)
    n, k = M.shape
    if not 1 <= r <= min(n, k):
        raise ValueError(f"rank r={r} outside [1, {min(n, k)}]")
    U, s, Vt = jacobi_svd(M)
    return EofBasis(s[:r].copy(), Vt[:r].copy(), U[:, :r].copy(), grid)


def reconstruct(basis: EofBasis, coeffs) -> np.ndarray | PlumeSet:
    """``coeffs @ D_r @ V_rᵀ``; a PlumeSet when the basis knows its grid."""
    C = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    if C.shape[1] != basis.r:
        raise DimensionError("eof coefficients", expected=basis.r, got=C.shape[1])
    M = C @ basis.eofs
    if basis.grid is None:
        return M
    return PlumeSet(basis.grid, tuple(Plume(basis.grid, row) for row in M))


def regress_coefficients(basis: EofBasis, new_plumes) -> np.ndarray:
    """Least-squares coefficients of plumes on the EOFs: ``b V_r D_r⁻¹``."""
    if isinstance(new_plumes, PlumeSet):
        if basis.grid is not None and new_plumes.grid != basis.grid:
            raise DimensionError("eof grid", expected=basis.grid, got=new_plumes.grid)
        M = new_plumes.matrix()
    else:
        M = np.atleast_2d(np.asarray(new_plumes, dtype=np.float64))
    if M.shape[1] != basis.K:
        raise DimensionError("eof plumes", expected=basis.K, got=M.shape[1])
    if np.any(basis.singular_values <= 0):
        raise RankDeficiencyError("zero singular value in the retained EOFs")
    return (M @ basis.right_vectors.T) / basis.singular_values


# persistence -----------------------------------------------------------------

def save_basis(path: str | os.PathLike, basis: EofBasis) -> None:
    g = basis.grid
    grid_line = "none" if g is None else ",".join(
        [str(g.n_lon), str(g.n_lat), repr(g.lon_min), repr(g.lat_min), repr(g.d_lon), repr(g.d_lat)])
    header = f"{basis.r},{basis.K},{basis.train_coeffs.shape[0]}\n{grid_line}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n" + header)
        for arr in (basis.singular_values, basis.right_vectors, basis.train_coeffs):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_basis(path: str | os.PathLike) -> EofBasis:
    with open(path, "rb") as fh:
        if fh.readline().rstrip(b"\n") != MAGIC:
            raise ValueError(f"{path}: not an {MAGIC.decode()} file")
        r, k, n = (int(x) for x in fh.readline().decode("ascii").split(","))
        grid_line = fh.readline().decode("ascii").strip()
        data = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if data.size != r + r * k + n * r:
        raise ValueError(f"{path}: truncated basis")
    grid = None
    if grid_line != "none":
        a, b, c, d, e, f = grid_line.split(",")
        grid = GridSpec(int(a), int(b), float(c), float(d), float(e), float(f))
    s = data[:r]
    V = data[r:r + r * k].reshape(r, k)
    U = data[r + r * k:].reshape(n, r)
    return EofBasis(s, V, U, grid)
