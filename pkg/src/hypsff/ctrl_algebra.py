"""Boundary reflection algebra and finite-dimensional controllability tests.

The z = 0 reflection x^+(0) = Q x^-(0) with a full-row-rank Q splits the
outgoing trace into a part seen by x^+ (through the right inverse of Q) and a
residual part living in the kernel of Q.  The change of basis T assembled from
both parts is what the transforms downstream rely on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_RANK_TOL = 1e-10


class SingularGram(Exception):
    """Gram matrix of the boundary reflection is (numerically) singular."""


def _spectral_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a, 2)) if a.size else 0.0


def right_inverse(Q: np.ndarray) -> np.ndarray:
    """Right inverse Q^T (Q Q^T)^{-1} of a full-row-rank matrix.

    Assembled from the SVD so the residual degrades with cond(Q), not its
    square as the normal-equations route would.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    u, s, vt = np.linalg.svd(Q, full_matrices=False)
    if s.size == 0 or s[-1] <= _RANK_TOL * s[0]:
        raise SingularGram("reflection matrix has row rank < %d" % Q.shape[0])
    return (vt.T / s[None, :]) @ u.T


def annihilator(Q: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the kernel of Q, one column per residual direction.

    Columns are signed so their first nonzero entry is positive, which keeps
    the basis reproducible across runs.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n_plus, n_minus = Q.shape
    _, s, vt = np.linalg.svd(Q)
    rank = int(np.sum(s > _RANK_TOL * s[0])) if s.size else 0
    basis = vt[rank:].T  # (n_minus, n_minus - rank)
    for col in range(basis.shape[1]):
        nz = np.nonzero(np.abs(basis[:, col]) > 1e-14)[0]
        if nz.size and basis[nz[0], col] < 0.0:
            basis[:, col] = -basis[:, col]
    return basis


def exact_controllability_check(Q: np.ndarray, n_plus: int) -> bool:
    """True when the reflection matrix has full row rank n_plus."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    s = np.linalg.svd(Q, compute_uv=False)
    if s.size == 0:
        return n_plus == 0
    return int(np.sum(s > _RANK_TOL * s[0])) == n_plus


@dataclass(frozen=True)
class BoundaryAlgebra:
    """Right inverse, kernel basis and the change of basis they induce.

    T = [Q_right | Q_perp] maps (x1, x2) back to x^-(0); its inverse stacks Q
    on top of Q_perp_left = Q_perp^T and is exact by orthogonality.
    """

    Q_right: np.ndarray  # (n_minus, n_plus)
    Q_perp: np.ndarray  # (n_minus, n_minus - n_plus)
    T: np.ndarray
    T_inv: np.ndarray
    Q_perp_left: np.ndarray

    def __post_init__(self):
        for name in ("Q_right", "Q_perp", "T", "T_inv", "Q_perp_left"):
            a = np.array(np.atleast_2d(getattr(self, name)), dtype=float, order="C")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        n = self.T.shape[0]
        Q = self.T_inv[: self.n_plus]
        # residual scales with the conditioning of Q, so the bound must too
        scale = 1.0 + _spectral_norm(Q) * _spectral_norm(self.Q_right)
        if not np.allclose(Q @ self.Q_right, np.eye(self.n_plus), atol=1e-12 * scale):
            raise ValueError("Q_right is not a right inverse of Q")
        t_scale = 1.0 + _spectral_norm(self.T) * _spectral_norm(self.T_inv)
        if not np.allclose(self.T @ self.T_inv, np.eye(n), atol=1e-12 * t_scale):
            raise ValueError("T and T_inv are not inverse to each other")

    @property
    def n_minus(self) -> int:
        return self.Q_right.shape[0]

    @property
    def n_plus(self) -> int:
        return self.Q_right.shape[1]

    @property
    def n_residual(self) -> int:
        return self.Q_perp.shape[1]

    @property
    def Q(self) -> np.ndarray:
        return self.T_inv[: self.n_plus]


def build_boundary_algebra(Q: np.ndarray) -> BoundaryAlgebra:
    """Assemble the boundary algebra of a full-row-rank reflection matrix."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    qr = right_inverse(Q)
    qp = annihilator(Q)
    T = np.hstack([qr, qp])
    # exact inverse: Q qr = I, Q qp = 0, qp^T qr = 0, qp^T qp = I
    T_inv = np.vstack([Q, qp.T])
    return BoundaryAlgebra(Q_right=qr, Q_perp=qp, T=T, T_inv=T_inv, Q_perp_left=qp.T)


def partition_boundary(algebra: BoundaryAlgebra, x_minus_0: np.ndarray):
    """Split the z = 0 trace of x^- into (Q x, Q_perp_left x)."""
    x = np.asarray(x_minus_0, dtype=float)
    return algebra.Q @ x, algebra.Q_perp_left @ x


def kalman_check(F: np.ndarray, B: np.ndarray) -> bool:
    """Full rank of the controllability matrix [B, FB, ..., F^{n-1}B]."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = F.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(F @ blocks[-1])
    ctrb = np.hstack(blocks)
    # normalize columns so high powers of F cannot drown out the rank test
    norms = np.linalg.norm(ctrb, axis=0)
    norms[norms == 0.0] = 1.0
    s = np.linalg.svd(ctrb / norms, compute_uv=False)
    return int(np.sum(s > _RANK_TOL * s[0])) == n if s[0] > 0 else False


def hautus_check(F: np.ndarray, B: np.ndarray) -> bool:
    """Rank of [sI - F, B] equals n at every eigenvalue s of F."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = F.shape[0]
    for s_ev in np.linalg.eigvals(F):
        pencil = np.hstack([s_ev * np.eye(n) - F, B.astype(complex)])
        # normalize columns: compensator columns can dwarf the eigenvalue
        # block without saying anything about the rank
        norms = np.linalg.norm(pencil, axis=0)
        norms[norms == 0.0] = 1.0
        s = np.linalg.svd(pencil / norms, compute_uv=False)
        if s[0] == 0.0 or s[-1] <= _RANK_TOL * s[0]:
            return False
    return True
