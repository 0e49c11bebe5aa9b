"""Shared numeric vocabulary: Kronecker-structured products and covariance hygiene.

Everything here is a pure function of its inputs and safe to call from any
number of concurrent callers. Dimensions stay small (state vectors of a few
entries, lifted vectors up to a few hundred), so dense eigendecompositions are
the right tool throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import NumericError

#: Default eigenvalue floor for covariance hygiene: large enough to keep the
#: downstream solves well conditioned at this problem's scale (velocities of
#: order ten, covariances of order one), small enough not to distort fusion
#: weights.
DEFAULT_EIG_FLOOR = 1e-9


def kron(u, z) -> np.ndarray:
    """Kronecker product of two vectors with the first (control) index outermost.

    ``out[i * len(z) + j] == u[i] * z[j]``. With this ordering
    ``H @ kron(u, z) == (H @ kron_identity(u, len(z))) @ z`` for any matching H,
    which is what makes the bilinear-to-LTV conversion a block multiplication.
    """
    u = np.asarray(u, dtype=float).ravel()
    z = np.asarray(z, dtype=float).ravel()
    return np.kron(u, z)


def kron_identity(u, dim: int) -> np.ndarray:
    """``kron(u, I_dim)``: a vertical stack of ``u[i] * I`` blocks, shape (len(u)*dim, dim)."""
    u = np.asarray(u, dtype=float).ravel()
    return np.kron(u.reshape(-1, 1), np.eye(dim))


def khatri_rao(U, Z) -> np.ndarray:
    """Column-wise Kronecker product: column l equals ``kron(U[:, l], Z[:, l])``."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if U.shape[1] != Z.shape[1]:
        raise ValueError(
            "incompatible training matrices: khatri_rao needs equal column "
            f"counts, got {U.shape[1]} and {Z.shape[1]}"
        )
    q, ncols = U.shape
    d = Z.shape[0]
    return (U[:, None, :] * Z[None, :, :]).reshape(q * d, ncols)


def symmetrize(P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    return 0.5 * (P + P.T)


def psd_project(P, floor: float = DEFAULT_EIG_FLOOR) -> np.ndarray:
    """Symmetrize ``P`` and clamp its eigenvalues from below at ``floor``.

    Idempotent on already-compliant input (returned unchanged apart from exact
    symmetrization). Raises ValueError for non-square input.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"covariance must be square, got shape {P.shape}")
    if floor < 0.0:
        raise ValueError(f"eigenvalue floor must be >= 0, got {floor}")
    S = symmetrize(P)
    w, V = np.linalg.eigh(S)
    if w[0] >= floor:
        return S
    w = np.maximum(w, floor)
    return symmetrize((V * w) @ V.T)


def min_eigenvalue(P) -> float:
    return float(np.linalg.eigvalsh(symmetrize(P))[0])


def check_covariance(P, *, min_eig: float = -1e-9, rtol: float = 1e-10, name: str = "covariance") -> None:
    """Validate the covariance invariants; raises ValueError on violation.

    Symmetric to within ``rtol`` relative tolerance, all entries finite, and
    smallest eigenvalue at least ``min_eig`` (use the hygiene floor for
    post-projection matrices, -1e-9 for raw ones).
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"{name} must be square, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise ValueError(f"{name} has non-finite entries")
    scale = max(1.0, float(np.abs(P).max()))
    asym = float(np.abs(P - P.T).max())
    if asym > rtol * scale:
        raise ValueError(f"{name} is not symmetric (max asymmetry {asym:.3e})")
    lo = min_eigenvalue(P)
    if lo < min_eig:
        raise ValueError(f"{name} has eigenvalue {lo:.3e} below {min_eig:.3e}")


def solve_spd(A, B, context: str = "") -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive-definite A via Cholesky.

    Never forms an explicit inverse. Raises NumericError when the
    factorization fails, i.e. A is singular even after flooring.
    """
    A = symmetrize(A)
    B = np.asarray(B, dtype=float)
    try:
        c, low = scipy.linalg.cho_factor(A, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        what = context or "matrix"
        raise NumericError(f"singular {what}: Cholesky factorization failed") from exc
    return scipy.linalg.cho_solve((c, low), B, check_finite=False)


def pinv_backproject(E_obs, H) -> np.ndarray:
    """Map an observed-space error covariance back to state space via pinv(H).

    Rows/columns of unobserved states come out zero for selector-style H, so
    the result only touches states the innovation actually informs.
    """
    Hp = np.linalg.pinv(np.asarray(H, dtype=float))
    return symmetrize(Hp @ np.asarray(E_obs, dtype=float) @ Hp.T)


@dataclass
class ModelBelief:
    """A Gaussian (mean, covariance) pair for one model at one instant."""

    mean: np.ndarray
    cov: np.ndarray
    model_id: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(
                f"covariance shape {self.cov.shape} does not match mean length {self.mean.size}"
            )

    @property
    def dim(self) -> int:
        return self.mean.size
