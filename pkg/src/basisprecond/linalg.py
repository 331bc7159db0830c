"""Dense small-matrix primitives.

Symmetric eigendecomposition with a deterministic sign convention, the
matrix logarithm/exponential on the rotation group (used for geodesic
interpolation between orthonormal bases), and the eigenstructure of
Kronecker-factored curvature without materialising the full product.

Everything here is double precision and pure: no global state, safe to
call concurrently.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm, schur

__all__ = [
    "RejectedInputError",
    "NonInterpolableBasisError",
    "SymMatrix",
    "OrthoMatrix",
    "KronFactors",
    "KronEigenPair",
    "sym_eig",
    "ortho_log",
    "ortho_exp",
    "geodesic_interp",
    "kron_eigenbasis",
]

# Validation tolerances for the orthonormal-matrix invariants.
GRAM_TOL = 1e-10
COLUMN_NORM_TOL = 1e-12
# Factors are accepted as PSD if the smallest eigenvalue clears this level
# (relative to the largest eigenvalue for matrices far from unit scale).
PSD_TOL = 1e-10
# Rotation angles this close to pi have an eigenvalue at -1 for all
# practical purposes and no usable principal logarithm.
NEAR_PI_TOL = 1e-8


class RejectedInputError(ValueError):
    """Input violates a structural precondition (shape, finiteness, PSD)."""


class NonInterpolableBasisError(ValueError):
    """Orthogonal matrix has no real principal logarithm (reflection or
    eigenvalue at -1); flip one column sign before interpolating."""


class SymMatrix:
    """Real symmetric matrix, symmetrized exactly on construction."""

    __slots__ = ("mat",)

    def __init__(self, mat):
        a = np.asarray(mat, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise RejectedInputError(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise RejectedInputError("matrix entries must be finite")
        self.mat = (a + a.T) / 2.0

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    def diagonal(self) -> np.ndarray:
        return np.diag(self.mat).copy()

    def __repr__(self):
        return f"SymMatrix(dim={self.dim})"


class OrthoMatrix:
    """Square matrix with orthonormal columns, validated on construction."""

    __slots__ = ("mat",)

    def __init__(self, mat):
        a = np.asarray(mat, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise RejectedInputError(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise RejectedInputError("matrix entries must be finite")
        gram = a.T @ a
        if np.max(np.abs(gram - np.eye(a.shape[0]))) > GRAM_TOL:
            raise RejectedInputError("columns are not orthonormal within tolerance")
        col_norms = np.linalg.norm(a, axis=0)
        if np.max(np.abs(col_norms - 1.0)) > COLUMN_NORM_TOL:
            raise RejectedInputError("columns are not unit norm within tolerance")
        self.mat = a

    @classmethod
    def _trusted(cls, mat: np.ndarray) -> "OrthoMatrix":
        # Exactly-orthonormal-by-construction matrices (permutations) skip
        # the O(d^3) Gram validation; hot when curvature is diagonal.
        obj = object.__new__(cls)
        obj.mat = mat
        return obj

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    def __repr__(self):
        return f"OrthoMatrix(dim={self.dim})"


class KronFactors:
    """A (left, right) pair of PSD factors approximating a big symmetric
    matrix as left (x) right."""

    __slots__ = ("left", "right")

    def __init__(self, left: SymMatrix, right: SymMatrix):
        for name, f in (("left", left), ("right", right)):
            _require_psd(f, name)
        self.left = left
        self.right = right

    @property
    def shape(self):
        return (self.left.dim, self.right.dim)

    def __repr__(self):
        return f"KronFactors(left={self.left.dim}, right={self.right.dim})"


def _require_psd(s: SymMatrix, name: str = "matrix") -> np.ndarray:
    """Return eigenvalues of ``s``, rejecting matrices that are not PSD."""
    evals = np.linalg.eigvalsh(s.mat)
    floor = -PSD_TOL * max(1.0, float(evals[-1]))
    if evals[0] < floor:
        raise RejectedInputError(
            f"{name} is not PSD: smallest eigenvalue {evals[0]:.3e}"
        )
    return evals


def sym_eig(s: SymMatrix) -> tuple[np.ndarray, OrthoMatrix]:
    """Eigendecompose a symmetric matrix.

    Returns eigenvalues in ascending order and the orthonormal eigenvector
    basis with a fixed sign convention: the largest-magnitude entry of each
    eigenvector is positive. The output is a deterministic function of the
    input bits. Exactly diagonal inputs take a fast path that returns the
    sorted coordinate axes.
    """
    a = s.mat
    if _is_diagonal(a):
        # Diagonal input: eigenvectors are coordinate axes (convention-exact).
        d = np.diag(a)
        order = np.argsort(d, kind="stable")
        u = np.zeros((s.dim, s.dim))
        u[order, np.arange(s.dim)] = 1.0
        return d[order].copy(), OrthoMatrix._trusted(u)
    evals, u = np.linalg.eigh(a)
    u = _fix_signs(u)
    return evals, OrthoMatrix(u)


def _is_diagonal(a: np.ndarray) -> bool:
    d = a.shape[0]
    if d < 2:
        return True
    # Reshaping the flattened matrix to (d-1, d+1) puts every off-diagonal
    # entry in columns 1..d of some row.
    off = np.ascontiguousarray(a).reshape(-1)[:-1].reshape(d - 1, d + 1)[:, 1:]
    return not off.any()


def _fix_signs(u: np.ndarray) -> np.ndarray:
    """Flip column signs so each column's largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def ortho_log(u: OrthoMatrix) -> np.ndarray:
    """Principal real logarithm of a rotation matrix.

    Returns a real skew-symmetric K with expm(K) = U. Requires det(U) > 0
    and no eigenvalue within NEAR_PI_TOL of -1; otherwise raises
    NonInterpolableBasisError (flipping the sign of one column fixes a
    reflection without changing any preconditioner built from U).
    """
    a = u.mat
    sign, _ = np.linalg.slogdet(a)
    if sign <= 0:
        raise NonInterpolableBasisError(
            "matrix is a reflection (det <= 0); flip one column sign first"
        )
    t, z = schur(a, output="real")
    d = a.shape[0]
    k_schur = np.zeros((d, d))
    i = 0
    while i < d:
        if i + 1 < d and t[i + 1, i] != 0.0:
            # 2x2 rotation block [[cos, -sin], [sin, cos]].
            angle = np.arctan2(t[i + 1, i], t[i, i])
            if np.pi - abs(angle) < NEAR_PI_TOL:
                raise NonInterpolableBasisError(
                    "rotation angle within tolerance of pi (eigenvalue at -1)"
                )
            k_schur[i, i + 1] = -angle
            k_schur[i + 1, i] = angle
            i += 2
        else:
            if t[i, i] < 0.0:
                raise NonInterpolableBasisError("eigenvalue at -1")
            i += 1
    k = z @ k_schur @ z.T
    return (k - k.T) / 2.0


def ortho_exp(k: np.ndarray) -> OrthoMatrix:
    """Exponential of a skew-symmetric matrix, projected back onto the
    orthogonal group to clean up rounding drift."""
    k = np.asarray(k, dtype=float)
    if np.max(np.abs(k + k.T)) > 1e-9:
        raise RejectedInputError("expected a skew-symmetric matrix")
    m = expm((k - k.T) / 2.0)
    return OrthoMatrix(_project_orthogonal(m))


def _project_orthogonal(m: np.ndarray) -> np.ndarray:
    w, _, vt = np.linalg.svd(m)
    return w @ vt


def geodesic_interp(u: OrthoMatrix, alpha: float) -> OrthoMatrix:
    """Rotation part-way along the geodesic from the identity to U.

    Computes the real part of expm(alpha * logm(U)), re-orthonormalized.
    alpha = 0 gives the identity and alpha = 1 gives U (both exactly).
    """
    if not 0.0 <= alpha <= 1.0:
        raise RejectedInputError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return OrthoMatrix(np.eye(u.dim))
    if alpha == 1.0:
        return u
    k = ortho_log(u)
    return ortho_exp(alpha * k)


class KronEigenPair:
    """Eigenbasis of a Kronecker-factored matrix, kept in factored form.

    Rotation of an (m, n) gradient matrix G is U_left^T G U_right; the
    eigenvalues of the full product are all pairwise products of the factor
    eigenvalues, laid out row-major to match the rotated coordinates.
    """

    __slots__ = ("u_left", "u_right", "evals_left", "evals_right")

    def __init__(self, u_left, u_right, evals_left, evals_right):
        self.u_left = u_left
        self.u_right = u_right
        self.evals_left = np.asarray(evals_left, dtype=float)
        self.evals_right = np.asarray(evals_right, dtype=float)

    @property
    def shape(self):
        return (self.u_left.dim, self.u_right.dim)

    def eigenvalues(self) -> np.ndarray:
        return np.outer(self.evals_left, self.evals_right).ravel()

    def rotate(self, grad: np.ndarray) -> np.ndarray:
        grad = np.asarray(grad, dtype=float)
        if grad.shape != self.shape:
            raise RejectedInputError(
                f"gradient shape {grad.shape} does not match factors {self.shape}"
            )
        return self.u_left.mat.T @ grad @ self.u_right.mat

    def unrotate(self, grad_rot: np.ndarray) -> np.ndarray:
        grad_rot = np.asarray(grad_rot, dtype=float)
        if grad_rot.shape != self.shape:
            raise RejectedInputError(
                f"gradient shape {grad_rot.shape} does not match factors {self.shape}"
            )
        return self.u_left.mat @ grad_rot @ self.u_right.mat.T


def kron_eigenbasis(f: KronFactors) -> tuple[np.ndarray, KronEigenPair]:
    """Eigenvalues and factored eigenbasis of left (x) right.

    The returned eigenvalues are the m*n products lambda_i * mu_j in the
    handle's row-major coordinate order (not sorted).
    """
    evals_l, u_l = sym_eig(f.left)
    evals_r, u_r = sym_eig(f.right)
    pair = KronEigenPair(u_l, u_r, evals_l, evals_r)
    return pair.eigenvalues(), pair
