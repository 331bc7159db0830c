"""Preconditioned update: rotate the gradient into an orthonormal basis,
scale it per coordinate, rotate back, and step.

The update is theta' = theta - eta * U (D (*) U^T g), where U is one of
{identity, eigenbasis of the curvature, per-layer Kronecker eigenbasis,
geodesic interpolation between identity and the eigenbasis} and D is
either an Adam-style inverse root of the running squared rotated gradient
or a power of the curvature's diagonal in that basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    KronEigenPair,
    KronFactors,
    NonInterpolableBasisError,
    OrthoMatrix,
    RejectedInputError,
    SymMatrix,
    _is_diagonal,
    geodesic_interp,
    kron_eigenbasis,
    sym_eig,
)
from .models import KronFactorSet, LayerFactors

__all__ = [
    "InvalidCurvatureError",
    "IdentityBasis",
    "EigenBasis",
    "KronEigenBasis",
    "AdamMoment",
    "GnScaling",
    "LrSchedule",
    "estimate_basis",
    "rotate",
    "unrotate",
    "adam_diag",
    "gn_diag",
    "step",
    "schedule_lr",
]

GN_POWERS = (-0.5, -1.0)
CURVATURE_TOL = 1e-10


class InvalidCurvatureError(ValueError):
    """Curvature diagonal is negative beyond tolerance."""


class IdentityBasis:
    """Trivial basis: rotation is a no-op."""

    def __init__(self, dim: int):
        self.dim = int(dim)

    def rotate(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        self._check(g)
        return g

    def unrotate(self, g_rot: np.ndarray) -> np.ndarray:
        g_rot = np.asarray(g_rot, dtype=float)
        self._check(g_rot)
        return g_rot

    def curvature_diagonal(self, gn) -> np.ndarray:
        if isinstance(gn, SymMatrix):
            if gn.dim != self.dim:
                raise RejectedInputError("curvature dim mismatch")
            return gn.diagonal()
        return _kron_set_diagonal(gn, lambda f: (np.diag(f.left.mat), np.diag(f.right.mat)))

    def _check(self, g):
        if g.shape != (self.dim,):
            raise RejectedInputError(f"expected vector of length {self.dim}")


class EigenBasis:
    """Explicit orthonormal basis held as the columns of U."""

    def __init__(self, u: OrthoMatrix):
        self.u = u
        self.dim = u.dim

    def rotate(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        if g.shape != (self.dim,):
            raise RejectedInputError(f"expected vector of length {self.dim}")
        return self.u.mat.T @ g

    def unrotate(self, g_rot: np.ndarray) -> np.ndarray:
        g_rot = np.asarray(g_rot, dtype=float)
        if g_rot.shape != (self.dim,):
            raise RejectedInputError(f"expected vector of length {self.dim}")
        return self.u.mat @ g_rot

    def curvature_diagonal(self, gn) -> np.ndarray:
        if not isinstance(gn, SymMatrix):
            raise RejectedInputError("explicit basis needs a dense symmetric curvature")
        if gn.dim != self.dim:
            raise RejectedInputError("curvature dim mismatch")
        if _is_diagonal(gn.mat):
            return (self.u.mat * self.u.mat).T @ np.diag(gn.mat)
        hu = gn.mat @ self.u.mat
        return np.einsum("ij,ij->j", self.u.mat, hu)


class KronEigenBasis:
    """Per-layer basis: factored eigenbases for matrix parameters, the
    coordinate axes for vector parameters."""

    def __init__(self, layers: list[tuple[LayerFactors, KronEigenPair | None]], dim: int):
        self.layers = layers
        self.dim = int(dim)

    def rotate(self, g: np.ndarray) -> np.ndarray:
        return self._apply(g, forward=True)

    def unrotate(self, g_rot: np.ndarray) -> np.ndarray:
        return self._apply(g_rot, forward=False)

    def _apply(self, g: np.ndarray, forward: bool) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        if g.shape != (self.dim,):
            raise RejectedInputError(f"expected vector of length {self.dim}")
        out = np.empty_like(g)
        for layer, pair in self.layers:
            seg = g[layer.sl]
            if pair is None:
                out[layer.sl] = seg
            else:
                mat = seg.reshape(layer.shape)
                res = pair.rotate(mat) if forward else pair.unrotate(mat)
                out[layer.sl] = res.ravel()
        return out

    def curvature_diagonal(self, gn: KronFactorSet) -> np.ndarray:
        if not isinstance(gn, KronFactorSet):
            raise RejectedInputError("Kronecker basis needs per-layer factors")
        if gn.total_dim != self.dim:
            raise RejectedInputError("curvature dim mismatch")
        by_name = {layer.name: pair for layer, pair in self.layers}
        out = np.empty(self.dim)
        for layer in gn:
            pair = by_name.get(layer.name)
            if layer.diag is not None:
                out[layer.sl] = layer.diag
            elif pair is None:
                out[layer.sl] = np.outer(
                    np.diag(layer.kron.left.mat), np.diag(layer.kron.right.mat)
                ).ravel()
            else:
                ql = _quad_diag(pair.u_left, layer.kron.left)
                qr = _quad_diag(pair.u_right, layer.kron.right)
                out[layer.sl] = np.outer(ql, qr).ravel()
        return out


def _quad_diag(u: OrthoMatrix, s: SymMatrix) -> np.ndarray:
    hu = s.mat @ u.mat
    return np.einsum("ij,ij->j", u.mat, hu)


def _kron_set_diagonal(gn: KronFactorSet, factor_diags) -> np.ndarray:
    if not isinstance(gn, KronFactorSet):
        raise RejectedInputError("expected per-layer Kronecker factors")
    out = np.empty(gn.total_dim)
    for layer in gn:
        if layer.diag is not None:
            out[layer.sl] = layer.diag
        else:
            dl, dr = factor_diags(layer.kron)
            out[layer.sl] = np.outer(dl, dr).ravel()
    return out


@dataclass
class AdamMoment:
    """Running second moment of the rotated gradient.

    beta2 = 0 reproduces the instantaneous definition D_i = |g_i|^(-1) on
    the current batch (up to the eps guard). No bias correction; the
    first-moment coefficient is fixed at zero.
    """

    beta2: float
    eps: float = 0.0
    v: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.beta2 < 1.0:
            raise RejectedInputError("beta2 must be in [0, 1)")
        if self.eps < 0.0:
            raise RejectedInputError("eps must be nonnegative")


@dataclass
class GnScaling:
    """Curvature-power scaling D_i = (m_i + eps)^power."""

    power: float
    eps: float = 0.0

    def __post_init__(self):
        if self.power not in GN_POWERS:
            raise RejectedInputError(f"power must be one of {GN_POWERS}")
        if self.eps < 0.0:
            raise RejectedInputError("eps must be nonnegative")


@dataclass
class LrSchedule:
    """Constant learning rate or halving every ``halve_every`` steps."""

    kind: str
    eta0: float
    halve_every: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "step_decay"):
            raise RejectedInputError(f"unknown schedule kind {self.kind!r}")
        if self.eta0 <= 0.0:
            raise RejectedInputError("eta0 must be positive")
        if self.halve_every < 1:
            raise RejectedInputError("halve_every must be >= 1")


def schedule_lr(s: LrSchedule, t: int) -> float:
    if t < 0:
        raise RejectedInputError("step index must be nonnegative")
    if s.kind == "constant":
        return s.eta0
    return s.eta0 * 2.0 ** (-(t // s.halve_every))


def estimate_basis(gn, kind: str, alpha: float | None = None):
    """Build a basis from curvature.

    kind 'identity' ignores the curvature values; 'eigen' eigendecomposes a
    dense symmetric curvature; 'kron_eigen' eigendecomposes each layer's
    factors; 'interp' moves the eigenbasis (or each factor basis) a
    fraction ``alpha`` along the geodesic from the identity.
    """
    if kind == "identity":
        return IdentityBasis(_curvature_dim(gn))
    if kind == "eigen":
        if not isinstance(gn, SymMatrix):
            raise RejectedInputError("kind 'eigen' needs a dense symmetric curvature")
        evals, u = sym_eig(gn)
        _check_psd_evals(evals)
        return EigenBasis(u)
    if kind == "kron_eigen":
        return _kron_basis(gn, alpha=None)
    if kind == "interp":
        if alpha is None:
            raise RejectedInputError("kind 'interp' needs alpha")
        if isinstance(gn, SymMatrix):
            _, u = sym_eig(gn)
            return EigenBasis(geodesic_interp(_ensure_rotation(u), alpha))
        return _kron_basis(gn, alpha=alpha)
    raise RejectedInputError(f"unknown basis kind {kind!r}")


def _kron_basis(gn: KronFactorSet, alpha: float | None) -> KronEigenBasis:
    if not isinstance(gn, KronFactorSet):
        raise RejectedInputError("kind 'kron_eigen' needs per-layer factors")
    layers = []
    for layer in gn:
        if layer.diag is not None:
            layers.append((layer, None))
            continue
        _, pair = kron_eigenbasis(layer.kron)
        if alpha is not None:
            ul = geodesic_interp(_ensure_rotation(pair.u_left), alpha)
            ur = geodesic_interp(_ensure_rotation(pair.u_right), alpha)
            pair = KronEigenPair(ul, ur, pair.evals_left, pair.evals_right)
        layers.append((layer, pair))
    return KronEigenBasis(layers, gn.total_dim)


def _ensure_rotation(u: OrthoMatrix) -> OrthoMatrix:
    """Flip the first column's sign if U is a reflection. Column signs never
    change the preconditioner U D U^T, but the matrix log needs det = +1."""
    sign, _ = np.linalg.slogdet(u.mat)
    if sign > 0:
        return u
    flipped = u.mat.copy()
    flipped[:, 0] = -flipped[:, 0]
    return OrthoMatrix(flipped)


def _curvature_dim(gn) -> int:
    if isinstance(gn, SymMatrix):
        return gn.dim
    if isinstance(gn, KronFactorSet):
        return gn.total_dim
    raise RejectedInputError("curvature must be SymMatrix or KronFactorSet")


def _check_psd_evals(evals: np.ndarray):
    if evals[0] < -CURVATURE_TOL * max(1.0, float(evals[-1])):
        raise RejectedInputError("curvature must be PSD")


def rotate(g: np.ndarray, basis) -> np.ndarray:
    """Rotated gradient U^T g (layer-wise for Kronecker bases)."""
    return basis.rotate(g)


def unrotate(g_rot: np.ndarray, basis) -> np.ndarray:
    return basis.unrotate(g_rot)


def adam_diag(state: AdamMoment, g_rot: np.ndarray) -> tuple[np.ndarray, AdamMoment]:
    """Update the running squared-gradient moment and return the scaling.

    v <- beta2 v + (1 - beta2) g_rot^2, D = (v + eps)^(-1/2). Coordinates
    where v + eps is zero scale to +inf; the eps guard is the caller's
    responsibility when exact zeros are possible.
    """
    g_rot = np.asarray(g_rot, dtype=float)
    if state.v is None:
        state.v = np.zeros_like(g_rot)
    elif state.v.shape != g_rot.shape:
        raise RejectedInputError("moment state does not match gradient length")
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g_rot * g_rot
    with np.errstate(divide="ignore"):
        d = (state.v + state.eps) ** -0.5
    return d, state


def gn_diag(basis, gn, power: float, eps: float = 0.0) -> np.ndarray:
    """Curvature-power scaling D_i = (u_i^T H u_i + eps)^power.

    In the eigenbasis the quadratic forms are the eigenvalues; in the
    identity basis they are the curvature diagonal; Kronecker bases use
    products of per-factor forms.
    """
    if power not in GN_POWERS:
        raise RejectedInputError(f"power must be one of {GN_POWERS}")
    m = basis.curvature_diagonal(gn)
    floor = -CURVATURE_TOL * max(1.0, float(np.max(m, initial=0.0)))
    if np.min(m) < floor:
        raise InvalidCurvatureError(
            f"negative curvature diagonal beyond tolerance: {np.min(m):.3e}"
        )
    m = np.maximum(m, 0.0)
    with np.errstate(divide="ignore"):
        return (m + eps) ** power


def scaled_direction(g_rot: np.ndarray, d) -> np.ndarray:
    """D (*) g_rot with the sign(0) = 0 convention: an exactly-zero gradient
    coordinate contributes no step even when its scaling is infinite
    (unregularized scaling at a stationary coordinate)."""
    out = d * g_rot
    if np.shape(out):
        zero = g_rot == 0.0
        if np.any(zero):
            out = np.where(zero, 0.0, out)
    return out


def step(theta: np.ndarray, g: np.ndarray, basis, d: np.ndarray, eta: float) -> np.ndarray:
    """One preconditioned update theta - eta * U (D (*) U^T g)."""
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(g, dtype=float)
    if theta.shape != g.shape:
        raise RejectedInputError("theta and gradient shapes differ")
    g_rot = basis.rotate(g)
    if np.shape(d) not in ((), g_rot.shape):
        raise RejectedInputError("scaling length does not match gradient")
    return theta - eta * basis.unrotate(scaled_direction(g_rot, d))
