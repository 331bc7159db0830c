"""Closed-form oracles for the optimizer's convergence behavior.

Everything here is exact arithmetic on small matrices: the Gaussian
fourth-moment identity for gradient second moments, the resulting
sandwich between loss-scaled covariance and the empirical Fisher, rate
and condition-number quantities for general preconditioners, the
one-dimensional regularized curvature-inverse update map with its
divergence threshold, and the local contraction factor of that update at
an optimum.

All functions are pure; randomized checks live in the test-suite and take
explicit seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import RejectedInputError, SymMatrix, sym_eig
from .models import sigmoid

__all__ = [
    "DIVERGENCE_C",
    "SandwichReport",
    "RatioReport",
    "wick_second_moment",
    "check_fisher_sandwich",
    "rate_bound",
    "gn1_expected_loss_factor",
    "optimal_general_lr",
    "condition_ratio",
    "gn_1d_map",
    "gn_1d_orbit",
    "divergence_threshold",
    "calibrate_divergence_constant",
    "contraction_factor",
    "adam_gn_ratio_check",
]

PSD_SLACK_TOL = 1e-10

# Calibrated constant for divergence_threshold: smallest multiplier (rounded
# up) for which every tested step size above c * sqrt(log 1/theta0) *
# (theta0 + eps/theta0) makes the one-dimensional curvature-inverse update
# diverge geometrically (factor sqrt(2) per step from t = 1) across the
# calibration grid p in {0.6, 0.7, 0.8}, theta0 in {0.05, 0.1, 0.3},
# eps in {0, 1e-4}. Recomputed by calibrate_divergence_constant().
DIVERGENCE_C = 8.0


def wick_second_moment(sigma: SymMatrix, w: SymMatrix) -> SymMatrix:
    """E[g g^T] for g = (x^T W x structured) quadratic-loss gradients.

    For x ~ N(0, Sigma) and g(x) = (delta^T x) x with W = delta delta^T
    (any PSD W works), the Gaussian fourth-moment identity gives
    E[g g^T] = 2 Sigma W Sigma + tr(Sigma W) Sigma.
    """
    if sigma.dim != w.dim:
        raise RejectedInputError("dimension mismatch")
    sw = sigma.mat @ w.mat
    return SymMatrix(2.0 * sw @ sigma.mat + np.trace(sw) * sigma.mat)


@dataclass
class SandwichReport:
    """PSD slack of loss * Sigma <= 0.5 E[g g^T] <= 3 loss * Sigma."""

    lower_ok: bool
    upper_ok: bool
    min_slack_lower: float
    min_slack_upper: float
    loss: float


def check_fisher_sandwich(
    sigma: SymMatrix, theta, theta_star, tol: float = PSD_SLACK_TOL
) -> SandwichReport:
    """Check the two-sided bound between the gradient second moment and the
    loss-scaled covariance, exactly via the closed-form second moment."""
    delta = np.asarray(theta, dtype=float) - np.asarray(theta_star, dtype=float)
    w = SymMatrix(np.outer(delta, delta))
    loss = 0.5 * float(delta @ sigma.mat @ delta)
    m = wick_second_moment(sigma, w)
    lower = 0.5 * m.mat - loss * sigma.mat
    upper = 3.0 * loss * sigma.mat - 0.5 * m.mat
    min_lower = float(np.linalg.eigvalsh(lower)[0])
    min_upper = float(np.linalg.eigvalsh(upper)[0])
    return SandwichReport(
        lower_ok=min_lower >= -tol,
        upper_ok=min_upper >= -tol,
        min_slack_lower=min_lower,
        min_slack_upper=min_upper,
        loss=loss,
    )


def rate_bound(precond: SymMatrix, sigma: SymMatrix) -> tuple[SymMatrix, float, float]:
    """Preconditioned curvature A = P^(1/2) Sigma P^(1/2), the single-sample
    expected-loss factor 1 - lambda_min(A) / (3 tr A), and
    kappa_s = tr(A) / lambda_min(A) (>= dim, with equality iff A is a
    multiple of the identity)."""
    if precond.dim != sigma.dim:
        raise RejectedInputError("dimension mismatch")
    evals, u = sym_eig(precond)
    if evals[0] <= 0.0:
        raise RejectedInputError("preconditioner must be positive definite")
    root = u.mat @ (np.sqrt(evals)[:, None] * u.mat.T)
    a = SymMatrix(root @ sigma.mat @ root)
    a_evals = np.linalg.eigvalsh(a.mat)
    lam_min = float(a_evals[0])
    trace = float(np.trace(a.mat))
    if lam_min <= 0.0:
        raise RejectedInputError("preconditioned curvature must be positive definite")
    factor = 1.0 - lam_min / (3.0 * trace)
    kappa_s = trace / lam_min
    return a, factor, kappa_s


def gn1_expected_loss_factor(d: int, eta: float) -> float:
    """Stated per-step expected-loss factor 1 - 2 eta + 2 eta^2 (d + 1) for
    single-sample curvature-inverse updates on a quadratic in the correct
    basis."""
    if d < 1:
        raise RejectedInputError("d must be >= 1")
    if eta < 0.0:
        raise RejectedInputError("eta must be nonnegative")
    return 1.0 - 2.0 * eta + 2.0 * eta * eta * (d + 1)


def optimal_general_lr(a: SymMatrix) -> float:
    """Step size 1 / (2 lambda_max(A) + tr(A)) maximizing the single-sample
    contraction rate for preconditioned curvature A."""
    evals = np.linalg.eigvalsh(a.mat)
    lam_max = float(evals[-1])
    trace = float(np.trace(a.mat))
    if lam_max <= 0.0 or trace <= 0.0:
        raise RejectedInputError("matrix must be PSD and nonzero")
    return 1.0 / (2.0 * lam_max + trace)


def condition_ratio(sigma: SymMatrix) -> float:
    """Ratio of preconditioned condition numbers for the two curvature powers.

    r = kappa(A(diag(Sigma)^-1)) / kappa(A(diag(Sigma)^-1/2)) with
    A(P) = P^(1/2) Sigma P^(1/2) and kappa = lambda_max / lambda_min.
    r > 1 means the -1/2 power yields the better-conditioned system.
    """
    diag = np.diag(sigma.mat)
    if np.any(diag <= 0.0):
        raise RejectedInputError("covariance diagonal must be positive")

    def kappa(power: float) -> float:
        root = diag ** (power / 2.0)
        a = root[:, None] * sigma.mat * root[None, :]
        evals = np.linalg.eigvalsh(a)
        if evals[0] <= 0.0:
            raise RejectedInputError("covariance must be positive definite")
        return float(evals[-1] / evals[0])

    return kappa(-1.0) / kappa(-0.5)


def gn_1d_map(theta: float, eta: float, eps: float, p: float) -> float:
    """One step of the regularized curvature-inverse update in one dimension:

    M(theta) = theta - eta * 2 theta (sigma(theta^2) - p)
                        / (4 theta^2 sigma(theta^2)(1 - sigma(theta^2)) + eps).
    """
    if eps == 0.0 and theta == 0.0:
        raise RejectedInputError("map is singular at theta = 0 with eps = 0")
    z = theta * theta
    s = sigmoid(z)
    num = 2.0 * theta * (s - p)
    den = 4.0 * z * s * (1.0 - s) + eps
    return theta - eta * num / den


def gn_1d_orbit(theta0: float, eta: float, eps: float, p: float, steps: int) -> np.ndarray:
    """Iterates [theta_0, ..., theta_steps] of gn_1d_map with constant eta.

    Stops early once the iterate stops being finite.
    """
    out = np.empty(steps + 1)
    out[0] = theta0
    t = theta0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for i in range(1, steps + 1):
            t = gn_1d_map(t, eta, eps, p)
            out[i] = t
            if not np.isfinite(t):
                return out[: i + 1]
    return out


def divergence_threshold(theta0: float, eps: float, c: float) -> float:
    """Step-size level c * sqrt(log 1/theta0) * (theta0 + eps/theta0) above
    which the one-dimensional update diverges geometrically.

    Valid for 0 < theta0 with sigma(theta0^2) <= 0.55.
    """
    if c <= 0.0:
        raise RejectedInputError("c must be positive")
    if theta0 <= 0.0 or sigmoid(theta0 * theta0) > 0.55:
        raise RejectedInputError("theta0 out of the threshold's validity range")
    if eps < 0.0:
        raise RejectedInputError("eps must be nonnegative")
    return c * np.sqrt(np.log(1.0 / theta0)) * (theta0 + eps / theta0)


def _diverges_geometrically(theta0, eta, eps, p, lo_t=1, hi_t=10) -> bool:
    """True when |theta_{t+1}| >= sqrt(2) |theta_t| for all t in [lo_t, hi_t]."""
    orbit = gn_1d_orbit(theta0, eta, eps, p, hi_t + 1)
    if not np.all(np.isfinite(orbit)):
        return True  # reached overflow: diverged faster than the check needs
    mags = np.abs(orbit)
    ratios = mags[lo_t + 1 :] / mags[lo_t:-1]
    return bool(np.all(ratios >= np.sqrt(2.0) - 1e-12))


def calibrate_divergence_constant(
    ps=(0.6, 0.7, 0.8),
    theta0s=(0.05, 0.1, 0.3),
    epss=(0.0, 1e-4),
    candidates=None,
    confirm_multipliers=(1.0, 2.0, 8.0, 64.0, 1024.0),
) -> float:
    """Smallest constant on the calibration grid such that every confirmed
    multiple of the threshold step size diverges geometrically.

    For each grid point the smallest qualifying candidate c is the one
    whose threshold, scaled by every confirmation multiplier, produces
    geometric divergence; the calibrated constant is the max over the grid.
    """
    if candidates is None:
        candidates = [0.25 * 2.0 ** (k / 4.0) for k in range(0, 40)]
    worst = 0.0
    for p in ps:
        for theta0 in theta0s:
            for eps in epss:
                base = divergence_threshold(theta0, eps, 1.0)
                point_c = None
                # Walk candidates from the top so the suffix property
                # (all larger c diverge too) holds by construction.
                for c in sorted(candidates, reverse=True):
                    ok = all(
                        _diverges_geometrically(theta0, mult * c * base, eps, p)
                        for mult in confirm_multipliers
                    )
                    if ok:
                        point_c = c
                    else:
                        break
                if point_c is None:
                    raise RejectedInputError(
                        f"no candidate constant diverges at grid point "
                        f"(p={p}, theta0={theta0}, eps={eps})"
                    )
                worst = max(worst, point_c)
    return worst


def contraction_factor(gn_star: SymMatrix, nu, eta_inf: float, eps: float) -> float:
    """Spectral radius of the linearized regularized curvature-inverse update
    at the optimum: max_i |1 - eta_inf * lam_i / (lam_i + eps / nu_i)|.

    ``gn_star`` must be diagonal (its entries are the curvature eigenvalues
    at the optimum). Coordinates with lam_i = 0 and eps = 0 contribute no
    contraction (ratio 0).
    """
    mat = gn_star.mat
    if np.max(np.abs(mat - np.diag(np.diag(mat))), initial=0.0) > 1e-12:
        raise RejectedInputError("gn_star must be diagonal")
    lam = np.diag(mat)
    nu = np.asarray(nu, dtype=float)
    if nu.shape != lam.shape or np.any(nu <= 0.0):
        raise RejectedInputError("nu must be positive and match gn_star")
    if np.any(lam < 0.0):
        raise RejectedInputError("gn_star must be PSD")
    den = lam + eps / nu
    ratio = np.divide(lam, den, out=np.zeros_like(lam), where=den > 0.0)
    return float(np.max(np.abs(1.0 - eta_inf * ratio)))


@dataclass
class RatioReport:
    """Per-coordinate bounds between the half-second-moment scaling and the
    covariance-root scaling, in a common basis.

    With m_i = u_i^T E[g g^T] u_i and s_i = u_i^T Sigma u_i, checks
    (3 loss)^(-1/2) s_i^(-1/2) <= (m_i / 2)^(-1/2) <= loss^(-1/2) s_i^(-1/2),
    which is the sandwich bound read coordinate-wise through the scalings.
    """

    lower_ok: bool
    upper_ok: bool
    min_slack_lower: float
    min_slack_upper: float
    loss: float


def adam_gn_ratio_check(
    sigma: SymMatrix, theta, theta_star, basis, tol: float = PSD_SLACK_TOL
) -> RatioReport:
    """Compare the exact-expectation Adam scaling against the covariance-root
    scaling coordinate-by-coordinate in the given basis."""
    delta = np.asarray(theta, dtype=float) - np.asarray(theta_star, dtype=float)
    loss = 0.5 * float(delta @ sigma.mat @ delta)
    if loss <= 0.0:
        raise RejectedInputError("degenerate instance: loss is zero at theta")
    m = wick_second_moment(sigma, SymMatrix(np.outer(delta, delta)))
    m_diag = basis.curvature_diagonal(m)
    s_diag = basis.curvature_diagonal(sigma)
    d_adam_half = (0.5 * m_diag) ** -0.5
    d_gn_half_power = s_diag**-0.5
    lower = d_adam_half - d_gn_half_power / np.sqrt(3.0 * loss)
    upper = d_gn_half_power / np.sqrt(loss) - d_adam_half
    return RatioReport(
        lower_ok=bool(np.min(lower) >= -tol),
        upper_ok=bool(np.min(upper) >= -tol),
        min_slack_lower=float(np.min(lower)),
        min_slack_upper=float(np.min(upper)),
        loss=loss,
    )
