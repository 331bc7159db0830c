"""Model families with exact losses, gradients, and curvature.

Three families:

* linear regression under Gaussian inputs (quadratic loss), where the
  Gauss-Newton matrix is the input covariance;
* a square-reparameterized per-coordinate logistic model over one-hot
  inputs, whose Gauss-Newton matrix is diagonal in closed form;
* one-hidden-layer MLPs under mean squared error, with per-layer
  Kronecker-factored gradient second moments standing in for the full
  Gauss-Newton matrix.

Models are immutable after construction; every gradient evaluation is a
pure function of (parameters, data).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import KronFactors, RejectedInputError, SymMatrix

__all__ = [
    "GradSample",
    "QuadraticModel",
    "ReparamLogisticModel",
    "MLPModel",
    "LayerFactors",
    "KronFactorSet",
    "sigmoid",
    "softplus",
]


def sigmoid(z):
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def softplus(z):
    """log(1 + exp(z)) without overflow."""
    z = np.asarray(z, dtype=float)
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return out if out.ndim else float(out)


@dataclass
class GradSample:
    """Gradient of the loss on one example (or one batch), plus its loss."""

    grad: np.ndarray
    loss: float


class QuadraticModel:
    """Linear regression f(x) = theta^T x with Gaussian inputs.

    Population loss is 0.5 * (theta - theta_star)^T cov (theta - theta_star);
    the Gauss-Newton matrix is exactly ``cov``.
    """

    def __init__(self, cov: SymMatrix, theta_star):
        theta_star = np.asarray(theta_star, dtype=float)
        if theta_star.ndim != 1 or theta_star.shape[0] != cov.dim:
            raise RejectedInputError("theta_star does not match covariance dim")
        evals = np.linalg.eigvalsh(cov.mat)
        if evals[0] < -1e-10 * max(1.0, float(evals[-1])):
            raise RejectedInputError("covariance must be PSD")
        self.cov = cov
        self.theta_star = theta_star

    @property
    def dim(self) -> int:
        return self.cov.dim

    def loss(self, theta) -> float:
        delta = np.asarray(theta, dtype=float) - self.theta_star
        return 0.5 * float(delta @ self.cov.mat @ delta)

    def population_grad(self, theta) -> tuple[float, np.ndarray]:
        """Exact gradient cov @ (theta - theta_star) and its loss."""
        delta = np.asarray(theta, dtype=float) - self.theta_star
        if delta.shape[0] != self.dim:
            raise RejectedInputError("theta does not match covariance dim")
        g = self.cov.mat @ delta
        return 0.5 * float(delta @ g), g

    def sample_grad(self, theta, x) -> GradSample:
        """Single-sample gradient ((theta - theta_star)^T x) * x."""
        delta = np.asarray(theta, dtype=float) - self.theta_star
        x = np.asarray(x, dtype=float)
        if x.shape != delta.shape:
            raise RejectedInputError("sample does not match parameter dim")
        c = float(delta @ x)
        return GradSample(grad=c * x, loss=0.5 * c * c)

    def batch_grad(self, theta, xs: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean loss and gradient over the rows of ``xs``."""
        delta = np.asarray(theta, dtype=float) - self.theta_star
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        if xs.shape[1] != self.dim:
            raise RejectedInputError("batch does not match parameter dim")
        c = xs @ delta
        loss = 0.5 * float(np.mean(c * c))
        grad = xs.T @ c / xs.shape[0]
        return loss, grad

    def gn(self) -> SymMatrix:
        return self.cov


class ReparamLogisticModel:
    """Per-coordinate logistic model with squared weights.

    Inputs are one-hot vectors e_i with probabilities nu_i; conditional on
    e_i the binary label has mean p[i]. The model predicts
    sigma(theta_i^2), so the population gradient and the (diagonal)
    Gauss-Newton matrix have one closed-form entry per coordinate.
    """

    P_RANGE = (0.6, 0.8)

    def __init__(self, nu, p, *, allow_p_outside_range: bool = False):
        nu = np.asarray(nu, dtype=float)
        p = np.asarray(p, dtype=float)
        if nu.ndim != 1 or p.shape != nu.shape:
            raise RejectedInputError("nu and p must be 1-D with equal length")
        if abs(float(nu.sum()) - 1.0) > 1e-12:
            raise RejectedInputError("nu must sum to 1 within 1e-12")
        if np.any(nu <= 0):
            raise RejectedInputError("all nu entries must be positive")
        lo, hi = self.P_RANGE
        if not allow_p_outside_range and (np.any(p < lo) or np.any(p > hi)):
            raise RejectedInputError(
                f"label probabilities outside [{lo}, {hi}]; "
                "pass allow_p_outside_range=True to override"
            )
        self.nu = nu
        self.p = p

    @property
    def dim(self) -> int:
        return self.nu.shape[0]

    def kappa_nu(self) -> float:
        return float(self.nu.max() / self.nu.min())

    def optimum(self) -> np.ndarray:
        """Positive parameter vector with sigma(theta_i^2) = p_i."""
        return np.sqrt(np.log(self.p / (1.0 - self.p)))

    def loss(self, theta) -> float:
        z = np.asarray(theta, dtype=float) ** 2
        ce = self.p * softplus(-z) + (1.0 - self.p) * softplus(z)
        return float(self.nu @ ce)

    def loss_grad(self, theta) -> tuple[float, np.ndarray]:
        """Population cross-entropy and its gradient 2 nu theta (sigma - p)."""
        theta = np.asarray(theta, dtype=float)
        z = theta**2
        s = sigmoid(z)
        grad = 2.0 * self.nu * theta * (s - self.p)
        ce = self.p * softplus(-z) + (1.0 - self.p) * softplus(z)
        return float(self.nu @ ce), grad

    def gn_diag_vector(self, theta) -> np.ndarray:
        """Diagonal of the Gauss-Newton matrix: 4 nu theta^2 sigma (1 - sigma)."""
        theta = np.asarray(theta, dtype=float)
        z = theta**2
        s = sigmoid(z)
        return 4.0 * self.nu * z * s * (1.0 - s)

    def gn_diag(self, theta) -> SymMatrix:
        return SymMatrix(np.diag(self.gn_diag_vector(theta)))

    def sample_grad(self, theta, i: int, y: int) -> GradSample:
        """Gradient of the single-sample cross-entropy at input e_i, label y."""
        theta = np.asarray(theta, dtype=float)
        if not 0 <= i < self.dim:
            raise RejectedInputError(f"coordinate index {i} out of range")
        z = theta[i] ** 2
        s = sigmoid(z)
        grad = np.zeros(self.dim)
        grad[i] = 2.0 * theta[i] * (s - y)
        loss = y * softplus(-z) + (1 - y) * softplus(z)
        return GradSample(grad=grad, loss=float(loss))

    def batch_grad(self, theta, idx: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean single-sample loss and gradient over (idx, y) pairs."""
        theta = np.asarray(theta, dtype=float)
        idx = np.asarray(idx)
        y = np.asarray(y, dtype=float)
        z = theta[idx] ** 2
        s = sigmoid(z)
        per = 2.0 * theta[idx] * (s - y)
        grad = np.bincount(idx, weights=per, minlength=self.dim) / idx.shape[0]
        loss = float(np.mean(y * softplus(-z) + (1.0 - y) * softplus(z)))
        return loss, grad

    def gn_diag_vector_from_batch(self, theta, idx: np.ndarray) -> np.ndarray:
        """Monte-Carlo Gauss-Newton diagonal from sampled inputs (labels unused)."""
        theta = np.asarray(theta, dtype=float)
        idx = np.asarray(idx)
        z = theta[idx] ** 2
        s = sigmoid(z)
        per = 4.0 * z * s * (1.0 - s)
        return np.bincount(idx, weights=per, minlength=self.dim) / idx.shape[0]


@dataclass
class LayerFactors:
    """Curvature block for one named parameter.

    Matrix parameters carry a Kronecker (left, right) pair; vector
    parameters carry a plain second-moment diagonal.
    """

    name: str
    sl: slice
    shape: tuple
    kron: KronFactors | None = None
    diag: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class KronFactorSet:
    """Per-layer curvature blocks covering a flat parameter vector."""

    def __init__(self, layers: list[LayerFactors], total_dim: int):
        covered = sum(l.size for l in layers)
        if covered != total_dim:
            raise RejectedInputError("layer blocks do not cover the parameter vector")
        self.layers = layers
        self.total_dim = total_dim

    def __iter__(self):
        return iter(self.layers)


class MLPModel:
    """One-hidden-layer perceptron y = A sigma(W x + b) under 0.5 * MSE.

    ``w`` has shape (hidden, d_in); ``a`` has shape (d_out, hidden) with
    d_out = 1 for scalar targets; ``b`` has shape (hidden,). The flat
    parameter layout is [w, a, b]. Construction parameters are the initial
    point; evaluation methods take an explicit flat parameter vector.

    ReLU uses subgradient 0 at 0.
    """

    def __init__(self, w, a, b, activation: str = "relu"):
        w = np.asarray(w, dtype=float)
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.asarray(b, dtype=float)
        if activation not in ("relu", "identity"):
            raise RejectedInputError(f"unknown activation {activation!r}")
        hidden, d_in = w.shape
        if a.shape[1] != hidden or b.shape != (hidden,):
            raise RejectedInputError("inconsistent parameter shapes")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise RejectedInputError("parameters must be finite")
        self.hidden = hidden
        self.d_in = d_in
        self.d_out = a.shape[0]
        self.activation = activation
        self._shapes = {"w": (hidden, d_in), "a": (self.d_out, hidden), "b": (hidden,)}
        sizes = {k: int(np.prod(s)) for k, s in self._shapes.items()}
        offs = np.cumsum([0, sizes["w"], sizes["a"], sizes["b"]])
        self._slices = {
            "w": slice(offs[0], offs[1]),
            "a": slice(offs[1], offs[2]),
            "b": slice(offs[2], offs[3]),
        }
        self.n_params = int(offs[3])
        self.init_theta = self.pack(w, a, b)

    def pack(self, w, a, b) -> np.ndarray:
        return np.concatenate(
            [np.ravel(w), np.ravel(np.atleast_2d(a)), np.ravel(b)]
        ).astype(float)

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise RejectedInputError("flat parameter vector has wrong length")
        w = theta[self._slices["w"]].reshape(self._shapes["w"])
        a = theta[self._slices["a"]].reshape(self._shapes["a"])
        b = theta[self._slices["b"]]
        return w, a, b

    def param_slices(self):
        return dict(self._slices)

    def param_shapes(self):
        return dict(self._shapes)

    def _act(self, z):
        if self.activation == "relu":
            return np.maximum(z, 0.0), (z > 0).astype(float)
        return z, np.ones_like(z)

    def forward(self, theta, xs) -> np.ndarray:
        w, a, b = self.unpack(theta)
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        h, _ = self._act(xs @ w.T + b)
        out = h @ a.T
        return out[:, 0] if self.d_out == 1 else out

    def forward_backward(self, theta, xs, ys) -> tuple[float, np.ndarray]:
        """Batch loss 0.5 * mean(|y_hat - y|^2) and its exact gradient."""
        w, a, b = self.unpack(theta)
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ys = np.asarray(ys, dtype=float)
        if xs.shape[0] == 0:
            raise RejectedInputError("batch must be nonempty")
        if xs.shape[1] != self.d_in:
            raise RejectedInputError("input dim mismatch")
        if self.d_out == 1:
            ys = ys.reshape(-1, 1)
        elif ys.shape != (xs.shape[0], self.d_out):
            raise RejectedInputError("label shape mismatch")
        n = xs.shape[0]
        z = xs @ w.T + b
        h, dh = self._act(z)
        out = h @ a.T
        err = out - ys
        loss = 0.5 * float(np.sum(err * err)) / n
        # Backprop; the mean over the batch divides every gradient by n.
        ga = err.T @ h / n
        du = (err @ a) * dh
        gw = du.T @ xs / n
        gb = du.sum(axis=0) / n
        return loss, self.pack(gw, ga, gb)

    def gn_kron(self, theta, xs, ys) -> KronFactorSet:
        """Per-layer second moments of per-sample gradients.

        Matrix parameters get (E[G G^T], E[G^T G]) with the right factor
        normalized to unit trace so the Kronecker product keeps the trace
        of the empirical second moment; vector parameters get a plain
        per-coordinate second-moment diagonal.
        """
        w, a, b = self.unpack(theta)
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ys = np.asarray(ys, dtype=float)
        if xs.shape[0] == 0:
            raise RejectedInputError("batch must be nonempty")
        if self.d_out == 1:
            ys = ys.reshape(-1, 1)
        n = xs.shape[0]
        z = xs @ w.T + b
        h, dh = self._act(z)
        err = (h @ a.T) - ys
        # Per-sample W-gradient is u x^T with u = (a^T err) * act'(z); rank one,
        # so both factor moments reduce to weighted Gram matrices.
        u = (err @ a) * dh
        x_sq = np.sum(xs * xs, axis=1)
        u_sq = np.sum(u * u, axis=1)
        left_w = (u * x_sq[:, None]).T @ u / n
        right_w = (xs * u_sq[:, None]).T @ xs / n

        layers = []
        layers.append(
            LayerFactors(
                name="w",
                sl=self._slices["w"],
                shape=self._shapes["w"],
                kron=_normalized_kron(left_w, right_w),
            )
        )
        if self.d_out == 1:
            ga = err * h  # per-sample gradient of the single output row
            layers.append(
                LayerFactors(
                    name="a",
                    sl=self._slices["a"],
                    shape=self._shapes["a"],
                    diag=np.mean(ga * ga, axis=0),
                )
            )
        else:
            h_sq = np.sum(h * h, axis=1)
            e_sq = np.sum(err * err, axis=1)
            left_a = (err * h_sq[:, None]).T @ err / n
            right_a = (h * e_sq[:, None]).T @ h / n
            layers.append(
                LayerFactors(
                    name="a",
                    sl=self._slices["a"],
                    shape=self._shapes["a"],
                    kron=_normalized_kron(left_a, right_a),
                )
            )
        layers.append(
            LayerFactors(
                name="b",
                sl=self._slices["b"],
                shape=self._shapes["b"],
                diag=np.mean(u * u, axis=0),
            )
        )
        return KronFactorSet(layers, self.n_params)


def _normalized_kron(left: np.ndarray, right: np.ndarray) -> KronFactors:
    """Unit-trace right factor, so tr(left (x) right) equals tr(left), the
    trace of the empirical gradient second moment for this block."""
    tr = float(np.trace(right))
    if tr > 0.0:
        right = right / tr
    return KronFactors(SymMatrix(left), SymMatrix(right))
