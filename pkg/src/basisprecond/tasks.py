"""Deterministic, seeded generators for the experimental settings, plus an
optional CIFAR-10 binary loader.

Every generator is a pure function of its parameters and seed. Task
objects expose a uniform surface to the harness: population loss/gradient
and curvature where closed forms exist, batched sampling otherwise.
Samplers draw from an externally supplied numpy Generator so that runs own
their random streams.
"""

from __future__ import annotations

import os

import numpy as np

from . import theory
from .linalg import RejectedInputError, SymMatrix, sym_eig
from .models import KronFactorSet, MLPModel, QuadraticModel, ReparamLogisticModel

__all__ = [
    "SearchBudgetError",
    "TaskInstance",
    "QuadraticTask",
    "LogisticTask",
    "MlpTask",
    "gen_block_covariance",
    "gen_random_quadratic",
    "search_power_covariance",
    "gen_powerlaw_logistic",
    "gen_parity",
    "gen_staircase",
    "gen_teacher_student",
    "load_cifar10_binary",
    "make_task",
    "TASK_GENERATORS",
]

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes
CIFAR_CLASSES = 10


class SearchBudgetError(RuntimeError):
    """Random search exhausted its trial budget without a qualifying draw."""


class TaskInstance:
    """One experimental setting: a model, a seeded sampler, and metadata.

    ``optimum`` is the known minimizer when there is one (population
    gradient zero there); ``gn_constant`` marks curvature that does not
    depend on the iterate, letting callers reuse a single basis.
    """

    def __init__(self, name, model, theta0, optimum=None, gn_constant=False, meta=None):
        self.name = name
        self.model = model
        self.theta0 = np.asarray(theta0, dtype=float)
        self.optimum = None if optimum is None else np.asarray(optimum, dtype=float)
        self.gn_constant = gn_constant
        self.meta = dict(meta or {})

    @property
    def dim(self) -> int:
        return self.theta0.shape[0]

    # Concrete tasks override the surface below.
    def population_loss_grad(self, theta):
        """(loss, grad) under the data distribution, or None if unavailable."""
        return None

    def sample_batch(self, rng: np.random.Generator, n: int):
        raise NotImplementedError

    def batch_loss_grad(self, theta, batch):
        raise NotImplementedError

    def population_gn(self, theta):
        """Closed-form curvature at theta, or None if unavailable."""
        return None

    def gn_from_batch(self, theta, batch):
        raise NotImplementedError


class QuadraticTask(TaskInstance):
    def __init__(self, name, model: QuadraticModel, theta0=None, meta=None):
        if theta0 is None:
            theta0 = np.zeros(model.dim)
        super().__init__(
            name,
            model,
            theta0,
            optimum=model.theta_star,
            gn_constant=True,
            meta=meta,
        )
        evals, u = sym_eig(model.cov)
        self._sqrt_cov = u.mat @ (np.sqrt(np.clip(evals, 0.0, None))[:, None] * u.mat.T)

    def population_loss_grad(self, theta):
        return self.model.population_grad(theta)

    def sample_batch(self, rng, n):
        z = rng.standard_normal((n, self.dim))
        return z @ self._sqrt_cov.T

    def batch_loss_grad(self, theta, batch):
        return self.model.batch_grad(theta, batch)

    def population_gn(self, theta):
        return self.model.gn()

    def gn_from_batch(self, theta, batch):
        xs = np.atleast_2d(batch)
        return SymMatrix(xs.T @ xs / xs.shape[0])


class LogisticTask(TaskInstance):
    def __init__(self, name, model: ReparamLogisticModel, theta0, meta=None):
        super().__init__(
            name,
            model,
            theta0,
            optimum=model.optimum(),
            gn_constant=False,
            meta=meta,
        )

    def population_loss_grad(self, theta):
        return self.model.loss_grad(theta)

    def sample_batch(self, rng, n):
        idx = rng.choice(self.dim, size=n, p=self.model.nu)
        y = (rng.random(n) < self.model.p[idx]).astype(float)
        return idx, y

    def batch_loss_grad(self, theta, batch):
        idx, y = batch
        return self.model.batch_grad(theta, idx, y)

    def population_gn(self, theta):
        return self.model.gn_diag(theta)

    def gn_from_batch(self, theta, batch):
        idx, _ = batch
        return SymMatrix(np.diag(self.model.gn_diag_vector_from_batch(theta, idx)))


class MlpTask(TaskInstance):
    """MLP regression against a seeded input/label source."""

    def __init__(self, name, model: MLPModel, draw_fn, optimum=None, meta=None):
        super().__init__(
            name,
            model,
            model.init_theta,
            optimum=optimum,
            gn_constant=False,
            meta=meta,
        )
        self._draw = draw_fn

    def sample_batch(self, rng, n):
        return self._draw(rng, n)

    def batch_loss_grad(self, theta, batch):
        xs, ys = batch
        return self.model.forward_backward(theta, xs, ys)

    def gn_from_batch(self, theta, batch) -> KronFactorSet:
        xs, ys = batch
        return self.model.gn_kron(theta, xs, ys)


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tag,)))


def gen_block_covariance(d_block: int, seed: int = 0) -> QuadraticTask:
    """Quadratic in 2*d_block dims whose covariance is an all-ones block next
    to an identity block. The all-ones block has one eigenvalue d_block and
    the rest zero, so its curvature is invisible on the diagonal."""
    if d_block < 2:
        raise RejectedInputError("d_block must be >= 2")
    d = 2 * d_block
    cov = np.zeros((d, d))
    cov[:d_block, :d_block] = 1.0
    cov[d_block:, d_block:] = np.eye(d_block)
    theta_star = _stream(seed, 1).standard_normal(d)
    model = QuadraticModel(SymMatrix(cov), theta_star)
    return QuadraticTask(
        f"block_covariance_d{d_block}",
        model,
        meta={"d_block": d_block, "seed": seed},
    )


def gen_random_quadratic(
    d: int, seed: int = 0, cond: float = 100.0, spectrum=None
) -> QuadraticTask:
    """Quadratic with log-spaced eigenvalues in [1, cond] and a Haar-random
    eigenbasis; positive definite, so every curvature power is usable."""
    if d < 1:
        raise RejectedInputError("d must be >= 1")
    lam = np.geomspace(1.0, cond, d) if spectrum is None else np.asarray(spectrum, float)
    if lam.shape != (d,) or np.any(lam <= 0):
        raise RejectedInputError("spectrum must be d positive values")
    rng = _stream(seed, 2)
    q = _haar_orthogonal(rng, d)
    cov = SymMatrix(q @ (lam[:, None] * q.T))
    theta_star = _stream(seed, 1).standard_normal(d)
    model = QuadraticModel(cov, theta_star)
    return QuadraticTask(
        f"random_quadratic_d{d}",
        model,
        meta={"seed": seed, "cond": cond},
    )


def _haar_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def search_power_covariance(
    d: int,
    direction: str,
    trials: int,
    seed: int = 0,
    margin: float = 0.0,
    eig_low: float = 1.0,
    eig_high: float = 100.0,
) -> QuadraticTask:
    """Random-search a covariance whose preconditioned condition numbers
    favor one curvature power.

    Fixes a log-spaced spectrum and samples Haar-random orthonormal bases
    until the condition-number ratio r crosses 1 in the requested
    direction ('half_wins': r > 1, 'one_wins': r < 1). ``margin`` demands
    r >= 1 + margin (resp. r <= 1 / (1 + margin)) for a sturdier instance.
    The achieved ratio and trial index land in the task metadata.
    """
    if d < 2:
        raise RejectedInputError("d must be >= 2")
    if trials < 1:
        raise RejectedInputError("trials must be >= 1")
    if direction not in ("half_wins", "one_wins"):
        raise RejectedInputError("direction must be 'half_wins' or 'one_wins'")
    lam = np.geomspace(eig_low, eig_high, d)
    rng = _stream(seed, 3)
    for trial in range(trials):
        q = _haar_orthogonal(rng, d)
        cov = SymMatrix(q @ (lam[:, None] * q.T))
        r = theory.condition_ratio(cov)
        if direction == "half_wins" and r >= 1.0 + margin and r > 1.0:
            break
        if direction == "one_wins" and r <= 1.0 / (1.0 + margin) and r < 1.0:
            break
    else:
        raise SearchBudgetError(
            f"no qualifying covariance found in {trials} trials ({direction})"
        )
    theta_star = _stream(seed, 1).standard_normal(d)
    model = QuadraticModel(cov, theta_star)
    return QuadraticTask(
        f"power_covariance_{direction}_d{d}",
        model,
        meta={"ratio": r, "trial": trial, "seed": seed, "direction": direction},
    )


def gen_powerlaw_logistic(
    d: int, c: float, p_const: float, allow_p_outside_range: bool = False
) -> LogisticTask:
    """Reparameterized logistic task with one-hot input probabilities
    nu_i proportional to i^(-c) and a constant label probability."""
    if d < 2:
        raise RejectedInputError("d must be >= 2")
    if c < 0:
        raise RejectedInputError("c must be >= 0")
    nu = np.arange(1, d + 1, dtype=float) ** (-c)
    nu /= nu.sum()
    p = np.full(d, float(p_const))
    model = ReparamLogisticModel(nu, p, allow_p_outside_range=allow_p_outside_range)
    theta0 = np.full(d, 1.0 / np.sqrt(d))
    return LogisticTask(
        f"powerlaw_logistic_d{d}_c{c}",
        model,
        theta0,
        meta={"c": c, "p": p_const, "kappa_nu": model.kappa_nu()},
    )


def _init_mlp(d_in: int, hidden: int, seed: int, d_out: int = 1, activation="relu") -> MLPModel:
    rng = _stream(seed, 4)
    w = rng.standard_normal((hidden, d_in)) / np.sqrt(d_in)
    a = rng.standard_normal((d_out, hidden)) / np.sqrt(hidden)
    b = np.zeros(hidden)
    return MLPModel(w, a, b, activation=activation)


def gen_parity(d: int, k: int, seed: int = 0, width: int = 128) -> MlpTask:
    """Labels are the product of a hidden size-k subset of +/-1 coordinates."""
    if not 1 <= k <= d:
        raise RejectedInputError("need 1 <= k <= d")
    support = np.sort(_stream(seed, 5).choice(d, size=k, replace=False))
    model = _init_mlp(d, width, seed)

    def draw(rng, n):
        xs = rng.integers(0, 2, size=(n, d)) * 2.0 - 1.0
        ys = np.prod(xs[:, support], axis=1)
        return xs, ys

    return MlpTask(
        f"parity_d{d}_k{k}",
        model,
        draw,
        meta={"support": support.tolist(), "seed": seed, "width": width},
    )


def gen_staircase(d: int = 21, segments=((0, 7), (7, 14), (14, 21)), seed: int = 0,
                  width: int = 128) -> MlpTask:
    """Labels are a sum of products over disjoint index segments of [0, d)."""
    segs = [(int(s), int(e)) for s, e in segments]
    used = np.zeros(d, dtype=bool)
    for s, e in segs:
        if not 0 <= s < e <= d:
            raise RejectedInputError(f"segment ({s}, {e}) out of range")
        if used[s:e].any():
            raise RejectedInputError("segments overlap")
        used[s:e] = True
    model = _init_mlp(d, width, seed)

    def draw(rng, n):
        xs = rng.integers(0, 2, size=(n, d)) * 2.0 - 1.0
        ys = np.zeros(n)
        for s, e in segs:
            ys += np.prod(xs[:, s:e], axis=1)
        return xs, ys

    return MlpTask(
        f"staircase_d{d}_k{len(segs)}",
        model,
        draw,
        meta={"segments": segs, "seed": seed, "width": width},
    )


def gen_teacher_student(d: int, m_teacher: int, seed: int = 0) -> MlpTask:
    """Student (twice the teacher's width) regresses onto a frozen random
    teacher's outputs under Gaussian inputs with a random covariance."""
    if d < 1 or m_teacher < 1:
        raise RejectedInputError("dims must be >= 1")
    rng = _stream(seed, 6)
    a_mat = rng.standard_normal((d, d)) / np.sqrt(d)
    sqrt_cov = a_mat  # inputs are a_mat @ z, so the covariance is a_mat a_mat^T
    w_t = rng.standard_normal((m_teacher, d)) / np.sqrt(d)
    a_t = rng.standard_normal((1, m_teacher)) / np.sqrt(m_teacher)
    b_t = rng.standard_normal(m_teacher) * 0.1
    teacher = MLPModel(w_t, a_t, b_t, activation="relu")

    width = 2 * m_teacher
    student = _init_mlp(d, width, seed)

    # Embedding the teacher into the twice-as-wide student (zero padding)
    # realizes the labels exactly, so it is a known optimum.
    w_opt = np.zeros((width, d))
    w_opt[:m_teacher] = w_t
    a_opt = np.zeros((1, width))
    a_opt[0, :m_teacher] = a_t[0]
    b_opt = np.zeros(width)
    b_opt[:m_teacher] = b_t
    optimum = student.pack(w_opt, a_opt, b_opt)

    def draw(rng_, n):
        xs = rng_.standard_normal((n, d)) @ sqrt_cov.T
        ys = teacher.forward(teacher.init_theta, xs)
        return xs, ys

    return MlpTask(
        f"teacher_d{d}_m{m_teacher}",
        student,
        draw,
        optimum=optimum,
        meta={"seed": seed, "teacher_width": m_teacher, "width": width},
    )


def load_cifar10_binary(path, width: int = 128, seed: int = 0, limit: int | None = None) -> MlpTask:
    """Load a CIFAR-10 binary batch file into an MLP task.

    Records are 3073 bytes: one label byte then 3072 pixel bytes. Pixels
    are scaled to [0, 1]; labels become 10-dimensional one-hot targets
    under squared error.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"CIFAR-10 binary file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise RejectedInputError(
            f"malformed CIFAR-10 file {path}: size {raw.size} is not a "
            f"multiple of {CIFAR_RECORD_BYTES}"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0].astype(np.int64)
    if np.any(labels >= CIFAR_CLASSES):
        raise RejectedInputError(f"malformed CIFAR-10 file {path}: label byte > 9")
    xs = records[:, 1:].astype(float) / 255.0
    ys = np.zeros((records.shape[0], CIFAR_CLASSES))
    ys[np.arange(records.shape[0]), labels] = 1.0
    model = _init_mlp(xs.shape[1], width, seed, d_out=CIFAR_CLASSES)

    def draw(rng, n):
        idx = rng.integers(0, xs.shape[0], size=n)
        return xs[idx], ys[idx]

    return MlpTask(
        "cifar10",
        model,
        draw,
        meta={"path": str(path), "records": int(records.shape[0]), "width": width},
    )


TASK_GENERATORS = {
    "block_covariance": gen_block_covariance,
    "random_quadratic": gen_random_quadratic,
    "power_covariance": search_power_covariance,
    "powerlaw_logistic": gen_powerlaw_logistic,
    "parity": gen_parity,
    "staircase": gen_staircase,
    "teacher": gen_teacher_student,
    "cifar10": load_cifar10_binary,
}


def make_task(name: str, **params) -> TaskInstance:
    """Build a task by registry name; parameters go to its generator."""
    try:
        gen = TASK_GENERATORS[name]
    except KeyError:
        raise RejectedInputError(
            f"unknown task {name!r}; known: {sorted(TASK_GENERATORS)}"
        ) from None
    return gen(**params)
