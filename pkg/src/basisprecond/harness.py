"""Experiment runner: seeded single runs, hyperparameter sweeps with
mean +/- standard error aggregation, CSV metric emission, and the
basis x batch-size grid experiment.

A run executes the preconditioned-update loop: sample a gradient batch,
estimate curvature on an independent batch (closed forms are used where
the task has them), build the basis, rotate, scale, step. Runs are
deterministic given (config, seed); per-run random streams derive from the
seed alone, so two configs sharing a seed see identical data and editing
one config never perturbs another's samples.

Divergence is a first-class result: the record is truncated at the first
non-finite loss or parameter and flagged, never raised.
"""

from __future__ import annotations

import hashlib
import itertools
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .linalg import RejectedInputError, SymMatrix
from .models import KronFactorSet
from .preconditioner import (
    AdamMoment,
    InvalidCurvatureError,
    LrSchedule,
    adam_diag,
    estimate_basis,
    gn_diag,
    scaled_direction,
    schedule_lr,
    step,
)
from .tasks import TaskInstance, make_task

__all__ = [
    "RunConfig",
    "TrajectoryRecord",
    "SweepResult",
    "SweepSummary",
    "run",
    "sweep",
    "emit_metrics",
    "read_metrics",
    "grid_experiment",
    "default_lr_grid",
    "smooth",
    "mean_loss_curve",
]

METRICS_HEADER = "run_id,seed,step,loss,grad_norm,dist_to_opt,lr"

# Coarse learning-rate grid at factors of 3 spanning the decades; sweeps
# refine around the winner at factors of 2.
def default_lr_grid(low: float = 1e-4, high: float = 10.0) -> list[float]:
    grid = []
    decade = low
    while decade <= high * 1.0000001:
        for m in (1.0, 3.0):
            v = decade * m
            if low * 0.9999999 <= v <= high * 1.0000001:
                grid.append(v)
        decade *= 10.0
    return grid


@dataclass(frozen=True)
class RunConfig:
    """Complete description of one run (task, basis, scaling, schedule)."""

    task: str
    task_params: tuple = ()  # sorted (key, value) pairs; see make()
    basis: str = "identity"  # identity | eigen | kron | interp
    alpha: float = 1.0  # geodesic fraction for basis='interp'
    refresh: int = 1  # curvature/basis refresh interval in steps
    precond: str = "gn"  # adam | gn | gd
    power: float = -1.0  # curvature power for precond='gn'
    beta2: float = 0.0  # moment decay for precond='adam'
    lr: float = 0.1
    schedule: str = "constant"  # constant | step_decay
    halve_every: int = 1
    eps: float = 0.0
    grad_batch: int | str = "full"
    gn_batch: int | str = "full"
    gn_fallback_batch: int = 4096  # replaces gn_batch='full' without closed form
    steps: int = 100
    seed: int = 0

    @staticmethod
    def make(task: str, task_params: dict | None = None, **kw) -> "RunConfig":
        params = tuple(sorted((task_params or {}).items()))
        return RunConfig(task=task, task_params=params, **kw)

    def task_kwargs(self) -> dict:
        return dict(self.task_params)

    def key(self) -> str:
        """Deterministic text form of every field except the seed."""
        parts = []
        for f in fields(self):
            if f.name == "seed":
                continue
            parts.append(f"{f.name}={getattr(self, f.name)!r}")
        return " ".join(parts)

    def run_id(self) -> str:
        digest = hashlib.sha1(self.key().encode()).hexdigest()[:10]
        return f"{digest}-s{self.seed}"


@dataclass
class TrajectoryRecord:
    """Per-step metrics of one seeded run."""

    run_id: str
    seed: int
    config: RunConfig
    losses: np.ndarray
    grad_norms: np.ndarray
    dists: np.ndarray
    lrs: np.ndarray
    diverged: bool = False
    diverged_at: int | None = None

    def __len__(self):
        return len(self.losses)

    @property
    def final_loss(self) -> float:
        if self.diverged or len(self.losses) == 0:
            return float("inf")
        return float(self.losses[-1])

    def steps_to_loss(self, threshold: float, initial_ratio: bool = False):
        """First step index with loss <= threshold (or <= threshold * loss_0)."""
        if len(self.losses) == 0:
            return None
        target = threshold * self.losses[0] if initial_ratio else threshold
        hits = np.nonzero(self.losses <= target)[0]
        return int(hits[0]) if hits.size else None

    def steps_to_distance(self, threshold: float):
        hits = np.nonzero(self.dists <= threshold)[0]
        return int(hits[0]) if hits.size else None


def _grad_stream(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(101,)))


def _gn_stream(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(202,)))


def _resolve_basis_kind(kind: str, gn) -> str:
    if kind in ("eigen", "kron"):
        return "eigen" if isinstance(gn, SymMatrix) else "kron_eigen"
    if kind == "identity":
        return "identity"
    if kind == "interp":
        return "interp"
    raise ValueError(f"unknown basis kind {kind!r}")


def run(config: RunConfig, task: TaskInstance | None = None) -> TrajectoryRecord:
    """Execute one seeded run of the preconditioned-update loop."""
    if task is None:
        task = make_task(config.task, **config.task_kwargs())
    rng_grad = _grad_stream(config.seed)
    rng_gn = _gn_stream(config.seed)
    sched = LrSchedule(config.schedule, config.lr, config.halve_every)
    theta = task.theta0.copy()
    adam_state = AdamMoment(config.beta2, config.eps) if config.precond == "adam" else None
    if config.precond not in ("adam", "gn", "gd"):
        raise ValueError(f"unknown preconditioner {config.precond!r}")

    has_population = task.population_loss_grad(theta) is not None
    full_grad = config.grad_batch == "full" and has_population
    grad_batch = None if full_grad else _batch_size(config.grad_batch, config, task)
    basis = None
    gn_scale = None
    # Constant curvature with a closed form never needs re-estimation.
    static_curvature = task.gn_constant and config.gn_batch == "full" and has_population

    losses, grad_norms, dists, lrs = [], [], [], []
    diverged = False
    diverged_at = None

    with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
        for t in range(config.steps):
            eta = schedule_lr(sched, t)
            if full_grad:
                loss, g = task.population_loss_grad(theta)
                record_loss = loss
            else:
                batch = task.sample_batch(rng_grad, grad_batch)
                loss, g = task.batch_loss_grad(theta, batch)
                pop = task.population_loss_grad(theta)
                record_loss = pop[0] if pop is not None else loss

            if not np.isfinite(record_loss) or not np.all(np.isfinite(g)):
                diverged, diverged_at = True, t
                break

            if basis is None or (not static_curvature and t % config.refresh == 0):
                try:
                    gn = _estimate_gn(task, theta, config, rng_gn, has_population)
                    basis = estimate_basis(
                        gn,
                        _resolve_basis_kind(config.basis, gn),
                        alpha=config.alpha if config.basis == "interp" else None,
                    )
                    if config.precond == "gn":
                        gn_scale = gn_diag(basis, gn, config.power, config.eps)
                except (RejectedInputError, InvalidCurvatureError):
                    if t == 0:
                        raise  # a config problem, not numerical blow-up
                    # Overflowed curvature estimate on an exploding iterate.
                    diverged, diverged_at = True, t
                    break

            if config.precond == "adam":
                g_rot = basis.rotate(g)
                d, adam_state = adam_diag(adam_state, g_rot)
                theta_next = theta - eta * basis.unrotate(scaled_direction(g_rot, d))
            elif config.precond == "gn":
                theta_next = step(theta, g, basis, gn_scale, eta)
            else:  # plain gradient descent baseline
                theta_next = theta - eta * g

            losses.append(float(record_loss))
            grad_norms.append(float(np.linalg.norm(g)))
            if task.optimum is not None:
                dists.append(float(np.linalg.norm(theta - task.optimum)))
            else:
                dists.append(float("nan"))
            lrs.append(float(eta))

            if not np.all(np.isfinite(theta_next)):
                diverged, diverged_at = True, t + 1
                break
            theta = theta_next

    return TrajectoryRecord(
        run_id=config.run_id(),
        seed=config.seed,
        config=config,
        losses=np.asarray(losses),
        grad_norms=np.asarray(grad_norms),
        dists=np.asarray(dists),
        lrs=np.asarray(lrs),
        diverged=diverged,
        diverged_at=diverged_at,
    )


def _batch_size(value, config, task) -> int:
    if value == "full":
        raise ValueError(
            f"task {task.name!r} has no population closed form; "
            "set an integer batch size"
        )
    b = int(value)
    if b < 1:
        raise ValueError("batch size must be >= 1")
    return b


def _estimate_gn(task, theta, config, rng_gn, has_population):
    if config.gn_batch == "full":
        gn = task.population_gn(theta)
        if gn is not None:
            return gn
        # No closed form: fall back to a large sampled estimate.
        batch = task.sample_batch(rng_gn, config.gn_fallback_batch)
        return task.gn_from_batch(theta, batch)
    b = int(config.gn_batch)
    if b < 1:
        raise ValueError("gn batch size must be >= 1")
    batch = task.sample_batch(rng_gn, b)
    return task.gn_from_batch(theta, batch)


@dataclass
class SweepResult:
    """Aggregate of one config over its seeds."""

    config: RunConfig
    mean_final_loss: float
    stderr_final_loss: float
    n_seeds: int
    diverged_seeds: int
    records: list[TrajectoryRecord] = field(default_factory=list, repr=False)
    best: bool = False

    @property
    def stable(self) -> bool:
        return self.diverged_seeds == 0


@dataclass
class SweepSummary:
    results: list[SweepResult]
    best: SweepResult | None

    @property
    def no_stable_configuration(self) -> bool:
        return self.best is None


def sweep(
    base: RunConfig,
    lrs,
    epss=(None,),
    beta2s=(None,),
    schedules=(None,),
    seeds=(0, 1),
    refine: bool = True,
    task: TaskInstance | None = None,
) -> SweepSummary:
    """Cartesian sweep over (lr, eps, beta2, schedule) with refinement.

    ``schedules`` entries are None (keep the base schedule) or
    (kind, halve_every) pairs. Aggregation is mean and standard error of
    the final loss over >= 2 seeds; the best config is the stable one with
    the lowest mean final loss, and its learning rate is then refined at
    factors of 2. Returns a summary whose ``best`` is None when every
    config diverged on some seed.
    """
    seeds = tuple(seeds)
    if len(seeds) < 2:
        raise ValueError("sweeps need at least 2 seeds for a standard error")
    if task is None:
        task = make_task(base.task, **base.task_kwargs())

    def build(lr, eps, beta2, sched):
        kw = {"lr": float(lr)}
        if eps is not None:
            kw["eps"] = float(eps)
        if beta2 is not None:
            kw["beta2"] = float(beta2)
        if sched is not None:
            kind, halve = sched
            kw["schedule"] = kind
            kw["halve_every"] = int(halve)
        return replace(base, **kw)

    combos = [
        build(lr, eps, beta2, sched)
        for lr, eps, beta2, sched in itertools.product(lrs, epss, beta2s, schedules)
    ]
    results = [_run_config(cfg, seeds, task) for cfg in combos]

    best = _select_best(results)
    if refine and best is not None:
        seen = {(r.config.lr, r.config.key()) for r in results}
        for factor in (0.5, 2.0):
            cfg = replace(best.config, lr=best.config.lr * factor)
            if (cfg.lr, cfg.key()) not in seen:
                results.append(_run_config(cfg, seeds, task))
        best = _select_best(results)

    for r in results:
        r.best = r is best
    return SweepSummary(results=results, best=best)


def _run_config(cfg: RunConfig, seeds, task) -> SweepResult:
    records = [run(replace(cfg, seed=s), task=task) for s in seeds]
    finals = np.array([r.final_loss for r in records])
    diverged = sum(r.diverged for r in records)
    with np.errstate(over="ignore", invalid="ignore"):
        mean = float(np.mean(finals))
        stderr = float(np.std(finals, ddof=1) / np.sqrt(len(seeds))) if np.all(
            np.isfinite(finals)
        ) else float("inf")
    return SweepResult(
        config=cfg,
        mean_final_loss=mean,
        stderr_final_loss=stderr,
        n_seeds=len(seeds),
        diverged_seeds=diverged,
        records=records,
    )


def _select_best(results) -> SweepResult | None:
    stable = [r for r in results if r.stable and np.isfinite(r.mean_final_loss)]
    if not stable:
        return None
    return min(stable, key=lambda r: r.mean_final_loss)


def emit_metrics(records, path: str) -> str:
    """Write one CSV row per step per run, plus a sidecar config listing.

    Floats are written in round-trip precision; re-reading reproduces the
    in-memory arrays exactly. The sidecar file at ``<path>.configs.txt``
    holds the full config line per run_id.
    """
    try:
        with open(path, "w") as fh:
            fh.write(METRICS_HEADER + "\n")
            for rec in records:
                for t in range(len(rec)):
                    fh.write(
                        f"{rec.run_id},{rec.seed},{t},{float(rec.losses[t])!r},"
                        f"{float(rec.grad_norms[t])!r},{float(rec.dists[t])!r},"
                        f"{float(rec.lrs[t])!r}\n"
                    )
        with open(_sidecar_path(path), "w") as fh:
            for rec in records:
                status = (
                    f"diverged_at={rec.diverged_at}" if rec.diverged else "completed"
                )
                fh.write(f"{rec.run_id} seed={rec.seed} {status} {rec.config.key()}\n")
    except OSError as exc:
        raise OSError(f"failed writing metrics to {path!r}: {exc}") from exc
    return path


def _sidecar_path(path: str) -> str:
    return str(path) + ".configs.txt"


def read_metrics(path: str) -> dict:
    """Parse an emitted metrics file back into per-run arrays."""
    out: dict = {}
    try:
        with open(path) as fh:
            header = fh.readline().strip()
            if header != METRICS_HEADER:
                raise ValueError(f"unexpected metrics header in {path!r}: {header}")
            for line in fh:
                run_id, seed, step_, loss, gnorm, dist, lr = line.strip().split(",")
                row = out.setdefault(
                    run_id,
                    {"seed": int(seed), "loss": [], "grad_norm": [], "dist": [], "lr": []},
                )
                row["loss"].append(float(loss))
                row["grad_norm"].append(float(gnorm))
                row["dist"].append(float(dist))
                row["lr"].append(float(lr))
    except OSError as exc:
        raise OSError(f"failed reading metrics from {path!r}: {exc}") from exc
    for row in out.values():
        for k in ("loss", "grad_norm", "dist", "lr"):
            row[k] = np.asarray(row[k])
    return out


def smooth(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average with the same length as the input."""
    x = np.asarray(x, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    for t in range(len(x)):
        lo = max(0, t - window + 1)
        out[t] = (c[t + 1] - c[lo]) / (t + 1 - lo)
    return out


def mean_loss_curve(records) -> np.ndarray:
    """Pointwise mean loss over runs, truncated to the shortest record."""
    n = min(len(r) for r in records)
    return np.mean(np.stack([r.losses[:n] for r in records]), axis=0)


# Desk-scale step counts per task family.
GRID_STEPS = {
    "block_covariance": 2000,
    "random_quadratic": 2000,
    "powerlaw_logistic": 2000,
    "parity": 1000,
    "staircase": 1000,
    "teacher": 1000,
}

GRID_TASKS = {
    "quadratic": ("block_covariance", {"d_block": 50, "seed": 0}),
    "logistic": ("powerlaw_logistic", {"d": 256, "c": 0.6, "p_const": 0.75}),
    "parity": ("parity", {"d": 20, "k": 6, "seed": 0}),
    "staircase": ("staircase", {"d": 21, "seed": 0}),
    "teacher": ("teacher", {"d": 16, "m_teacher": 32, "seed": 0}),
}

GRID_METHODS = {
    "adam": {"precond": "adam"},
    "gn_one": {"precond": "gn", "power": -1.0},
    "gn_half": {"precond": "gn", "power": -0.5},
}


def grid_experiment(
    name: str,
    out_dir: str,
    seeds=(0, 1),
    lrs=None,
    steps: int | None = None,
    small_batch: int = 1,
    refresh: int | None = None,
    gn_fallback_batch: int = 1024,
) -> dict:
    """Run the full basis x batch-size grid for one task.

    Cells are {curvature eigenbasis (Kronecker for MLPs), identity} x
    {full batch, small batch}; each cell sweeps Adam and both curvature
    powers over the learning-rate grid and writes one metrics file. The
    returned mapping has (basis, batch, method) -> SweepSummary.
    """
    if name not in GRID_TASKS:
        raise ValueError(f"unknown grid task {name!r}; known: {sorted(GRID_TASKS)}")
    task_name, task_params = GRID_TASKS[name]
    task = make_task(task_name, **task_params)
    steps = steps if steps is not None else GRID_STEPS[task_name]
    lrs = list(lrs) if lrs is not None else default_lr_grid(1e-3, 3.0)
    is_mlp = task.population_loss_grad(task.theta0) is None
    if refresh is None:
        refresh = 5 if is_mlp else 1
    full_batch = "full" if not is_mlp else 4096

    os.makedirs(out_dir, exist_ok=True)
    out = {}
    for basis in ("eigen", "identity"):
        for batch_name, batch in (("full", full_batch), ("small", small_batch)):
            for method, overrides in GRID_METHODS.items():
                base = RunConfig.make(
                    task_name,
                    task_params,
                    basis=basis,
                    refresh=refresh,
                    grad_batch=batch,
                    gn_batch="full",
                    gn_fallback_batch=gn_fallback_batch,
                    steps=steps,
                    **overrides,
                )
                if method == "adam":
                    summary = sweep(
                        base,
                        lrs,
                        epss=(1e-8,),
                        beta2s=(0.0, 0.9),
                        schedules=(("constant", 1), ("step_decay", 1)),
                        seeds=seeds,
                        task=task,
                    )
                else:
                    summary = sweep(
                        base, lrs, epss=(1e-8,), seeds=seeds, task=task
                    )
                cell = (basis, batch_name, method)
                out[cell] = summary
                records = [r for res in summary.results for r in res.records]
                emit_metrics(
                    records,
                    os.path.join(out_dir, f"{name}_{basis}_{batch_name}_{method}.csv"),
                )
    return out
