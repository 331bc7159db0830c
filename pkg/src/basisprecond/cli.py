"""Command-line entry points.

Subcommands: ``run`` (one config), ``sweep`` (hyperparameter grid),
``grid`` (full basis x batch experiment), ``verify`` (closed-form oracle
self-checks), ``cifar`` (binary loader smoke test).

Configs come from ``key=value`` text files (``--config``) with individual
flags overriding file values. Exit code is 0 on success, including runs
that diverged but were recorded; nonzero signals configuration or I/O
errors (and, for ``verify``, a failed oracle).
"""

from __future__ import annotations

import argparse
import ast
import sys

import numpy as np

from . import harness, theory
from .harness import RunConfig, default_lr_grid
from .linalg import SymMatrix
from .tasks import TASK_GENERATORS, load_cifar10_binary, make_task

CONFIG_KEYS = {
    "task": str,
    "basis": str,
    "alpha": float,
    "refresh": int,
    "precond": str,
    "power": float,
    "beta2": float,
    "lr": float,
    "schedule": str,
    "halve_every": int,
    "eps": float,
    "batch": "batch",
    "gn_batch": "batch",
    "gn_fallback_batch": int,
    "steps": int,
    "seed": int,
}


def _parse_batch(text: str):
    return "full" if text == "full" else int(text)


def _parse_config_file(path: str) -> dict:
    out: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = value
    return out


def _coerce(key: str, value):
    if value is None or not isinstance(value, str):
        return value
    kind = CONFIG_KEYS.get(key)
    if kind == "batch":
        return _parse_batch(value)
    if kind in (int, float):
        return kind(value)
    if key == "task_params":
        return ast.literal_eval(value)
    return value


def _build_run_config(args) -> RunConfig:
    values: dict = {}
    if args.config:
        for key, value in _parse_config_file(args.config).items():
            if key not in CONFIG_KEYS and key != "task_params":
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _coerce(key, value)
    for key in CONFIG_KEYS:
        flag = getattr(args, key if key != "batch" else "batch", None)
        if flag is not None:
            values[key] = _coerce(key, flag)
    if args.task_params is not None:
        values["task_params"] = ast.literal_eval(args.task_params)
    task = values.pop("task", None)
    if task is None:
        raise ValueError("a task is required (flag --task or config file)")
    task_params = values.pop("task_params", {})
    values["grad_batch"] = values.pop("batch", "full")
    return RunConfig.make(task, task_params, **values)


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file; flags override")
    p.add_argument("--task", choices=sorted(TASK_GENERATORS))
    p.add_argument("--task-params", dest="task_params",
                   help="python dict literal of generator parameters")
    p.add_argument("--basis", choices=("identity", "eigen", "kron", "interp"))
    p.add_argument("--alpha", type=str, help="geodesic fraction for --basis interp")
    p.add_argument("--refresh", type=str, help="basis refresh interval (steps)")
    p.add_argument("--precond", choices=("adam", "gn", "gd"))
    p.add_argument("--power", type=str, help="curvature power, -0.5 or -1")
    p.add_argument("--beta2", type=str)
    p.add_argument("--lr", type=str)
    p.add_argument("--schedule", choices=("constant", "step_decay"))
    p.add_argument("--halve-every", dest="halve_every", type=str)
    p.add_argument("--eps", type=str)
    p.add_argument("--batch", type=str, help="gradient batch size or 'full'")
    p.add_argument("--gn-batch", dest="gn_batch", type=str,
                   help="curvature batch size or 'full'")
    p.add_argument("--gn-fallback-batch", dest="gn_fallback_batch", type=str)
    p.add_argument("--steps", type=str)
    p.add_argument("--seed", type=str)


def _cmd_run(args) -> int:
    config = _build_run_config(args)
    record = harness.run(config)
    if args.out:
        harness.emit_metrics([record], args.out)
        print(f"wrote {len(record)} rows to {args.out}")
    status = f"diverged at step {record.diverged_at}" if record.diverged else "completed"
    print(f"run {record.run_id}: {status}, steps={len(record)}, "
          f"final_loss={record.final_loss:.6e}")
    return 0


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _cmd_sweep(args) -> int:
    config = _build_run_config(args)
    lrs = _parse_floats(args.lrs) if args.lrs else default_lr_grid(args.lr_low, args.lr_high)
    epss = _parse_floats(args.epss) if args.epss else (None,)
    beta2s = _parse_floats(args.beta2s) if args.beta2s else (None,)
    schedules: list = [None]
    if args.schedules:
        schedules = []
        for token in args.schedules.split(","):
            if token == "constant":
                schedules.append(("constant", 1))
            else:
                schedules.append(("step_decay", int(token.removeprefix("halve:"))))
    seeds = [int(s) for s in args.seeds.split(",")]
    summary = harness.sweep(
        config, lrs, epss=epss, beta2s=beta2s, schedules=schedules, seeds=seeds
    )
    if args.out:
        records = [r for res in summary.results for r in res.records]
        harness.emit_metrics(records, args.out)
        print(f"wrote metrics to {args.out}")
    if summary.no_stable_configuration:
        print("no stable configuration: every config diverged")
        return 0
    for res in sorted(summary.results, key=lambda r: r.mean_final_loss):
        marker = "*" if res.best else " "
        print(f"{marker} lr={res.config.lr:<12g} eps={res.config.eps:<10g} "
              f"beta2={res.config.beta2:<6g} sched={res.config.schedule}/"
              f"{res.config.halve_every:<5d} mean_final={res.mean_final_loss:.6e} "
              f"stderr={res.stderr_final_loss:.2e} diverged={res.diverged_seeds}/{res.n_seeds}")
    return 0


def _cmd_grid(args) -> int:
    seeds = tuple(int(s) for s in args.seeds.split(","))
    results = harness.grid_experiment(
        args.experiment,
        args.out,
        seeds=seeds,
        steps=args.steps,
        refresh=args.refresh,
    )
    for (basis, batch, method), summary in results.items():
        if summary.best is None:
            line = "no stable configuration"
        else:
            line = (f"best lr={summary.best.config.lr:g} "
                    f"mean_final={summary.best.mean_final_loss:.4e}")
        print(f"[{basis:8s} | {batch:5s} | {method:7s}] {line}")
    print(f"metrics written under {args.out}")
    return 0


def _cmd_verify(args) -> int:
    """Fast closed-form self-checks of the theory oracles."""
    rng = np.random.default_rng(args.seed)
    checks: list[tuple[str, bool]] = []

    ok = True
    for _ in range(args.draws):
        d = int(rng.integers(2, 7))
        a = rng.standard_normal((d, d))
        sigma = SymMatrix(a @ a.T + 0.1 * np.eye(d))
        delta = rng.standard_normal(d)
        rep = theory.check_fisher_sandwich(sigma, delta, np.zeros(d))
        ok = ok and rep.lower_ok and rep.upper_ok
    checks.append(("fisher sandwich (random instances)", ok))

    sigma = SymMatrix(np.diag([1.0, 4.0]))
    w = SymMatrix(np.outer([1.0, 0.0], [1.0, 0.0]))
    m = theory.wick_second_moment(sigma, w)
    checks.append(
        ("fourth-moment identity (diagonal case)",
         np.allclose(m.mat, np.array([[3.0, 0.0], [0.0, 4.0]])))
    )

    d = 6
    a, factor, kappa = theory.rate_bound(SymMatrix(np.eye(d)), SymMatrix(np.eye(d)))
    checks.append(
        ("rate bound at identity",
         np.allclose(a.mat, np.eye(d)) and abs(kappa - d) < 1e-12
         and abs(factor - (1 - 1 / (3 * d))) < 1e-12)
    )
    checks.append(
        ("per-step factor arithmetic",
         abs(theory.gn1_expected_loss_factor(10, 1 / 22) - 21 / 22) < 1e-15)
    )
    checks.append(
        ("optimal step size", abs(theory.optimal_general_lr(
            SymMatrix(np.diag([1.0, 3.0]))) - 0.1) < 1e-15)
    )
    checks.append(
        ("condition ratio on isotropic input",
         abs(theory.condition_ratio(SymMatrix(2.0 * np.eye(3))) - 1.0) < 1e-12)
    )
    # Distinct diagonal entries leave the inverse-power system perfectly
    # conditioned but not the half-power one, so r < 1 there.
    checks.append(
        ("condition ratio favors full inverse on diagonal input",
         theory.condition_ratio(SymMatrix(np.diag([2.0, 5.0]))) < 1.0)
    )
    gn_star = SymMatrix(np.diag([1.0, 0.01]))
    nu = np.array([0.5, 0.5])
    checks.append(
        ("contraction factor identities",
         theory.contraction_factor(gn_star, nu, 1.0, 0.0) == 0.0
         and theory.contraction_factor(gn_star, nu, 0.0, 1e-3) == 1.0)
    )
    thr = theory.divergence_threshold(np.exp(-1.0), 0.0, theory.DIVERGENCE_C)
    orbit = theory.gn_1d_orbit(np.exp(-1.0), 2.0 * thr, 0.0, 0.7, 12)
    mags = np.abs(orbit)
    geom = (not np.all(np.isfinite(orbit))) or bool(
        np.all(mags[2:] >= np.sqrt(2.0) * mags[1:-1] - 1e-12)
    )
    checks.append(("calibrated divergence threshold", geom))

    failed = 0
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
        failed += not passed
    return 1 if failed else 0


def _cmd_cifar(args) -> int:
    task = load_cifar10_binary(args.path, limit=args.limit)
    xs, ys = task.sample_batch(np.random.default_rng(0), 4)
    print(f"records={task.meta['records']} input_dim={xs.shape[1]} "
          f"classes={ys.shape[1]} pixel_range=[{xs.min():.3f}, {xs.max():.3f}]")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="basisprecond",
        description="Diagonal preconditioning in configurable orthonormal bases.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured run")
    _add_run_flags(p_run)
    p_run.add_argument("--out", help="metrics CSV path")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep hyperparameters for one setting")
    _add_run_flags(p_sweep)
    p_sweep.add_argument("--lrs", help="comma-separated learning rates")
    p_sweep.add_argument("--lr-low", type=float, default=1e-4)
    p_sweep.add_argument("--lr-high", type=float, default=10.0)
    p_sweep.add_argument("--epss", help="comma-separated eps values")
    p_sweep.add_argument("--beta2s", help="comma-separated beta2 values")
    p_sweep.add_argument("--schedules",
                         help="comma-separated: constant or halve:<interval>")
    p_sweep.add_argument("--seeds", default="0,1")
    p_sweep.add_argument("--out", help="metrics CSV path")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_grid = sub.add_parser("grid", help="basis x batch grid for a named task")
    p_grid.add_argument("experiment",
                        choices=sorted(harness.GRID_TASKS))
    p_grid.add_argument("--out", required=True, help="output directory")
    p_grid.add_argument("--seeds", default="0,1")
    p_grid.add_argument("--steps", type=int)
    p_grid.add_argument("--refresh", type=int)
    p_grid.set_defaults(func=_cmd_grid)

    p_verify = sub.add_parser("verify", help="closed-form oracle self-checks")
    p_verify.add_argument("--draws", type=int, default=25)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.set_defaults(func=_cmd_verify)

    p_cifar = sub.add_parser("cifar", help="smoke-test the CIFAR-10 binary loader")
    p_cifar.add_argument("path")
    p_cifar.add_argument("--limit", type=int)
    p_cifar.set_defaults(func=_cmd_cifar)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
