"""Named, configured experiment scenarios with parallel grid execution.

Each scenario expands into independent cells (one run per grid point and
seed), executes them serially or on a process pool, and writes fixed-schema
CSV tables plus a manifest.json capturing config, package version and
per-cell status.  Cell randomness derives from (seed, cell) alone, so results
are identical under any schedule, and reruns produce byte-identical CSVs.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__ as _version
from . import bias, continuous, discrete, models, verify
from .datasets import (
    STREAM_DEEP_LINEAR_INIT,
    STREAM_TS_STUDENT_INIT,
    STREAM_TS_TEST_INPUTS,
    SparseRegressionSpec,
    TeacherStudentSpec,
    gen_sparse_regression,
    gen_teacher_student,
    population_test_loss,
    stream,
)
from .tables import write_csv, write_json

SCENARIOS = (
    "quadratic_demo",
    "mgf_lambda_sweep",
    "mgd_grid",
    "smgd_grid",
    "teacher_student_grid",
    "deep_linear_grid",
    "bias_verify",
)

# Fixed-schema CSV header for per-run implicit-bias rows; extra columns are
# appended after the documented core schema.
BIAS_ROW_HEADER = [
    "lambda", "gamma", "beta", "seed",
    "crossings_plus", "crossings_minus",
    "delta_inf_l2", "s_plus_l2", "s_minus_l2", "theta_tilde0_linf",
    "kkt_residual", "test_loss", "l1_norm", "train_loss_final",
    "delta_inf_linf", "crossing_regime", "stop_reason",
]


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    out_dir: str = "results"
    workers: int = 1
    render_figures: bool = True
    seeds: tuple = (0, 1, 2, 3, 4)
    # regression instance
    n: int = 20
    d: int = 30
    s: int = 5
    mean: float = 1.0
    stddev: float = 1.0
    alpha: float = 0.01
    # flow sweep
    lambdas: tuple = ()
    stop_loss_mgf: float = 1e-7
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_time: float = 1e6
    crossing_proxy: bool = True
    # discrete grids: cells of (gamma, beta)
    cells: tuple = ()
    stop_loss_mgd: float = 1e-7
    max_steps: int = 1_500_000
    sample_every: int = 1000
    batch_size: int | None = None
    sampler: str = "with_replacement"
    # teacher-student
    ts_input_dim: int = 2
    ts_teacher_width: int = 5
    ts_student_width: int = 20
    ts_samples: int = 15
    ts_test_samples: int = 1000
    ts_stop_loss: float = 1e-5
    ts_max_steps: int = 400_000
    ts_cells: tuple = ()
    # deep linear
    dl_widths: tuple = (30, 60, 120, 60, 1)
    dl_steps: int = 1000
    dl_init_scale: float = 0.1
    dl_cells: tuple = ()
    # quadratic demo
    demo_gamma: float = verify.DEMO_GAMMA
    demo_beta: float = verify.DEMO_BETA
    demo_steps: int = verify.DEMO_STEPS
    demo_rho: int = 2


def scenario_defaults(scenario: str) -> ExperimentConfig:
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    cfg = ExperimentConfig(scenario=scenario)
    if scenario == "mgf_lambda_sweep":
        # 0 is the pure gradient-flow baseline row; the positive range covers
        # the shrinking region, the optimum and the over-momentum upturn while
        # staying integrable for the explicit stepper.
        lams = (0.0,) + tuple(float(x) for x in np.round(np.logspace(np.log10(0.02), 0.0, 12), 6))
        cfg = replace(cfg, lambdas=lams)
    elif scenario == "mgd_grid":
        cells = _staircase_cells()
        cfg = replace(cfg, cells=cells)
    elif scenario == "smgd_grid":
        cfg = replace(cfg, cells=_staircase_cells(), batch_size=5)
    elif scenario == "teacher_student_grid":
        cells = []
        for lam, betas in ((0.1, (0.0, 0.5, 0.8)), (0.5, (0.6, 0.8, 0.9)), (2.0, (0.8, 0.9, 0.95))):
            cells.extend((lam * (1.0 - b) ** 2, b) for b in betas)
        cfg = replace(cfg, ts_cells=tuple(cells), ts_max_steps=500_000)
    elif scenario == "deep_linear_grid":
        gammas = (1e-4, 3e-4, 1e-3)
        betas = (0.0, 0.5, 0.8)
        cfg = replace(cfg, dl_cells=tuple((g, b) for g in gammas for b in betas), seeds=(0, 1, 2, 3, 4))
    elif scenario == "bias_verify":
        cfg = replace(cfg, lambdas=(0.0, 0.05, 0.2), seeds=(0,))
    return cfg


def _staircase_cells() -> tuple:
    """(gamma, beta) lattice sharing exact trajectory-parameter values.

    Three betas per lambda level keep every log-bucket populated with cells
    whose gamma and beta differ, which is what the level-line diagnostic needs;
    gamma = lam (1-beta)^2 stays inside the stable step-size range.
    """
    cells = []
    for lam, betas in (
        (0.1, (0.0, 0.5, 0.9)),
        (0.3, (0.5, 0.7, 0.9)),
        (1.0, (0.7, 0.8, 0.9)),
    ):
        for b in betas:
            cells.append((lam * (1.0 - b) ** 2, b))
    return tuple(cells)


def load_config(scenario: str, overrides: dict | None = None) -> ExperimentConfig:
    cfg = scenario_defaults(scenario)
    if not overrides:
        return cfg
    fields_ = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(overrides) - fields_
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    coerced = {}
    for key, value in overrides.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        coerced[key] = value
    return replace(cfg, **coerced)


# --- cell runners (top level so process pools can pickle them) -----------------


def _dataset_for(cfg: ExperimentConfig, seed: int):
    return gen_sparse_regression(
        SparseRegressionSpec(n=cfg.n, d=cfg.d, s=cfg.s, mean=cfg.mean, stddev=cfg.stddev, seed=seed)
    )


def _bias_row(report: bias.BiasReport | None, *, lam, gamma, beta, seed, traj, dataset) -> dict:
    """One CSV row; reports may be missing for unconverged or skipped cells."""
    if report is not None:
        return {
            "lambda": report.lam,
            "gamma": float("nan") if report.gamma is None else report.gamma,
            "beta": float("nan") if report.beta is None else report.beta,
            "seed": -1 if seed is None else seed,
            "crossings_plus": report.crossings_plus,
            "crossings_minus": report.crossings_minus,
            "delta_inf_l2": float(np.linalg.norm(report.delta_inf)),
            "s_plus_l2": float(np.linalg.norm(report.s_plus)),
            "s_minus_l2": float(np.linalg.norm(report.s_minus)),
            "theta_tilde0_linf": float(np.max(np.abs(report.theta_tilde0))),
            "kkt_residual": report.kkt_residual,
            "test_loss": report.test_loss,
            "l1_norm": report.l1_norm,
            "train_loss_final": report.train_loss_final,
            "delta_inf_linf": float(np.max(report.delta_inf)),
            "crossing_regime": report.crossing_regime,
            "stop_reason": traj.stop_reason,
            "_detail": {
                "delta0": report.delta0,
                "delta_inf": report.delta_inf,
                "s_plus": report.s_plus,
                "s_minus": report.s_minus,
                "theta_tilde0": report.theta_tilde0,
                "theta_recovered": report.theta_recovered,
            },
        }
    theta = traj.terminal_theta()
    test = population_test_loss(theta, dataset.ground_truth, dataset.mean, dataset.stddev)
    if hasattr(traj, "crossing_totals") and traj.crossing_totals is not None:
        cp, cm = int(traj.crossing_totals[-1, 0]), int(traj.crossing_totals[-1, 1])
    else:
        cp = cm = 0
    nan = float("nan")
    return {
        "lambda": lam, "gamma": nan if gamma is None else gamma, "beta": nan if beta is None else beta,
        "seed": -1 if seed is None else seed,
        "crossings_plus": cp, "crossings_minus": cm,
        "delta_inf_l2": nan, "s_plus_l2": nan, "s_minus_l2": nan, "theta_tilde0_linf": nan,
        "kkt_residual": nan,
        "test_loss": float(test),
        "l1_norm": float(np.sum(np.abs(theta))),
        "train_loss_final": float(traj.losses[-1]),
        "delta_inf_linf": nan, "crossing_regime": False, "stop_reason": traj.stop_reason,
        "_detail": {"theta_recovered": theta},
    }


def _run_sweep_cell(cfg: ExperimentConfig, cell) -> dict:
    lam, seed = cell
    dataset = _dataset_for(cfg, seed)
    d = dataset.d
    init = np.concatenate((cfg.alpha * np.ones(d), np.zeros(d)))
    spec = models.diagonal_net_model(dataset)
    icfg = continuous.IntegratorConfig(
        rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol, stop_loss=cfg.stop_loss_mgf, max_time=cfg.max_time
    )
    if lam == 0.0:
        traj = continuous.integrate_gf(spec, init, icfg)
    else:
        traj = continuous.integrate_mgf(spec, lam, continuous.SecondOrderState(init, np.zeros(2 * d)), icfg)
    crossings = int(np.sum(traj.crossings_plus) + np.sum(traj.crossings_minus))
    report = None
    if traj.stop_reason == "converged" and (crossings == 0 or cfg.crossing_proxy):
        report = bias.bias_report(traj, dataset, alpha=cfg.alpha, seed=seed)
    row = _bias_row(report, lam=lam, gamma=None, beta=None, seed=seed, traj=traj, dataset=dataset)
    row["max_energy_increase"] = traj.max_energy_increase
    row["delta_drift_max"] = traj.delta_drift_max
    row["small_lambda_threshold"] = bias.small_lambda_threshold(dataset, cfg.alpha**2 * np.ones(d))
    return row


def _run_grid_cell(cfg: ExperimentConfig, cell) -> dict:
    gamma, beta, seed = cell
    dataset = _dataset_for(cfg, seed)
    d = dataset.d
    ws = models.WeightState(cfg.alpha * np.ones(d), np.zeros(d))
    h = discrete.DiscreteHyper(
        gamma=gamma,
        beta=beta,
        batch_size=cfg.batch_size if cfg.scenario == "smgd_grid" else None,
        sampler=cfg.sampler,
        max_steps=cfg.max_steps,
        stop_loss=cfg.stop_loss_mgd,
        sample_every=cfg.sample_every,
    )
    traj = discrete.run_smgd(dataset, ws, h, seed=seed)
    report = bias.bias_report(traj, dataset, alpha=cfg.alpha, seed=seed) if traj.stop_reason == "converged" else None
    lam = discrete.lambda_of(gamma, beta)
    row = _bias_row(report, lam=lam, gamma=gamma, beta=beta, seed=seed, traj=traj, dataset=dataset)
    row["lambda"] = lam
    row["gamma"], row["beta"] = gamma, beta
    row["identity_violation"] = bias.finite_N_balancedness_identity(traj)
    row["terminal_step"] = traj.terminal_step
    return row


def _run_teacher_cell(cfg: ExperimentConfig, cell) -> dict:
    gamma, beta = cell
    ts = TeacherStudentSpec(
        input_dim=cfg.ts_input_dim,
        teacher_width=cfg.ts_teacher_width,
        student_width=cfg.ts_student_width,
        n_samples=cfg.ts_samples,
        seed=cfg.seeds[0],
    )
    dataset, (teacher_spec, teacher_w) = gen_teacher_student(ts)
    widths = (ts.input_dim, ts.student_width, 1)
    student_spec = models.relu_mlp_model(dataset, widths)
    rng = stream(ts.seed, STREAM_TS_STUDENT_INIT)
    w0 = models.mlp_random_weights(widths, rng, with_biases=True)
    h = discrete.DiscreteHyper(
        gamma=gamma, beta=beta, max_steps=cfg.ts_max_steps, stop_loss=cfg.ts_stop_loss, sample_every=5000
    )
    traj = discrete.run_mgd(student_spec, w0, h)

    rng_test = stream(ts.seed, STREAM_TS_TEST_INPUTS)
    x_test = rng_test.standard_normal((cfg.ts_test_samples, ts.input_dim))
    y_teacher = models.mlp_predict(teacher_w, x_test, widths=(ts.input_dim, ts.teacher_width, 1))
    y_student = models.mlp_predict(traj.terminal_state, x_test, widths=widths)
    test_loss = float(np.mean((y_teacher - y_student) ** 2)) / 2.0
    return {
        "gamma": gamma,
        "beta": beta,
        "lambda": discrete.lambda_of(gamma, beta),
        "train_loss_final": float(traj.losses[-1]),
        "test_loss": test_loss,
        "steps": traj.terminal_step,
        "stop_reason": traj.stop_reason,
    }


def _run_deep_linear_cell(cfg: ExperimentConfig, cell) -> dict:
    gamma, beta, seed = cell
    dataset = _dataset_for(cfg, seed)
    spec = models.deep_linear_model(dataset, cfg.dl_widths)
    rng = stream(seed, STREAM_DEEP_LINEAR_INIT)
    w0 = models.mlp_random_weights(cfg.dl_widths, rng, with_biases=False, scale=cfg.dl_init_scale)
    h = discrete.DiscreteHyper(gamma=gamma, beta=beta, max_steps=cfg.dl_steps, stop_loss=0.0, sample_every=100)
    traj = discrete.run_mgd(spec, w0, h)
    theta_eff = _deep_linear_effective_theta(traj.terminal_state, cfg.dl_widths)
    test = population_test_loss(theta_eff, dataset.ground_truth, dataset.mean, dataset.stddev)
    return {
        "gamma": gamma,
        "beta": beta,
        "lambda": discrete.lambda_of(gamma, beta),
        "seed": seed,
        "train_loss_final": float(traj.losses[-1]),
        "test_loss": float(test),
        "stop_reason": traj.stop_reason,
    }


def _deep_linear_effective_theta(w: np.ndarray, widths) -> np.ndarray:
    layers = models._unpack(np.asarray(w, dtype=float), widths, with_biases=False)
    theta = layers[0][0].T                        # (d, n1)
    for W, _ in layers[1:]:
        theta = theta @ W.T
    return theta[:, 0]


def _run_bias_verify_cell(cfg: ExperimentConfig, cell) -> dict:
    lam, seed = cell
    dataset = _dataset_for(cfg, seed)
    d = dataset.d
    init = np.concatenate((cfg.alpha * np.ones(d), np.zeros(d)))
    spec = models.diagonal_net_model(dataset)
    icfg = continuous.IntegratorConfig(
        rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol, stop_loss=cfg.stop_loss_mgf, max_time=cfg.max_time
    )
    if lam == 0.0:
        traj = continuous.integrate_gf(spec, init, icfg)
    else:
        traj = continuous.integrate_mgf(spec, lam, continuous.SecondOrderState(init, np.zeros(2 * d)), icfg)
    report = bias.bias_report(traj, dataset, alpha=cfg.alpha, seed=seed)
    theta_star, cert = bias.solve_min_entropy_interpolator(dataset, bias.EntropyScale(report.delta_inf))
    distance = float(np.linalg.norm(report.theta_recovered - theta_star) / np.linalg.norm(theta_star))
    return {
        "lambda": lam,
        "seed": seed,
        "crossings": report.crossings_plus + report.crossings_minus,
        "crossing_regime": report.crossing_regime,
        "normalized_distance": distance,
        "kkt_residual": report.kkt_residual,
        "solver_feasibility": cert.primal_feasibility,
        "test_loss": report.test_loss,
        "train_loss_final": report.train_loss_final,
    }


_CELL_RUNNERS = {
    "mgf_lambda_sweep": _run_sweep_cell,
    "mgd_grid": _run_grid_cell,
    "smgd_grid": _run_grid_cell,
    "teacher_student_grid": _run_teacher_cell,
    "deep_linear_grid": _run_deep_linear_cell,
    "bias_verify": _run_bias_verify_cell,
}


def _cells_for(cfg: ExperimentConfig) -> list:
    if cfg.scenario == "mgf_lambda_sweep" or cfg.scenario == "bias_verify":
        return [(lam, seed) for lam in cfg.lambdas for seed in cfg.seeds]
    if cfg.scenario in ("mgd_grid", "smgd_grid"):
        return [(g, b, seed) for (g, b) in cfg.cells for seed in cfg.seeds]
    if cfg.scenario == "teacher_student_grid":
        return list(cfg.ts_cells)
    if cfg.scenario == "deep_linear_grid":
        return [(g, b, seed) for (g, b) in cfg.dl_cells for seed in cfg.seeds]
    raise ValueError(f"scenario {cfg.scenario!r} has no grid cells")


def _execute_cell(args):
    cfg, cell = args
    runner = _CELL_RUNNERS[cfg.scenario]
    start = time.perf_counter()
    try:
        payload = runner(cfg, cell)
        status = payload.get("stop_reason", "ok")
        return cell, status, payload, time.perf_counter() - start
    except Exception as exc:  # cell failures never abort the sweep
        return cell, "error", {"error": f"{type(exc).__name__}: {exc}"}, time.perf_counter() - start


def run_scenario(cfg: ExperimentConfig) -> dict:
    """Execute all cells of a scenario, write CSVs + manifest, return the result table.

    Returns {"rows": [...], "failures": int, "out_dir": Path, "diagnostics": {...}}.
    """
    out_dir = Path(cfg.out_dir) / cfg.scenario
    out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.scenario == "quadratic_demo":
        result = _run_quadratic_demo(cfg, out_dir)
    else:
        cells = _cells_for(cfg)
        jobs = [(cfg, cell) for cell in cells]
        if cfg.workers > 1 and len(jobs) > 1:
            # pool.map preserves job order, so collection stays deterministic
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                outcomes = list(pool.map(_execute_cell, jobs))
        else:
            outcomes = [_execute_cell(job) for job in jobs]
        result = _collect(cfg, out_dir, cells, outcomes)

    manifest = {
        "scenario": cfg.scenario,
        "version": _version,
        "config": asdict(cfg),
        "cells": result.pop("_cell_status", []),
    }
    write_json(out_dir / "manifest.json", manifest)
    result["out_dir"] = out_dir

    if cfg.render_figures:
        from . import figures

        figures.render(cfg.scenario, result, out_dir)
    return result


def _collect(cfg: ExperimentConfig, out_dir: Path, cells, outcomes) -> dict:
    rows = []
    statuses = []
    failures = 0
    details = {}
    for cell, status, payload, wall in outcomes:
        statuses.append({"cell": list(cell), "status": status, "wall_time": wall})
        if status == "error":
            failures += 1
            continue
        detail = payload.pop("_detail", None)
        if detail is not None:
            details[str(cell)] = detail
        rows.append(payload)

    diagnostics = {}
    if cfg.scenario == "mgf_lambda_sweep":
        header = BIAS_ROW_HEADER + ["max_energy_increase", "delta_drift_max", "small_lambda_threshold"]
    elif cfg.scenario in ("mgd_grid", "smgd_grid"):
        header = BIAS_ROW_HEADER + ["identity_violation", "terminal_step"]
    else:
        header = list(rows[0].keys()) if rows else []

    write_csv(out_dir / "runs.csv", header, [[row.get(k, "") for k in header] for row in rows])
    if details:
        write_json(out_dir / "run_details.json", details)
        for row, (cell, status, _, _) in zip(rows, [o for o in outcomes if o[1] != "error"]):
            row["_cell"] = cell

    if cfg.scenario in ("mgf_lambda_sweep",):
        agg = aggregate_over_seeds(rows, key="lambda",
                                   fields=("test_loss", "delta_inf_l2", "delta_inf_linf", "l1_norm"))
        write_csv(out_dir / "aggregate.csv",
                  ["lambda"] + [f"{f}_{s}" for f in ("test_loss", "delta_inf_l2", "delta_inf_linf", "l1_norm")
                                for s in ("mean", "std")],
                  agg)
    if cfg.scenario in ("mgd_grid", "smgd_grid", "teacher_student_grid", "deep_linear_grid"):
        try:
            ratio, table = level_line_diagnostic(rows)
            diagnostics["level_line_ratio"] = ratio
            write_csv(out_dir / "level_line.csv", ["bucket", "lambda_center", "cells", "value_mean"], table)
        except ValueError:
            pass
        write_json(out_dir / "diagnostics.json", diagnostics)

    return {"rows": rows, "failures": failures, "_cell_status": statuses,
            "diagnostics": diagnostics, "details": details}


def aggregate_over_seeds(rows, key: str, fields) -> list:
    """Mean and sample standard deviation per key value, seeds only."""
    groups: dict = {}
    for row in rows:
        groups.setdefault(row[key], []).append(row)
    out = []
    for k in sorted(groups):
        entry = [k]
        for f in fields:
            vals = np.array([r[f] for r in groups[k] if not np.isnan(r.get(f, np.nan))], dtype=float)
            if vals.size:
                entry += [float(np.mean(vals)), float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0]
            else:
                entry += [float("nan"), float("nan")]
        out.append(entry)
    return out


def level_line_diagnostic(rows, buckets_per_decade: int = 8, value_key: str = "test_loss"):
    """Within-bucket variance ratio of log test loss over log-spaced lambda buckets.

    A ratio near zero means the trajectory parameter gamma/(1-beta)^2 alone
    explains the grid outcomes.  Requires at least two distinct beta values.
    """
    cells: dict = {}
    betas = set()
    for row in rows:
        g, b = row.get("gamma"), row.get("beta")
        if g is None or b is None or np.isnan(row.get(value_key, np.nan)):
            continue
        betas.add(round(float(b), 12))
        cells.setdefault((g, b), []).append(float(row[value_key]))
    if len(betas) < 2:
        raise ValueError("degenerate grid: need at least two distinct beta values")
    lam_of = discrete.lambda_of
    points = []
    for (g, b), vals in cells.items():
        points.append((np.log10(lam_of(g, b)), np.log10(np.mean(vals))))
    points = np.array(points)
    buckets = np.floor(points[:, 0] * buckets_per_decade + 1e-9).astype(int)
    grand = float(np.mean(points[:, 1]))
    ss_total = float(np.sum((points[:, 1] - grand) ** 2))
    ss_within = 0.0
    table = []
    for bucket in sorted(set(buckets)):
        sel = points[buckets == bucket, 1]
        ss_within += float(np.sum((sel - np.mean(sel)) ** 2))
        table.append([int(bucket), float(10 ** ((bucket + 0.5) / buckets_per_decade)), int(sel.size),
                      float(np.mean(sel))])
    ratio = 0.0 if ss_total == 0.0 else ss_within / ss_total
    return ratio, table


# --- quadratic demo --------------------------------------------------------------


def _run_quadratic_demo(cfg: ExperimentConfig, out_dir: Path) -> dict:
    spec = verify.demo_quadratic()
    init = verify.DEMO_INIT
    gamma, beta, steps, rho = cfg.demo_gamma, cfg.demo_beta, cfg.demo_steps, cfg.demo_rho
    lam = discrete.lambda_of(gamma, beta)
    eps = discrete.epsilon_of(gamma, beta)

    runs = {}
    h = discrete.DiscreteHyper(gamma=gamma, beta=beta, max_steps=steps, sample_every=1, stop_loss=0.0)
    runs["mgd"] = discrete.run_mgd(spec, init, h)
    runs["gd"] = discrete.run_mgd(spec, init, discrete.DiscreteHyper(gamma=gamma, beta=0.0,
                                                                     max_steps=steps, sample_every=1))
    gamma_hat, beta_hat = discrete.acceleration_pair(gamma, beta, rho)
    runs["mgd_accelerated"] = discrete.run_mgd(
        spec, init, discrete.DiscreteHyper(gamma=gamma_hat, beta=beta_hat, max_steps=steps // rho, sample_every=1))
    runs["gd_fast"] = discrete.run_mgd(
        spec, init, discrete.DiscreteHyper(gamma=rho**2 * gamma, beta=0.0, max_steps=steps // rho**2,
                                           sample_every=1))

    for name, traj in runs.items():
        rows = [[int(k), float(traj.losses[i])] + [float(v) for v in traj.states[i]]
                for i, k in enumerate(traj.steps)]
        write_csv(out_dir / f"{name}.csv", ["step", "loss", "w_1", "w_2"], rows)

    t_eval = np.arange(1, steps + 1) * eps
    icfg = continuous.IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12, max_time=float(t_eval[-1]), quadrature=False)
    flow = continuous.integrate_mgf(spec, lam, continuous.SecondOrderState(init, np.zeros(2)), icfg, t_eval=t_eval)
    write_csv(out_dir / "mgf.csv", ["t", "loss", "energy", "w_1", "w_2"],
              [[float(flow.times[i]), float(flow.losses[i]), float(flow.energies[i])]
               + [float(v) for v in flow.positions[i]] for i in range(len(flow.times))])
    gflow = continuous.integrate_gf(spec, init, icfg.replace(max_time=float(steps * gamma)))
    gflow.to_csv(out_dir / "gf.csv")

    checks = [verify.check_discretization_correspondence(gamma, beta, spec, init, steps)]
    checks.extend(verify.check_acceleration_rule(gamma, beta, rho, spec, init, steps))
    verify.reports_to_csv(checks, out_dir / "deviations.csv")

    rows = [{"run": name, "terminal_loss": float(traj.losses[-1])} for name, traj in runs.items()]
    demo = {"mgd": runs["mgd"], "mgf": flow, "gd": runs["gd"],
            "mgd_accelerated": runs["mgd_accelerated"], "checks": checks}
    return {"rows": rows, "failures": 0, "_cell_status": [], "diagnostics": {}, "demo": demo}
