"""Figure rendering for scenario outputs.

Every scenario drops PNG plots next to its CSV tables.  Rendering consumes
the in-memory result rows (the same data the CSVs carry), so plots can also
be regenerated from saved tables by any external tool.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render(scenario: str, result: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir) / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)
    fn = _RENDERERS.get(scenario)
    if fn is None:
        return []
    try:
        return fn(result, out_dir)
    except Exception:
        # figures are a convenience layer; never fail a run over plotting
        return []


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _render_quadratic_demo(result: dict, out_dir: Path) -> list[Path]:
    demo = result.get("demo")
    if not demo:
        return []
    fig, axes = plt.subplots(1, 2, figsize=(9.5, 4))
    ax = axes[0]
    mgd, mgf, gd = demo["mgd"], demo["mgf"], demo["gd"]
    ax.plot(mgf.positions[:, 0], mgf.positions[:, 1], "-", color="tab:blue", lw=1.2, label="momentum flow")
    ax.plot(mgd.states[::10, 0], mgd.states[::10, 1], ".", color="tab:orange", ms=3, label="momentum descent")
    ax.plot(gd.states[::10, 0], gd.states[::10, 1], ".", color="tab:green", ms=3, label="gradient descent")
    ax.set_xlabel("$w_1$")
    ax.set_ylabel("$w_2$")
    ax.legend(fontsize=8)
    ax.set_title("trajectories over the 2-D quadratic")

    ax = axes[1]
    acc = demo["mgd_accelerated"]
    k = np.arange(1, len(mgd.losses) + 1)
    ax.semilogy(k, mgd.losses, label="base pair")
    ax.semilogy(np.arange(1, len(acc.losses) + 1) * 2, acc.losses, "--", label="accelerated pair (x2 steps)")
    ax.set_xlabel("step of the base run")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.set_title("acceleration rule")
    return [_save(fig, out_dir / "quadratic_demo.png")]


def _nanmean(values) -> float:
    vals = [v for v in values if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def _render_sweep(result: dict, out_dir: Path) -> list[Path]:
    rows = [r for r in result["rows"] if r.get("lambda", 0) > 0]
    base = [r for r in result["rows"] if r.get("lambda", 1) == 0]
    if not rows:
        return []
    lams = sorted({r["lambda"] for r in rows})
    test = [_nanmean([r["test_loss"] for r in rows if r["lambda"] == l]) for l in lams]
    dinf = [_nanmean([r["delta_inf_l2"] for r in rows if r["lambda"] == l]) for l in lams]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(lams, test, "o-", color="tab:blue", label="test loss")
    if base:
        gf_loss = _nanmean([r["test_loss"] for r in base])
        ax.axhline(gf_loss, color="tab:blue", ls=":", lw=1, label="gradient-flow baseline")
    ax.set_xlabel("trajectory parameter")
    ax.set_ylabel("test loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.loglog(lams, dinf, "s-", color="tab:red", label="balancedness magnitude")
    ax2.set_ylabel("|asymptotic balancedness|", color="tab:red")
    ax.set_title("test loss and balancedness at convergence")
    return [_save(fig, out_dir / "lambda_sweep.png")]


def _render_grid(result: dict, out_dir: Path) -> list[Path]:
    rows = [r for r in result["rows"] if not np.isnan(r.get("test_loss", np.nan))]
    if not rows:
        return []
    fig, axes = plt.subplots(1, 2, figsize=(9.5, 4))
    ax = axes[0]
    lams = [r["lambda"] for r in rows]
    tests = [r["test_loss"] for r in rows]
    betas = [r["beta"] for r in rows]
    sc = ax.scatter(lams, tests, c=betas, cmap="viridis", s=25)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("trajectory parameter")
    ax.set_ylabel("test loss")
    fig.colorbar(sc, ax=ax, label="momentum")
    ratio = result.get("diagnostics", {}).get("level_line_ratio")
    title = "test loss collapses onto the trajectory parameter"
    if ratio is not None:
        title += f" (variance ratio {ratio:.3f})"
    ax.set_title(title, fontsize=9)

    ax = axes[1]
    dinf = [r.get("delta_inf_l2", np.nan) for r in rows]
    ax.scatter(lams, dinf, c=betas, cmap="viridis", s=25)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("trajectory parameter")
    ax.set_ylabel("|asymptotic balancedness|")
    ax.set_title("balancedness at convergence", fontsize=9)
    return [_save(fig, out_dir / "grid.png")]


def _render_simple_grid(result: dict, out_dir: Path) -> list[Path]:
    rows = result["rows"]
    if not rows:
        return []
    fig, ax = plt.subplots(figsize=(5.5, 4))
    lams = [r["lambda"] for r in rows]
    tests = [max(r["test_loss"], 1e-300) for r in rows]
    betas = [r["beta"] for r in rows]
    sc = ax.scatter(lams, tests, c=betas, cmap="viridis", s=30)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("trajectory parameter")
    ax.set_ylabel("test loss")
    fig.colorbar(sc, ax=ax, label="momentum")
    return [_save(fig, out_dir / "grid.png")]


def _render_bias_verify(result: dict, out_dir: Path) -> list[Path]:
    rows = result["rows"]
    if not rows:
        return []
    fig, ax = plt.subplots(figsize=(5.5, 4))
    lams = [max(r["lambda"], 1e-4) for r in rows]
    ax.semilogx(lams, [r["normalized_distance"] for r in rows], "o", label="normalized distance")
    ax.semilogx(lams, [r["kkt_residual"] for r in rows], "s", label="KKT residual")
    ax.axhline(0.01, color="gray", ls=":", lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("trajectory parameter")
    ax.set_ylabel("deviation")
    ax.legend(fontsize=8)
    ax.set_title("recovered interpolator vs constrained minimiser")
    return [_save(fig, out_dir / "bias_verify.png")]


_RENDERERS = {
    "quadratic_demo": _render_quadratic_demo,
    "mgf_lambda_sweep": _render_sweep,
    "mgd_grid": _render_grid,
    "smgd_grid": _render_grid,
    "teacher_student_grid": _render_simple_grid,
    "deep_linear_grid": _render_simple_grid,
    "bias_verify": _render_bias_verify,
}
