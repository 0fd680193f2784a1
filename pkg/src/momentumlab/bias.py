"""Implicit-regularization machinery.

Everything needed to characterise which interpolator a momentum run recovers:
the hyperbolic entropy potential and its calculus, online residue sums over
consecutive-iterate ratios, the exact finite-horizon balancedness identity,
the constrained minimum-entropy solver with its dual certificate, KKT
residuals, and the small-lambda crossing-free threshold.

Numerical ranges are hostile here: entropy scales span 1e-12 .. 1e6 and the
dual variables push sinh/cosh arguments to +-40 and beyond, so arcsinh and the
dual objective are evaluated with explicit log-domain branches and overflow
clamping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset, population_test_loss
from .errors import DimensionMismatchError, NewtonError, NotConvergedError

_LN2 = float(np.log(2.0))
_BIG_RATIO = 1e8          # switch arcsinh to its log-domain asymptote
_MAX_COSH_ARG = 700.0     # cosh overflows just past 710


# --- hyperbolic entropy --------------------------------------------------------


@dataclass
class EntropyScale:
    delta: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)
        if self.delta.ndim != 1 or self.delta.size == 0:
            raise DimensionMismatchError("delta must be a nonempty vector")
        if np.min(self.delta) <= 0.0:
            raise ValueError("entropy scale must be strictly positive")


def _arcsinh_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """arcsinh(num/den) for den > 0, stable when |num/den| is astronomically large."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    with np.errstate(over="ignore"):
        ratio = num / den
    out = np.arcsinh(np.clip(ratio, -_BIG_RATIO, _BIG_RATIO))
    big = np.abs(ratio) > _BIG_RATIO
    if np.any(big):
        # arcsinh(x) = sign(x) ln(2|x|) + O(1/x^2) past the branch point
        nb = num[big] if num.ndim else num
        db = den[big] if den.ndim else den
        out[big] = np.sign(nb) * (_LN2 + np.log(np.abs(nb)) - np.log(db))
    return out


def hyperbolic_entropy(theta: np.ndarray, scale: EntropyScale) -> float:
    """Convex potential interpolating between l1 (delta -> 0) and scaled l2 behaviour.

    Per coordinate: (2 t asinh(2t/D) - sqrt(4t^2 + D^2) + D) / 4.  Zero iff theta = 0.
    """
    theta = _check_theta(theta, scale)
    two_t = 2.0 * theta
    asinh = _arcsinh_ratio(two_t, scale.delta)
    return float(np.sum(two_t * asinh - np.hypot(two_t, scale.delta) + scale.delta)) / 4.0


def grad_hyperbolic_entropy(theta: np.ndarray, scale: EntropyScale) -> np.ndarray:
    """Gradient: arcsinh(2 theta / delta) / 2."""
    theta = _check_theta(theta, scale)
    return 0.5 * _arcsinh_ratio(2.0 * theta, scale.delta)


def hess_diag(theta: np.ndarray, scale: EntropyScale) -> np.ndarray:
    """Diagonal Hessian: 1 / sqrt(4 theta^2 + delta^2)."""
    theta = _check_theta(theta, scale)
    return 1.0 / np.hypot(2.0 * theta, scale.delta)


def bregman_divergence(theta1: np.ndarray, theta2: np.ndarray, scale: EntropyScale) -> float:
    t1 = _check_theta(theta1, scale)
    t2 = _check_theta(theta2, scale)
    g2 = grad_hyperbolic_entropy(t2, scale)
    return hyperbolic_entropy(t1, scale) - hyperbolic_entropy(t2, scale) - float(g2 @ (t1 - t2))


def entropy_l1_asymptotic_gap(theta: np.ndarray, scale: EntropyScale) -> float:
    """Relative gap between the entropy and its small-scale l1 asymptote.

    The asymptote used is 0.5 * sum_i ln(1/delta_i) |theta_i|, the constant the
    arcsinh expansion of the entropy actually produces (see README note on the
    1/4-vs-1/2 discrepancy).  Requires theta != 0.
    """
    theta = _check_theta(theta, scale)
    ref = 0.5 * float(np.sum(np.log(1.0 / scale.delta) * np.abs(theta)))
    if ref == 0.0:
        raise ValueError("asymptotic gap undefined for theta = 0")
    return hyperbolic_entropy(theta, scale) / ref - 1.0


def _check_theta(theta, scale: EntropyScale) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != scale.delta.shape:
        raise DimensionMismatchError("theta and entropy scale must have matching shapes")
    return theta


# --- residue sums over iterate ratios ------------------------------------------
#
# For a branch sequence w_k, each transition contributes r(z) = (z-1) - ln|z|
# with z the forward consecutive ratio.  Two kinds of sums are maintained:
#
#   * S-partial sums:  (sum r_fwd + beta sum r_bwd) / (1-beta), the trajectory
#     functional whose limit controls the asymptotic balancedness;
#   * the finite-horizon weighted sums  sum_m (1 - beta^{N+1-m}) Q_m  with
#     Q_m = r_fwd[m] + beta r_bwd[m-1], maintained online via the split
#     A_N - beta G_N where G is a geometric tail accumulator.
#
# Both branches are stored stacked as [plus; minus] so one vector pass per
# step covers everything.


def _r(z: np.ndarray) -> np.ndarray:
    return (z - 1.0) - np.log(np.abs(z))


@dataclass
class ResidueAccumulator:
    beta: float
    d: int
    sum_fwd: np.ndarray          # sum of r(w_{k+1}/w_k), stacked (2d,)
    sum_bwd: np.ndarray          # sum of r(w_k/w_{k+1})
    q_sum: np.ndarray            # A_N = sum of residues Q_m
    q_geo: np.ndarray            # G_N = sum beta^{N-m} Q_m
    prev_bwd: np.ndarray         # r_bwd of the previous transition (feeds next Q)
    signs: np.ndarray            # signs at init; current parity is crossings mod 2
    crossings: np.ndarray        # int sign-change counts, stacked (2d,)
    steps: int = 0

    @classmethod
    def fresh(cls, beta: float, w_pm0: np.ndarray) -> "ResidueAccumulator":
        w_pm0 = np.asarray(w_pm0, dtype=float)
        m = w_pm0.size
        if m % 2 != 0:
            raise DimensionMismatchError("stacked branch vector must have even length")
        z = np.zeros(m)
        return cls(
            beta=float(beta),
            d=m // 2,
            sum_fwd=z.copy(),
            sum_bwd=z.copy(),
            q_sum=z.copy(),
            q_geo=z.copy(),
            prev_bwd=z.copy(),
            signs=np.sign(w_pm0),
            crossings=np.zeros(m, dtype=np.int64),
            steps=0,
        )

    def update(self, w_old: np.ndarray, w_new: np.ndarray) -> None:
        """Fold in one transition w_old -> w_new (stacked branches, no zeros).

        Runs once per optimizer step, so everything below works in
        preallocated scratch to keep the per-step cost down.
        """
        z, lz, r_fwd = self._z, self._lz, self._fwd
        np.divide(w_new, w_old, out=z)
        np.abs(z, out=lz)
        np.log(lz, out=lz)
        np.subtract(z, 1.0, out=r_fwd)
        r_fwd -= lz
        r_bwd = self._bwd
        np.divide(w_old, w_new, out=r_bwd)
        r_bwd -= 1.0
        r_bwd += lz
        # residue of this transition: r_fwd[m] + beta * r_bwd[m-1]
        q = lz
        np.multiply(self.prev_bwd, self.beta, out=q)
        q += r_fwd
        self.q_geo *= self.beta
        self.q_geo += q
        self.q_sum += q
        self.sum_fwd += r_fwd
        self.sum_bwd += r_bwd
        self.prev_bwd, self._bwd = r_bwd, self.prev_bwd
        self.crossings += z < 0.0
        self.steps += 1

    def __post_init__(self):
        self._z = np.empty(2 * self.d)
        self._lz = np.empty(2 * self.d)
        self._fwd = np.empty(2 * self.d)
        self._bwd = np.empty(2 * self.d)

    def s_partial(self) -> np.ndarray:
        """Stacked partial sums of S (converges to S_+/S_- as the run converges)."""
        return (self.sum_fwd + self.beta * self.sum_bwd) / (1.0 - self.beta)

    def identity_exponent_branches(self) -> np.ndarray:
        """Stacked per-branch exponents E with |w_(N+1)| = |w_0| exp(-E -+ data terms).

        E = sum_m (1 - beta^{N+1-m}) Q_m / (1 - beta), assembled from the
        running and geometric residue sums.  Converges to the same limit as
        `s_partial` but is exact at every finite horizon, so reports built
        from it reproduce the current balancedness to rounding error.
        """
        return (self.q_sum - self.beta * self.q_geo) / (1.0 - self.beta)

    def identity_exponent(self) -> np.ndarray:
        """Per-coordinate exponent E_N with Delta_{N+1} = Delta_0 exp(-E_N), exact."""
        weighted = self.identity_exponent_branches()
        return weighted[: self.d] + weighted[self.d :]

    @property
    def s_plus(self) -> np.ndarray:
        return self.s_partial()[: self.d]

    @property
    def s_minus(self) -> np.ndarray:
        return self.s_partial()[self.d :]

    @property
    def crossings_plus(self) -> np.ndarray:
        return self.crossings[: self.d]

    @property
    def crossings_minus(self) -> np.ndarray:
        return self.crossings[self.d :]


def accumulate_residues(acc: ResidueAccumulator, w_pm_k, w_pm_k1) -> ResidueAccumulator:
    """Fold the transition from PMState w_pm_k to w_pm_k1 into the accumulator."""
    old = np.concatenate((w_pm_k.w_plus, w_pm_k.w_minus))
    new = np.concatenate((w_pm_k1.w_plus, w_pm_k1.w_minus))
    if np.any(old == 0.0) or np.any(new == 0.0):
        raise ValueError("exact-zero coordinate reached the residue accumulator; upstream guard failed")
    acc.update(old, new)
    return acc


def finite_N_balancedness_identity(trajectory) -> float:
    """Max relative violation of Delta_{N+1} = Delta_0 exp(-E_N) over logged steps.

    The identity is algebraically exact for the momentum recursion, so the
    violation measures only floating-point drift.
    """
    if trajectory.delta_samples is None or trajectory.identity_exponent_samples is None:
        raise ValueError("trajectory carries no balancedness log (not a diagonal-net run?)")
    delta0 = trajectory.delta0
    predicted = delta0[None, :] * np.exp(-trajectory.identity_exponent_samples)
    ratio = trajectory.delta_samples / predicted
    return float(np.max(np.abs(ratio - 1.0)))


# --- constrained minimum-entropy interpolator -----------------------------------


@dataclass
class DualCertificate:
    nu: np.ndarray                  # multiplier on the interpolation constraints
    theta: np.ndarray
    primal_feasibility: float       # ||X theta - y|| / ||y||
    stationarity: float             # || grad psi(theta) - grad psi(theta0~) - X' nu ||
    iterations: int = 0


def _dual_value(nu: np.ndarray, zeta2: np.ndarray, delta: np.ndarray, y: np.ndarray) -> float:
    # D(nu) = nu.y - sum delta/4 (cosh(2 zeta) - 1); -inf once cosh overflows
    if np.max(np.abs(zeta2)) > _MAX_COSH_ARG:
        return -np.inf
    return float(nu @ y) - 0.25 * float(delta @ (np.cosh(zeta2) - 1.0))


def solve_min_entropy_interpolator(
    dataset: Dataset,
    scale: EntropyScale,
    theta_tilde0: np.ndarray | None = None,
    feas_tol: float = 1e-10,
    max_iter: int = 200,
):
    """Bregman-project theta_tilde0 onto the interpolators under the entropy at `scale`.

    Solves  min_theta  psi_delta(theta) - <grad psi_delta(theta_tilde0), theta>
    s.t. X theta = y  by damped Newton ascent on the concave dual
    D(nu) = <nu, y> - sum_i delta_i/4 (cosh(2 zeta_i) - 1),  zeta = c + X' nu,
    where the primal map is theta(nu) = delta/2 sinh(2 zeta).  Stationarity is
    exact by construction; feasibility is the convergence criterion.

    Returns (theta, DualCertificate).  Raises NewtonError with the best
    residual if feasibility stalls above `feas_tol`.
    """
    X, y = dataset.features, dataset.targets
    n, d = X.shape
    delta = scale.delta
    if delta.shape != (d,):
        raise DimensionMismatchError("entropy scale must match the feature dimension")
    if theta_tilde0 is None:
        c = np.zeros(d)
    else:
        c = grad_hyperbolic_entropy(np.asarray(theta_tilde0, dtype=float), scale)

    y_norm = max(float(np.linalg.norm(y)), 1e-300)
    nu = np.zeros(n)
    zeta2 = 2.0 * c
    dual_cur = _dual_value(nu, zeta2, delta, y)
    best = np.inf
    warmed_up = False

    for it in range(max_iter):
        theta = 0.5 * delta * np.sinh(np.clip(zeta2, -_MAX_COSH_ARG, _MAX_COSH_ARG))
        resid = X @ theta - y
        feas = float(np.linalg.norm(resid)) / y_norm
        best = min(best, feas)
        if feas <= feas_tol:
            return theta, _certificate(nu, theta, c, scale, feas, X, it)

        weights = delta * np.cosh(np.clip(zeta2, -_MAX_COSH_ARG, _MAX_COSH_ARG))
        J = (X * weights) @ X.T
        try:
            dnu = np.linalg.solve(J, -resid)
        except np.linalg.LinAlgError:
            dnu = np.linalg.lstsq(J, -resid, rcond=None)[0]

        # Arguments of sinh may only grow by a bounded amount per iteration.
        growth = float(np.max(np.abs(2.0 * (X.T @ dnu))))
        s = min(1.0, 30.0 / growth) if growth > 0 else 1.0
        slope = float(-resid @ dnu)            # directional derivative of the dual
        flat = 4.0 * np.finfo(float).eps * (abs(dual_cur) + 1.0)

        accepted = False
        for _ in range(60):
            nu_try = nu + s * dnu
            zeta2_try = 2.0 * (c + X.T @ nu_try)
            dual_try = _dual_value(nu_try, zeta2_try, delta, y)
            if np.isfinite(dual_try):
                if dual_try >= dual_cur + 1e-4 * s * max(slope, 0.0):
                    ok = True
                else:
                    # near the optimum the dual gain drops below float
                    # resolution; fall back to residual decrease (the Newton
                    # direction always shrinks ||R|| for this SPD system)
                    theta_try = 0.5 * delta * np.sinh(np.clip(zeta2_try, -_MAX_COSH_ARG, _MAX_COSH_ARG))
                    feas_try = float(np.linalg.norm(X @ theta_try - y)) / y_norm
                    ok = dual_try >= dual_cur - flat and feas_try < feas
                if ok:
                    nu, zeta2, dual_cur = nu_try, zeta2_try, dual_try
                    accepted = True
                    break
            s *= 0.5
        if not accepted:
            if it == 0 and not warmed_up:
                nu, zeta2, dual_cur = _mirror_warmup(nu, c, delta, X, y, dual_cur)
                warmed_up = True
                continue
            raise NewtonError(f"dual Newton stalled at feasibility {best:.3e}", best_residual=best)

    raise NewtonError(f"dual Newton did not reach {feas_tol:.1e} in {max_iter} iterations", best_residual=best)


def _mirror_warmup(nu, c, delta, X, y, dual_cur, steps: int = 20):
    """Backtracked gradient-ascent steps on the dual, used when Newton's first step fails."""
    for _ in range(steps):
        zeta2 = 2.0 * (c + X.T @ nu)
        theta = 0.5 * delta * np.sinh(np.clip(zeta2, -_MAX_COSH_ARG, _MAX_COSH_ARG))
        g = y - X @ theta
        s = 1.0
        for _ in range(80):
            nu_try = nu + s * g
            zeta2_try = 2.0 * (c + X.T @ nu_try)
            dual_try = _dual_value(nu_try, zeta2_try, delta, y)
            if np.isfinite(dual_try) and dual_try > dual_cur:
                nu, dual_cur = nu_try, dual_try
                break
            s *= 0.5
    return nu, 2.0 * (c + X.T @ nu), dual_cur


def _certificate(nu, theta, c, scale, feas, X, iterations) -> DualCertificate:
    stat = grad_hyperbolic_entropy(theta, scale) - c - X.T @ nu
    return DualCertificate(
        nu=nu,
        theta=theta,
        primal_feasibility=feas,
        stationarity=float(np.linalg.norm(stat)),
        iterations=iterations,
    )


def kkt_residual(dataset: Dataset, theta, scale: EntropyScale, theta_tilde0=None) -> float:
    """Relative null-space component of grad psi(theta) - grad psi(theta_tilde0).

    Zero exactly at the constrained minimiser (the gradient difference then
    lies in the row span of X).
    """
    g = grad_hyperbolic_entropy(np.asarray(theta, dtype=float), scale)
    if theta_tilde0 is not None:
        g = g - grad_hyperbolic_entropy(np.asarray(theta_tilde0, dtype=float), scale)
    Z = _null_space_basis(dataset)
    if Z.shape[1] == 0:
        return 0.0
    return float(np.linalg.norm(Z.T @ g)) / max(float(np.linalg.norm(g)), 1e-30)


def _null_space_basis(dataset: Dataset) -> np.ndarray:
    """Orthonormal basis of ker(X), computed once per dataset and cached on it."""
    cached = getattr(dataset, "_null_basis", None)
    if cached is not None:
        return cached
    X = dataset.features
    _, sv, vt = np.linalg.svd(X, full_matrices=True)
    tol = max(X.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > tol))
    basis = vt[rank:].T
    dataset._null_basis = basis
    return basis


def small_lambda_threshold(dataset: Dataset, delta0) -> float:
    """n * min(delta0) / ||y||^2: below this, balancedness provably never vanishes."""
    delta0 = np.asarray(delta0, dtype=float)
    ysq = float(dataset.targets @ dataset.targets)
    if ysq == 0.0:
        raise ValueError("threshold undefined for y = 0")
    return dataset.n * float(np.min(delta0)) / ysq


# --- per-run implicit-bias verdict ----------------------------------------------


@dataclass
class BiasReport:
    lam: float
    gamma: float | None
    beta: float | None
    seed: int | None
    delta0: np.ndarray
    delta_inf: np.ndarray
    s_plus: np.ndarray
    s_minus: np.ndarray
    theta_tilde0: np.ndarray
    theta_recovered: np.ndarray
    crossings_plus: int
    crossings_minus: int
    kkt_residual: float
    test_loss: float
    l1_norm: float
    train_loss_final: float
    crossing_regime: bool = False
    alpha: float | None = None
    extra: dict = field(default_factory=dict)


def bias_report(trajectory, dataset: Dataset, alpha: float, seed: int | None = None) -> BiasReport:
    """Assemble the implicit-bias verdict for one converged diagonal-net run.

    Discrete runs use the residue sums directly.  Crossing-free continuous runs
    use the path quadrature lam * int (w'/w)^2 dt in place of the residue sums;
    runs whose branches crossed zero fall back to a matched fine-step discrete
    rerun (step size <= 1e-4) and are flagged `crossing_regime`.
    """
    from . import continuous, discrete  # deferred: avoids an import cycle

    if trajectory.stop_reason != "converged":
        raise NotConvergedError(f"bias report requires a converged run, got {trajectory.stop_reason!r}")

    if isinstance(trajectory, discrete.TrajectoryLog):
        if trajectory.residues is None:
            raise ValueError("trajectory carries no residue data (not a diagonal-net run?)")
        acc = trajectory.residues
        # finite-horizon-exact evaluation of the residue sums (same limit as
        # the raw ratio sums, but free of the geometric stopping tail)
        exponents = acc.identity_exponent_branches()
        s_plus, s_minus = exponents[: acc.d].copy(), exponents[acc.d :].copy()
        lam = discrete.lambda_of(trajectory.hyper.gamma, trajectory.hyper.beta)
        gamma, beta = trajectory.hyper.gamma, trajectory.hyper.beta
        cross_p = int(np.sum(acc.crossings_plus))
        cross_m = int(np.sum(acc.crossings_minus))
        crossing_regime = False
        w_pm0 = trajectory.w_pm0
        theta_rec = trajectory.terminal_theta()
        final_loss = float(trajectory.losses[-1])
    elif isinstance(trajectory, continuous.ContinuousTrajectory):
        lam = trajectory.lam
        gamma = beta = None
        cross_p = int(np.sum(trajectory.crossings_plus))
        cross_m = int(np.sum(trajectory.crossings_minus))
        w_pm0 = trajectory.w_pm0
        theta_rec = trajectory.terminal_theta()
        final_loss = float(trajectory.losses[-1])
        if cross_p + cross_m == 0:
            # lam * (int_0^T (w'/w)^2 dt + w'(T)/w(T)) estimates the infinite-horizon
            # sum; the endpoint term removes the finite-stopping defect, leaving only
            # the (nonnegative) tail integral beyond T as error.
            d0 = dataset.d
            pos, vel = trajectory.terminal.position, trajectory.terminal.velocity
            w_end = np.concatenate((pos[:d0] + pos[d0:], pos[:d0] - pos[d0:]))
            wdot_end = np.concatenate((vel[:d0] + vel[d0:], vel[:d0] - vel[d0:]))
            gdot_end = wdot_end / w_end
            s_plus = lam * (trajectory.quad_main_plus + gdot_end[:d0])
            s_minus = lam * (trajectory.quad_main_minus + gdot_end[d0:])
            crossing_regime = False
        else:
            s_plus, s_minus = _crossing_proxy_sums(trajectory, dataset, lam)
            crossing_regime = True
    else:
        raise TypeError(f"unsupported trajectory type {type(trajectory).__name__}")

    d = dataset.d
    delta0 = trajectory.delta0
    delta_inf = delta0 * np.exp(-(s_plus + s_minus))
    theta_tilde0 = 0.25 * (w_pm0[:d] ** 2 * np.exp(-2.0 * s_plus) - w_pm0[d:] ** 2 * np.exp(-2.0 * s_minus))

    kkt = kkt_residual(dataset, theta_rec, EntropyScale(delta_inf), theta_tilde0)
    if dataset.ground_truth is not None:
        test = population_test_loss(theta_rec, dataset.ground_truth, dataset.mean, dataset.stddev)
    else:
        test = float("nan")

    return BiasReport(
        lam=float(lam),
        gamma=gamma,
        beta=beta,
        seed=seed,
        delta0=delta0,
        delta_inf=delta_inf,
        s_plus=s_plus,
        s_minus=s_minus,
        theta_tilde0=theta_tilde0,
        theta_recovered=theta_rec,
        crossings_plus=cross_p,
        crossings_minus=cross_m,
        kkt_residual=float(kkt),
        test_loss=float(test),
        l1_norm=float(np.sum(np.abs(theta_rec))),
        train_loss_final=final_loss,
        crossing_regime=crossing_regime,
        alpha=float(alpha),
    )


def _crossing_proxy_sums(trajectory, dataset: Dataset, lam: float):
    """Residue sums from a fine-step discrete rerun matched to the continuous run.

    The raw path integrals diverge across a sign crossing, so the report falls
    back to the discrete machinery, which is exact at any step size; the step
    is chosen small enough (gamma <= 1e-4) that the rerun shadows the flow.
    """
    from . import discrete

    gamma = min(1e-4, 0.25 * lam)
    beta = 1.0 - np.sqrt(gamma / lam)
    d = dataset.d
    u0 = (trajectory.w_pm0[:d] + trajectory.w_pm0[d:]) / 2.0
    v0 = (trajectory.w_pm0[:d] - trajectory.w_pm0[d:]) / 2.0
    hyper = discrete.DiscreteHyper(
        gamma=gamma,
        beta=beta,
        stop_loss=max(trajectory.stop_loss, 1e-12),
        max_steps=4_000_000,
        sample_every=100_000,
    )
    from .models import WeightState

    proxy = discrete.run_smgd(dataset, WeightState(u0, v0), hyper, seed=0)
    if proxy.stop_reason != "converged":
        raise NotConvergedError("crossing-regime proxy rerun did not converge")
    return proxy.residues.s_plus.copy(), proxy.residues.s_minus.copy()
