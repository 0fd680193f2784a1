"""Adaptive integration of momentum gradient flow and gradient flow.

The flow lam w'' + w' + grad F(w) = 0 (and the first-order flow at lam = 0) is
integrated with an embedded Dormand-Prince 5(4) pair: PI step-size control,
quartic dense output, per-coordinate sign-crossing location by bisection on
the interpolant, and per-step Gauss quadrature of the branch path integrals
int (w'/w)^2 dt that feed the implicit-bias reports.

Structural choices that matter for accuracy and speed:

* Diagonal nets are driven in the stacked branch coordinates [w_plus; w_minus]
  (a linear change of variables), so crossing detection and quadrature read
  the state directly instead of recombining (u, v) at every stage.
* Gradient flow over diagonal nets is driven in log branch coordinates
  g = ln|w_pm| (branch signs are constants of that motion).  Balancedness
  becomes the linear invariant g_plus + g_minus, which Runge-Kutta steps
  preserve to roundoff, so conservation drift stays orders of magnitude below
  what direct integration of a quadratic invariant achieves.
* The dense output is the standard quartic continuous extension of the pair
  rather than a cubic Hermite, keeping interpolation error at the same order
  as the step error; the path-integral accumulators inherit that accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StepSizeUnderflowError
from .models import ModelSpec, network_value_and_grad

# Dormand-Prince 5(4) tableau and the quartic dense-output matrix.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = np.array(
    [
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [1 / 5, 0.0, 0.0, 0.0, 0.0],
        [3 / 40, 9 / 40, 0.0, 0.0, 0.0],
        [44 / 45, -56 / 15, 32 / 9, 0.0, 0.0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0.0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    ]
)
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
_P = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

_g_nodes, _g_weights = np.polynomial.legendre.leggauss(5)
_GAUSS_NODES = (_g_nodes + 1.0) / 2.0        # on [0, 1]
_GAUSS_WEIGHTS = _g_weights / 2.0

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
_ERR_EXPONENT = 0.17                          # 1/5 with Lund stabilisation
_PI_BETA = 0.04
_GUARD_FACTOR = 1e12


@dataclass
class SecondOrderState:
    position: np.ndarray
    velocity: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if self.position.shape != self.velocity.shape:
            raise ValueError("position and velocity must have the same shape")
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("state entries must be finite")


@dataclass
class IntegratorConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_time: float = np.inf
    stop_loss: float | None = None
    initial_step: float | None = None
    dense_sample_count: int = 400
    max_step: float = np.inf
    max_steps: int = 20_000_000
    quadrature: bool = True
    guard_width: float = 1e-12

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.dense_sample_count < 2:
            raise ValueError("dense_sample_count must be >= 2")

    def replace(self, **overrides) -> "IntegratorConfig":
        fields_ = {k: getattr(self, k) for k in IntegratorConfig.__dataclass_fields__}
        fields_.update(overrides)
        return IntegratorConfig(**fields_)


@dataclass
class ContinuousTrajectory:
    times: np.ndarray
    losses: np.ndarray
    energies: np.ndarray
    positions: np.ndarray                 # (S, D); diagonal nets store [u; v]
    velocities: np.ndarray | None
    stop_reason: str                      # converged | max_time | max_steps | diverged
    terminal: SecondOrderState
    lam: float
    n_steps: int
    n_rhs: int
    max_energy_increase: float
    stop_loss: float
    # diagonal-net extras
    delta_samples: np.ndarray | None = None
    delta0: np.ndarray | None = None
    w_pm0: np.ndarray | None = None
    crossing_events: list = field(default_factory=list)    # (time, coord, branch, direction)
    crossings_plus: np.ndarray | None = None
    crossings_minus: np.ndarray | None = None
    crossing_totals: np.ndarray | None = None              # (S, 2) cumulative at samples
    quad_main_plus: np.ndarray | None = None               # int (w'/w)^2 dt, guarded
    quad_main_minus: np.ndarray | None = None
    quad_window_plus: np.ndarray | None = None             # suspended near-crossing part
    quad_window_minus: np.ndarray | None = None
    delta_drift_max: float | None = None                   # max ||Delta_t - Delta_0||_inf at nodes

    def terminal_theta(self) -> np.ndarray:
        if self.w_pm0 is None:
            raise ValueError("not a diagonal-net trajectory")
        d = self.w_pm0.size // 2
        u, v = self.terminal.position[:d], self.terminal.position[d:]
        return u * v

    def to_csv(self, path) -> None:
        """t, loss, energy[, delta_min, delta_l2, crossings_plus_total, crossings_minus_total]."""
        from .tables import write_csv

        diag = self.delta_samples is not None
        header = ["t", "loss", "energy"]
        if diag:
            header += ["delta_min", "delta_l2", "crossings_plus_total", "crossings_minus_total"]
        rows = []
        for i, t in enumerate(self.times):
            row = [float(t), float(self.losses[i]), float(self.energies[i])]
            if diag:
                row += [
                    float(np.min(self.delta_samples[i])),
                    float(np.linalg.norm(self.delta_samples[i])),
                    int(self.crossing_totals[i, 0]),
                    int(self.crossing_totals[i, 1]),
                ]
            rows.append(row)
        write_csv(path, header, rows)


# --- public operations -----------------------------------------------------------


def mgf_rhs(spec: ModelSpec, lam: float, state: SecondOrderState):
    """(w', w'') of the momentum flow at `state`; lam must be positive."""
    if lam <= 0:
        raise ValueError("lam must be positive (use integrate_gf for the first-order flow)")
    _, grad = network_value_and_grad(spec, state.position)
    return state.velocity, -(state.velocity + grad) / lam


def energy(spec: ModelSpec, lam: float, state: SecondOrderState) -> float:
    """Lyapunov energy F(w) + lam/2 ||w'||^2 (its time derivative is -||w'||^2)."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    value, _ = network_value_and_grad(spec, state.position)
    return value + 0.5 * lam * float(state.velocity @ state.velocity)


def integrate_mgf(
    spec: ModelSpec,
    lam: float,
    init: SecondOrderState,
    cfg: IntegratorConfig,
    t_eval: np.ndarray | None = None,
) -> ContinuousTrajectory:
    """Integrate lam w'' + w' + grad F(w) = 0 from `init`.

    Diagonal nets get branch crossing events and path-integral accumulators;
    their initial balancedness must be strictly positive coordinate-wise.
    """
    if lam <= 0:
        raise ValueError("lam must be positive (use integrate_gf for the first-order flow)")
    return _integrate_mass_damped(spec, lam, 1.0, init, cfg, t_eval, lam_label=lam)


def integrate_gf(
    spec: ModelSpec,
    init: np.ndarray,
    cfg: IntegratorConfig,
    t_eval: np.ndarray | None = None,
) -> ContinuousTrajectory:
    """Integrate the gradient flow w' = -grad F(w) from `init`.

    Diagonal nets are driven in log branch coordinates, which conserves
    balancedness to roundoff and freezes all branch signs (crossings cannot
    occur, matching the conserved-quantity structure of this flow).
    """
    init = np.asarray(init, dtype=float)
    if spec.kind == "diagonal_net":
        return _integrate_gf_diag(spec, init, cfg, t_eval)

    loss_fn, grad_fn = _fns(spec)

    def rhs_out(y, out):
        out[:] = grad_fn(y)
        np.negative(out, out=out)

    run = _drive(rhs_out, init, cfg, loss_of=loss_fn, energy_of=_loss_energy, t_eval=t_eval, tracker=None)
    samples = run["samples"]
    return ContinuousTrajectory(
        times=np.array([s.t for s in samples]),
        losses=np.array([s.loss for s in samples]),
        energies=np.array([s.energy for s in samples]),
        positions=np.array([s.y for s in samples]),
        velocities=None,
        stop_reason=run["stop_reason"],
        terminal=SecondOrderState(run["terminal_y"], -grad_fn(run["terminal_y"]), run["terminal_t"]),
        lam=0.0,
        n_steps=run["n_steps"],
        n_rhs=run["n_rhs"],
        max_energy_increase=run["max_energy_increase"],
        stop_loss=cfg.stop_loss if cfg.stop_loss is not None else 0.0,
    )


def time_rescaled_equivalence(
    a: float,
    b: float,
    spec: ModelSpec,
    init: SecondOrderState,
    cfg: IntegratorConfig,
) -> float:
    """Sup-norm deviation between a w'' + b w' + grad F = 0 and its one-parameter reduction.

    The reduced flow has lam = a/b^2 and initial velocity b w'(0); its solution
    at time t must equal the general solution at time b t.  Returns the largest
    coordinate deviation over cfg.dense_sample_count comparison times.
    """
    if a < 0 or b <= 0:
        raise ValueError("need a >= 0 and b > 0")
    if not np.isfinite(cfg.max_time):
        raise ValueError("time_rescaled_equivalence needs a finite max_time horizon")
    grid = np.linspace(0.0, cfg.max_time, cfg.dense_sample_count)

    if a == 0:
        loss_fn, grad_fn = _fns(spec)

        def rhs_ref(y, out):
            out[:] = grad_fn(y)
            np.negative(out, out=out)

        def rhs_gen(y, out):
            out[:] = grad_fn(y)
            out *= -1.0 / b

        ref = _drive(rhs_ref, init.position, cfg, loss_of=loss_fn, energy_of=_loss_energy, t_eval=grid, tracker=None)
        gen = _drive(rhs_gen, init.position, cfg.replace(max_time=b * cfg.max_time),
                     loss_of=loss_fn, energy_of=_loss_energy, t_eval=b * grid, tracker=None)
        ref_pos = np.array([s.y for s in ref["samples"]])
        gen_pos = np.array([s.y for s in gen["samples"]])
    else:
        lam = a / b**2
        ref_init = SecondOrderState(init.position, b * init.velocity, init.time)
        ref = _integrate_mass_damped(spec, lam, 1.0, ref_init, cfg, t_eval=grid, lam_label=lam)
        gen = _integrate_mass_damped(
            spec, a, b, init, cfg.replace(max_time=b * cfg.max_time), t_eval=b * grid, lam_label=lam
        )
        ref_pos, gen_pos = ref.positions, gen.positions
    m = min(len(ref_pos), len(gen_pos))
    return float(np.max(np.abs(ref_pos[:m] - gen_pos[:m])))


# --- model-specific fast paths -----------------------------------------------------


def _fns(spec: ModelSpec):
    """(loss, grad) closures over the position vector, inlined per family."""
    if spec.kind == "quadratic":
        A, b = spec.quad_matrix, spec.quad_shift

        def lf(w):
            return 0.5 * float(w @ (A @ w)) - float(b @ w)

        def gf(w):
            return A @ w - b

        return lf, gf
    if spec.kind == "diagonal_net":
        X, y, n, d = spec.dataset.features, spec.dataset.targets, spec.dataset.n, spec.dataset.d

        def lf(w):
            theta = w[:d] * w[d:]
            r = X @ theta - y
            return float(r @ r) / (2.0 * n)

        def gf(w):
            u, v = w[:d], w[d:]
            r = X @ (u * v) - y
            g = X.T @ r / n
            return np.concatenate((g * v, g * u))

        return lf, gf

    def lf(w):
        return network_value_and_grad(spec, w)[0]

    def gf(w):
        return network_value_and_grad(spec, w)[1]

    return lf, gf


class _DiagTracker:
    """Crossing events, Gauss quadrature and balancedness tracking for diagonal nets.

    Operates on stacked branch states y = [w_pm (2d), w_pm' (2d)].
    """

    def __init__(self, d: int, w_pm0: np.ndarray, cfg: IntegratorConfig):
        self.d = d
        self.delta0 = np.abs(w_pm0[:d] * w_pm0[d:])
        self.w_pm0 = w_pm0
        self.cfg = cfg
        self.events: list = []
        self.counts = np.zeros(2 * d, dtype=np.int64)
        self.quad_main = np.zeros(2 * d)
        self.quad_window = np.zeros(2 * d)
        self.drift_max = 0.0
        self._gauss_cols = np.vstack((_GAUSS_NODES, _GAUSS_NODES**2, _GAUSS_NODES**3, _GAUSS_NODES**4))

    def delta_of(self, y: np.ndarray) -> np.ndarray:
        return np.abs(y[: self.d] * y[self.d : 2 * self.d])

    def after_step(self, t0: float, h: float, y0: np.ndarray, y1: np.ndarray, dense) -> None:
        m = 2 * self.d
        w0 = y0[:m]
        w1 = y1[:m]
        flipped = np.signbit(w0) != np.signbit(w1)
        if np.any(flipped):
            step_events = []
            for idx in np.nonzero(flipped)[0]:
                t_cross = self._bisect(int(idx), t0, h, w0[idx], dense)
                branch = "plus" if idx < self.d else "minus"
                step_events.append((t_cross, int(idx % self.d), branch, float(np.sign(w1[idx]))))
                self.counts[idx] += 1
            step_events.sort(key=lambda e: e[0])
            self.events.extend(step_events)

        if self.cfg.quadrature:
            ys = dense(None, cols=self._gauss_cols)       # (dim, 5)
            w = ys[:m]
            wd = ys[m:]
            near_zero = np.abs(w) < self.cfg.guard_width
            if near_zero.any():
                denom = np.where(near_zero, self.cfg.guard_width, w)
                contrib = wd / denom
                contrib *= contrib
                contrib *= h * _GAUSS_WEIGHTS
                self.quad_main += np.where(near_zero, 0.0, contrib).sum(axis=1)
                self.quad_window += np.where(near_zero, contrib, 0.0).sum(axis=1)
            else:
                contrib = wd / w
                contrib *= contrib
                contrib *= h * _GAUSS_WEIGHTS
                self.quad_main += contrib.sum(axis=1)

        drift = float(np.max(np.abs(self.delta_of(y1) - self.delta0)))
        if drift > self.drift_max:
            self.drift_max = drift

    def _bisect(self, idx: int, t0: float, h: float, w_left: float, dense) -> float:
        sign_left = np.sign(w_left)
        lo, hi = 0.0, 1.0
        tol = 1e-10 * max(1.0, abs(t0 + h)) / max(h, 1e-300)
        for _ in range(100):
            if hi - lo <= tol:
                break
            mid = 0.5 * (lo + hi)
            wm = float(dense(np.array([mid]))[idx, 0])
            if np.sign(wm) == sign_left and wm != 0.0:
                lo = mid
            else:
                hi = mid
        return t0 + 0.5 * (lo + hi) * h


def _loss_energy(y, loss_val):
    return loss_val


# --- core driver -----------------------------------------------------------------


@dataclass
class _Sample:
    t: float
    y: np.ndarray
    loss: float
    energy: float
    delta: np.ndarray | None
    crossings: tuple[int, int]


def _drive(rhs_out, y0, cfg: IntegratorConfig, *, loss_of, energy_of, t_eval, tracker):
    """Adaptive Dormand-Prince loop shared by all flows.

    `rhs_out(y, out)` writes the vector field into `out`.  Returns a dict with
    the sample list, terminal state/time, stop reason and work counters.
    `tracker` (diagonal nets) sees every accepted step with its dense
    interpolant.
    """
    y = np.asarray(y0, dtype=float).copy()
    t = 0.0
    dim = y.size
    n_rhs = 0

    if t_eval is not None:
        t_eval = np.asarray(t_eval, dtype=float)
        max_time = cfg.max_time if np.isfinite(cfg.max_time) else float(t_eval[-1])
    else:
        max_time = cfg.max_time
    if not np.isfinite(max_time) and cfg.stop_loss is None:
        raise ValueError("need a finite max_time or a stop_loss")

    K = np.empty((7, dim))
    rhs_out(y, K[0])
    n_rhs += 1
    loss0 = loss_of(y)
    guard = _GUARD_FACTOR * max(abs(loss0), np.finfo(float).tiny)
    energy_prev = energy_of(y, loss0)
    max_energy_increase = 0.0

    samples: list[_Sample] = []
    stride = 1
    eval_idx = 0

    def snap(ts: float, ys: np.ndarray, loss_val: float | None = None) -> _Sample:
        lv = loss_of(ys) if loss_val is None else loss_val
        if tracker is not None:
            delta = tracker.delta_of(ys)
            crossings = (int(np.sum(tracker.counts[: tracker.d])), int(np.sum(tracker.counts[tracker.d :])))
        else:
            delta, crossings = None, (0, 0)
        return _Sample(t=ts, y=ys.copy(), loss=lv, energy=energy_of(ys, lv), delta=delta, crossings=crossings)

    if t_eval is not None:
        while eval_idx < t_eval.size and t_eval[eval_idx] <= t:
            samples.append(snap(float(t_eval[eval_idx]), y, loss0))
            eval_idx += 1
    else:
        samples.append(snap(t, y, loss0))

    if cfg.stop_loss is not None and loss0 <= cfg.stop_loss:
        return _result(samples, y, t, "converged", 0, n_rhs, max_energy_increase)

    h = cfg.initial_step if cfg.initial_step is not None else _initial_step(rhs_out, y, K[0], cfg)
    if cfg.initial_step is None:
        n_rhs += 1
    err_prev = 1e-4
    yi = np.empty(dim)
    n_steps = 0
    stop_reason = "max_time"

    while True:
        remaining = max_time - t
        if remaining <= 1e-14 * max(1.0, abs(t)):
            stop_reason = "max_time"
            break
        if n_steps >= cfg.max_steps:
            stop_reason = "max_steps"
            break
        h = min(h, cfg.max_step, remaining)

        for i in range(1, 6):
            np.dot(_A[i, :i], K[:i], out=yi)
            yi *= h
            yi += y
            rhs_out(yi, K[i])
        y1 = np.dot(_B, K[:6])
        y1 *= h
        y1 += y
        rhs_out(y1, K[6])
        n_rhs += 6

        scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y1))
        err_vec = np.dot(_E, K)
        err_vec *= h
        err_vec /= scale
        err = float(np.sqrt(np.mean(err_vec * err_vec)))

        if err > 1.0:
            if h <= 16.0 * np.finfo(float).eps * max(abs(t), 1.0):
                raise StepSizeUnderflowError(f"step size underflow at t = {t:.6g}", time_reached=t)
            h *= max(_MIN_FACTOR, min(1.0, _SAFETY * err ** (-0.2)))
            continue

        t1 = min(t + h, max_time)
        loss1 = loss_of(y1)
        if not loss1 <= guard:  # also catches nan
            stop_reason = "diverged"
            if np.all(np.isfinite(y1)):
                t, y = t1, y1
            break

        need_dense = tracker is not None or (
            t_eval is not None and eval_idx < t_eval.size and t_eval[eval_idx] <= t1 * (1.0 + 1e-15)
        )
        dense = _make_dense(y, h, K) if need_dense else None

        if tracker is not None:
            tracker.after_step(t, h, y, y1, dense)

        e1 = energy_of(y1, loss1)
        if e1 - energy_prev > max_energy_increase:
            max_energy_increase = e1 - energy_prev
        energy_prev = e1

        if t_eval is not None:
            while eval_idx < t_eval.size and t_eval[eval_idx] <= t1 * (1.0 + 1e-15):
                te = float(t_eval[eval_idx])
                if te >= t1:
                    samples.append(snap(t1, y1, loss1))
                else:
                    samples.append(snap(te, dense(np.array([(te - t) / h]))[:, 0]))
                eval_idx += 1
        else:
            if (n_steps + 1) % stride == 0:
                samples.append(snap(t1, y1, loss1))
                if len(samples) > 2 * cfg.dense_sample_count:
                    samples = samples[::2]
                    stride *= 2

        t = t1
        y, y1 = y1, y
        K[0] = K[6]
        n_steps += 1

        if cfg.stop_loss is not None and loss1 <= cfg.stop_loss:
            stop_reason = "converged"
            break

        factor = _SAFETY * max(err, 1e-10) ** (-_ERR_EXPONENT) * err_prev**_PI_BETA
        h *= min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
        err_prev = max(err, 1e-4)

    if t_eval is not None:
        while eval_idx < t_eval.size and t_eval[eval_idx] <= t * (1.0 + 1e-12):
            samples.append(snap(float(t_eval[eval_idx]), y))
            eval_idx += 1
    elif not samples or samples[-1].t < t:
        samples.append(snap(t, y))
    return _result(samples, y, t, stop_reason, n_steps, n_rhs, max_energy_increase)


def _make_dense(y0, h, K):
    Q = K.T @ _P

    def dense(thetas, cols=None):
        if cols is None:
            tt = np.atleast_1d(np.asarray(thetas, dtype=float))
            cols = np.vstack((tt, tt**2, tt**3, tt**4))
        out = Q @ cols
        out *= h
        out += y0[:, None]
        return out

    return dense


def _result(samples, y, t, reason, n_steps, n_rhs, max_energy_increase):
    return {
        "samples": samples,
        "terminal_y": y,
        "terminal_t": t,
        "stop_reason": reason,
        "n_steps": n_steps,
        "n_rhs": n_rhs,
        "max_energy_increase": max_energy_increase,
    }


def _initial_step(rhs_out, y0, f0, cfg: IntegratorConfig) -> float:
    scale = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = float(np.sqrt(np.mean((y0 / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = np.empty_like(f0)
    rhs_out(y0 + h0 * f0, f1)
    d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, cfg.max_step)


# --- assembly --------------------------------------------------------------------


def _integrate_mass_damped(spec, a, b, init, cfg, t_eval, lam_label) -> ContinuousTrajectory:
    """Drive a w'' + b w' + grad F(w) = 0 as a first-order system of doubled size."""
    D = spec.parameter_dim

    if spec.kind == "diagonal_net":
        return _integrate_mass_damped_diag(spec, a, b, init, cfg, t_eval, lam_label)

    loss_fn, grad_fn = _fns(spec)
    y0 = np.concatenate((init.position, init.velocity))
    inv_a = 1.0 / a

    def rhs_out(y, out):
        vel = y[D:]
        acc = out[D:]
        acc[:] = grad_fn(y[:D])
        if b != 1.0:
            np.multiply(vel, b, out=out[:D])
            acc += out[:D]
        else:
            acc += vel
        acc *= -inv_a
        out[:D] = vel

    def loss_of(y):
        return loss_fn(y[:D])

    def energy_of(y, loss_val):
        vel = y[D:]
        return loss_val + 0.5 * a * float(vel @ vel)

    run = _drive(rhs_out, y0, cfg, loss_of=loss_of, energy_of=energy_of, t_eval=t_eval, tracker=None)
    samples = run["samples"]
    return ContinuousTrajectory(
        times=np.array([s.t for s in samples]),
        losses=np.array([s.loss for s in samples]),
        energies=np.array([s.energy for s in samples]),
        positions=np.array([s.y[:D] for s in samples]),
        velocities=np.array([s.y[D:] for s in samples]),
        stop_reason=run["stop_reason"],
        terminal=SecondOrderState(run["terminal_y"][:D], run["terminal_y"][D:], run["terminal_t"]),
        lam=float(lam_label),
        n_steps=run["n_steps"],
        n_rhs=run["n_rhs"],
        max_energy_increase=run["max_energy_increase"],
        stop_loss=cfg.stop_loss if cfg.stop_loss is not None else 0.0,
    )


def _integrate_mass_damped_diag(spec, a, b, init, cfg, t_eval, lam_label) -> ContinuousTrajectory:
    """Diagonal-net flow in stacked branch coordinates y = [w_pm, w_pm']."""
    X, y_t, n, d = spec.dataset.features, spec.dataset.targets, spec.dataset.n, spec.dataset.d
    u0, v0 = init.position[:d], init.position[d:]
    w_pm0 = np.concatenate((u0 + v0, u0 - v0))
    if np.min(np.abs(w_pm0[:d] * w_pm0[d:])) <= 0.0:
        raise ValueError("diagonal-net init needs strictly positive balancedness")
    du0, dv0 = init.velocity[:d], init.velocity[d:]
    y0 = np.concatenate((w_pm0, du0 + dv0, du0 - dv0))
    m = 2 * d
    inv_a = 1.0 / a
    inv_n = 1.0 / n
    gram = X.T @ X * inv_n           # gradient of the data loss is gram @ theta - xty
    xty = X.T @ y_t * inv_n
    theta = np.empty(d)
    scratch = np.empty(d)
    tracker = _DiagTracker(d, w_pm0, cfg)

    def rhs_out(yv, out):
        wp = yv[:d]
        wm = yv[d:m]
        vel = yv[m:]
        np.multiply(wp, wp, out=theta)
        np.multiply(wm, wm, out=scratch)
        np.subtract(theta, scratch, out=theta)
        np.multiply(theta, 0.25, out=theta)
        g = gram @ theta
        g -= xty
        acc = out[m:]
        np.multiply(g, wp, out=acc[:d])
        np.multiply(g, wm, out=acc[d:])
        np.negative(acc[d:], out=acc[d:])        # branch signs: +g w_plus, -g w_minus
        if b != 1.0:
            np.multiply(vel, b, out=out[:m])
            acc += out[:m]
        else:
            acc += vel
        acc *= -inv_a
        out[:m] = vel

    def loss_of(yv):
        th = (yv[:d] ** 2 - yv[d:m] ** 2) * 0.25
        r = X @ th
        r -= y_t
        return float(r @ r) * (0.5 * inv_n)

    def energy_of(yv, loss_val):
        vel = yv[m:]
        # branch velocities double-count the (u', v') norm
        return loss_val + 0.25 * a * float(vel @ vel)

    run = _drive(rhs_out, y0, cfg, loss_of=loss_of, energy_of=energy_of, t_eval=t_eval, tracker=tracker)

    samples = run["samples"]
    wpm = np.array([s.y[:m] for s in samples])
    wdot = np.array([s.y[m:] for s in samples])
    positions = np.hstack(((wpm[:, :d] + wpm[:, d:]) / 2.0, (wpm[:, :d] - wpm[:, d:]) / 2.0))
    velocities = np.hstack(((wdot[:, :d] + wdot[:, d:]) / 2.0, (wdot[:, :d] - wdot[:, d:]) / 2.0))
    ye = run["terminal_y"]
    pos_end = np.concatenate(((ye[:d] + ye[d:m]) / 2.0, (ye[:d] - ye[d:m]) / 2.0))
    vel_end = np.concatenate(((ye[m : m + d] + ye[m + d :]) / 2.0, (ye[m : m + d] - ye[m + d :]) / 2.0))

    return ContinuousTrajectory(
        times=np.array([s.t for s in samples]),
        losses=np.array([s.loss for s in samples]),
        energies=np.array([s.energy for s in samples]),
        positions=positions,
        velocities=velocities,
        stop_reason=run["stop_reason"],
        terminal=SecondOrderState(pos_end, vel_end, run["terminal_t"]),
        lam=float(lam_label),
        n_steps=run["n_steps"],
        n_rhs=run["n_rhs"],
        max_energy_increase=run["max_energy_increase"],
        stop_loss=cfg.stop_loss if cfg.stop_loss is not None else 0.0,
        delta_samples=np.array([s.delta for s in samples]),
        delta0=tracker.delta0,
        w_pm0=tracker.w_pm0,
        crossing_events=tracker.events,
        crossings_plus=tracker.counts[:d].copy(),
        crossings_minus=tracker.counts[d:].copy(),
        crossing_totals=np.array([s.crossings for s in samples], dtype=np.int64),
        quad_main_plus=tracker.quad_main[:d].copy(),
        quad_main_minus=tracker.quad_main[d:].copy(),
        quad_window_plus=tracker.quad_window[:d].copy(),
        quad_window_minus=tracker.quad_window[d:].copy(),
        delta_drift_max=tracker.drift_max,
    )


def _integrate_gf_diag(spec, init, cfg, t_eval) -> ContinuousTrajectory:
    """Gradient flow over a diagonal net in log branch coordinates."""
    X, y_t, n, d = spec.dataset.features, spec.dataset.targets, spec.dataset.n, spec.dataset.d
    u0, v0 = init[:d], init[d:]
    w_pm0 = np.concatenate((u0 + v0, u0 - v0))
    delta0 = np.abs(w_pm0[:d] * w_pm0[d:])
    if np.min(delta0) <= 0.0:
        raise ValueError("diagonal-net init needs strictly positive balancedness")
    signs = np.sign(w_pm0)
    g0 = np.log(np.abs(w_pm0))
    inv_n = 1.0 / n
    theta = np.empty(d)
    scratch = np.empty(d)

    def rhs_out(g, out):
        np.exp(2.0 * g[:d], out=theta)
        np.exp(2.0 * g[d:], out=scratch)
        np.subtract(theta, scratch, out=theta)
        np.multiply(theta, 0.25, out=theta)
        r = X @ theta
        r -= y_t
        gl = X.T @ r
        gl *= inv_n
        np.negative(gl, out=out[:d])
        out[d:] = gl

    def loss_of(g):
        th = (np.exp(2.0 * g[:d]) - np.exp(2.0 * g[d:])) * 0.25
        r = X @ th
        r -= y_t
        return float(r @ r) * (0.5 * inv_n)

    run = _drive(rhs_out, g0, cfg, loss_of=loss_of, energy_of=_loss_energy, t_eval=t_eval, tracker=None)

    samples = run["samples"]
    g_samples = np.array([s.y for s in samples])
    w_samples = signs[None, :] * np.exp(g_samples)
    u_s = (w_samples[:, :d] + w_samples[:, d:]) / 2.0
    v_s = (w_samples[:, :d] - w_samples[:, d:]) / 2.0
    delta_samples = np.exp(g_samples[:, :d] + g_samples[:, d:])
    losses = np.array([s.loss for s in samples])

    g_end = run["terminal_y"]
    w_end = signs * np.exp(g_end)
    u_end, v_end = (w_end[:d] + w_end[d:]) / 2.0, (w_end[:d] - w_end[d:]) / 2.0
    gdot_end = np.empty(2 * d)
    rhs_out(g_end, gdot_end)
    wdot_end = w_end * gdot_end                         # w' = w g'
    vel_end = np.concatenate(((wdot_end[:d] + wdot_end[d:]) / 2.0, (wdot_end[:d] - wdot_end[d:]) / 2.0))

    return ContinuousTrajectory(
        times=np.array([s.t for s in samples]),
        losses=losses,
        energies=losses.copy(),
        positions=np.hstack((u_s, v_s)),
        velocities=None,
        stop_reason=run["stop_reason"],
        terminal=SecondOrderState(np.concatenate((u_end, v_end)), vel_end, run["terminal_t"]),
        lam=0.0,
        n_steps=run["n_steps"],
        n_rhs=run["n_rhs"],
        max_energy_increase=run["max_energy_increase"],
        stop_loss=cfg.stop_loss if cfg.stop_loss is not None else 0.0,
        delta_samples=delta_samples,
        delta0=delta0,
        w_pm0=w_pm0,
        crossings_plus=np.zeros(d, dtype=np.int64),
        crossings_minus=np.zeros(d, dtype=np.int64),
        crossing_totals=np.zeros((len(samples), 2), dtype=np.int64),
        quad_main_plus=np.zeros(d),
        quad_main_minus=np.zeros(d),
        quad_window_plus=np.zeros(d),
        quad_window_minus=np.zeros(d),
        delta_drift_max=float(np.max(np.abs(delta_samples - delta0[None, :]))) if len(samples) else 0.0,
    )
