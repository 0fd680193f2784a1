"""Heavy-ball drivers: MGD, plain GD (beta = 0), and stochastic MGD.

The recursion is w_{k+1} = w_k - gamma grad F(w_k) + beta (w_k - w_{k-1}),
always initialised with zero momentum (w_1 = w_0).  Diagonal-net runs are
driven in the stacked branch coordinates [w_plus; w_minus] so sign crossings
and residue sums can be accumulated online at every step; the per-step
residue data is what makes the finite-horizon balancedness identity exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bias import ResidueAccumulator
from .datasets import Dataset, stream
from .errors import DivergenceError
from .models import ModelSpec, WeightState, network_value_and_grad

STREAM_BATCHES = 6          # sub-stream index for batch sampling
_GUARD_FACTOR = 1e12        # divergence guard: loss above guard * initial loss aborts
_ZERO_NUDGE = 1e-300        # replaces an exact-zero branch coordinate, keeping the old sign


# --- hyperparameter correspondence ---------------------------------------------


def lambda_of(gamma: float, beta: float, scheme: str = "backward") -> float:
    """Trajectory parameter of the matching second-order flow.

    `backward` (default): gamma / (1-beta)^2, from the backward-difference
    discretisation.  `central`: (1+beta) gamma / (2 (1-beta)^2), the
    central-difference alternative; the two agree as beta -> 1.
    """
    _check_gamma_beta(gamma, beta)
    if scheme == "backward":
        return gamma / (1.0 - beta) ** 2
    if scheme == "central":
        return (1.0 + beta) * gamma / (2.0 * (1.0 - beta) ** 2)
    raise ValueError(f"unknown scheme {scheme!r}")


def epsilon_of(gamma: float, beta: float) -> float:
    """Time spacing relating step k to flow time k*eps: gamma / (1-beta)."""
    _check_gamma_beta(gamma, beta)
    return gamma / (1.0 - beta)


def acceleration_pair(gamma: float, beta: float, rho: float) -> tuple[float, float]:
    """Reparametrise (gamma, beta) to traverse the same path rho times faster.

    gamma_hat = rho^2 gamma, beta_hat = 1 - rho (1 - beta); the trajectory
    parameter gamma/(1-beta)^2 is preserved exactly.
    """
    _check_gamma_beta(gamma, beta)
    if rho <= 0:
        raise ValueError("rho must be positive")
    beta_hat = 1.0 - rho * (1.0 - beta)
    if not (0.0 <= beta_hat < 1.0):
        raise ValueError(f"accelerated momentum {beta_hat} leaves [0, 1)")
    return rho**2 * gamma, beta_hat


def _check_gamma_beta(gamma: float, beta: float) -> None:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if not (0.0 <= beta < 1.0):
        raise ValueError("beta must lie in [0, 1)")


@dataclass(frozen=True)
class DiscreteHyper:
    gamma: float
    beta: float = 0.0
    batch_size: int | None = None            # None = full batch
    sampler: str = "with_replacement"        # or "without_replacement_cyclic"
    max_steps: int = 1_000_000
    stop_loss: float = 0.0
    sample_every: int = 100

    def __post_init__(self):
        _check_gamma_beta(self.gamma, self.beta)
        if self.stop_loss < 0:
            raise ValueError("stop_loss must be nonnegative")
        if self.sample_every < 1:
            raise ValueError("sample_every must be >= 1")
        if self.sampler not in ("with_replacement", "without_replacement_cyclic"):
            raise ValueError(f"unknown sampler {self.sampler!r}")


def mgd_step(w_k: np.ndarray, w_prev: np.ndarray, grad: np.ndarray, h: DiscreteHyper) -> np.ndarray:
    """One heavy-ball update; beta = 0 reduces to a plain gradient step."""
    with np.errstate(over="ignore", invalid="ignore"):
        w_next = w_k - h.gamma * grad + h.beta * (w_k - w_prev)
    if not np.all(np.isfinite(w_next)):
        raise DivergenceError("non-finite iterate after one momentum step")
    return w_next


# --- trajectory log -------------------------------------------------------------


@dataclass
class TrajectoryLog:
    steps: np.ndarray                 # sampled iterate indices (includes the terminal one)
    losses: np.ndarray
    states: np.ndarray                # (S, D); diagonal nets store [u; v]
    stop_reason: str                  # converged | max_steps | diverged
    terminal_step: int
    terminal_state: np.ndarray
    hyper: DiscreteHyper
    seed: int | None = None
    # diagonal-net extras, None for other model families
    delta_samples: np.ndarray | None = None              # (S, d)
    identity_exponent_samples: np.ndarray | None = None  # (S, d)
    crossing_totals: np.ndarray | None = None            # (S, 2) cumulative (plus, minus)
    delta0: np.ndarray | None = None
    w_pm0: np.ndarray | None = None                      # stacked (2d,) initial branches
    residues: ResidueAccumulator | None = None
    zero_perturbations: int = 0
    stop_loss: float = 0.0

    def terminal_theta(self) -> np.ndarray:
        if self.w_pm0 is None:
            raise ValueError("not a diagonal-net trajectory")
        d = self.w_pm0.size // 2
        u, v = self.terminal_state[:d], self.terminal_state[d:]
        return u * v

    def to_csv(self, path, include_theta: bool = False) -> None:
        """step, loss[, theta_*], delta_min, delta_l2, crossings_plus_total, crossings_minus_total."""
        from .tables import write_csv

        diag = self.delta_samples is not None
        header = ["step", "loss"]
        d = self.states.shape[1] // 2 if diag else self.states.shape[1]
        if include_theta:
            header += [f"theta_{j+1}" for j in range(d)]
        if diag:
            header += ["delta_min", "delta_l2", "crossings_plus_total", "crossings_minus_total"]
        rows = []
        for i, k in enumerate(self.steps):
            row = [int(k), self.losses[i]]
            if include_theta:
                if diag:
                    u, v = self.states[i, :d], self.states[i, d:]
                    row += list(u * v)
                else:
                    row += list(self.states[i])
            if diag:
                row += [
                    float(np.min(self.delta_samples[i])),
                    float(np.linalg.norm(self.delta_samples[i])),
                    int(self.crossing_totals[i, 0]),
                    int(self.crossing_totals[i, 1]),
                ]
            rows.append(row)
        write_csv(path, header, rows)


# --- drivers --------------------------------------------------------------------


def run_mgd(spec: ModelSpec, init: np.ndarray, h: DiscreteHyper) -> TrajectoryLog:
    """Full-batch momentum descent on any model family.

    Diagonal nets additionally log balancedness, sign crossings and residue
    sums; their initial state must satisfy |u0^2 - v0^2| > 0 coordinate-wise.
    """
    init = np.asarray(init, dtype=float)
    if spec.kind == "diagonal_net":
        d = spec.dataset.d
        return _run_diagonal(spec.dataset, init[:d], init[d:], h, seed=None, batches=None)
    return _run_generic(spec, init, h)


def run_smgd(dataset: Dataset, init: WeightState, h: DiscreteHyper, seed: int | None = 0) -> TrajectoryLog:
    """Stochastic momentum descent over a diagonal net; batch order is seed-reproducible.

    A full batch (batch_size in {None, n}) reproduces the deterministic driver
    bit for bit.
    """
    b = h.batch_size
    if b is not None and not (1 <= b <= dataset.n):
        raise ValueError(f"batch_size must lie in [1, {dataset.n}]")
    batches = None if b in (None, dataset.n) else _batch_schedule(dataset.n, b, h.sampler, seed)
    return _run_diagonal(dataset, init.u, init.v, h, seed=seed, batches=batches)


def _batch_schedule(n: int, b: int, sampler: str, seed: int | None):
    rng = stream(0 if seed is None else seed, STREAM_BATCHES)
    if sampler == "with_replacement":

        def draw():
            while True:
                yield rng.integers(0, n, size=b)

    else:  # without_replacement_cyclic: fresh permutation each epoch, chunks of size b

        def draw():
            while True:
                perm = rng.permutation(n)
                for start in range(0, n - b + 1, b):
                    yield perm[start : start + b]

    return draw()


def _run_diagonal(dataset: Dataset, u0, v0, h: DiscreteHyper, seed, batches) -> TrajectoryLog:
    X, y, n, d = dataset.features, dataset.targets, dataset.n, dataset.d
    u0 = np.asarray(u0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    w0 = np.concatenate((u0 + v0, u0 - v0))
    delta0 = np.abs(w0[:d] * w0[d:])
    if np.min(delta0) <= 0.0:
        raise ValueError("diagonal-net init needs strictly positive balancedness |u0^2 - v0^2|")

    acc = ResidueAccumulator.fresh(h.beta, w0)
    w_prev = w0.copy()
    w = w0.copy()
    inv_n = 1.0 / n
    sgrad = np.empty(2 * d)
    zero_perturbations = 0

    steps, losses, states = [], [], []
    deltas, exponents, cross_totals = [], [], []
    last_recorded = -1

    def record(k: int, loss_k: float) -> None:
        nonlocal last_recorded
        steps.append(k)
        losses.append(loss_k)
        states.append(np.concatenate(((w[:d] + w[d:]) / 2.0, (w[:d] - w[d:]) / 2.0)))
        deltas.append(np.abs(w[:d] * w[d:]))
        exponents.append(acc.identity_exponent())
        cross_totals.append((int(np.sum(acc.crossings_plus)), int(np.sum(acc.crossings_minus))))
        last_recorded = k

    gamma, beta, stop_loss, sample_every, max_steps = h.gamma, h.beta, h.stop_loss, h.sample_every, h.max_steps
    wp, wm = w[:d], w[d:]
    theta = np.empty(d)
    scratch = np.empty(d)
    guard = None
    k = 1
    stop_reason = "max_steps"
    while True:
        np.multiply(wp, wp, out=theta)
        np.multiply(wm, wm, out=scratch)
        theta -= scratch
        theta *= 0.25
        r = X @ theta
        r -= y
        loss_k = float(r @ r) * (0.5 * inv_n)
        if guard is None:
            guard = _GUARD_FACTOR * max(loss_k, np.finfo(float).tiny)
        if not loss_k <= guard:  # catches nan as well
            stop_reason = "diverged"
            if np.all(np.isfinite(w)):
                break
            w = w_prev  # report the last finite state
            k -= 1
            break
        if k == 1 or k % sample_every == 0:
            record(k, loss_k)
        if loss_k <= stop_loss:
            stop_reason = "converged"
            if last_recorded != k:
                record(k, loss_k)
            break
        if k >= max_steps:
            stop_reason = "max_steps"
            if last_recorded != k:
                record(k, loss_k)
            break

        if batches is None:
            g = X.T @ r
            g *= inv_n
        else:
            idx = next(batches)
            xb = X[idx]
            rb = xb @ theta - y[idx]
            g = xb.T @ rb
            g /= idx.size
        sgrad[:d] = g
        np.negative(g, out=sgrad[d:])
        sgrad *= w
        sgrad *= gamma
        mom = w - w_prev
        mom *= beta
        w_next = w - sgrad
        w_next += mom

        if not w_next.all():
            # measure-zero event: nudge off zero, keeping the pre-step sign
            hit = w_next == 0.0
            w_next[hit] = _ZERO_NUDGE * np.sign(w[hit])
            zero_perturbations += int(np.sum(hit))

        acc.update(w, w_next)
        w_prev = w
        w = w_next
        wp, wm = w[:d], w[d:]
        k += 1

    return TrajectoryLog(
        steps=np.array(steps, dtype=np.int64),
        losses=np.array(losses),
        states=np.array(states),
        stop_reason=stop_reason,
        terminal_step=k,
        terminal_state=np.concatenate(((w[:d] + w[d:]) / 2.0, (w[:d] - w[d:]) / 2.0)),
        hyper=h,
        seed=seed,
        delta_samples=np.array(deltas),
        identity_exponent_samples=np.array(exponents),
        crossing_totals=np.array(cross_totals, dtype=np.int64),
        delta0=delta0,
        w_pm0=w0,
        residues=acc,
        zero_perturbations=zero_perturbations,
        stop_loss=h.stop_loss,
    )


def _run_generic(spec: ModelSpec, w0: np.ndarray, h: DiscreteHyper) -> TrajectoryLog:
    w_prev = w0.copy()
    w = w0.copy()
    steps, losses, states = [], [], []
    last_recorded = -1

    def record(k: int, loss_k: float) -> None:
        nonlocal last_recorded
        steps.append(k)
        losses.append(loss_k)
        states.append(w.copy())
        last_recorded = k

    guard = None
    k = 1
    stop_reason = "max_steps"
    while True:
        loss_k, grad = network_value_and_grad(spec, w)
        if guard is None:
            guard = _GUARD_FACTOR * max(abs(loss_k), np.finfo(float).tiny)
        if not np.isfinite(loss_k) or abs(loss_k) > guard:
            stop_reason = "diverged"
            break
        if k == 1 or k % h.sample_every == 0:
            record(k, loss_k)
        if loss_k <= h.stop_loss:
            stop_reason = "converged"
            if last_recorded != k:
                record(k, loss_k)
            break
        if k >= h.max_steps:
            if last_recorded != k:
                record(k, loss_k)
            break
        w_next = w - h.gamma * grad + h.beta * (w - w_prev)
        if not np.all(np.isfinite(w_next)):
            stop_reason = "diverged"
            break
        w_prev = w
        w = w_next
        k += 1

    return TrajectoryLog(
        steps=np.array(steps, dtype=np.int64),
        losses=np.array(losses),
        states=np.array(states),
        stop_reason=stop_reason,
        terminal_step=k,
        terminal_state=w.copy(),
        hyper=h,
        stop_loss=h.stop_loss,
    )
