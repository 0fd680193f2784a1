import numpy as np
import pytest

from momentumlab import (
    IntegratorConfig,
    SecondOrderState,
    SparseRegressionSpec,
    diagonal_net_model,
    energy,
    gen_sparse_regression,
    integrate_gf,
    integrate_mgf,
    mgf_rhs,
    quadratic_model,
    time_rescaled_equivalence,
)
from momentumlab.datasets import stream
from momentumlab.verify import check_solver_order, demo_quadratic


@pytest.fixture(scope="module")
def ds():
    return gen_sparse_regression(SparseRegressionSpec(seed=0))


@pytest.fixture(scope="module")
def diag(ds):
    return diagonal_net_model(ds)


def small_init(d, alpha=0.01):
    return np.concatenate([alpha * np.ones(d), np.zeros(d)])


def quad_mgf_closed_form(A, lam, w0, ts):
    """Mode-by-mode solution of lam w'' + w' + A w = 0 with zero initial velocity."""
    mu, Q = np.linalg.eigh(A)
    z0 = Q.T @ w0
    out = np.zeros((len(ts), len(w0)), dtype=complex)
    for i, m in enumerate(mu):
        disc = np.sqrt(complex(1.0 - 4.0 * lam * m))
        r1 = (-1 + disc) / (2 * lam)
        r2 = (-1 - disc) / (2 * lam)
        if abs(r1 - r2) < 1e-14:        # critically damped
            c1, c2 = z0[i], -r1 * z0[i]
            out[:, i] = (c1 + c2 * ts) * np.exp(r1 * ts)
        else:
            c2 = z0[i] * r1 / (r1 - r2)
            c1 = z0[i] - c2
            out[:, i] = c1 * np.exp(r1 * ts) + c2 * np.exp(r2 * ts)
    return (out @ Q.T).real


# --- right-hand side and energy -----------------------------------------------


def test_mgf_rhs_equilibrium():
    spec = quadratic_model(np.eye(2), np.zeros(2))
    vel, acc = mgf_rhs(spec, 1.0, SecondOrderState(np.zeros(2), np.zeros(2)))
    np.testing.assert_array_equal(vel, np.zeros(2))
    np.testing.assert_array_equal(acc, np.zeros(2))


def test_mgf_rhs_one_dim():
    spec = quadratic_model(np.eye(1), np.zeros(1))
    vel, acc = mgf_rhs(spec, 1.0, SecondOrderState(np.array([1.0]), np.array([0.0])))
    assert vel[0] == 0.0
    assert acc[0] == pytest.approx(-1.0)


def test_mgf_rhs_rejects_zero_lam():
    spec = quadratic_model(np.eye(1), np.zeros(1))
    with pytest.raises(ValueError):
        mgf_rhs(spec, 0.0, SecondOrderState(np.array([1.0]), np.array([0.0])))


def test_energy_values():
    spec = quadratic_model(np.eye(2), np.zeros(2))
    w = np.array([1.0, 1.0])
    assert energy(spec, 2.0, SecondOrderState(w, np.zeros(2))) == pytest.approx(1.0)
    assert energy(spec, 2.0, SecondOrderState(np.zeros(2), np.zeros(2))) == 0.0
    assert energy(spec, 2.0, SecondOrderState(w, w)) == pytest.approx(1.0 + 0.5 * 2.0 * 2.0)


# --- integration against closed forms ------------------------------------------


def test_mgf_matches_eigendecomposition_oracle():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    spec = quadratic_model(A, np.zeros(2))
    w0 = np.array([1.0, -0.5])
    lam = 0.7
    ts = np.linspace(0.0, 12.0, 25)
    cfg = IntegratorConfig(rel_tol=1e-11, abs_tol=1e-13, max_time=12.0, quadrature=False)
    traj = integrate_mgf(spec, lam, SecondOrderState(w0, np.zeros(2)), cfg, t_eval=ts)
    expected = quad_mgf_closed_form(A, lam, w0, ts)
    assert np.max(np.abs(traj.positions - expected)) < 1e-8


def test_gf_quadratic_matches_exponential():
    spec = quadratic_model(np.diag([1.0, 4.0]), np.zeros(2))
    ts = np.linspace(0.0, 6.0, 13)
    cfg = IntegratorConfig(max_time=6.0)
    traj = integrate_gf(spec, np.array([2.0, -1.0]), cfg, t_eval=ts)
    expected = np.stack([2.0 * np.exp(-ts), -1.0 * np.exp(-4.0 * ts)], axis=1)
    assert np.max(np.abs(traj.positions - expected)) < 1e-9


def test_gf_least_squares_converges_to_projection(ds):
    # gradient flow on the plain quadratic loss lands on the orthogonal
    # projection of the start onto the interpolators (pseudoinverse oracle)
    X, y = ds.features, ds.targets
    A = X.T @ X / ds.n
    b = X.T @ y / ds.n
    spec = quadratic_model(A, b)
    rng = stream(21, 0)
    theta0 = rng.standard_normal(ds.d)
    cfg = IntegratorConfig(max_time=4000.0, rel_tol=1e-11, abs_tol=1e-13)
    traj = integrate_gf(spec, theta0, cfg)
    theta_inf = traj.terminal.position
    # oracle: theta0 + pinv(X) (y - X theta0)
    correction, *_ = np.linalg.lstsq(X, y - X @ theta0, rcond=None)
    expected = theta0 + correction
    assert np.linalg.norm(theta_inf - expected) / np.linalg.norm(expected) < 1e-8


# --- structural invariants -------------------------------------------------------


def test_gf_balancedness_conserved(diag, ds):
    cfg = IntegratorConfig(stop_loss=1e-7, max_time=1e6)
    traj = integrate_gf(diag, small_init(ds.d), cfg)
    assert traj.stop_reason == "converged"
    assert traj.delta_drift_max <= 1e-8 * float(np.max(traj.delta0))
    assert int(np.sum(traj.crossings_plus) + np.sum(traj.crossings_minus)) == 0


def test_mgf_energy_monotone(diag, ds):
    cfg = IntegratorConfig(stop_loss=1e-6, max_time=1e6)
    traj = integrate_mgf(diag, 0.2, SecondOrderState(small_init(ds.d), np.zeros(2 * ds.d)), cfg)
    assert traj.max_energy_increase <= 10.0 * cfg.abs_tol
    diffs = np.diff(traj.energies)
    assert np.max(diffs, initial=0.0) <= 10.0 * cfg.abs_tol


def test_small_lam_mgf_close_to_gf(diag, ds):
    cfg = IntegratorConfig(stop_loss=1e-6, max_time=1e6)
    gf = integrate_gf(diag, small_init(ds.d), cfg)
    mgf = integrate_mgf(diag, 1e-3, SecondOrderState(small_init(ds.d), np.zeros(2 * ds.d)),
                        cfg.replace(quadrature=False))
    gf_theta = gf.terminal_theta()
    mgf_theta = mgf.terminal_theta()
    assert np.linalg.norm(mgf_theta - gf_theta) / np.linalg.norm(gf_theta) < 1e-3


def test_crossing_events_bracket_sign_changes(diag, ds):
    cfg = IntegratorConfig(stop_loss=1e-6, max_time=1e6)
    traj = integrate_mgf(diag, 0.3, SecondOrderState(small_init(ds.d), np.zeros(2 * ds.d)), cfg)
    events = traj.crossing_events
    assert len(events) > 0
    counts = np.zeros(2 * ds.d, dtype=int)
    for t_cross, coord, branch, direction in events:
        assert 0.0 < t_cross < traj.terminal.time
        assert branch in ("plus", "minus")
        assert direction in (-1.0, 1.0)
        counts[coord + (0 if branch == "plus" else ds.d)] += 1
    np.testing.assert_array_equal(counts[: ds.d], traj.crossings_plus)
    np.testing.assert_array_equal(counts[ds.d :], traj.crossings_minus)
    # event times sit between samples whose branch signs differ around them
    times = [e[0] for e in events]
    assert all(times[i] <= times[i + 1] + 1e-12 for i in range(len(times) - 1))


def test_time_rescaled_equivalence_identity_case():
    spec = demo_quadratic()
    init = SecondOrderState(np.array([1.5, 0.6]), np.zeros(2))
    cfg = IntegratorConfig(max_time=8.0, dense_sample_count=80, quadrature=False)
    dev = time_rescaled_equivalence(1.0, 1.0, spec, init, cfg)
    assert dev == 0.0


def test_time_rescaled_equivalence_nontrivial():
    spec = demo_quadratic()
    init = SecondOrderState(np.array([1.5, 0.6]), np.array([0.3, -0.1]))
    cfg = IntegratorConfig(max_time=8.0, dense_sample_count=80, quadrature=False)
    dev = time_rescaled_equivalence(4.0, 2.0, spec, init, cfg)
    assert dev <= 1e-6


def test_time_rescaled_zero_velocity_maps_to_zero():
    spec = demo_quadratic()
    init = SecondOrderState(np.array([1.5, 0.6]), np.zeros(2))
    cfg = IntegratorConfig(max_time=8.0, dense_sample_count=60, quadrature=False)
    dev = time_rescaled_equivalence(2.0, 4.0, spec, init, cfg)
    assert dev <= 1e-6


def test_solver_order_check():
    report = check_solver_order(demo_quadratic(), np.array([1.5, 0.6]))
    assert report.status == "pass"
    assert report.measured > 4.0


def test_tolerance_tightening_reduces_terminal_error():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    spec = quadratic_model(A, np.zeros(2))
    w0 = np.array([1.0, -0.5])
    ref = quad_mgf_closed_form(A, 0.7, w0, np.array([9.0]))[0]
    errs = []
    for scale in (1.0, 1e-3):
        cfg = IntegratorConfig(rel_tol=1e-6 * scale, abs_tol=1e-8 * scale, max_time=9.0, quadrature=False)
        traj = integrate_mgf(spec, 0.7, SecondOrderState(w0, np.zeros(2)), cfg)
        errs.append(np.linalg.norm(traj.terminal.position - ref))
    assert errs[1] < errs[0]


def test_quadrature_accumulators_nonnegative_and_stable(diag, ds):
    cfg = IntegratorConfig(stop_loss=1e-6, max_time=1e6)
    traj = integrate_mgf(diag, 0.05, SecondOrderState(small_init(ds.d), np.zeros(2 * ds.d)), cfg)
    assert np.all(traj.quad_main_plus >= 0.0)
    assert np.all(traj.quad_main_minus >= 0.0)
    assert np.all(np.isfinite(traj.quad_main_plus))
    # crossing-free run: suspended windows stay empty
    assert np.all(traj.quad_window_plus == 0.0)
    assert np.all(traj.quad_window_minus == 0.0)


def test_stop_at_max_time_emits_final_sample():
    spec = demo_quadratic()
    cfg = IntegratorConfig(max_time=3.0, quadrature=False)
    traj = integrate_mgf(spec, 1.0, SecondOrderState(np.array([1.5, 0.6]), np.zeros(2)), cfg)
    assert traj.stop_reason == "max_time"
    assert traj.times[-1] == pytest.approx(3.0, rel=1e-12)


def test_csv_export_schema(tmp_path, diag, ds):
    cfg = IntegratorConfig(stop_loss=1e-4, max_time=1e6)
    traj = integrate_mgf(diag, 0.1, SecondOrderState(small_init(ds.d), np.zeros(2 * ds.d)), cfg)
    path = tmp_path / "flow.csv"
    traj.to_csv(path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["t", "loss", "energy", "delta_min", "delta_l2",
                      "crossings_plus_total", "crossings_minus_total"]
