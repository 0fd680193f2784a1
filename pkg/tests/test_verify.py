from momentumlab import SparseRegressionSpec, gen_sparse_regression, verify


def test_check_report_bound_directions():
    r = verify.CheckReport.from_bound("x", 0.5, 1.0)
    assert r.status == "pass"
    r = verify.CheckReport.from_bound("x", 2.0, 1.0)
    assert r.status == "fail"
    r = verify.CheckReport.from_bound("x", 2.0, 1.0, larger_is_better=True)
    assert r.status == "pass"


def test_demo_correspondence_passes():
    spec = verify.demo_quadratic()
    report = verify.check_discretization_correspondence(
        verify.DEMO_GAMMA, verify.DEMO_BETA, spec, verify.DEMO_INIT)
    assert report.status == "pass"
    assert report.measured <= 0.05


def test_demo_gd_small_step_close_to_flow():
    # beta = 0 with a tiny step: explicit Euler hugs the flow
    spec = verify.demo_quadratic()
    report = verify.check_discretization_correspondence(1e-4, 0.0, spec, verify.DEMO_INIT,
                                                        horizon_steps=2000)
    assert report.measured <= 1e-3


def test_acceleration_reports():
    spec = verify.demo_quadratic()
    reports = verify.check_acceleration_rule(verify.DEMO_GAMMA, verify.DEMO_BETA, 2, spec, verify.DEMO_INIT)
    by_name = {r.name: r for r in reports}
    assert by_name["acceleration_rule"].status == "pass"
    assert by_name["gd_contrast_rho_squared"].status == "pass"
    assert by_name["gd_contrast_separation"].status == "pass"


def test_acceleration_rho_one_is_exact():
    spec = verify.demo_quadratic()
    reports = verify.check_acceleration_rule(verify.DEMO_GAMMA, verify.DEMO_BETA, 1, spec, verify.DEMO_INIT,
                                             horizon_steps=300)
    assert reports[0].measured == 0.0


def test_small_lambda_regime_reports():
    # cheap variant on a small instance; the default-instance sweep runs in the
    # acceptance suite
    ds = gen_sparse_regression(SparseRegressionSpec(n=8, d=12, s=2, seed=0))
    reports = verify.check_small_lambda_regime(ds, lambda_grid=None, alpha=0.3)
    assert len(reports) == 2
    for r in reports:
        assert r.status == "pass"
        assert r.measured == 0


def test_reports_csv(tmp_path):
    reports = [verify.CheckReport("a", "pass", 0.1, 1.0, "ctx")]
    verify.reports_to_csv(reports, tmp_path / "checks.csv")
    text = (tmp_path / "checks.csv").read_text().splitlines()
    assert text[0] == "check,status,measured,threshold,context"
    assert text[1].startswith("a,pass,0.1,1.0")
