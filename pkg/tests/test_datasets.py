import numpy as np
import pytest

from momentumlab import (
    Dataset,
    SparseRegressionSpec,
    TeacherStudentSpec,
    gen_sparse_regression,
    gen_teacher_student,
    load_dataset,
    population_test_loss,
    save_dataset,
)
from momentumlab.datasets import stream


def test_sparse_regression_shapes_and_unit_norm():
    ds = gen_sparse_regression(SparseRegressionSpec(seed=3))
    assert ds.features.shape == (20, 30)
    assert ds.ground_truth is not None
    assert np.count_nonzero(ds.ground_truth) == 5
    assert np.linalg.norm(ds.ground_truth) == pytest.approx(1.0, abs=1e-14)


def test_sparse_regression_noiseless():
    ds = gen_sparse_regression(SparseRegressionSpec(seed=7))
    assert np.max(np.abs(ds.targets - ds.features @ ds.ground_truth)) == 0.0


def test_sparse_regression_deterministic():
    a = gen_sparse_regression(SparseRegressionSpec(seed=11))
    b = gen_sparse_regression(SparseRegressionSpec(seed=11))
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.targets, b.targets)


def test_mean_shift_changes_features_by_one():
    # same seed, mean 0 vs mean 1: every entry shifts by +1 up to one rounding ulp
    a = gen_sparse_regression(SparseRegressionSpec(mean=0.0, seed=5))
    b = gen_sparse_regression(SparseRegressionSpec(mean=1.0, seed=5))
    assert np.max(np.abs(b.features - a.features - 1.0)) < 1e-14


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        SparseRegressionSpec(s=31, d=30)
    with pytest.raises(ValueError):
        SparseRegressionSpec(stddev=0.0)
    with pytest.raises(ValueError):
        TeacherStudentSpec(teacher_width=0)


def test_teacher_student_shapes_and_determinism():
    spec = TeacherStudentSpec(seed=1)
    ds, (teacher_spec, teacher_w) = gen_teacher_student(spec)
    assert ds.features.shape == (15, 2)
    assert teacher_spec.widths == (2, 5, 1)
    ds2, (_, teacher_w2) = gen_teacher_student(spec)
    assert np.array_equal(ds.features, ds2.features)
    assert np.array_equal(ds.targets, ds2.targets)
    assert np.array_equal(teacher_w, teacher_w2)


def test_teacher_with_zero_output_weights_labels_zero():
    from momentumlab import models

    spec = TeacherStudentSpec(seed=2)
    ds, _ = gen_teacher_student(spec)
    widths = (2, 5, 1)
    w = np.zeros(models._mlp_dim(widths, with_biases=True))
    y = models.mlp_predict(w, ds.features, widths)
    assert np.all(y == 0.0)


def test_population_test_loss_zero_at_truth():
    theta = np.array([0.3, -0.2, 1.0])
    assert population_test_loss(theta, theta, 1.0, 1.0) == 0.0


def test_population_test_loss_centered_case():
    theta = np.array([1.0, 2.0])
    star = np.array([0.0, 0.0])
    val = population_test_loss(theta, star, mean=0.0, stddev=2.0)
    assert val == pytest.approx(0.5 * 4.0 * 5.0)


def test_population_test_loss_matches_monte_carlo():
    rng = stream(123, 0)
    d = 6
    theta = rng.standard_normal(d)
    star = rng.standard_normal(d)
    mu, sigma = 1.0, 1.0
    n = 1_000_000
    x = mu + sigma * rng.standard_normal((n, d))
    sq = (x @ (theta - star)) ** 2 / 2.0
    mc = float(np.mean(sq))
    se = float(np.std(sq, ddof=1) / np.sqrt(n))
    exact = population_test_loss(theta, star, mu, sigma)
    assert abs(exact - mc) < 3 * se


def test_csv_roundtrip(tmp_path):
    spec = SparseRegressionSpec(seed=9)
    ds = gen_sparse_regression(spec)
    save_dataset(ds, tmp_path / "inst", spec)
    back = load_dataset(tmp_path / "inst")
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.targets, ds.targets)
    assert np.array_equal(back.ground_truth, ds.ground_truth)
    assert back.sparsity == ds.sparsity


def test_dataset_validation():
    with pytest.raises(Exception):
        Dataset(features=np.ones((3, 2)), targets=np.ones(4))
    with pytest.raises(ValueError):
        Dataset(features=np.array([[np.inf, 0.0]]), targets=np.array([1.0]))
