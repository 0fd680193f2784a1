"""Momentum optimization laboratory.

Simulates heavy-ball descent (deterministic and stochastic) and its
continuous-time momentum flow on quadratics, diagonal linear networks and
small feed-forward nets, tracks balancedness and sign crossings along the
way, and verifies the implicit-bias structure of the recovered interpolators.
"""

from .datasets import (
    Dataset,
    SparseRegressionSpec,
    TeacherStudentSpec,
    gen_sparse_regression,
    gen_teacher_student,
    load_dataset,
    population_test_loss,
    save_dataset,
)
from .models import (
    ModelSpec,
    PMState,
    WeightState,
    balancedness,
    batch_grad,
    deep_linear_model,
    diagonal_net_model,
    grad_loss,
    init_scale,
    loss,
    network_value_and_grad,
    pm_of,
    predictor,
    quadratic_model,
    relu_mlp_model,
    ws_of,
)
from .discrete import (
    DiscreteHyper,
    TrajectoryLog,
    acceleration_pair,
    epsilon_of,
    lambda_of,
    mgd_step,
    run_mgd,
    run_smgd,
)
from .continuous import (
    ContinuousTrajectory,
    IntegratorConfig,
    SecondOrderState,
    energy,
    integrate_gf,
    integrate_mgf,
    mgf_rhs,
    time_rescaled_equivalence,
)
from .bias import (
    BiasReport,
    DualCertificate,
    EntropyScale,
    ResidueAccumulator,
    accumulate_residues,
    bias_report,
    bregman_divergence,
    entropy_l1_asymptotic_gap,
    finite_N_balancedness_identity,
    grad_hyperbolic_entropy,
    hess_diag,
    hyperbolic_entropy,
    kkt_residual,
    small_lambda_threshold,
    solve_min_entropy_interpolator,
)

__version__ = "0.1.0"
