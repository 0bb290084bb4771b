"""Penalized-spline functional principal component analysis for sparsely
observed curves, with a Monte Carlo convergence-rate harness."""

from .basis import (
    DiagonalizedBasis,
    KnotVector,
    RawSplineBasis,
    diagonalize,
    diagonalized_basis,
    eval_diag,
    eval_raw,
    gram_and_rough,
    make_knots,
    make_raw_basis,
)
from .divergence import (
    SeedFunction,
    SpdMatrix,
    apply_matrix_function,
    bregman,
    custom_seed,
    frechet_phi_prime,
    frobenius_seed,
    get_seed,
    log_det_seed,
    von_neumann_seed,
)
from .evaluate import (
    AlignedError,
    ComponentError,
    align,
    empirical_norm_sq,
    fit_slope,
    norm_eta,
    spline_approx_error,
    v_and_j,
)
from .manifold import TangentVector, exp_stiefel, move_point, project_tangent, retract_qr, riemannian_grad
from .model import (
    CurveDesign,
    DesignSet,
    ModelPoint,
    curve_design,
    loss,
    loss_grad,
    make_design_set,
    model_cov,
    penalty_value,
)
from .optimizer import FitConfig, FitResult, fit, initialize
from .rates import RateReport, ScenarioSpec, run_scenario, scenario_spec
from .simulate import (
    SparseDataset,
    TrueModel,
    default_true_model,
    fourier_true_model,
    kinked_true_model,
    read_dataset_csv,
    sample_dataset,
    true_cov_matrix,
    write_dataset_csv,
)

__version__ = "0.1.0"
