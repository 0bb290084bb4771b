import warnings

import numpy as np
import numpy.testing as npt
import pytest

from pfpca import divergence as dv
from pfpca.basis import diagonalized_basis
from pfpca.evaluate import align
from pfpca.model import ModelPoint, curve_design, make_design_set, model_cov, penalty_value
from pfpca.optimizer import FitConfig, fit, initialize
from pfpca.simulate import SparseDataset, default_true_model, fourier_true_model, sample_dataset

ALL_SEEDS = [dv.frobenius_seed(), dv.log_det_seed(), dv.von_neumann_seed()]


def test_fit_config_validation():
    FitConfig()  # defaults are valid
    with pytest.raises(ValueError, match="method"):
        FitConfig(method="newton")
    with pytest.raises(ValueError, match="shrink"):
        FitConfig(armijo=(1.0, 1.5, 1e-4))
    with pytest.raises(ValueError, match="decrease"):
        FitConfig(armijo=(1.0, 0.5, 0.9))
    with pytest.raises(ValueError, match="bounds"):
        FitConfig(bounds=(1.0, 2.0, 1.0))


def test_initialize_recovers_working_model_covariance():
    # self-consistency oracle: dense noiseless data drawn exactly from the
    # working model; the pooled moment solve must recover W
    K, R = 10, 2
    db = diagonalized_basis(K, 3, 2)
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.standard_normal((K, R)))
    lam = np.array([3.0, 1.0])
    W_true = (Q * lam) @ Q.T
    curves = []
    for _ in range(2000):
        t = rng.uniform(0, 1, 12)
        B = db.design_matrix(t)
        scores = rng.standard_normal(R)
        y = B @ (Q * np.sqrt(lam)) @ scores
        curves.append((t, y))
    ds = make_design_set(db, SparseDataset(curves=curves))
    mp = initialize(db, ds, R, sigma2_init=1.0)
    W_hat = mp.w_matrix()
    rel = np.linalg.norm(W_hat - W_true) / np.linalg.norm(W_true)
    assert rel < 0.05
    assert mp.sigma2 <= 0.05  # noiseless data: floored near zero


def test_initialize_full_rank_still_orthonormal():
    db = diagonalized_basis(6, 3, 2)
    dataset = sample_dataset(default_true_model(), 300, seed=1)
    mp = initialize(db, make_design_set(db, dataset), R=6)
    npt.assert_allclose(mp.U.T @ mp.U, np.eye(6), atol=1e-10)
    assert np.all(mp.lam > 0)
    assert mp.sigma2 > 0


def test_initialize_falls_back_on_few_pairs():
    # one sparse curve cannot support a 35 x 35 coefficient matrix
    db = diagonalized_basis(35, 3, 2)
    dataset = sample_dataset(default_true_model(), 1, seed=2)
    with pytest.warns(RuntimeWarning, match="falling back"):
        mp = initialize(db, make_design_set(db, dataset), R=2, sigma2_init=0.7)
    npt.assert_allclose(mp.U, np.eye(35)[:, :2])
    npt.assert_allclose(mp.lam, [1.0, 1.0])
    assert mp.sigma2 == 0.7


@pytest.fixture(scope="module")
def small_problem():
    db = diagonalized_basis(10, 3, 2)
    dataset = sample_dataset(default_true_model(), 100, seed=5)
    return db, make_design_set(db, dataset)


def test_fit_starts_at_stationary_point(small_problem):
    # single-observation curves matched exactly to the model covariance make
    # the initial gradient vanish; the fit must return immediately
    db, _ = small_problem
    rng = np.random.default_rng(3)
    Q, _ = np.linalg.qr(rng.standard_normal((10, 2)))
    mp = ModelPoint(Q, [2.0, 1.0], 0.4)
    designs = []
    for t in rng.uniform(0, 1, 30):
        c = model_cov(mp, curve_design(db, [t], [0.0])).mat[0, 0]
        designs.append(curve_design(db, [t], [np.sqrt(c)]))

    from pfpca.manifold import riemannian_grad
    from pfpca.model import loss_and_grad

    _, grads = loss_and_grad(dv.frobenius_seed(), db, mp, designs, 0.0)
    assert riemannian_grad(mp, grads).norm() < 1e-10

    res = fit(dv.frobenius_seed(), db, designs, 2, 0.0, initial_point=mp)
    assert res.status == "converged"
    assert res.iterations == 0


@pytest.mark.parametrize("seed", ALL_SEEDS, ids=lambda s: s.name)
def test_fit_monotone_loss_trace(small_problem, seed):
    db, ds = small_problem
    res = fit(seed, db, ds, 2, 1e-4, FitConfig(max_iters=60))
    assert np.all(np.diff(res.loss_trace) <= 1e-12)
    assert res.status in ("converged", "max-iters")
    assert len(res.loss_trace) == res.iterations + 1
    # orthonormality maintained
    npt.assert_allclose(res.point.U.T @ res.point.U, np.eye(2), atol=1e-8)


def test_fit_converges_on_default_instance():
    db = diagonalized_basis(20, 3, 2)
    dataset = sample_dataset(default_true_model(), 500, seed=7)
    res = fit(dv.frobenius_seed(), db, make_design_set(db, dataset), 2, 1e-4)
    assert res.status == "converged"
    assert res.iterations <= 500
    assert res.grad_norm_trace[-1] <= 1e-6 * res.grad_norm_trace[0]


def test_fit_deterministic(small_problem):
    db, ds = small_problem
    r1 = fit(dv.frobenius_seed(), db, ds, 2, 1e-3, FitConfig(max_iters=40))
    r2 = fit(dv.frobenius_seed(), db, ds, 2, 1e-3, FitConfig(max_iters=40))
    npt.assert_array_equal(r1.point.U, r2.point.U)
    npt.assert_array_equal(r1.loss_trace, r2.loss_trace)
    assert r1.status == r2.status


def test_fit_lambda_sorted_descending(small_problem):
    db, ds = small_problem
    res = fit(dv.frobenius_seed(), db, ds, 2, 0.0, FitConfig(max_iters=80))
    assert np.all(np.diff(res.point.lam) <= 1e-10)


def test_fit_gd_method(small_problem):
    db, ds = small_problem
    res = fit(dv.frobenius_seed(), db, ds, 2, 1e-4, FitConfig(method="gradient-descent", max_iters=40))
    assert np.all(np.diff(res.loss_trace) <= 1e-12)


def test_fit_random_init_seeded(small_problem):
    db, ds = small_problem
    r1 = fit(dv.frobenius_seed(), db, ds, 2, 1e-4, FitConfig(init="random", init_seed=3, max_iters=30))
    r2 = fit(dv.frobenius_seed(), db, ds, 2, 1e-4, FitConfig(init="random", init_seed=3, max_iters=30))
    npt.assert_array_equal(r1.point.U, r2.point.U)
    r3 = fit(dv.frobenius_seed(), db, ds, 2, 1e-4, FitConfig(init="random", init_seed=4, max_iters=30))
    assert not np.array_equal(r1.loss_trace, r3.loss_trace)


def test_fit_respects_bounds(small_problem):
    db, ds = small_problem
    bounds = (50.0, 1e-3, 50.0)
    res = fit(dv.frobenius_seed(), db, ds, 2, 1e-4, FitConfig(bounds=bounds, max_iters=60))
    b0, b1, b2 = bounds
    U = res.point.U
    assert float(db.gamma @ np.square(U).sum(axis=1)) <= b0 + 1e-9
    assert np.all((res.point.lam >= b1) & (res.point.lam <= b2))
    assert b1 <= res.point.sigma2 <= b2


def test_fit_rejects_empty_dataset():
    db = diagonalized_basis(8, 3, 2)
    with pytest.raises(ValueError, match="empty"):
        fit(dv.frobenius_seed(), db, SparseDataset(curves=[]), 2, 0.0)


def test_fit_recovers_simulated_truth():
    # simulation pilot threshold: squared L2 errors below 0.15 per component
    tm = default_true_model()
    db = diagonalized_basis(20, 3, 2)
    dataset = sample_dataset(tm, 500, seed=42)
    res = fit(dv.frobenius_seed(), db, make_design_set(db, dataset), 2, 1e-4)
    ae = align(db, res.point.U, tm.eigenfunctions, eta=1e-4)
    assert np.all(ae.l2_sq() < 0.15)


def test_penalty_monotone_in_eta():
    # a much larger eta must shrink the fitted roughness tr(U^T Gamma U)
    tm = default_true_model()
    db = diagonalized_basis(14, 3, 2)
    base_eta = 1e-4
    wins = 0
    for s in range(5):
        dataset = sample_dataset(tm, 200, seed=900 + s)
        ds = make_design_set(db, dataset)
        cfg = FitConfig(max_iters=150, grad_tol=1e-4)
        r0 = fit(dv.frobenius_seed(), db, ds, 2, 0.0, cfg)
        r1 = fit(dv.frobenius_seed(), db, ds, 2, 1e3 * base_eta, cfg)
        rough0 = float(db.gamma @ np.square(r0.point.U).sum(axis=1))
        rough1 = float(db.gamma @ np.square(r1.point.U).sum(axis=1))
        if rough1 < rough0:
            wins += 1
    assert wins == 5


def test_fit_accepts_eta_vector(small_problem):
    db, ds = small_problem
    res = fit(dv.frobenius_seed(), db, ds, 2, [1e-4, 1e-3], FitConfig(max_iters=40))
    assert res.status in ("converged", "max-iters")
