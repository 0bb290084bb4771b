import numpy as np
import numpy.testing as npt
import pytest

from pfpca.basis import diagonalized_basis, eval_diag, gauss_legendre_cells
from pfpca.evaluate import (
    align,
    empirical_norm_sq,
    fit_slope,
    norm_eta,
    project_truth,
    spline_approx_error,
    v_and_j,
)
from pfpca.model import make_design_set
from pfpca.simulate import default_true_model, sample_dataset


@pytest.fixture(scope="module")
def db():
    return diagonalized_basis(12, 3, 2)


def test_v_and_j_unit_vectors(db):
    for j in (0, 3, 11):
        e = np.zeros(12)
        e[j] = 1.0
        V, J = v_and_j(db, e)
        assert V == 1.0
        npt.assert_allclose(J, db.gamma[j], rtol=1e-12)


def test_v_and_j_null_block(db):
    coef = np.zeros(12)
    coef[:2] = [0.3, -0.7]  # q = 2 zero-gamma coordinates
    _, J = v_and_j(db, coef)
    assert J == 0.0


def test_v_and_j_quadrature_oracle(db):
    rng = np.random.default_rng(0)
    coef = rng.standard_normal(12)
    breaks = db.knots.breakpoints
    fine = np.unique(np.concatenate([np.linspace(a, b, 9) for a, b in zip(breaks[:-1], breaks[1:])]))
    pts, wts = gauss_legendre_cells(fine, 10)
    d2 = eval_diag(db, pts, 2) @ coef
    oracle = np.sum(wts * d2 * d2)
    _, J = v_and_j(db, coef)
    npt.assert_allclose(J, oracle, rtol=1e-6)


def test_norm_eta_basics(db):
    rng = np.random.default_rng(1)
    A = rng.standard_normal((12, 3))
    # eta = 0 reduces to the Frobenius norm
    npt.assert_allclose(norm_eta(db, A, 0.0), np.linalg.norm(A), rtol=1e-12)
    # homogeneity
    npt.assert_allclose(norm_eta(db, -2.5 * A, 0.7), 2.5 * norm_eta(db, A, 0.7), rtol=1e-12)
    # columns in the zero-gamma block: penalty inert
    B = np.zeros((12, 2))
    B[:2] = rng.standard_normal((2, 2))
    npt.assert_allclose(norm_eta(db, B, 5.0), np.linalg.norm(B), rtol=1e-12)


def test_norm_eta_component_identity(db):
    # ||U - V||_eta^2 = sum_r { V(psi_r - phi_r) + eta J(psi_r - phi_r) }
    rng = np.random.default_rng(2)
    U = rng.standard_normal((12, 2))
    V = rng.standard_normal((12, 2))
    eta = 0.31
    total = 0.0
    for r in range(2):
        v, j = v_and_j(db, U[:, r] - V[:, r])
        total += v + eta * j
    npt.assert_allclose(norm_eta(db, U - V, eta) ** 2, total, rtol=1e-10)


def test_align_exact_recovery(db):
    tm = default_true_model()
    U = np.stack([project_truth(db, f) for f in tm.eigenfunctions], axis=1)
    U /= np.linalg.norm(U, axis=0)  # sign-preserving normalization
    ae = align(db, U, tm.eigenfunctions, eta=0.0)
    assert [c.matched for c in ae.components] == [0, 1]
    assert all(c.sign == 1 for c in ae.components)
    # projections of smooth functions at K = 12 are near-exact
    assert np.all(ae.l2_sq() < 1e-4)


def test_align_sign_flip(db):
    tm = default_true_model()
    U = np.stack([project_truth(db, f) for f in tm.eigenfunctions], axis=1)
    U /= np.linalg.norm(U, axis=0)
    ae = align(db, -U, tm.eigenfunctions, eta=0.0)
    assert [c.sign for c in ae.components] == [-1, -1]
    assert np.all(ae.l2_sq() < 1e-4)


def test_align_recovers_swap(db):
    tm = default_true_model()
    rng = np.random.default_rng(3)
    U = np.stack([project_truth(db, f) for f in tm.eigenfunctions], axis=1)
    U /= np.linalg.norm(U, axis=0)
    noisy = U[:, ::-1] + 0.01 * rng.standard_normal((12, 2))
    Qn, _ = np.linalg.qr(noisy)
    ae = align(db, Qn, tm.eigenfunctions, eta=0.0)
    assert [c.matched for c in ae.components] == [1, 0]


def test_align_permutation_invariant_error_multiset(db):
    tm = default_true_model()
    rng = np.random.default_rng(4)
    U = np.stack([project_truth(db, f) for f in tm.eigenfunctions], axis=1)
    Q, _ = np.linalg.qr(U + 0.05 * rng.standard_normal((12, 2)))
    e1 = sorted(align(db, Q, tm.eigenfunctions).l2_sq())
    e2 = sorted(align(db, Q[:, ::-1], tm.eigenfunctions).l2_sq())
    npt.assert_allclose(e1, e2, rtol=1e-10)


def test_align_l2_matches_quadrature_oracle(db):
    # coefficient-identity error against direct quadrature of (est - truth)^2
    tm = default_true_model()
    rng = np.random.default_rng(5)
    Q, _ = np.linalg.qr(rng.standard_normal((12, 2)))
    ae = align(db, Q, tm.eigenfunctions, eta=0.2)
    pts, wts = gauss_legendre_cells(db.knots.breakpoints, 64)
    B = eval_diag(db, pts, 0)
    for r, comp in enumerate(ae.components):
        est = B @ Q[:, r]
        truth = comp.sign * tm.eigenfunctions[comp.matched](pts)
        oracle = np.sum(wts * (est - truth) ** 2)
        npt.assert_allclose(comp.l2_sq_error, oracle, atol=1e-8)
        assert comp.combined >= comp.l2_sq_error
        npt.assert_allclose(comp.eta_j, 0.2 * comp.j_value, rtol=1e-12)


def test_empirical_norm_basics(db):
    tm = default_true_model()
    ds = make_design_set(db, sample_dataset(tm, 30, seed=7))
    rng = np.random.default_rng(8)
    W = rng.standard_normal((12, 12))
    W = 0.5 * (W + W.T)
    assert empirical_norm_sq(ds, W, W) == 0.0
    # single curve, single observation: scalar formula
    from pfpca.simulate import SparseDataset

    one = make_design_set(db, SparseDataset(curves=[(np.array([0.4]), np.array([1.0]))]))
    b = eval_diag(db, 0.4)
    expected = (b @ W @ b) ** 2
    npt.assert_allclose(empirical_norm_sq(one, W, np.zeros_like(W)), expected, rtol=1e-12)


def test_empirical_norm_concentrates(db):
    # ratio to a fixed discrepancy stabilizes across independent designs
    tm = default_true_model()
    rng = np.random.default_rng(9)
    W1 = rng.standard_normal((12, 12))
    W1 = 0.5 * (W1 + W1.T)
    W2 = W1 + 0.1 * np.eye(12)
    ratios = []
    for rep in range(20):
        ds = make_design_set(db, sample_dataset(tm, 2000, seed=100 + rep))
        ratios.append(empirical_norm_sq(ds, W1, W2) / np.sum((W1 - W2) ** 2))
    ratios = np.array(ratios)
    assert ratios.std(ddof=1) / ratios.mean() < 0.2


def test_fit_slope_exact_and_constant():
    xs = np.linspace(0.0, 3.0, 6)
    slope, stderr = fit_slope(xs, 2.0 - 0.8 * xs)
    npt.assert_allclose(slope, -0.8, atol=1e-12)
    npt.assert_allclose(stderr, 0.0, atol=1e-12)
    slope, stderr = fit_slope(xs, np.full(6, 1.3))
    npt.assert_allclose(slope, 0.0, atol=1e-15)


def test_fit_slope_matches_closed_form_stderr():
    rng = np.random.default_rng(10)
    xs = np.linspace(0, 1, 12)
    ys = 1.0 + 0.5 * xs + 0.1 * rng.standard_normal(12)
    slope, stderr = fit_slope(xs, ys)
    X = np.column_stack([np.ones(12), xs])
    beta, res, *_ = np.linalg.lstsq(X, ys, rcond=None)
    sigma2 = res[0] / (12 - 2)
    cov = sigma2 * np.linalg.inv(X.T @ X)
    npt.assert_allclose(slope, beta[1], rtol=1e-10)
    npt.assert_allclose(stderr, np.sqrt(cov[1, 1]), rtol=1e-10)


def test_spline_approx_error_spline_truth_is_exact():
    db = diagonalized_basis(10, 3, 2)
    coef = np.random.default_rng(11).standard_normal(10)

    def f(u):
        return eval_diag(db, np.asarray(u), 0) @ coef

    _, errors = spline_approx_error([10], f, m=3)
    assert errors[0] < 1e-10


def test_spline_approx_error_smooth_truth_decay():
    tm = default_true_model()
    slope, _ = spline_approx_error((8, 12, 16, 24, 32, 48), tm.eigenfunctions[0], m=3)
    # order m + 1 = 4 decay for an analytic function
    assert slope <= -(3 + 1) + 0.3
    # errors nonincreasing along nested knot sequences (spacing halves)
    _, errors = spline_approx_error((8, 13, 23, 43), tm.eigenfunctions[0], m=3)
    assert np.all(np.diff(errors) <= 1e-12)
