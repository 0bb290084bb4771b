import json

import numpy as np
import numpy.testing as npt
import pytest

from pfpca.basis import gauss_legendre_cells
from pfpca.simulate import (
    SparseDataset,
    TrueModel,
    default_true_model,
    fourier_true_model,
    kinked_true_model,
    read_dataset_csv,
    read_truth_sidecar,
    sample_dataset,
    true_cov_matrix,
    write_dataset,
    write_dataset_csv,
)


def test_default_truth_satisfies_constraints():
    tm = default_true_model()
    assert tm.R == 2
    npt.assert_allclose(tm.eigenvalues, [4.0, 1.0])
    assert tm.sigma_e == 0.5
    # orthonormality under a dense rule
    pts, wts = gauss_legendre_cells(np.linspace(0, 1, 201), 50)
    vals = tm.component_values(pts)
    gram = (vals * wts) @ vals.T
    npt.assert_allclose(gram, np.eye(2), atol=1e-10)


def test_true_model_rejects_bad_inputs():
    f = default_true_model().eigenfunctions
    with pytest.raises(ValueError, match="decreasing"):
        TrueModel(R=2, eigenfunctions=f, eigenvalues=[1.0, 4.0], sigma_e=0.5)
    with pytest.raises(ValueError, match="orthonormal"):
        TrueModel(R=2, eigenfunctions=(f[0], f[0]), eigenvalues=[4.0, 1.0], sigma_e=0.5)
    with pytest.raises(ValueError, match="m_range"):
        TrueModel(R=2, eigenfunctions=f, eigenvalues=[4.0, 1.0], sigma_e=0.5, m_range=(0, 5))


def test_sample_dataset_reproducible_and_bounded():
    tm = default_true_model()
    a = sample_dataset(tm, 50, seed=42)
    b = sample_dataset(tm, 50, seed=42)
    for (ta, ya), (tb, yb) in zip(a.curves, b.curves):
        npt.assert_array_equal(ta, tb)
        npt.assert_array_equal(ya, yb)
    for t, y in a.curves:
        assert 4 <= len(t) <= 8
        assert len(t) == len(y)
        assert np.all((t >= 0) & (t <= 1))
    # different seed, different draw
    c = sample_dataset(tm, 50, seed=43)
    assert not np.array_equal(a.curves[0][0], c.curves[0][0])


def test_sample_dataset_validation():
    tm = default_true_model()
    with pytest.raises(ValueError, match="at least one"):
        sample_dataset(tm, 0, seed=1)
    with pytest.raises(ValueError, match="nonnegative"):
        sample_dataset(tm, 5, seed=-3)


def test_noiseless_single_component_curve():
    # sigma_e = 0, single component, unit variance: values are
    # sqrt(lambda_1) * theta * psi_1(u) exactly
    tm = fourier_true_model(R=1, eigenvalues=[2.25], sigma_e=0.0, m_range=(3, 3))
    ds = sample_dataset(tm, 10, seed=5)
    for n, (t, y) in enumerate(ds.curves):
        rng = np.random.default_rng((5, n))
        m = int(rng.integers(3, 4))
        times = rng.uniform(0, 1, m)
        theta = rng.standard_normal(1)
        npt.assert_array_equal(t, times)
        npt.assert_allclose(y, 1.5 * theta[0] * tm.eigenfunctions[0](times), atol=1e-12)


def test_sample_mean_is_zero():
    tm = default_true_model()
    rng = np.random.default_rng(0)
    n = 1_000_000
    scores = rng.standard_normal((n, 2))
    noise = rng.standard_normal(n)
    u = rng.uniform(0, 1, n)
    psi = tm.component_values(u)
    y = np.einsum("nr,rn->n", scores * np.sqrt(tm.eigenvalues), psi) + tm.sigma_e * noise
    se = y.std() / np.sqrt(n)
    assert abs(y.mean()) < 4 * se


def test_conditional_second_moment_matches_true_covariance():
    # Monte Carlo oracle: E[y y^T | times] equals the true covariance matrix
    tm = default_true_model()
    rng = np.random.default_rng(9)
    times = rng.uniform(0, 1, 4)
    n_mc = 100_000
    g = np.random.default_rng(10)
    scores = g.standard_normal((n_mc, 2))
    noise = g.standard_normal((n_mc, 4))
    psi = tm.component_values(times)
    Y = (scores * np.sqrt(tm.eigenvalues)) @ psi + tm.sigma_e * noise
    S_hat = Y.T @ Y / n_mc
    K_true = true_cov_matrix(tm, times)
    prods = Y[:, :, None] * Y[:, None, :]
    se = prods.std(axis=0, ddof=1) / np.sqrt(n_mc)
    assert np.all(np.abs(S_hat - K_true) < 3 * se + 1e-12)


def test_true_cov_matrix_properties():
    tm = default_true_model()
    # scalar case
    C1 = true_cov_matrix(tm, [0.3])
    psi = tm.component_values([0.3])[:, 0]
    npt.assert_allclose(C1, [[np.sum(tm.eigenvalues * psi**2) + 0.25]])
    # PSD of the signal part, ridge from the noise
    times = np.linspace(0.05, 0.95, 6)
    C = true_cov_matrix(tm, times)
    npt.assert_allclose(C, C.T, atol=1e-14)
    w = np.linalg.eigvalsh(C - 0.25 * np.eye(6))
    assert w.min() >= -1e-12
    assert np.linalg.eigvalsh(C).min() >= 0.25 - 1e-12


def test_score_distribution_uniform_variance():
    tm = fourier_true_model(score_dist="uniform")
    rng = np.random.default_rng(3)
    scores = tm.sample_scores(rng, 200_000)
    assert abs(scores.mean()) < 0.01
    assert abs(scores.var() - 1.0) < 0.01
    assert np.abs(scores).max() <= np.sqrt(3.0) + 1e-12


def test_kinked_true_model_orthonormal_and_serializable():
    tm = kinked_true_model(p=1)
    pts, wts = gauss_legendre_cells(np.sort(np.concatenate([[0, 1], tm.eigenfunctions[0].kinks])), 64)
    vals = np.stack([f(pts) for f in tm.eigenfunctions])
    gram = (vals * wts) @ vals.T
    npt.assert_allclose(gram, np.eye(2), atol=1e-8)
    # config round trip reproduces the same functions
    tm2 = TrueModel.from_config(tm.to_config())
    u = np.linspace(0, 1, 101)
    for f, g in zip(tm.eigenfunctions, tm2.eigenfunctions):
        npt.assert_allclose(f(u), g(u), atol=1e-12)


def test_kinked_family_has_reduced_smoothness():
    # the p = 1 family must approximate worse than the smooth family
    from pfpca.evaluate import spline_approx_error

    smooth = default_true_model()
    kinked = kinked_true_model(p=1)
    s_smooth, _ = spline_approx_error((8, 12, 16, 24, 32, 48), smooth.eigenfunctions[0])
    s_kinked, _ = spline_approx_error((8, 12, 16, 24, 32, 48), kinked.eigenfunctions[0])
    assert s_smooth < -3.5
    assert s_kinked > -2.5  # near -(p + 1/2) for a one-sided power kink


def test_csv_roundtrip(tmp_path):
    tm = default_true_model()
    ds = sample_dataset(tm, 12, seed=77)
    path = tmp_path / "data.csv"
    write_dataset_csv(ds, path)
    back = read_dataset_csv(path)
    assert back.n == ds.n
    for (t1, y1), (t2, y2) in zip(ds.curves, back.curves):
        npt.assert_array_equal(t1, t2)
        npt.assert_array_equal(y1, y2)


def test_sidecar_roundtrip(tmp_path):
    tm = default_true_model()
    ds = sample_dataset(tm, 5, seed=3)
    csv_path = tmp_path / "d.csv"
    meta_path = tmp_path / "d.json"
    write_dataset(ds, tm, csv_path, meta_path)
    meta = json.loads(meta_path.read_text())
    assert meta["format_version"] == 1
    assert meta["seed"] == 3
    tm2, raw = read_truth_sidecar(meta_path)
    npt.assert_allclose(tm2.eigenvalues, tm.eigenvalues)
    assert raw["n_curves"] == 5
    # byte-identical CSV on rewrite (determinism)
    ds2 = sample_dataset(tm, 5, seed=3)
    csv2 = tmp_path / "d2.csv"
    write_dataset_csv(ds2, csv2)
    assert csv_path.read_bytes() == csv2.read_bytes()
