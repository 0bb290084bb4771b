"""Riemannian minimization of the penalized divergence loss.

Two methods are provided: steepest descent and Fletcher-Reeves conjugate
gradient with projection transport, both with Armijo backtracking along the
product-manifold geodesic.  Initialization solves a pooled least-squares
problem on the off-diagonal observation pairs, which are free of the noise
variance that contaminates the diagonal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .basis import DiagonalizedBasis
from .divergence import SeedFunction
from .manifold import TangentVector, move_point, project_tangent, riemannian_grad, transport
from .model import (
    DesignSet,
    ModelPoint,
    loss,
    loss_and_grad,
    make_design_set,
    penalty_value,
    _as_design_set,
)

__all__ = ["FitConfig", "FitResult", "initialize", "fit"]

# absolute floor under the relative gradient test, so an exactly stationary
# start still reports convergence
GRAD_NORM_FLOOR = 1e-15
ORTHO_DRIFT_LIMIT = 1e-10


@dataclass
class FitConfig:
    """Optimizer settings.

    ``armijo`` is (initial step, shrink factor, sufficient-decrease constant);
    ``grad_tol`` is relative to the gradient norm at the starting point.
    ``bounds``, when given, is (b0, b1, b2): steps with penalty trace
    tr(U^T Gamma U) > b0 or eigenvalues / noise variance outside [b1, b2]
    are rejected during the line search.  ``init`` selects the moment-based
    initializer or a seeded random starting point.
    """

    method: str = "conjugate-gradient"
    max_iters: int = 500
    grad_tol: float = 1e-6
    armijo: tuple = (1.0, 0.5, 1e-4)
    bounds: tuple | None = None
    stiefel_map: str = "exponential"
    init: str = "moment"
    init_seed: int | None = None
    sigma2_init: float = 1.0
    max_backtracks: int = 40
    # start each search near twice the previously accepted step (capped at the
    # configured initial step) instead of always from the top
    adaptive_step: bool = True
    # scale search directions by the inverse diagonal of the dominant
    # curvature (penalty stiffness plus an estimated loss scale); essential
    # when eta * gamma spans many orders of magnitude
    precondition: bool = True

    def __post_init__(self):
        if self.method not in ("conjugate-gradient", "gradient-descent"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.stiefel_map not in ("exponential", "qr"):
            raise ValueError(f"unknown stiefel_map {self.stiefel_map!r}")
        if self.init not in ("moment", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        step0, shrink, c1 = self.armijo
        if not (step0 > 0.0):
            raise ValueError("initial step must be positive")
        if not (0.0 < shrink < 1.0):
            raise ValueError("shrink factor must lie in (0, 1)")
        if not (0.0 < c1 <= 0.5):
            raise ValueError("sufficient-decrease constant must lie in (0, 0.5]")
        if self.bounds is not None:
            b0, b1, b2 = self.bounds
            if not (b0 > 0.0 and 0.0 < b1 < b2):
                raise ValueError("bounds must satisfy b0 > 0 and 0 < b1 < b2")


@dataclass
class FitResult:
    point: ModelPoint
    loss_trace: np.ndarray
    grad_norm_trace: np.ndarray
    status: str  # converged | max-iters | line-search-failure
    iterations: int


def _cg_solve_matrix(apply_op, rhs: np.ndarray, rtol: float = 1e-8, max_iters: int = 200) -> np.ndarray:
    """Conjugate gradients for a PSD linear operator on symmetric matrices."""
    X = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = np.sum(r * r)
    threshold = rtol**2 * np.sum(rhs * rhs)
    for _ in range(max_iters):
        if rs <= threshold:
            break
        Ap = apply_op(p)
        alpha = rs / np.sum(p * Ap)
        X += alpha * p
        r -= alpha * Ap
        rs_new = np.sum(r * r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return X


def _identity_point(K: int, R: int, sigma2: float) -> ModelPoint:
    return ModelPoint(np.eye(K)[:, :R], np.ones(R), sigma2)


def initialize(db: DiagonalizedBasis, dataset, R: int, sigma2_init: float = 1.0) -> ModelPoint:
    """Method-of-moments starting point from pooled off-diagonal pairs.

    Solves the ridge least-squares problem
    min_W sum_n sum_{i != j} (y_ni y_nj - b(u_ni)^T W b(u_nj))^2 + ridge ||W||^2
    for a symmetric K x K matrix, then keeps its top-R eigenpairs.  The noise
    variance is the mean residual of the squared observations against the
    fitted diagonal, floored away from zero.
    """
    ds = dataset if isinstance(dataset, DesignSet) else make_design_set(db, dataset)
    K = db.dimension
    if ds.n_pairs < K * K / 10:
        warnings.warn(
            f"only {ds.n_pairs} off-diagonal pairs for {K * K} coefficients; "
            "falling back to identity initialization",
            RuntimeWarning,
        )
        return _identity_point(K, R, sigma2_init)

    rhs = np.zeros((K, K))
    trace_scale = 0.0
    for grp in ds.groups:
        a = np.einsum("nmk,nm->nk", grp.B, grp.Y)
        rhs += a.T @ a
        rhs -= (grp.Bf * np.square(grp.Y).reshape(-1, 1)).T @ grp.Bf
        trace_scale += np.sum(np.square(grp.B))
    rhs = 0.5 * (rhs + rhs.T)
    ridge = 1e-6 * trace_scale / K

    def apply_op(W):
        out = ridge * W
        for grp in ds.groups:
            P = np.matmul(np.matmul(grp.B, W), grp.B.transpose(0, 2, 1))
            idx = np.arange(grp.m)
            P[:, idx, idx] = 0.0
            T = np.matmul(P, grp.B).reshape(-1, K)
            out = out + grp.Bf.T @ T
        return 0.5 * (out + out.T)

    W_hat = _cg_solve_matrix(apply_op, rhs)
    vals, vecs = np.linalg.eigh(W_hat)
    order = np.argsort(vals)[::-1][:R]
    lam = vals[order]
    if lam[0] <= 0.0:
        warnings.warn(
            "pooled moment matrix has no positive eigenvalues; "
            "falling back to identity initialization",
            RuntimeWarning,
        )
        return _identity_point(K, R, sigma2_init)
    lam = np.maximum(lam, 1e-4 * lam[0])
    U = vecs[:, order]

    # noise variance from the diagonal residual against the rank-R fit
    resid_sum = 0.0
    n_obs = 0
    for grp in ds.groups:
        Z = grp.B @ U
        fitted = np.square(Z) @ lam
        resid_sum += np.sum(np.square(grp.Y) - fitted)
        n_obs += grp.Y.size
    sigma2 = max(resid_sum / n_obs, 1e-4)
    return ModelPoint(U, lam, sigma2)


def _random_point(K: int, R: int, sigma2: float, seed) -> ModelPoint:
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((K, R)))
    return ModelPoint(Q, np.ones(R), sigma2)


def _violates_bounds(db: DiagonalizedBasis, mp: ModelPoint, bounds) -> bool:
    if bounds is None:
        return False
    b0, b1, b2 = bounds
    if float(db.gamma @ np.square(mp.U).sum(axis=1)) > b0:
        return True
    if np.any(mp.lam < b1) or np.any(mp.lam > b2):
        return True
    return not (b1 <= mp.sigma2 <= b2)


def _reorthonormalize(mp: ModelPoint) -> ModelPoint:
    drift = np.abs(mp.U.T @ mp.U - np.eye(mp.rank)).max()
    if drift <= ORTHO_DRIFT_LIMIT:
        return mp
    Q, Rf = np.linalg.qr(mp.U)
    signs = np.sign(np.diag(Rf))
    signs[signs == 0.0] = 1.0
    return ModelPoint(Q * signs, mp.lam, mp.sigma2, check=False)


def _sorted_point(mp: ModelPoint) -> ModelPoint:
    """Order components by decreasing eigenvalue; ties keep column order."""
    tol = 1e-10 * max(1.0, float(mp.lam.max()))
    keys = np.round(mp.lam / tol)
    order = sorted(range(mp.rank), key=lambda r: (-keys[r], r))
    return ModelPoint(mp.U[:, order], mp.lam[list(order)], mp.sigma2, check=False)


def _loss_curvature_scale(seed, db, mp, ds) -> float:
    """Crude scale of the unpenalized loss curvature, from one finite
    difference of the gradient along a fixed random tangent direction."""
    rng = np.random.default_rng(12345)
    du = project_tangent(mp.U, rng.standard_normal(mp.U.shape))
    tv = TangentVector(du, rng.standard_normal(mp.rank), float(rng.standard_normal()))
    nrm = tv.norm()
    if nrm == 0.0:
        return 1.0
    tv = (1.0 / nrm) * tv
    h = 1e-4
    _, g0 = loss_and_grad(seed, db, mp, ds, 0.0)
    _, g1 = loss_and_grad(seed, db, move_point(mp, tv, h), ds, 0.0)
    s0 = np.sqrt(
        np.sum((g1[0] - g0[0]) ** 2) + np.sum((g1[1] - g0[1]) ** 2) + (g1[2] - g0[2]) ** 2
    ) / h
    return float(s0) if np.isfinite(s0) and s0 > 0.0 else 1.0


def fit(
    seed: SeedFunction,
    db: DiagonalizedBasis,
    dataset,
    R: int,
    eta,
    config: FitConfig | None = None,
    initial_point: ModelPoint | None = None,
) -> FitResult:
    """Minimize the penalized loss over St(R, K) x D+ x R+.

    ``dataset`` may be a SparseDataset, a list of curve designs, or a
    prebuilt DesignSet.  ``initial_point`` overrides the configured
    initialization (useful for warm starts).  Returns the best point found
    together with the penalized-loss and gradient-norm traces.
    """
    cfg = config or FitConfig()
    if hasattr(dataset, "curves"):
        ds = make_design_set(db, dataset)
    else:
        ds = _as_design_set(dataset)
    if ds.n == 0:
        raise ValueError("dataset is empty")

    if initial_point is not None:
        mp = initial_point
    elif cfg.init == "moment":
        mp = initialize(db, ds, R, sigma2_init=cfg.sigma2_init)
    else:
        mp = _random_point(db.dimension, R, cfg.sigma2_init, cfg.init_seed)

    if cfg.precondition:
        s0 = _loss_curvature_scale(seed, db, mp, ds)
        eta_vec = np.atleast_1d(np.asarray(eta, dtype=float))
        if eta_vec.size == 1:
            eta_vec = np.full(R, eta_vec[0])
        row_scale = 1.0 / (s0 + 2.0 * db.gamma[:, None] * eta_vec[None, :])  # (K, R)

        def precondition(point, gv):
            return TangentVector(
                project_tangent(point.U, row_scale * gv.du),
                gv.dloglam / s0,
                gv.dlogsigma2 / s0,
            )

    else:

        def precondition(point, gv):
            return gv

    step0, shrink, c1 = cfg.armijo
    value, grads = loss_and_grad(seed, db, mp, ds, eta)
    g = riemannian_grad(mp, grads)
    gnorm = g.norm()
    tol = max(cfg.grad_tol * gnorm, GRAD_NORM_FLOOR)
    loss_trace = [value]
    grad_trace = [gnorm]
    pg = precondition(mp, g)
    d = -pg
    status = "max-iters"
    it = 0
    prev_decrease = None
    t_prev = step0
    while True:
        if gnorm <= tol:
            status = "converged"
            break
        if it >= cfg.max_iters:
            status = "max-iters"
            break
        if d.inner(g) >= 0.0:
            d = -pg  # reset to (preconditioned) steepest descent
        slope = d.inner(g)
        if cfg.adaptive_step and prev_decrease is not None and prev_decrease > 0.0:
            # first trial from the one-dimensional quadratic model through the
            # previous decrease, as in classical backtracking searchers
            t = min(step0, 2.0 * prev_decrease / (-slope))
        elif cfg.adaptive_step:
            t = min(step0, 2.0 * t_prev)
        else:
            t = step0
        accepted = None
        for _ in range(cfg.max_backtracks):
            cand = move_point(mp, d, t, stiefel_map=cfg.stiefel_map)
            if not _violates_bounds(db, cand, cfg.bounds):
                cand_value = loss(seed, cand, ds) + penalty_value(db, cand, eta)
                if cand_value <= value + c1 * t * slope:
                    accepted = cand
                    t_prev = t
                    prev_decrease = value - cand_value
                    break
                # quadratic-interpolation backtracking, safeguarded to
                # [0.1 t, shrink * t]
                denom = cand_value - value - slope * t
                t_quad = -0.5 * slope * t * t / denom if denom > 0.0 else t * shrink
                t = min(max(t_quad, 0.1 * t), shrink * t)
            else:
                t *= shrink
        if accepted is None:
            status = "line-search-failure"
            break
        mp = _reorthonormalize(accepted)
        it += 1
        value, grads = loss_and_grad(seed, db, mp, ds, eta)
        g_new = riemannian_grad(mp, grads)
        pg_new = precondition(mp, g_new)
        if cfg.method == "conjugate-gradient":
            g_old = transport(mp.U, g)
            # Powell restart: drop conjugacy once successive gradients correlate
            if abs(g_new.inner(g_old)) >= 0.2 * g_new.inner(g_new):
                beta = 0.0
            else:
                denom = g.inner(pg)
                beta = g_new.inner(pg_new) / denom if denom > 0.0 else 0.0
            d = -pg_new + beta * transport(mp.U, d)
        else:
            d = -pg_new
        g, pg = g_new, pg_new
        gnorm = g.norm()
        loss_trace.append(value)
        grad_trace.append(gnorm)

    return FitResult(
        point=_sorted_point(mp),
        loss_trace=np.asarray(loss_trace),
        grad_norm_trace=np.asarray(grad_trace),
        status=status,
        iterations=it,
    )
