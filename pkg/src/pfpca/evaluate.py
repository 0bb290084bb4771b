"""Error metrics for fitted components: alignment against a known truth,
penalty functionals, the penalty-weighted norm, the design-weighted empirical
norm, and spline approximation-error decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import DiagonalizedBasis, eval_diag, gauss_legendre_cells
from .model import _as_design_set

__all__ = [
    "ComponentError",
    "AlignedError",
    "v_and_j",
    "norm_eta",
    "project_truth",
    "align",
    "empirical_norm_sq",
    "spline_approx_error",
    "fit_slope",
]

QUAD_NODES_PER_CELL = 64


def v_and_j(db: DiagonalizedBasis, coef) -> tuple:
    """Squared L2 norm and roughness of a spline given by its coefficients.

    In the diagonalized basis these are plain coordinate sums:
    V = ||coef||^2 and J = sum_j gamma_j coef_j^2.
    """
    coef = np.asarray(coef, dtype=float)
    return float(coef @ coef), float(db.gamma @ np.square(coef))


def norm_eta(db: DiagonalizedBasis, A, eta: float) -> float:
    """Penalty-weighted matrix norm {||A||_F^2 + eta tr(A^T Gamma A)}^(1/2)."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    fro2 = float(np.sum(np.square(A)))
    pen = float(db.gamma @ np.square(A).sum(axis=1))
    return float(np.sqrt(fro2 + eta * pen))


def _truth_quadrature(db: DiagonalizedBasis, funcs):
    breaks = set(float(b) for b in db.knots.breakpoints)
    for f in funcs:
        breaks.update(float(b) for b in getattr(f, "breakpoints", ()))
    return gauss_legendre_cells(sorted(breaks), QUAD_NODES_PER_CELL)


def project_truth(db: DiagonalizedBasis, func) -> np.ndarray:
    """Coefficients of the L2 projection of ``func`` onto the spline space."""
    pts, wts = _truth_quadrature(db, [func])
    B = eval_diag(db, pts, 0)
    return (wts * func(pts)) @ B


@dataclass(frozen=True)
class ComponentError:
    """Alignment record for one estimated component."""

    matched: int  # index of the matched truth component
    sign: int
    l2_sq_error: float
    j_value: float
    eta_j: float

    @property
    def combined(self) -> float:
        return self.l2_sq_error + self.eta_j


@dataclass(frozen=True)
class AlignedError:
    components: tuple
    eta: float

    def combined(self) -> np.ndarray:
        return np.array([c.combined for c in self.components])

    def l2_sq(self) -> np.ndarray:
        return np.array([c.l2_sq_error for c in self.components])


def align(db: DiagonalizedBasis, U, truth_funcs, eta: float = 0.0) -> AlignedError:
    """Match estimated components to truth components and report errors.

    Components are paired greedily by decreasing absolute inner product
    (quadrature on the spline breakpoints plus any kinks the truth declares),
    each truth used once; signs are flipped so matched inner products are
    nonnegative.  Per component the squared L2 error, the roughness J, and
    the penalty-weighted combination are reported.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    R = U.shape[1]
    funcs = list(truth_funcs)
    if len(funcs) < R:
        raise ValueError(f"need at least {R} truth components, got {len(funcs)}")
    pts, wts = _truth_quadrature(db, funcs)
    truth_vals = np.stack([f(pts) for f in funcs])  # (S, npts)
    truth_sq = (np.square(truth_vals) * wts).sum(axis=1)
    B = eval_diag(db, pts, 0)
    proj = (truth_vals * wts) @ B  # (S, K) projection coefficients
    inner = U.T @ proj.T  # (R, S) estimated x truth inner products

    pairs = sorted(
        ((r, s) for r in range(R) for s in range(len(funcs))),
        key=lambda rs: -abs(inner[rs]),
    )
    comp: dict[int, ComponentError] = {}
    used = set()
    for r, s in pairs:
        if r in comp or s in used:
            continue
        sign = 1 if inner[r, s] >= 0.0 else -1
        u = U[:, r]
        # ||psi_hat - s psi_0||^2 = ||u - s proj||^2 + (||psi_0||^2 - ||proj||^2)
        remainder = truth_sq[s] - float(proj[s] @ proj[s])
        l2_sq = float(np.sum(np.square(u - sign * proj[s]))) + max(remainder, 0.0)
        _, jval = v_and_j(db, u)
        comp[r] = ComponentError(
            matched=s, sign=sign, l2_sq_error=l2_sq, j_value=jval, eta_j=eta * jval
        )
        used.add(s)
        if len(comp) == R:
            break
    return AlignedError(components=tuple(comp[r] for r in range(R)), eta=eta)


def empirical_norm_sq(designs, W1, W2) -> float:
    """Design-weighted squared discrepancy of two coefficient matrices:
    (1/N) sum_n M_n^-2 ||B_n (W1 - W2) B_n^T||_F^2."""
    ds = _as_design_set(designs)
    D = np.asarray(W1, dtype=float) - np.asarray(W2, dtype=float)
    total = 0.0
    for grp in ds.groups:
        P = np.matmul(np.matmul(grp.B, D), grp.B.transpose(0, 2, 1))
        total += np.sum(np.square(P)) / grp.m**2
    return total / ds.n


def fit_slope(xs, ys) -> tuple:
    """Ordinary least squares slope of ys on xs with its standard error."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ValueError("need two equal-length 1-d arrays with >= 2 points")
    xc = xs - xs.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ ys) / sxx
    intercept = float(ys.mean() - slope * xs.mean())
    resid = ys - (intercept + slope * xs)
    dof = len(xs) - 2
    if dof <= 0:
        return slope, float("nan")
    sigma2 = float(resid @ resid) / dof
    return slope, float(np.sqrt(sigma2 / sxx))


def spline_approx_error(k_grid, func, m: int = 3):
    """Best-approximation error of ``func`` across spline dimensions.

    The orthonormal basis makes the best L2 approximation the plain
    coefficient projection (so error^2 = ||f||^2 - ||coefficients||^2); the
    error is evaluated as the quadrature of the squared residual, which is
    the same quantity without the catastrophic cancellation when ``func``
    already lies in the space.  Returns (slope of log error vs log K,
    errors array).
    """
    from .basis import diagonalized_basis

    k_grid = [int(k) for k in k_grid]
    errors = []
    for K in k_grid:
        db = diagonalized_basis(K, m, min(2, m))
        pts, wts = _truth_quadrature(db, [func])
        fv = func(pts)
        B = eval_diag(db, pts, 0)
        coef = (wts * fv) @ B
        resid = fv - B @ coef
        err_sq = max(float(np.sum(wts * resid * resid)), 1e-60)
        errors.append(np.sqrt(err_sq))
    errors = np.asarray(errors)
    if len(k_grid) < 2:
        return float("nan"), errors
    slope, _ = fit_slope(np.log(k_grid), np.log(errors))
    return slope, errors
