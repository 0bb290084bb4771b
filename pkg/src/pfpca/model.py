"""Low-rank spline covariance model, its divergence loss, and gradients.

The working model represents a covariance function as b(u)^T U D U^T b(v)
with U on the Stiefel manifold and D a positive diagonal matrix; observation
noise adds sigma2 on the diagonal.  The loss averages, over curves, the
linearized Bregman divergence between the model covariance at the observed
time points and the one-sample outer product of the observations, weighted
by 1/M^2 per curve.

Curves are grouped by their number of observations so that eigensystem work
is batched; groups are reduced in a fixed order, which keeps results
bit-stable regardless of how the work is scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .basis import DiagonalizedBasis, eval_diag
from .divergence import SeedFunction, SpdMatrix, phi_prime_divided_differences

__all__ = [
    "ModelPoint",
    "CurveDesign",
    "DesignSet",
    "curve_design",
    "make_design_set",
    "model_cov",
    "penalty_value",
    "loss",
    "loss_grad",
    "loss_and_grad",
]

ORTHONORMALITY_TOL = 1e-8


@dataclass
class ModelPoint:
    """Parameters (U, lambda, sigma2) of the rank-R working model.

    U is K x R with orthonormal columns, ``lam`` holds the positive diagonal
    of D, and ``sigma2`` is the noise variance.  Validation can be skipped by
    callers that construct points known to satisfy the constraints (e.g.
    finite-difference probes or manifold updates).
    """

    U: np.ndarray
    lam: np.ndarray
    sigma2: float
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        self.sigma2 = float(self.sigma2)
        if self.U.ndim != 2:
            raise ValueError(f"U must be a matrix, got shape {self.U.shape}")
        if self.lam.shape != (self.U.shape[1],):
            raise ValueError(
                f"lambda length {self.lam.shape[0]} does not match U columns {self.U.shape[1]}"
            )
        if self.check:
            drift = np.abs(self.U.T @ self.U - np.eye(self.rank)).max()
            if drift > ORTHONORMALITY_TOL:
                raise ValueError(f"U columns are not orthonormal (drift {drift:.2e})")
            if np.any(self.lam <= 0.0):
                raise ValueError("eigenvalues must be strictly positive")
            if self.sigma2 <= 0.0:
                raise ValueError("sigma2 must be strictly positive")

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def w_matrix(self) -> np.ndarray:
        """Coefficient matrix W = U diag(lambda) U^T."""
        return (self.U * self.lam) @ self.U.T


@dataclass(frozen=True)
class CurveDesign:
    """Per-curve design: basis rows B, observations y, and S = y y^T."""

    B: np.ndarray
    values: np.ndarray
    S: np.ndarray
    m: int


def curve_design(db: DiagonalizedBasis, times, values) -> CurveDesign:
    times = np.atleast_1d(np.asarray(times, dtype=float))
    values = np.atleast_1d(np.asarray(values, dtype=float))
    if times.size == 0:
        raise ValueError("curve has no observations")
    if times.shape != values.shape:
        raise ValueError(f"times ({times.shape}) and values ({values.shape}) differ in length")
    B = eval_diag(db, times, 0)
    return CurveDesign(B=B, values=values, S=np.outer(values, values), m=times.size)


@dataclass(frozen=True)
class _Group:
    """All curves with the same observation count, stacked, plus cached
    quantities reused on every loss evaluation."""

    m: int
    B: np.ndarray  # (n, m, K)
    Y: np.ndarray  # (n, m)
    Bf: np.ndarray  # (n * m, K) flattened view of B
    BtB_sum: np.ndarray  # sum_n B_n^T B_n
    y_sq: np.ndarray  # per-curve ||y||^2


@dataclass(frozen=True)
class DesignSet:
    """Curve designs grouped by observation count for batched linear algebra."""

    designs: tuple
    groups: tuple  # _Group entries in increasing m

    @property
    def n(self) -> int:
        return len(self.designs)

    @property
    def n_pairs(self) -> int:
        """Total number of ordered off-diagonal observation pairs."""
        return sum(cd.m * (cd.m - 1) for cd in self.designs)


def make_design_set(db: DiagonalizedBasis, dataset) -> DesignSet:
    """Build designs for a dataset of (times, values) curves."""
    designs = tuple(curve_design(db, t, y) for t, y in dataset.curves)
    return _group_designs(designs)


def _group_designs(designs) -> DesignSet:
    by_m: dict[int, list] = {}
    for cd in designs:
        by_m.setdefault(cd.m, []).append(cd)
    groups = []
    for m in sorted(by_m):
        members = by_m[m]
        B = np.stack([cd.B for cd in members])
        Y = np.stack([cd.values for cd in members])
        Bf = B.reshape(-1, B.shape[2])
        groups.append(
            _Group(m=m, B=B, Y=Y, Bf=Bf, BtB_sum=Bf.T @ Bf, y_sq=np.sum(np.square(Y), axis=1))
        )
    return DesignSet(designs=tuple(designs), groups=tuple(groups))


def _as_design_set(designs) -> DesignSet:
    if isinstance(designs, DesignSet):
        return designs
    return _group_designs(tuple(designs))


def model_cov(mp: ModelPoint, cd: CurveDesign) -> SpdMatrix:
    """Model covariance at the curve's time points: B W B^T + sigma2 I."""
    Z = cd.B @ mp.U
    C = (Z * mp.lam) @ Z.T + mp.sigma2 * np.eye(cd.m)
    return SpdMatrix(C, check=False)


def _eta_vector(eta, rank: int) -> np.ndarray:
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    if eta.size == 1:
        eta = np.full(rank, eta[0])
    if eta.shape != (rank,):
        raise ValueError(f"eta must be a scalar or length-{rank} vector")
    if np.any(eta < 0.0):
        raise ValueError("eta must be nonnegative")
    return eta


def penalty_value(db: DiagonalizedBasis, mp: ModelPoint, eta) -> float:
    """Roughness penalty: sum_r eta_r * sum_j gamma_j U[j, r]^2."""
    eta_vec = _eta_vector(eta, mp.rank)
    return float(np.sum(eta_vec * (db.gamma @ np.square(mp.U))))


def _check_spectrum(seed: SeedFunction, *arrays) -> None:
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise ValueError(f"seed {seed.name!r} is undefined on a model covariance spectrum")


def _quadratic_group_stats(mp: ModelPoint, grp: _Group):
    """Per-curve tr(C^2), y^T C y, and tr(C) for the x^2 seed, computed in
    rank space: with Z = B U and A = (Z sqrt(lam))^T (Z sqrt(lam)),
    tr(C^2) = ||A||^2 + 2 sigma2 tr(A) + sigma2^2 m, so the m x m covariance
    is never formed."""
    n, m, K = grp.B.shape
    Z = (grp.Bf @ mp.U).reshape(n, m, mp.rank)
    Zl = Z * np.sqrt(mp.lam)
    A = np.einsum("nmr,nms->nrs", Zl, Zl)
    w = np.einsum("nmr,nm->nr", Zl, grp.Y)
    tr_A = np.einsum("nrr->n", A)
    norm_A2 = np.einsum("nrs,nrs->n", A, A)
    s2 = mp.sigma2
    tr_C2 = norm_A2 + 2.0 * s2 * tr_A + s2 * s2 * m
    yCy = np.einsum("nr,nr->n", w, w) + s2 * grp.y_sq
    tr_C = tr_A + s2 * m
    return Z, tr_C2, yCy, tr_C


def _eig_group(seed: SeedFunction, mp: ModelPoint, grp: _Group):
    """Eigendecompose the stacked model covariances (general seeds)."""
    n, m, K = grp.B.shape
    Z = (grp.Bf @ mp.U).reshape(n, m, mp.rank)
    C = np.einsum("nir,njr->nij", Z * mp.lam, Z)
    idx = np.arange(m)
    C[:, idx, idx] += mp.sigma2
    g, F = np.linalg.eigh(C)
    z = np.einsum("nij,ni->nj", F, grp.Y)  # F^T y
    with np.errstate(all="ignore"):
        phi = np.asarray(seed.phi(g), dtype=float)
        phip = np.asarray(seed.phi_prime(g), dtype=float)
    _check_spectrum(seed, phi, phip)
    per_curve = -phi.sum(axis=1) - (phip * np.square(z)).sum(axis=1) + (phip * g).sum(axis=1)
    return per_curve, (g, F, z)


def loss(seed: SeedFunction, mp: ModelPoint, designs) -> float:
    """Average linearized divergence loss over the curves.

    Per curve the contribution is M^-2 tr{-phi(C) - phi'(C)(S - C)} with
    C the model covariance at the observed times and S = y y^T.
    """
    ds = _as_design_set(designs)
    total = 0.0
    for grp in ds.groups:
        if seed.quadratic:
            _, tr_C2, yCy, _ = _quadratic_group_stats(mp, grp)
            per_curve = tr_C2 - 2.0 * yCy
        else:
            per_curve, _ = _eig_group(seed, mp, grp)
        total += per_curve.sum() / grp.m**2
    return total / ds.n


def loss_and_grad(seed: SeedFunction, db: DiagonalizedBasis, mp: ModelPoint, designs, eta):
    """Penalized loss value and its Euclidean (ambient) gradient.

    Returns ``(value, (grad_U, grad_lam, grad_sigma2))`` where the value and
    gradients include the roughness penalty with parameter ``eta`` (scalar or
    per-component vector).
    """
    ds = _as_design_set(designs)
    eta_vec = _eta_vector(eta, mp.rank)
    K = mp.dim
    R = mp.rank
    total = 0.0
    GW = np.zeros((K, K))
    g_sigma2 = 0.0
    for grp in ds.groups:
        m, B, Y = grp.m, grp.B, grp.Y
        n = B.shape[0]
        weight = -2.0 / m**2
        if seed.quadratic:
            Z, tr_C2, yCy, tr_C = _quadratic_group_stats(mp, grp)
            total += (tr_C2 - 2.0 * yCy).sum() / m**2
            # sum_n B^T (S - C) B without forming the m x m matrices:
            # S part from a_n = B^T y, C part from V_n = B^T Z
            a = np.einsum("nmk,nm->nk", B, Y)
            V = np.einsum("nmk,nmr->nkr", B, Z)
            Vf = V.transpose(0, 2, 1).reshape(n * R, K)
            lam_rep = np.tile(mp.lam, n)
            BtCB = (Vf * lam_rep[:, None]).T @ Vf + mp.sigma2 * grp.BtB_sum
            GW += weight * (a.T @ a - BtCB)
            g_sigma2 += weight * float(np.sum(grp.y_sq - tr_C))
        else:
            per_curve, (g, F, z) = _eig_group(seed, mp, grp)
            total += per_curve.sum() / m**2
            # d loss / dC = -M^-2 Dphi'(C)[S - C] in the eigenbasis
            L = phi_prime_divided_differences(seed, g)
            St = z[:, :, None] * z[:, None, :]
            idx = np.arange(m)
            St[:, idx, idx] -= g
            Gc = np.matmul(np.matmul(F, L * St), F.transpose(0, 2, 1)) * (-1.0 / m**2)
            g_sigma2 += np.einsum("nii->", Gc)
            T = np.matmul(Gc, B).reshape(-1, K)
            GW += grp.Bf.T @ T

    GW /= ds.n
    GW = 0.5 * (GW + GW.T)
    value = total / ds.n + float(np.sum(eta_vec * (db.gamma @ np.square(mp.U))))
    grad_U = 2.0 * (GW @ mp.U) * mp.lam + 2.0 * (db.gamma[:, None] * mp.U) * eta_vec
    grad_lam = np.einsum("kr,kl,lr->r", mp.U, GW, mp.U)
    grad_sigma2 = g_sigma2 / ds.n
    return value, (grad_U, grad_lam, grad_sigma2)


def loss_grad(seed: SeedFunction, db: DiagonalizedBasis, mp: ModelPoint, designs, eta):
    """Euclidean gradient blocks (grad_U, grad_lam, grad_sigma2) of the
    penalized loss; see :func:`loss_and_grad`."""
    _, grads = loss_and_grad(seed, db, mp, designs, eta)
    return grads
