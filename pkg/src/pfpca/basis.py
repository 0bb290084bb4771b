"""B-spline bases on [0, 1] and the orthonormal basis that diagonalizes the
roughness penalty.

The raw basis is the classical clamped B-spline basis with equally spaced
interior knots.  From its Gram matrix N and roughness matrix
Gamma_q = integral of b^(q) b^(q)^T, a change of coordinates is computed so
that the transformed basis has identity Gram matrix and a diagonal roughness
matrix with nonnegative, nondecreasing entries ``gamma``.  All downstream
penalty algebra then reduces to weighted coordinate sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "KnotVector",
    "RawSplineBasis",
    "DiagonalizedBasis",
    "make_knots",
    "eval_raw",
    "gram_and_rough",
    "make_raw_basis",
    "diagonalize",
    "eval_diag",
    "diagonalized_basis",
    "gauss_legendre_cells",
]


def gauss_legendre_cells(breaks, n_nodes: int):
    """Composite Gauss-Legendre rule with ``n_nodes`` points per cell.

    Parameters
    ----------
    breaks : array-like
        Strictly increasing cell boundaries.
    n_nodes : int
        Number of Gauss-Legendre nodes on each cell; the rule is exact for
        polynomials of degree ``2 * n_nodes - 1`` piecewise.

    Returns
    -------
    points, weights : np.ndarray
        Flat arrays covering ``[breaks[0], breaks[-1]]``.
    """
    breaks = np.asarray(breaks, dtype=float)
    if breaks.ndim != 1 or len(breaks) < 2 or np.any(np.diff(breaks) <= 0):
        raise ValueError("breaks must be strictly increasing with length >= 2")
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    lo, hi = breaks[:-1], breaks[1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    points = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * np.broadcast_to(w, (len(lo), n_nodes))).ravel()
    return points, weights


@dataclass(frozen=True)
class KnotVector:
    """Clamped knot vector on [0, 1] with equally spaced interior knots.

    ``knots`` carries the full nondecreasing sequence with (degree+1)-fold
    repetition of 0 and 1; the spline space it spans has dimension
    ``interior_count + degree + 1``.
    """

    degree: int
    interior_count: int
    knots: np.ndarray

    @property
    def dimension(self) -> int:
        return self.interior_count + self.degree + 1

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot values, endpoints included."""
        m = self.degree
        return self.knots[m : len(self.knots) - m]


def make_knots(K: int, m: int) -> KnotVector:
    """Build the clamped knot vector for a K-dimensional degree-m spline space."""
    if m < 1:
        raise ValueError(f"spline degree must be >= 1, got m={m}")
    if K < m + 1:
        raise ValueError(f"basis dimension K={K} must be at least m+1={m + 1}")
    n_interior = K - m - 1
    interior = np.arange(1, n_interior + 1, dtype=float) / (n_interior + 1)
    knots = np.concatenate([np.zeros(m + 1), interior, np.ones(m + 1)])
    return KnotVector(degree=m, interior_count=n_interior, knots=knots)


def _all_bsplines(t: np.ndarray, m: int, us: np.ndarray, deriv: int) -> np.ndarray:
    """Cox-de Boor triangle: values of the ``deriv``-th derivative of every
    degree-``m`` B-spline at each point of ``us``.  Returns (len(us), K)."""
    n0 = len(t) - 1  # number of degree-0 functions
    K = len(t) - m - 1
    B = ((us[:, None] >= t[None, :-1]) & (us[:, None] < t[None, 1:])).astype(float)
    at_end = us == t[-1]
    if np.any(at_end):
        # right endpoint belongs to the last nonempty interval
        B[at_end, :] = 0.0
        B[at_end, K - 1] = 1.0

    def _ratios(j, nf):
        d1 = t[j : j + nf] - t[:nf]
        d2 = t[j + 1 : j + 1 + nf] - t[1 : 1 + nf]
        r1 = np.where(d1 > 0, 1.0 / np.where(d1 > 0, d1, 1.0), 0.0)
        r2 = np.where(d2 > 0, 1.0 / np.where(d2 > 0, d2, 1.0), 0.0)
        return r1, r2

    # value recursion up to degree m - deriv
    for j in range(1, m - deriv + 1):
        nf = n0 - j
        r1, r2 = _ratios(j, nf)
        left = (us[:, None] - t[None, :nf]) * r1 * B[:, :nf]
        right = (t[None, j + 1 : j + 1 + nf] - us[:, None]) * r2 * B[:, 1 : 1 + nf]
        B = left + right
    # derivative recursion for the remaining ``deriv`` degree steps
    for j in range(m - deriv + 1, m + 1):
        nf = n0 - j
        r1, r2 = _ratios(j, nf)
        B = j * (r1 * B[:, :nf] - r2 * B[:, 1 : 1 + nf])
    return B


def eval_raw(kv: KnotVector, u, deriv: int = 0):
    """Evaluate the ``deriv``-th derivative of all raw B-splines.

    ``u`` may be a scalar in [0, 1] or a 1-d array; the result has shape
    ``(K,)`` or ``(len(u), K)`` accordingly.
    """
    if deriv < 0 or deriv > kv.degree:
        raise ValueError(f"derivative order must be in [0, {kv.degree}], got {deriv}")
    scalar = np.ndim(u) == 0
    us = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(us < 0.0) or np.any(us > 1.0):
        raise ValueError("evaluation points must lie in [0, 1]")
    B = _all_bsplines(kv.knots, kv.degree, us, deriv)
    return B[0] if scalar else B


def gram_and_rough(kv: KnotVector, q: int):
    """Assemble the Gram matrix and the order-q roughness matrix.

    Both integrals are computed by per-knot-interval Gauss-Legendre quadrature
    with ``m + 1`` nodes, which is exact for the piecewise-polynomial
    integrands up to rounding.
    """
    m = kv.degree
    if q < 1 or q > m:
        raise ValueError(f"penalty order q={q} must satisfy 1 <= q <= m={m}")
    points, weights = gauss_legendre_cells(kv.breakpoints, m + 1)
    B0 = eval_raw(kv, points, 0)
    Bq = eval_raw(kv, points, q)
    gram = (B0 * weights[:, None]).T @ B0
    rough = (Bq * weights[:, None]).T @ Bq
    gram = 0.5 * (gram + gram.T)
    rough = 0.5 * (rough + rough.T)
    return gram, rough


@dataclass(frozen=True)
class RawSplineBasis:
    """Raw B-spline basis bundled with its Gram and order-q roughness matrix."""

    knots: KnotVector
    q: int
    gram: np.ndarray
    rough: np.ndarray


def make_raw_basis(kv: KnotVector, q: int) -> RawSplineBasis:
    gram, rough = gram_and_rough(kv, q)
    return RawSplineBasis(knots=kv, q=q, gram=gram, rough=rough)


@dataclass(frozen=True)
class DiagonalizedBasis:
    """Spline basis with identity Gram matrix and diagonal roughness matrix.

    ``transform`` maps coefficients in this basis to raw B-spline
    coefficients (``raw_coefs = transform @ coefs``); equivalently the basis
    functions are ``b(u) = transform.T @ b_raw(u)``.  ``gamma`` holds the
    diagonal roughness weights, sorted nondecreasing, with the first ``q``
    entries equal to zero.
    """

    knots: KnotVector
    q: int
    transform: np.ndarray
    gamma: np.ndarray

    @property
    def dimension(self) -> int:
        return self.knots.dimension

    @property
    def degree(self) -> int:
        return self.knots.degree

    def design_matrix(self, times) -> np.ndarray:
        """Rows b(u)^T at each observation time; shape (len(times), K)."""
        return eval_diag(self, np.asarray(times, dtype=float), 0)


def diagonalize(raw: RawSplineBasis) -> DiagonalizedBasis:
    """Whiten the Gram matrix and eigendecompose the whitened roughness.

    The returned transform T satisfies T^T gram T = I and
    T^T rough T = diag(gamma) with gamma sorted ascending.
    """
    s, V = np.linalg.eigh(raw.gram)
    if s[0] <= 0.0 or s[-1] / s[0] > 1e12:
        raise ValueError(
            f"Gram matrix numerically singular (condition {s[-1] / max(s[0], 1e-300):.2e})"
        )
    inv_sqrt = (V / np.sqrt(s)) @ V.T
    white = inv_sqrt @ raw.rough @ inv_sqrt
    white = 0.5 * (white + white.T)
    gamma, E = np.linalg.eigh(white)  # ascending
    gamma = np.maximum(gamma, 0.0)
    # the q-dimensional null space comes out at rounding scale; snap it to zero
    gamma[gamma < 1e-10 * gamma[-1]] = 0.0
    transform = inv_sqrt @ E
    return DiagonalizedBasis(knots=raw.knots, q=raw.q, transform=transform, gamma=gamma)


def eval_diag(db: DiagonalizedBasis, u, deriv: int = 0):
    """Evaluate the diagonalized basis (same contract as :func:`eval_raw`)."""
    return eval_raw(db.knots, u, deriv) @ db.transform


def diagonalized_basis(K: int, m: int = 3, q: int = 2) -> DiagonalizedBasis:
    """Convenience constructor: knots, Gram/roughness assembly, diagonalization."""
    return diagonalize(make_raw_basis(make_knots(K, m), q))
