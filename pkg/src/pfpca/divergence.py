"""Matrix Bregman divergences generated by a scalar seed function.

A seed is a strictly convex scalar function ``phi`` on (0, inf); it acts on a
symmetric positive definite matrix through the eigendecomposition.  The
divergence is ``tr{phi(A) - phi(B) - phi'(B)(A - B)}``, which is zero exactly
when the two matrices coincide.  Directional derivatives of ``phi'`` are
computed with the first-divided-difference rule in the eigenbasis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "SeedFunction",
    "SpdMatrix",
    "frobenius_seed",
    "log_det_seed",
    "von_neumann_seed",
    "custom_seed",
    "get_seed",
    "SEED_NAMES",
    "apply_matrix_function",
    "frechet_phi_prime",
    "phi_prime_divided_differences",
    "bregman",
]

# relative gap below which eigenvalue pairs are treated as degenerate
DEGENERATE_REL_GAP = 1e-8
# rounding slack allowed on nonnegativity of the divergence
NEGATIVITY_SLACK = 1e-10


@dataclass(frozen=True)
class SeedFunction:
    """Scalar seed with its first two derivatives, vectorized over arrays.

    ``quadratic`` marks the x^2 seed, whose matrix calculus needs no
    eigendecomposition; it is set only by the built-in factory.
    """

    name: str
    phi: Callable
    phi_prime: Callable
    phi_double_prime: Callable
    quadratic: bool = False


def _phi_frob(x):
    return np.square(x)


def _phi_prime_frob(x):
    return 2.0 * np.asarray(x, dtype=float)


def _phi_pp_frob(x):
    return np.full_like(np.asarray(x, dtype=float), 2.0)


def _phi_logdet(x):
    return -np.log(x)


def _phi_prime_logdet(x):
    return -1.0 / np.asarray(x, dtype=float)


def _phi_pp_logdet(x):
    return 1.0 / np.square(x)


def _phi_vn(x):
    x = np.asarray(x, dtype=float)
    return x * np.log(x) - x


def _phi_prime_vn(x):
    return np.log(x)


def _phi_pp_vn(x):
    return 1.0 / np.asarray(x, dtype=float)


def frobenius_seed() -> SeedFunction:
    """Seed phi(x) = x^2; the divergence is the squared Frobenius distance."""
    return SeedFunction("frobenius", _phi_frob, _phi_prime_frob, _phi_pp_frob, quadratic=True)


def log_det_seed() -> SeedFunction:
    """Seed phi(x) = -log x (Stein / log-det divergence)."""
    return SeedFunction("log-det", _phi_logdet, _phi_prime_logdet, _phi_pp_logdet)


def von_neumann_seed() -> SeedFunction:
    """Seed phi(x) = x log x - x (von Neumann divergence)."""
    return SeedFunction("von-neumann", _phi_vn, _phi_prime_vn, _phi_pp_vn)


def custom_seed(phi, phi_prime, phi_double_prime, name: str = "custom") -> SeedFunction:
    """Wrap user-supplied scalar evaluators.

    Strict convexity (phi'' > 0) is checked only at points actually probed;
    matrix monotonicity of phi' is the caller's responsibility.
    """
    return SeedFunction(name, phi, phi_prime, phi_double_prime)


_FACTORIES = {
    "frobenius": frobenius_seed,
    "log-det": log_det_seed,
    "von-neumann": von_neumann_seed,
}

SEED_NAMES = tuple(_FACTORIES)


def get_seed(name: str) -> SeedFunction:
    try:
        return _FACTORIES[name]()
    except KeyError:
        raise ValueError(
            f"unknown seed function {name!r}; choose from {', '.join(SEED_NAMES)}"
        ) from None


class SpdMatrix:
    """Symmetric positive definite matrix with a cached eigendecomposition."""

    __slots__ = ("mat", "eigvals", "eigvecs")

    def __init__(self, mat, check: bool = True):
        mat = np.asarray(mat, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {mat.shape}")
        if check:
            scale = max(1.0, np.abs(mat).max())
            asym = np.abs(mat - mat.T).max()
            if asym > 1e-12 * scale:
                raise ValueError(f"matrix is not symmetric (relative asymmetry {asym / scale:.2e})")
        mat = 0.5 * (mat + mat.T)
        eigvals, eigvecs = np.linalg.eigh(mat)
        if eigvals[0] <= 0.0:
            raise ValueError(f"matrix is not positive definite (min eigenvalue {eigvals[0]:.3e})")
        self.mat = mat
        self.eigvals = eigvals
        self.eigvecs = eigvecs

    @property
    def dim(self) -> int:
        return self.mat.shape[0]


def _as_spd(A) -> SpdMatrix:
    return A if isinstance(A, SpdMatrix) else SpdMatrix(A)


def apply_matrix_function(f, A) -> np.ndarray:
    """Apply the scalar function f to an SPD matrix through its eigenbasis."""
    A = _as_spd(A)
    with np.errstate(all="ignore"):
        vals = np.asarray(f(A.eigvals), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("scalar function is undefined on part of the spectrum")
    return (A.eigvecs * vals) @ A.eigvecs.T


def phi_prime_divided_differences(seed: SeedFunction, g: np.ndarray) -> np.ndarray:
    """First divided differences of phi' on eigenvalues ``g``.

    ``g`` has shape (..., M); the result has shape (..., M, M) with entry
    (i, j) equal to (phi'(g_i) - phi'(g_j)) / (g_i - g_j), replaced by
    phi''((g_i + g_j)/2) when the pair is degenerate in relative terms.
    Supports stacked inputs for batched use.
    """
    g = np.asarray(g, dtype=float)
    gi = g[..., :, None]
    gj = g[..., None, :]
    diff = gi - gj
    near = np.abs(diff) < DEGENERATE_REL_GAP * np.maximum(np.abs(gi), np.abs(gj))
    with np.errstate(all="ignore"):
        pi = seed.phi_prime(gi)
        pj = seed.phi_prime(gj)
        ratio = (pi - pj) / np.where(near, 1.0, diff)
        limit = seed.phi_double_prime(0.5 * (gi + gj))
    out = np.where(near, limit, ratio)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"seed {seed.name!r} is undefined on part of the spectrum")
    return out


def frechet_phi_prime(seed: SeedFunction, A, H) -> np.ndarray:
    """Directional derivative of phi' at A in the direction H.

    Computed in the eigenbasis of A by scaling the rotated H with the first
    divided differences of phi' (degenerate pairs fall back to phi'').
    """
    A = _as_spd(A)
    H = np.asarray(H, dtype=float)
    if H.shape != A.mat.shape:
        raise ValueError(f"direction shape {H.shape} does not match matrix shape {A.mat.shape}")
    L = phi_prime_divided_differences(seed, A.eigvals)
    if np.any(seed.phi_double_prime(A.eigvals) <= 0.0):
        raise ValueError(f"seed {seed.name!r} is not strictly convex on the probed spectrum")
    F = A.eigvecs
    Ht = F.T @ H @ F
    return F @ (L * Ht) @ F.T


def bregman(seed: SeedFunction, K, C) -> float:
    """Matrix Bregman divergence tr{phi(K) - phi(C) - phi'(C)(K - C)}.

    Nonnegative for admissible seeds; tiny negative values (above the
    rounding slack) are clamped to zero, anything below raises.
    """
    K = _as_spd(K)
    C = _as_spd(C)
    if K.dim != C.dim:
        raise ValueError(f"dimension mismatch: {K.dim} vs {C.dim}")
    with np.errstate(all="ignore"):
        phi_k = np.asarray(seed.phi(K.eigvals), dtype=float)
        phi_c = np.asarray(seed.phi(C.eigvals), dtype=float)
    if not (np.all(np.isfinite(phi_k)) and np.all(np.isfinite(phi_c))):
        raise ValueError(f"seed {seed.name!r} is undefined on part of the spectrum")
    phip_c = apply_matrix_function(seed.phi_prime, C)
    value = float(phi_k.sum() - phi_c.sum() - np.sum(phip_c * (K.mat - C.mat)))
    if value < -NEGATIVITY_SLACK:
        raise RuntimeError(
            f"Bregman divergence came out {value:.3e} < -{NEGATIVITY_SLACK:.0e}; "
            "inputs are inconsistent with a convex seed"
        )
    return max(value, 0.0)
