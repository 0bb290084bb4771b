"""Geometry of the product manifold St(R, K) x D+ x R+.

The Stiefel factor uses the embedded Euclidean metric with tangent-space
projection; the positive factors (eigenvalues and noise variance) are handled
in log coordinates, where their geodesics become straight lines and
positivity holds for every step length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelPoint

__all__ = [
    "TangentVector",
    "project_tangent",
    "exp_stiefel",
    "retract_qr",
    "move_point",
    "riemannian_grad",
    "transport",
]


@dataclass
class TangentVector:
    """Tangent direction: du in T_U St(R, K), plus log-coordinate components
    for the eigenvalues and the noise variance."""

    du: np.ndarray
    dloglam: np.ndarray
    dlogsigma2: float

    def inner(self, other: "TangentVector") -> float:
        return float(
            np.sum(self.du * other.du)
            + np.sum(self.dloglam * other.dloglam)
            + self.dlogsigma2 * other.dlogsigma2
        )

    def norm(self) -> float:
        return float(np.sqrt(self.inner(self)))

    def __add__(self, other: "TangentVector") -> "TangentVector":
        return TangentVector(
            self.du + other.du,
            self.dloglam + other.dloglam,
            self.dlogsigma2 + other.dlogsigma2,
        )

    def __rmul__(self, a: float) -> "TangentVector":
        return TangentVector(a * self.du, a * self.dloglam, a * self.dlogsigma2)

    def __neg__(self) -> "TangentVector":
        return (-1.0) * self


def project_tangent(U: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Project an ambient K x R matrix onto the tangent space at U."""
    UtG = U.T @ G
    return G - U @ (0.5 * (UtG + UtG.T))


def _stiefel_factors(U: np.ndarray, du: np.ndarray):
    """Split du = U G + H (G skew, H orthogonal to U) and factor H = Q Rf with
    Q orthonormal and orthogonal to U.

    Q is taken from a QR factorization of [U, H] so that its columns stay
    orthogonal to U even when H is rank deficient or zero.  Q has
    min(R, K - R) columns; the column space of H never needs more.
    """
    G = U.T @ du
    G = 0.5 * (G - G.T)
    H = du - U @ G
    Qa, _ = np.linalg.qr(np.concatenate([U, H], axis=1))
    Q = Qa[:, U.shape[1] :]
    Rf = Q.T @ H
    return G, Q, Rf


def _expm_skew(S: np.ndarray) -> np.ndarray:
    """Matrix exponential of a small skew-symmetric matrix.

    i S is Hermitian, so exp(S) = V diag(exp(i theta)) V^H with (theta, V)
    its eigensystem; much faster than a general expm for the small blocks
    used here.
    """
    theta, V = np.linalg.eigh(1j * S)
    return np.real((V * np.exp(-1j * theta)) @ V.conj().T)


def exp_stiefel(U: np.ndarray, du: np.ndarray, t: float) -> np.ndarray:
    """Geodesic of the Stiefel manifold through U with velocity du.

    Uses the closed form built from the matrix exponential of the skew block
    matrix [[G, -Rf^T], [Rf, 0]] in the basis [U, Q].
    """
    R = U.shape[1]
    G, Q, Rf = _stiefel_factors(U, du)
    J = Q.shape[1]
    S = np.zeros((R + J, R + J))
    S[:R, :R] = G
    S[:R, R:] = -Rf.T
    S[R:, :R] = Rf
    E = _expm_skew(t * S)
    return np.concatenate([U, Q], axis=1) @ E[:, :R]


def retract_qr(U: np.ndarray, du: np.ndarray, t: float) -> np.ndarray:
    """First-order retraction: Q factor of U + t du with diag(R) > 0."""
    Q, Rf = np.linalg.qr(U + t * du)
    signs = np.sign(np.diag(Rf))
    signs[signs == 0.0] = 1.0
    return Q * signs


def move_point(mp: ModelPoint, tv: TangentVector, t: float, stiefel_map: str = "exponential") -> ModelPoint:
    """Move along the product-manifold geodesic (or QR retraction) by t."""
    if stiefel_map == "exponential":
        U = exp_stiefel(mp.U, tv.du, t)
    elif stiefel_map == "qr":
        U = retract_qr(mp.U, tv.du, t)
    else:
        raise ValueError(f"unknown Stiefel map {stiefel_map!r}")
    lam = mp.lam * np.exp(t * tv.dloglam)
    sigma2 = mp.sigma2 * np.exp(t * tv.dlogsigma2)
    return ModelPoint(U, lam, sigma2, check=False)


def riemannian_grad(mp: ModelPoint, grads) -> TangentVector:
    """Convert Euclidean gradient blocks to the product-manifold gradient.

    The Stiefel block is projected onto the tangent space; the positive
    blocks pick up the chain-rule factors of the log parameterization.
    """
    grad_U, grad_lam, grad_sigma2 = grads
    return TangentVector(
        du=project_tangent(mp.U, np.asarray(grad_U, dtype=float)),
        dloglam=mp.lam * np.asarray(grad_lam, dtype=float),
        dlogsigma2=mp.sigma2 * float(grad_sigma2),
    )


def transport(U_new: np.ndarray, tv: TangentVector) -> TangentVector:
    """Approximate vector transport: re-project the Stiefel block onto the
    tangent space at the new point; log-coordinate blocks are unchanged."""
    return TangentVector(project_tangent(U_new, tv.du), tv.dloglam, tv.dlogsigma2)
