"""Sparse functional data from a known finite-rank truth.

Each curve draws a small number of observation times, latent component
scores, and additive noise; values are sums of scaled orthonormal component
functions.  Per-curve random streams are derived from (seed, curve index) so
generation is reproducible and order-independent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .basis import gauss_legendre_cells

__all__ = [
    "FourierComponent",
    "KinkedComponent",
    "TrueModel",
    "SparseDataset",
    "default_true_model",
    "kinked_true_model",
    "sample_dataset",
    "true_cov_matrix",
    "write_dataset_csv",
    "read_dataset_csv",
    "write_dataset",
    "read_truth_sidecar",
]

FORMAT_VERSION = 1


class FourierComponent:
    """Orthonormal trigonometric component: sqrt(2) cos / sin of increasing
    frequency (index 1 -> cos(2 pi u), 2 -> sin(2 pi u), 3 -> cos(4 pi u), ...)."""

    def __init__(self, index: int):
        if index < 1:
            raise ValueError("component index starts at 1")
        self.index = index
        self.freq = 2.0 * np.pi * ((index + 1) // 2)
        self.is_cos = index % 2 == 1

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.sqrt(2.0) * (np.cos(self.freq * u) if self.is_cos else np.sin(self.freq * u))


class KinkedComponent:
    """Linear combination of cosines and one-sided power functions.

    The power terms (u - c)_+^p have a jump in the p-th derivative at their
    kink c, so the combination has finite smoothness of order p.  Instances
    are produced orthonormalized by :func:`kinked_true_model`.
    """

    def __init__(self, p: int, kinks, coefs):
        self.p = int(p)
        self.kinks = np.asarray(kinks, dtype=float)
        self.coefs = np.asarray(coefs, dtype=float)

    @property
    def breakpoints(self):
        """Kink locations, useful for accurate piecewise quadrature."""
        return self.kinks

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        feats = _kinked_features(u, self.p, self.kinks)
        return feats @ self.coefs


def _kinked_features(u: np.ndarray, p: int, kinks: np.ndarray) -> np.ndarray:
    """Feature columns: cos(pi r u) for r = 1..len(kinks), then (u - c_r)_+^p."""
    cols = [np.cos(np.pi * (r + 1) * u) for r in range(len(kinks))]
    cols += [np.clip(u - c, 0.0, None) ** p for c in kinks]
    return np.stack(cols, axis=-1)


@dataclass
class TrueModel:
    """Rank-R truth: orthonormal component functions, decreasing variances,
    noise level, and the sampling law of the sparse observations."""

    R: int
    eigenfunctions: tuple
    eigenvalues: np.ndarray
    sigma_e: float
    m_range: tuple = (4, 8)
    time_density: object = "uniform"  # or callable (rng, size) -> samples in [0, 1]
    score_dist: str = "normal"  # or "uniform" (scaled to unit variance)
    family: str = "custom"
    family_params: dict = field(default_factory=dict)
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)
        if len(self.eigenfunctions) != self.R or self.eigenvalues.shape != (self.R,):
            raise ValueError("need R component functions and R eigenvalues")
        if self.score_dist not in ("normal", "uniform"):
            raise ValueError(f"unknown score distribution {self.score_dist!r}")
        lo, hi = self.m_range
        if not (1 <= lo <= hi):
            raise ValueError("m_range must satisfy 1 <= lo <= hi")
        if self.sigma_e < 0.0:
            raise ValueError("sigma_e must be nonnegative")
        if self.check:
            if np.any(np.diff(self.eigenvalues) >= 0.0) or self.eigenvalues[-1] <= 0.0:
                raise ValueError("eigenvalues must be positive and strictly decreasing")
            G = self._gram()
            if np.abs(G - np.eye(self.R)).max() > 1e-8:
                raise ValueError("component functions are not orthonormal under quadrature")

    def _gram(self) -> np.ndarray:
        breaks = {0.0, 1.0}
        for f in self.eigenfunctions:
            breaks.update(float(b) for b in getattr(f, "breakpoints", ()))
        pts, wts = gauss_legendre_cells(sorted(breaks), 64)
        vals = np.stack([f(pts) for f in self.eigenfunctions])
        return (vals * wts) @ vals.T

    def component_values(self, times) -> np.ndarray:
        """Matrix of component values, shape (R, len(times))."""
        times = np.asarray(times, dtype=float)
        return np.stack([f(times) for f in self.eigenfunctions])

    def sample_times(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.time_density == "uniform":
            return rng.uniform(0.0, 1.0, size)
        times = np.asarray(self.time_density(rng, size), dtype=float)
        if times.shape != (size,) or np.any(times < 0.0) or np.any(times > 1.0):
            raise ValueError("time sampler must return `size` values inside [0, 1]")
        return times

    def sample_scores(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.score_dist == "normal":
            return rng.standard_normal(size)
        return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size)

    def sample_values(self, rng: np.random.Generator, times) -> np.ndarray:
        """Draw scores and noise, then evaluate the curve at fixed times."""
        scores = self.sample_scores(rng, self.R)
        noise = rng.standard_normal(len(times))
        psi = self.component_values(times)
        return (np.sqrt(self.eigenvalues) * scores) @ psi + self.sigma_e * noise

    def to_config(self) -> dict:
        if self.family not in ("fourier", "kinked"):
            raise ValueError("only the built-in truth families can be serialized")
        cfg = {
            "family": self.family,
            "R": self.R,
            "eigenvalues": self.eigenvalues.tolist(),
            "sigma_e": self.sigma_e,
            "m_range": list(self.m_range),
            "score_dist": self.score_dist,
        }
        cfg.update(self.family_params)
        return cfg

    @staticmethod
    def from_config(cfg: dict) -> "TrueModel":
        cfg = dict(cfg)
        family = cfg.pop("family")
        common = dict(
            R=cfg["R"],
            eigenvalues=cfg["eigenvalues"],
            sigma_e=cfg["sigma_e"],
            m_range=tuple(cfg.get("m_range", (4, 8))),
            score_dist=cfg.get("score_dist", "normal"),
        )
        if family == "fourier":
            return fourier_true_model(**common)
        if family == "kinked":
            return kinked_true_model(p=cfg["p"], **common)
        raise ValueError(f"unknown truth family {family!r}")


def fourier_true_model(
    R: int = 2,
    eigenvalues=(4.0, 1.0),
    sigma_e: float = 0.5,
    m_range=(4, 8),
    score_dist: str = "normal",
) -> TrueModel:
    """Smooth truth built from the trigonometric orthonormal family."""
    funcs = tuple(FourierComponent(r) for r in range(1, R + 1))
    return TrueModel(
        R=R,
        eigenfunctions=funcs,
        eigenvalues=np.asarray(eigenvalues, dtype=float),
        sigma_e=sigma_e,
        m_range=tuple(m_range),
        score_dist=score_dist,
        family="fourier",
    )


def default_true_model() -> TrueModel:
    """Rank-2 smooth default: components sqrt(2)cos(2 pi u), sqrt(2)sin(2 pi u),
    variances (4, 1), noise sd 0.5, 4 to 8 observations per curve."""
    return fourier_true_model()


def kinked_true_model(
    p: int,
    R: int = 2,
    eigenvalues=(4.0, 1.0),
    sigma_e: float = 0.5,
    m_range=(4, 8),
    score_dist: str = "normal",
) -> TrueModel:
    """Truth with finite smoothness: each component carries one-sided power
    terms (u - c)_+^p, orthonormalized by Gram-Schmidt under quadrature."""
    if p < 1:
        raise ValueError("smoothness order p must be >= 1")
    kinks = np.array([(2 * r + 1) / (2 * R + 1) for r in range(R)])
    pts, wts = gauss_legendre_cells(np.concatenate([[0.0], np.sort(kinks), [1.0]]), 64)
    feats = _kinked_features(pts, p, kinks)  # (npts, 2R)
    # raw component r mixes a cosine with its own kinked term
    raw = np.zeros((R, 2 * R))
    for r in range(R):
        raw[r, r] = 1.0
        raw[r, R + r] = 3.0
    vals = raw @ feats.T  # (R, npts)
    coefs = []
    for r in range(R):
        v = vals[r].copy()
        c = raw[r].astype(float)
        for s in range(r):
            proj = np.sum(wts * v * vals[s])
            v -= proj * vals[s]
            c -= proj * coefs[s]
        nrm = np.sqrt(np.sum(wts * v * v))
        vals[r] = v / nrm
        coefs.append(c / nrm)
    funcs = tuple(KinkedComponent(p, kinks, c) for c in coefs)
    return TrueModel(
        R=R,
        eigenfunctions=funcs,
        eigenvalues=np.asarray(eigenvalues, dtype=float),
        sigma_e=sigma_e,
        m_range=tuple(m_range),
        score_dist=score_dist,
        family="kinked",
        family_params={"p": int(p)},
    )


@dataclass
class SparseDataset:
    """List of sparsely observed curves, each a (times, values) pair."""

    curves: list
    seed: int | None = None

    @property
    def n(self) -> int:
        return len(self.curves)

    @property
    def n_obs(self) -> int:
        return sum(len(t) for t, _ in self.curves)


def sample_dataset(tm: TrueModel, N: int, seed: int) -> SparseDataset:
    """Draw N independent sparse curves; fully reproducible from ``seed``.

    Each curve uses its own generator seeded by (seed, curve index), so
    curves could be generated in any order or in parallel without changing
    the result.
    """
    if N < 1:
        raise ValueError("need at least one curve")
    if seed < 0:
        raise ValueError("seed must be a nonnegative integer")
    lo, hi = tm.m_range
    curves = []
    for n in range(N):
        rng = np.random.default_rng((seed, n))
        m = int(rng.integers(lo, hi + 1))
        times = tm.sample_times(rng, m)
        values = tm.sample_values(rng, times)
        curves.append((times, values))
    return SparseDataset(curves=curves, seed=seed)


def true_cov_matrix(tm: TrueModel, times) -> np.ndarray:
    """Covariance of the observation vector at fixed times:
    sum_r lambda_r psi_r(u_i) psi_r(u_j) + sigma_e^2 on the diagonal."""
    psi = tm.component_values(times)
    C = (psi.T * tm.eigenvalues) @ psi
    return C + tm.sigma_e**2 * np.eye(len(np.atleast_1d(times)))


def write_dataset_csv(ds: SparseDataset, path) -> None:
    """One row per observation with header ``curve_id,u,y``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["curve_id", "u", "y"])
        for cid, (times, values) in enumerate(ds.curves):
            for u, y in zip(times, values):
                writer.writerow([cid, repr(float(u)), repr(float(y))])


def read_dataset_csv(path) -> SparseDataset:
    by_curve: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["curve_id", "u", "y"]:
            raise ValueError(f"expected header curve_id,u,y in {path}, got {reader.fieldnames}")
        for row in reader:
            by_curve.setdefault(int(row["curve_id"]), []).append((float(row["u"]), float(row["y"])))
    curves = []
    for cid in sorted(by_curve):
        times, values = zip(*by_curve[cid])
        curves.append((np.asarray(times), np.asarray(values)))
    return SparseDataset(curves=curves)


def write_dataset(ds: SparseDataset, tm: TrueModel, csv_path, meta_path) -> None:
    """Write the CSV plus a JSON sidecar recording the truth and the seed."""
    write_dataset_csv(ds, csv_path)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "pfpca-dataset",
        "seed": ds.seed,
        "n_curves": ds.n,
        "truth": tm.to_config(),
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_truth_sidecar(path):
    """Load a dataset sidecar; returns (TrueModel, metadata dict)."""
    with open(path) as fh:
        meta = json.load(fh)
    if meta.get("kind") != "pfpca-dataset":
        raise ValueError(f"{path} is not a dataset sidecar")
    return TrueModel.from_config(meta["truth"]), meta
