"""Evaluation metrics: KDE overlap, average forgetting, nearest-class-mean accuracy."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .bounds import EqualityReport, equality_check
from .losses import FeatureSet


@dataclass(frozen=True)
class OverlapConfig:
    """How ``overlap_eo`` projects, smooths and integrates.

    ``integration`` is ``grid``, ``mc`` or ``auto``. ``auto`` uses the grid
    when the projected dimension is at most 3 and the narrowest kernel is
    wider than one grid cell, and Monte Carlo otherwise.
    """

    projection_dim: int = 3
    bandwidth_floor: float = 1e-3
    integration: str = "auto"
    grid_resolution: int = 64
    pad_bandwidths: float = 4.0
    mc_samples: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.projection_dim < 1:
            raise ValueError("projection_dim must be >= 1")
        if self.grid_resolution < 8:
            raise ValueError("grid_resolution must be >= 8")
        if self.integration not in ("auto", "grid", "mc"):
            raise ValueError(f"unknown integration {self.integration!r}")


class GaussianKDE:
    """Gaussian KDE with Scott's factor and an isotropic bandwidth floor.

    Kernel covariance is ``scott^2 * Cov(data) + floor^2 * I`` with
    ``scott = n^(-1/(d+4))``, so identical points still give a proper density.
    """

    def __init__(self, data: np.ndarray, floor: float = 1e-3):
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        self.data = data
        n, d = data.shape
        self.factor = n ** (-1.0 / (d + 4))
        cov = np.cov(data, rowvar=False, ddof=1).reshape(d, d) if n > 1 else np.zeros((d, d))
        self.cov = self.factor**2 * cov + floor**2 * np.eye(d)
        self.chol = np.linalg.cholesky(self.cov)
        self._prec_chol = np.linalg.inv(self.chol)
        self._log_norm = -0.5 * d * math.log(2 * math.pi) - float(np.sum(np.log(np.diag(self.chol))))

    @property
    def min_std(self) -> float:
        return float(math.sqrt(np.linalg.eigvalsh(self.cov)[0]))

    @property
    def max_std(self) -> float:
        return float(math.sqrt(np.linalg.eigvalsh(self.cov)[-1]))

    def __call__(self, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(x.shape[0])
        W = self._prec_chol
        pts = self.data @ W.T
        for s in range(0, x.shape[0], chunk):
            q = x[s : s + chunk] @ W.T
            d2 = np.sum(q**2, axis=1)[:, None] + np.sum(pts**2, axis=1)[None, :] - 2.0 * q @ pts.T
            out[s : s + chunk] = np.exp(self._log_norm - 0.5 * np.maximum(d2, 0.0)).mean(axis=1)
        return out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.integers(0, self.data.shape[0], size=n)
        return self.data[idx] + rng.standard_normal((n, self.data.shape[1])) @ self.chol.T


def _canonical(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Order the pair so the estimate does not depend on argument order."""
    ka = (a.shape, a.tobytes())
    kb = (b.shape, b.tobytes())
    return (a, b) if ka <= kb else (b, a)


def joint_pca(a: np.ndarray, b: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Project both sets onto the top principal axes of their union."""
    union = np.vstack([a, b])
    mu = union.mean(axis=0)
    d = min(dim, union.shape[1])
    if d == union.shape[1]:
        # Full-rank rotation would not change the densities; skip it.
        return a - mu, b - mu
    _, _, Vt = np.linalg.svd(union - mu, full_matrices=False)
    P = Vt[:d].T
    return (a - mu) @ P, (b - mu) @ P


def _grid_overlap(ka: GaussianKDE, kb: GaussianKDE, cfg: OverlapConfig) -> float:
    union = np.vstack([ka.data, kb.data])
    pad = cfg.pad_bandwidths * max(ka.max_std, kb.max_std)
    lo = union.min(axis=0) - pad
    hi = union.max(axis=0) + pad
    axes = [np.linspace(l, h, cfg.grid_resolution) for l, h in zip(lo, hi)]
    cell = float(np.prod([ax[1] - ax[0] for ax in axes]))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    return float(np.sum(np.minimum(ka(mesh), kb(mesh))) * cell)


def _mc_overlap(ka: GaussianKDE, kb: GaussianKDE, cfg: OverlapConfig) -> float:
    # Importance sampling from the equal mixture: E_m[2 min(pa, pb) / (pa + pb)].
    rng = np.random.default_rng(cfg.seed)
    half = cfg.mc_samples // 2
    x = np.vstack([ka.sample(rng, half), kb.sample(rng, half)])
    pa, pb = ka(x), kb(x)
    s = pa + pb
    ratio = np.where(s > 0, 2.0 * np.minimum(pa, pb) / np.where(s > 0, s, 1.0), 0.0)
    return float(ratio.mean())


def overlap_eo_raw(points_a, points_b, cfg: OverlapConfig | None = None) -> tuple[float, str]:
    """Unclipped overlap estimate and the integration method used."""
    cfg = cfg or OverlapConfig()
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    a = a.reshape(-1, 1) if a.ndim == 1 else a
    b = b.reshape(-1, 1) if b.ndim == 1 else b
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("overlap needs two non-empty point sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError("point sets live in different dimensions")
    a, b = _canonical(a, b)
    pa, pb = joint_pca(a, b, cfg.projection_dim)
    ka = GaussianKDE(pa, cfg.bandwidth_floor)
    kb = GaussianKDE(pb, cfg.bandwidth_floor)
    method = cfg.integration
    if method == "auto":
        d = pa.shape[1]
        span = np.ptp(np.vstack([pa, pb]), axis=0).max() + 2 * cfg.pad_bandwidths * max(ka.max_std, kb.max_std)
        spacing = span / (cfg.grid_resolution - 1)
        method = "grid" if d <= 3 and min(ka.min_std, kb.min_std) >= spacing else "mc"
    value = _grid_overlap(ka, kb, cfg) if method == "grid" else _mc_overlap(ka, kb, cfg)
    return value, method


def overlap_eo(points_a, points_b, cfg: OverlapConfig | None = None) -> float:
    """Overlap ``integral min(p_A, p_B)`` of KDEs fitted to two point sets, in [0, 1]."""
    value, _ = overlap_eo_raw(points_a, points_b, cfg)
    return float(min(1.0, max(0.0, value)))


def overlap_matrix(groups: list[np.ndarray], cfg: OverlapConfig | None = None) -> np.ndarray:
    T = len(groups)
    M = np.eye(T)
    for i in range(T):
        for j in range(i + 1, T):
            M[i, j] = M[j, i] = overlap_eo(groups[i], groups[j], cfg)
    return M


def mean_pairwise_overlap(M: np.ndarray) -> float:
    iu = np.triu_indices(M.shape[0], 1)
    return float(M[iu].mean()) if iu[0].size else 0.0


def write_overlap_csv(path, M: np.ndarray, names=None) -> None:
    names = names or [f"task{i}" for i in range(M.shape[0])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(names))
        for name, row in zip(names, M):
            w.writerow([name] + [repr(float(v)) for v in row])


def forgetting(acc_matrix) -> float:
    """Average forgetting over the first ``T - 1`` tasks.

    ``acc_matrix[t][i]`` is the accuracy on task ``i`` after training task
    ``t``; only entries with ``i <= t`` are read, so ragged lower-triangular
    lists and padded square matrices give the same value. May be negative.
    """
    rows = [list(r) for r in acc_matrix]
    T = len(rows)
    if T < 2:
        raise ValueError("forgetting needs at least two tasks")
    final = rows[-1]
    total = 0.0
    for i in range(T - 1):
        peak = max(float(rows[t][i]) for t in range(i, T - 1))
        total += peak - float(final[i])
    return total / (T - 1)


def class_means(features: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): features[labels == c].mean(axis=0) for c in np.unique(labels)}


def ncm_predict(features: np.ndarray, means: dict, candidates=None) -> np.ndarray:
    """Label of the nearest mean (Euclidean); ties go to the lowest class index."""
    ids = sorted(int(c) for c in (means if candidates is None else candidates))
    missing = [c for c in ids if c not in means]
    if missing:
        raise KeyError(f"no class mean for classes {missing}")
    M = np.stack([means[c] for c in ids])
    d2 = np.sum(features**2, axis=1)[:, None] + np.sum(M**2, axis=1)[None, :] - 2.0 * features @ M.T
    return np.asarray(ids)[np.argmin(d2, axis=1)]


def ncm_accuracy(features, labels, means: dict, candidates=None) -> float:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    missing = sorted({int(y) for y in labels} - set(int(c) for c in means))
    if missing:
        raise KeyError(f"no class mean for test labels {missing}")
    if labels.size == 0:
        return float("nan")
    return float(np.mean(ncm_predict(features, means, candidates) == labels))


def simplex_fit(fs: FeatureSet, k: float, tol: float = 1e-9) -> EqualityReport:
    return equality_check(fs, k, tol)
