"""Simplex ETF construction, simplex diagnostics and the global region plan."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Eigenvalues within this distance of zero are treated as exactly zero.
_EIG_ZERO = 1e-12


class DimensionError(ValueError):
    """Ambient dimension too small for the requested configuration."""


@dataclass(frozen=True)
class EtfFrame:
    """K unit vectors (rows of ``vertices``) forming a simplex ETF in R^dim."""

    dim: int
    vertices: np.ndarray

    @property
    def count(self) -> int:
        return int(self.vertices.shape[0])

    def gram(self) -> np.ndarray:
        return self.vertices @ self.vertices.T

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "count": self.count,
            "vertices": self.vertices.astype(np.float64).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EtfFrame":
        v = np.asarray(d["vertices"], dtype=np.float64).reshape(-1, int(d["dim"]))
        return cls(dim=int(d["dim"]), vertices=v)


@dataclass(frozen=True)
class SimplexReport:
    """Deviations from the centroid, radius and equiangular conditions."""

    centroid_norm: float
    radius: float
    radius_spread: float
    common_inner_product: float
    inner_product_spread: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.centroid_norm, self.radius_spread, self.inner_product_spread) <= self.tol

    def to_dict(self) -> dict:
        return {
            "centroid_norm": self.centroid_norm,
            "radius": self.radius,
            "radius_spread": self.radius_spread,
            "common_inner_product": self.common_inner_product,
            "inner_product_spread": self.inner_product_spread,
            "tol": self.tol,
            "passed": self.passed,
        }


@dataclass(frozen=True)
class RegionPlan:
    task_count_max: int
    classes_per_task: int
    etf: EtfFrame | None
    theta_etf: float
    k_min: float
    margin: float
    k: float
    rho: float
    centers_fixed: np.ndarray
    scaled: bool = True
    k_clipped: bool = False
    dim: int = field(default=0)

    def center(self, task: int) -> np.ndarray:
        return self.centers_fixed[task]

    def to_dict(self) -> dict:
        return {
            "task_count_max": self.task_count_max,
            "classes_per_task": self.classes_per_task,
            "dim": self.dim,
            "etf": None if self.etf is None else self.etf.to_dict(),
            "theta_etf": self.theta_etf,
            "k_min": self.k_min,
            "margin": self.margin,
            "k": self.k,
            "rho": self.rho,
            "scaled": self.scaled,
            "k_clipped": self.k_clipped,
            "centers_fixed": self.centers_fixed.astype(np.float64).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionPlan":
        etf = None if d.get("etf") is None else EtfFrame.from_dict(d["etf"])
        return cls(
            task_count_max=int(d["task_count_max"]),
            classes_per_task=int(d["classes_per_task"]),
            etf=etf,
            theta_etf=float(d["theta_etf"]),
            k_min=float(d["k_min"]),
            margin=float(d["margin"]),
            k=float(d["k"]),
            rho=float(d["rho"]),
            centers_fixed=np.asarray(d["centers_fixed"], dtype=np.float64).reshape(
                int(d["task_count_max"]), int(d["dim"])
            ),
            scaled=bool(d["scaled"]),
            k_clipped=bool(d["k_clipped"]),
            dim=int(d["dim"]),
        )


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Haar-distributed matrix with orthonormal columns (QR with sign fix)."""
    a = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def _complement_of_ones(K: int) -> np.ndarray:
    """K x (K-1) orthonormal basis of the hyperplane orthogonal to the all-ones vector."""
    # Helmert contrasts; fixed and exactly orthonormal up to rounding.
    basis = np.zeros((K, K - 1))
    for j in range(1, K):
        basis[:j, j - 1] = 1.0
        basis[j, j - 1] = -float(j)
        basis[:, j - 1] /= math.sqrt(j * (j + 1))
    return basis


def make_simplex_etf(h: int, K: int, seed: int = 0) -> EtfFrame:
    """Build a simplex ETF of ``K`` unit vectors in ``R^h``.

    For ``h >= K`` this is ``sqrt(K/(K-1)) U (I - 11^T/K)`` with a seeded
    orthonormal ``U``. For ``h == K-1`` the centred identity is expressed in
    the hyperplane orthogonal to ``1_K`` and then rotated by a seeded
    orthogonal matrix.
    """
    if K < 2:
        raise ValueError(f"need at least 2 vertices, got K={K}")
    if h < K - 1:
        raise DimensionError(f"dimension h={h} too small for {K} simplex vertices (need h >= {K - 1})")
    rng = np.random.default_rng(seed)
    centred = np.eye(K) - np.ones((K, K)) / K
    scale = math.sqrt(K / (K - 1))
    if h >= K:
        U = _orthonormal_columns(rng, h, K)
        E = scale * U @ centred
    else:
        coords = scale * _complement_of_ones(K).T @ centred  # (K-1) x K
        R = _orthonormal_columns(rng, h, h)
        E = R @ coords
    V = E.T.copy()
    # Exact renormalisation removes the last bits of rounding in the norms.
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    return EtfFrame(dim=h, vertices=V)


def check_simplex(points, tol: float = 1e-9) -> SimplexReport:
    """Measure how far ``points`` are from a regular simplex centred at the origin."""
    P = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if P.shape[0] < 2:
        raise ValueError("check_simplex needs at least 2 points")
    norms = np.linalg.norm(P, axis=1)
    radius = float(norms.mean())
    G = P @ P.T
    off = G[~np.eye(P.shape[0], dtype=bool)]
    common = float(off.mean())
    return SimplexReport(
        centroid_norm=float(np.linalg.norm(P.mean(axis=0))),
        radius=radius,
        radius_spread=float(np.max(np.abs(norms - radius))),
        common_inner_product=common,
        inner_product_spread=float(np.max(np.abs(off - common))),
        tol=tol,
    )


def equiangular_gram(n: int, k: float) -> np.ndarray:
    return (1.0 - k) * np.eye(n) + k * np.ones((n, n))


def gram_feasibility(n: int, k: float, h: int) -> tuple[bool, float, float]:
    """Decide whether ``n`` unit vectors in ``R^h`` can share inner product ``k``.

    Returns ``(feasible, lambda1, lambda2)`` with the closed-form eigenvalues
    ``1 + k(n-1)`` (once) and ``1 - k`` (``n-1`` times) of the Gram matrix.
    Feasible iff both are non-negative and ``h`` is at least the Gram rank.
    """
    if n < 2:
        raise ValueError("gram_feasibility needs n >= 2")
    lam1 = 1.0 + k * (n - 1)
    lam2 = 1.0 - k
    if lam1 < -_EIG_ZERO or lam2 < -_EIG_ZERO:
        return False, lam1, lam2
    return h >= gram_rank(n, k), lam1, lam2


def gram_rank(n: int, k: float) -> int:
    lam1 = 1.0 + k * (n - 1)
    lam2 = 1.0 - k
    return int(abs(lam1) > _EIG_ZERO) + (n - 1) * int(abs(lam2) > _EIG_ZERO)


def feasible_k_floor(C: int) -> float:
    """Smallest common inner product ``C`` unit vectors can share."""
    return -1.0 / (C - 1)


def simplex_radius(C: int, k: float) -> float:
    if C < 2:
        raise ValueError("need at least 2 classes")
    if not (feasible_k_floor(C) - 1e-12 <= k <= 1.0 + 1e-12):
        raise ValueError(f"threshold k={k} outside [{feasible_k_floor(C)}, 1] for C={C}")
    return math.sqrt(max(0.0, (1.0 - 1.0 / C) * (1.0 - k)))


def k_min_for(T: int, C: int) -> tuple[float, float]:
    """Tangency threshold and ETF angle for T task regions of C classes each."""
    if T == 1:
        return feasible_k_floor(C), math.pi
    theta = math.acos(-1.0 / (T - 1))
    return 1.0 - (C / (C - 1)) * math.sin(0.5 * theta) ** 2, theta


def make_region_plan(
    T: int, C: int, h: int, margin: float = 0.0, seed: int = 0, scaled: bool = True
) -> RegionPlan:
    """Pre-allocate one spherical cap per task around a simplex-ETF vertex.

    ``k`` interpolates between the tangency value ``k_min`` (margin 0) and 1.
    In scaled mode the fixed prototype of task ``t`` is ``sqrt(1 - rho^2)``
    times its ETF vertex, the mean of a simplex of radius ``rho`` on the
    unit sphere; unscaled mode uses the unit vertex itself.
    """
    if T < 1:
        raise ValueError("need at least one task")
    if C < 2:
        raise ValueError("need at least 2 classes per task")
    if not 0.0 <= margin <= 1.0:
        raise ValueError(f"margin must lie in [0, 1], got {margin}")
    if h < max(T - 1, C - 1, 1):
        raise DimensionError(f"dimension h={h} too small for T={T}, C={C}")

    k_min, theta = k_min_for(T, C)
    if T == 1:
        k = k_min
        rho = simplex_radius(C, k)
        return RegionPlan(
            task_count_max=1, classes_per_task=C, etf=None, theta_etf=theta, k_min=k_min,
            margin=margin, k=k, rho=rho, centers_fixed=np.zeros((1, h)), scaled=scaled,
            k_clipped=False, dim=h,
        )

    k = (1.0 - k_min) * margin + k_min
    floor = feasible_k_floor(C)
    clipped = k < floor
    k = min(max(k, floor), 1.0)
    rho = simplex_radius(C, k)
    etf = make_simplex_etf(h, T, seed)
    factor = math.sqrt(max(0.0, 1.0 - rho * rho)) if scaled else 1.0
    return RegionPlan(
        task_count_max=T, classes_per_task=C, etf=etf, theta_etf=theta, k_min=k_min,
        margin=margin, k=k, rho=rho, centers_fixed=factor * etf.vertices, scaled=scaled,
        k_clipped=clipped, dim=h,
    )


def inscribed_simplex(center: np.ndarray, C: int, k: float, seed: int = 0) -> np.ndarray:
    """C unit vectors with pairwise inner product ``k`` and mean along ``center``.

    The mean has norm ``sqrt(1 - rho^2)``; only the direction of ``center``
    is used. When that norm is zero the result is a plain unit ETF.
    """
    center = np.asarray(center, dtype=np.float64)
    h = center.shape[0]
    rho = simplex_radius(C, k)
    offset = math.sqrt(max(0.0, 1.0 - rho * rho))
    cn = np.linalg.norm(center)
    if offset == 0.0:
        return make_simplex_etf(h, C, seed).vertices.copy()
    if cn == 0.0:
        raise ValueError("center direction required when rho < 1")
    if h < C:
        raise DimensionError(f"dimension h={h} too small for an off-origin {C}-simplex")
    u = center / cn
    rng = np.random.default_rng(seed)
    # Orthonormal basis of the complement of u, first column u.
    basis = np.linalg.qr(np.column_stack([u, rng.standard_normal((h, h - 1))]))[0]
    basis[:, 0] = u
    etf = make_simplex_etf(h - 1, C, seed).vertices  # C x (h-1)
    Z = offset * u + rho * etf @ basis[:, 1:].T
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)
