"""Batch bookkeeping, the thresholded SupCon lower bound and equality diagnostics."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .geometry import check_simplex, feasible_k_floor, gram_feasibility, inscribed_simplex, simplex_radius
from .losses import FeatureSet


@dataclass(frozen=True)
class BatchPlan:
    """Counts of batches holding exactly ``l`` samples of class ``y``.

    ``counts[y][l]`` is the number of batches in which class ``y`` occurs
    ``l`` times (``1 <= l <= b``); ``m[l]`` sums those over classes for
    ``2 <= l <= b``.
    """

    b: int
    batches: tuple
    classes: tuple
    counts: dict
    m: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "b": self.b,
            "classes": list(self.classes),
            "counts": {str(y): {str(l): c for l, c in sorted(v.items())} for y, v in sorted(self.counts.items())},
            "m": {str(l): c for l, c in sorted(self.m.items())},
        }


def build_batch_plan(labels, batches) -> BatchPlan:
    labels = np.asarray(labels)
    batches = tuple(tuple(int(i) for i in B) for B in batches)
    if not batches:
        raise ValueError("need at least one batch")
    sizes = {len(B) for B in batches}
    if len(sizes) != 1:
        raise ValueError(f"ragged batch sizes {sorted(sizes)}")
    b = sizes.pop()
    if b < 2:
        raise ValueError("batch size must be at least 2")
    classes = tuple(sorted(int(y) for y in np.unique(labels)))
    counts = {y: {l: 0 for l in range(1, b + 1)} for y in classes}
    for B in batches:
        for y, l in Counter(int(labels[i]) for i in B).items():
            counts[y][l] += 1
    m = {l: sum(counts[y][l] for y in classes) for l in range(2, b + 1)}
    return BatchPlan(b=b, batches=batches, classes=classes, counts=counts, m=m)


def theorem_bound(plan: BatchPlan, k: float, rho_z: float = 1.0, classes: int | None = None) -> float:
    """``sum_l l M_l log(l - 1 + (b - l) exp(-(1 - k) rho_z^2))``.

    ``classes`` defaults to the number of labels seen by ``plan``; a ``k``
    below ``-1/(classes-1)`` only triggers a warning since the expression
    is still a valid floor there.
    """
    if rho_z <= 0:
        raise ValueError("rho_z must be positive")
    if k > 1.0:
        raise ValueError(f"threshold k={k} exceeds 1")
    C = classes if classes is not None else len(plan.classes)
    if C >= 2 and k < feasible_k_floor(C) - 1e-12:
        warnings.warn(
            f"k={k} below the Gram-feasible floor {feasible_k_floor(C):.6g}; bound is not attained",
            stacklevel=2,
        )
    b = plan.b
    e = math.exp(-(1.0 - k) * rho_z**2)
    return float(sum(l * plan.m[l] * math.log(l - 1 + (b - l) * e) for l in range(2, b + 1)))


def corollary_bound(plan: BatchPlan, classes: int, rho_z: float = 1.0) -> float:
    """Unconstrained SupCon floor, exponent ``-C rho_z^2 / (C - 1)``."""
    b = plan.b
    e = math.exp(-classes * rho_z**2 / (classes - 1))
    return float(sum(l * plan.m[l] * math.log(l - 1 + (b - l) * e) for l in range(2, b + 1)))


def effective_threshold(k: float, classes: int) -> float:
    """Thresholds below the feasible floor act like the floor itself."""
    return max(k, feasible_k_floor(classes))


@dataclass(frozen=True)
class EqualityReport:
    collapse_dev: float
    cross_inner_dev: float
    radius_dev: float
    equiangular_dev: float
    centroid_dev: float
    center: np.ndarray
    expected_radius: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_dev <= self.tol

    @property
    def max_dev(self) -> float:
        return max(self.collapse_dev, self.cross_inner_dev, self.radius_dev, self.equiangular_dev, self.centroid_dev)

    def to_dict(self) -> dict:
        return {
            "collapse_dev": self.collapse_dev,
            "cross_inner_dev": self.cross_inner_dev,
            "radius_dev": self.radius_dev,
            "equiangular_dev": self.equiangular_dev,
            "centroid_dev": self.centroid_dev,
            "center": self.center.tolist(),
            "expected_radius": self.expected_radius,
            "tol": self.tol,
            "passed": self.passed,
        }


def _pairwise_max_distance(X: np.ndarray) -> float:
    if X.shape[0] < 2:
        return 0.0
    # Direct differences; the Gram expansion loses precision near zero.
    diff = X[:, None, :] - X[None, :, :]
    return float(np.sqrt(np.sum(diff**2, axis=-1)).max())


def equality_check(fs: FeatureSet, k: float, tol: float = 1e-9) -> EqualityReport:
    """Measure the distance of ``fs`` from the equality configuration at ``k``.

    Class vertices are the class means; they are compared with a regular
    simplex of radius ``sqrt((1 - 1/C)(1 - k))`` centred at the feature mean.
    """
    Z = fs.features
    y = fs.labels
    classes = np.unique(y)
    C = classes.size
    if C < 2:
        raise ValueError("equality check needs at least 2 classes")
    collapse = max(_pairwise_max_distance(Z[y == c]) for c in classes)
    G = Z @ Z.T
    cross = y[:, None] != y[None, :]
    cross_dev = float(np.max(np.abs(G[cross] - k)))
    center = Z.mean(axis=0)
    vertices = np.stack([Z[y == c].mean(axis=0) for c in classes])
    rho = simplex_radius(C, min(max(k, feasible_k_floor(C)), 1.0))
    rep = check_simplex(vertices - center, tol)
    return EqualityReport(
        collapse_dev=collapse,
        cross_inner_dev=cross_dev,
        radius_dev=float(np.max(np.abs(np.linalg.norm(vertices - center, axis=1) - rho))),
        equiangular_dev=rep.inner_product_spread,
        centroid_dev=rep.centroid_norm,
        center=center,
        expected_radius=rho,
        tol=tol,
    )


# Configuration generators ------------------------------------------------------


def balanced_labels(C: int, n_per_class: int) -> np.ndarray:
    return np.repeat(np.arange(C), n_per_class)


def random_batches(rng: np.random.Generator, N: int, b: int, n_batches: int) -> list[list[int]]:
    """``n_batches`` batches of size ``b``, each the head of a fresh permutation."""
    return [rng.permutation(N)[:b].tolist() for _ in range(n_batches)]


def equality_configuration(C: int, h: int, k: float, n_per_class: int, seed: int = 0) -> FeatureSet:
    """Collapsed balanced features whose cross-class inner products all equal ``k``."""
    rng = np.random.default_rng(seed)
    center = rng.standard_normal(h)
    vertices = inscribed_simplex(center, C, k, seed)
    labels = balanced_labels(C, n_per_class)
    return FeatureSet.single_task(vertices[labels], labels)


def constrained_class_vectors(
    rng: np.random.Generator, C: int, h: int, k: float, max_attempts: int = 100_000
) -> tuple[np.ndarray, bool]:
    """Random unit class vectors with all pairwise inner products >= ``k``.

    Rejection sampling first; afterwards the sample is pulled toward an
    equality configuration until the constraint holds. Returns the vectors
    and whether rejection sampling succeeded.
    """
    iu = np.triu_indices(C, 1)
    V = None
    chunk = 10_000
    for start in range(0, max_attempts, chunk):
        n = min(chunk, max_attempts - start)
        W = rng.standard_normal((n, C, h))
        W /= np.linalg.norm(W, axis=2, keepdims=True)
        ok = np.all(np.einsum("nih,njh->nij", W, W)[:, iu[0], iu[1]] >= k, axis=1)
        if ok.any():
            return W[int(np.argmax(ok))], True
        V = W[-1]
    k_eq = effective_threshold(k, C)
    target = inscribed_simplex(rng.standard_normal(h), C, k_eq, int(rng.integers(2**31)))
    for alpha in np.linspace(0.0, 1.0, 201)[1:]:
        W = (1.0 - alpha) * V + alpha * target
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        if np.all((W @ W.T)[iu] >= k - 1e-15):
            return W, False
    return target, False


@dataclass(frozen=True)
class BoundTrial:
    C: int
    h: int
    k: float
    b: int
    n_batches: int
    loss: float
    bound: float
    rejection: bool

    @property
    def slack(self) -> float:
        return self.loss - self.bound

    def to_dict(self) -> dict:
        return {
            "C": self.C,
            "h": self.h,
            "k": self.k,
            "b": self.b,
            "n_batches": self.n_batches,
            "loss": self.loss,
            "bound": self.bound,
            "slack": self.slack,
            "rejection_sampled": self.rejection,
        }


def feasible_gram_grid(C: int, h: int, k: float, points: int = 201) -> tuple[np.ndarray, np.ndarray]:
    """Common inner products in ``[k, 1]`` realisable by ``C`` unit vectors in ``R^h``."""
    grid = np.linspace(k, 1.0, points)
    ok = np.array([gram_feasibility(C, float(g), h)[0] for g in grid])
    return grid, ok


DEFAULT_TRIAL_KS = (-0.5, 0.0, 0.3, 0.7)


def _trial_layout(rng: np.random.Generator, C: int):
    n_per_class = int(rng.integers(2, 5))
    labels = balanced_labels(C, n_per_class)
    N = labels.size
    b = int(rng.integers(2, N + 1))
    n_batches = int(rng.integers(1, 4))
    return labels, random_batches(rng, N, b, n_batches)


def run_bound_trials(
    trials: int, seed: int = 0, ks=DEFAULT_TRIAL_KS, max_classes: int = 4, max_dim: int = 6
) -> list[BoundTrial]:
    """Random collapsed configurations obeying the threshold, loss vs bound at tau = 1."""
    from .losses import LossParams, supcon_total

    rng = np.random.default_rng(seed)
    params = LossParams(tau=1.0)
    out = []
    for t in range(trials):
        k = float(ks[t % len(ks)])
        C = int(rng.integers(2, max_classes + 1))
        h = int(rng.integers(C, max_dim + 1))
        V, rejected_ok = constrained_class_vectors(rng, C, h, k)
        labels, batches = _trial_layout(rng, C)
        fs = FeatureSet.single_task(V[labels], labels)
        plan = build_batch_plan(labels, batches)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            bound = theorem_bound(plan, k, classes=C)
        out.append(BoundTrial(C, h, k, plan.b, len(batches), supcon_total(fs, batches, params), bound, rejected_ok))
    return out


def run_equality_trials(
    trials: int, seed: int = 0, ks=DEFAULT_TRIAL_KS, max_classes: int = 4, max_dim: int = 6
) -> list[BoundTrial]:
    """Equality configurations at ``max(k, -1/(C-1))``; the slack should vanish."""
    from .losses import LossParams, supcon_total

    rng = np.random.default_rng(seed)
    params = LossParams(tau=1.0)
    out = []
    for t in range(trials):
        C = int(rng.integers(2, max_classes + 1))
        k = effective_threshold(float(ks[t % len(ks)]), C)
        h = int(rng.integers(C, max_dim + 1))
        V = inscribed_simplex(rng.standard_normal(h), C, k, int(rng.integers(2**31)))
        labels, batches = _trial_layout(rng, C)
        fs = FeatureSet.single_task(V[labels], labels)
        plan = build_batch_plan(labels, batches)
        bound = theorem_bound(plan, k, classes=C)
        out.append(BoundTrial(C, h, k, plan.b, len(batches), supcon_total(fs, batches, params), bound, True))
    return out
