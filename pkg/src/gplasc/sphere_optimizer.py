"""Gradient descent on raw unit-sphere point clouds (the 3-D toy setting)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import RegionPlan, simplex_radius
from .losses import FeatureSet, LossBreakdown, LossParams, gplasc_value_grad

LOSS_MODES = ("supcon", "range_only", "r2scl", "gplasc")
DIVERGENCE_LIMIT = 1e12


class DivergenceError(RuntimeError):
    pass


@dataclass
class ToyConfig:
    n_per_class: int = 10
    classes: int = 3
    dim: int = 3
    steps: int = 5000
    lr: float = 0.05
    loss_mode: str = "supcon"
    plan: RegionPlan | None = None
    seed: int = 0
    snapshot_every: int = 0
    tau: float = 1.0
    lr_schedule: str = "cosine"
    lambda_range: float = 1.0
    lambda_position: float = 1.0
    lambda_distill: float = 1.0
    # Used when no plan is given: explicit threshold and prototype direction.
    threshold: float | None = None
    prototype_dir: tuple | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")


@dataclass
class Trajectory:
    losses: list[LossBreakdown]
    snapshots: list[tuple[int, np.ndarray]]
    final: FeatureSet
    config: ToyConfig | None = None

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "supcon", "range", "position", "distill", "ird", "total"])
            for step, lb in enumerate(self.losses):
                d = lb.to_dict()
                w.writerow([step] + [repr(d[c]) for c in ("supcon", "range", "position", "distill", "ird", "total")])

    def write_snapshot_csv(self, path) -> None:
        """One row per snapshot: step, loss terms at that step, flattened N x h coordinates."""
        if not self.snapshots:
            return
        n, h = self.snapshots[0][1].shape
        coords = [f"z{i}_{j}" for i in range(n) for j in range(h)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "supcon", "range", "position", "distill", "ird", "total"] + coords)
            for step, Z in self.snapshots:
                d = self.losses[min(step, len(self.losses) - 1)].to_dict() if self.losses else {}
                terms = [repr(d.get(c, float("nan"))) for c in ("supcon", "range", "position", "distill", "ird", "total")]
                w.writerow([step] + terms + [repr(float(v)) for v in Z.reshape(-1)])


def init_points(n: int, h: int, seed: int = 0) -> np.ndarray:
    """``n`` isotropic Gaussian draws in ``R^h`` projected onto the unit sphere."""
    if n < 1 or h < 1:
        raise ValueError("need n >= 1 and h >= 1")
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, h))
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)


def renormalize(Z: np.ndarray) -> np.ndarray:
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)


class _SinglePlan:
    """Duck-typed stand-in for a plan with one explicit threshold and center."""

    def __init__(self, k: float, center: np.ndarray):
        self.k = k
        self._center = center

    def center(self, task: int) -> np.ndarray:
        return self._center


def toy_plan(cfg: ToyConfig, task: int = 0):
    """The plan-like object used by ``cfg``'s region terms, or None for SupCon."""
    if cfg.loss_mode == "supcon":
        return None
    if cfg.plan is not None:
        return cfg.plan
    if cfg.threshold is None:
        raise ValueError(f"loss_mode {cfg.loss_mode!r} needs a plan or an explicit threshold")
    rho = simplex_radius(cfg.classes, cfg.threshold)
    d = np.zeros(cfg.dim)
    if cfg.prototype_dir is None:
        d[-1] = 1.0
    else:
        d = np.asarray(cfg.prototype_dir, dtype=np.float64)
        d = d / np.linalg.norm(d)
    return _SinglePlan(cfg.threshold, math.sqrt(max(0.0, 1.0 - rho * rho)) * d)


def _loss_params(cfg: ToyConfig, plan) -> LossParams:
    mode = cfg.loss_mode
    return LossParams(
        tau=cfg.tau,
        lambda_range=cfg.lambda_range if mode in ("range_only", "r2scl", "gplasc") else 0.0,
        lambda_position=cfg.lambda_position if mode in ("r2scl", "gplasc") else 0.0,
        lambda_distill=cfg.lambda_distill if mode == "gplasc" else 0.0,
        k=None if plan is None else plan.k,
    )


def step_size(cfg: ToyConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / max(cfg.steps, 1)))
    return cfg.lr


def _descend(
    fs: FeatureSet,
    cfg: ToyConfig,
    plan,
    movable: np.ndarray,
    teacher: FeatureSet | None = None,
    buffer_indices=(),
) -> Trajectory:
    params = _loss_params(cfg, plan)
    batch = [np.flatnonzero(np.ones(len(fs), dtype=bool))]
    Z = fs.features.copy()
    losses, snaps = [], []
    for step in range(cfg.steps + 1):
        cur = fs.with_features(Z)
        lb, g = gplasc_value_grad(cur, batch, plan, params, teacher, buffer_indices, want_grad=step < cfg.steps)
        if not math.isfinite(lb.total) or abs(lb.total) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"loss became {lb.total} at step {step}")
        losses.append(lb)
        if cfg.snapshot_every and step % cfg.snapshot_every == 0:
            snaps.append((step, Z.copy()))
        if step == cfg.steps:
            break
        Z[movable] = renormalize(Z[movable] - step_size(cfg, step) * g[movable])
    return Trajectory(losses, snaps, fs.with_features(Z), cfg)


def run_toy(cfg: ToyConfig, task: int = 0) -> Trajectory:
    """Optimise ``n_per_class * classes`` random unit points with full-batch descent.

    Each step takes a Euclidean gradient step on the configured loss and
    renormalises every row back onto the sphere.
    """
    plan = toy_plan(cfg, task)
    C = cfg.classes
    labels = np.repeat(np.arange(C) + task * C, cfg.n_per_class)
    Z = init_points(labels.size, cfg.dim, cfg.seed)
    fs = FeatureSet(Z, labels, np.full(labels.size, task))
    return _descend(fs, cfg, plan, np.ones(labels.size, dtype=bool))


@dataclass
class ContinualToyResult:
    trajectories: list[Trajectory]
    global_set: FeatureSet
    plan: RegionPlan | None = None
    info: dict = field(default_factory=dict)


def run_continual_toy(
    plan: RegionPlan | None, cfg: ToyConfig, tasks: int, freeze_past: bool = True
) -> ContinualToyResult:
    """Optimise ``tasks`` point clouds one after another.

    Task ``t`` is seeded with ``cfg.seed + t`` and uses the plan's ``t``-th
    center. With ``freeze_past`` earlier points stay where they ended;
    otherwise they are re-optimised jointly with the new task and, in
    ``gplasc`` mode, distilled toward their positions at the task start.
    """
    if plan is not None and tasks > plan.task_count_max:
        raise ValueError(f"plan holds {plan.task_count_max} tasks, {tasks} requested")
    if cfg.loss_mode != "supcon" and plan is None:
        raise ValueError(f"loss_mode {cfg.loss_mode!r} needs a plan")
    task_cfg = replace(cfg, plan=plan)
    C = cfg.classes
    trajs = []
    feats = np.zeros((0, cfg.dim))
    labels = np.zeros(0, dtype=np.int64)
    task_ids = np.zeros(0, dtype=np.int64)
    for t in range(tasks):
        new_labels = np.repeat(np.arange(C) + t * C, cfg.n_per_class)
        new = init_points(new_labels.size, cfg.dim, cfg.seed + t)
        if freeze_past or t == 0:
            fs = FeatureSet(new, new_labels, np.full(new_labels.size, t))
            traj = _descend(fs, replace(task_cfg, seed=cfg.seed + t), toy_plan(task_cfg, t), np.ones(new_labels.size, bool))
            done = traj.final.features
            feats = np.vstack([feats, done])
        else:
            old_n = feats.shape[0]
            Z = np.vstack([feats, new])
            all_labels = np.concatenate([labels, new_labels])
            all_tasks = np.concatenate([task_ids, np.full(new_labels.size, t)])
            fs = FeatureSet(Z, all_labels, all_tasks)
            teacher = fs.with_features(Z.copy())
            traj = _descend(
                fs, replace(task_cfg, seed=cfg.seed + t), toy_plan(task_cfg, t), np.ones(Z.shape[0], bool),
                teacher=teacher, buffer_indices=np.arange(old_n),
            )
            feats = traj.final.features
        labels = np.concatenate([labels, new_labels])
        task_ids = np.concatenate([task_ids, np.full(new_labels.size, t)])
        trajs.append(traj)
    return ContinualToyResult(trajs, FeatureSet(feats, labels, task_ids), plan)
