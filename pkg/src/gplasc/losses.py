"""Contrastive, region and distillation losses with gradients w.r.t. features.

Batches are sequences of row indices into a :class:`FeatureSet` and may
repeat rows (multisets). Every loss works on batch *positions*; gradients
are scattered back onto feature rows, so a repeated row receives the sum of
its positions' gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    task_ids: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.task_ids = np.asarray(self.task_ids, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.task_ids.shape != (n,):
            raise ValueError("labels and task_ids must have one entry per feature row")

    @classmethod
    def single_task(cls, features, labels, task: int = 0) -> "FeatureSet":
        labels = np.asarray(labels)
        return cls(features, labels, np.full(labels.shape, task))

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def with_features(self, features: np.ndarray) -> "FeatureSet":
        return FeatureSet(features, self.labels, self.task_ids, self.normalized)


@dataclass
class LossParams:
    tau: float = 0.1
    lambda_range: float = 1.0
    lambda_position: float = 1.0
    lambda_distill: float = 1.0
    lambda_ird: float = 0.0
    k: float | None = None
    ird_tau_teacher: float = 0.1
    ird_tau_student: float = 0.1

    def __post_init__(self):
        if self.tau <= 0 or self.ird_tau_teacher <= 0 or self.ird_tau_student <= 0:
            raise ValueError("temperatures must be positive")
        for name in ("lambda_range", "lambda_position", "lambda_distill", "lambda_ird"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class TaskPrototype:
    vector: np.ndarray
    count: int


@dataclass
class LossBreakdown:
    supcon: float = 0.0
    range: float = 0.0
    position: float = 0.0
    distill: float = 0.0
    ird: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return {
            "supcon": self.supcon,
            "range": self.range,
            "position": self.position,
            "distill": self.distill,
            "ird": self.ird,
            "total": self.total,
        }


def _batch_array(fs: FeatureSet, batch) -> np.ndarray:
    idx = np.asarray(batch, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ValueError("empty batch")
    if idx.min() < 0 or idx.max() >= len(fs):
        raise IndexError("batch index out of range")
    return idx


def _scatter(n: int, h: int, idx: np.ndarray, g_pos: np.ndarray) -> np.ndarray:
    grad = np.zeros((n, h))
    np.add.at(grad, idx, g_pos)
    return grad


# SupCon ----------------------------------------------------------------------


def _supcon_value_grad(fs: FeatureSet, batch, tau: float, want_grad: bool):
    idx = _batch_array(fs, batch)
    Z = fs.features[idx]
    y = fs.labels[idx]
    b = idx.size
    S = Z @ Z.T / tau
    off = ~np.eye(b, dtype=bool)
    pos = (y[:, None] == y[None, :]) & off
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if b < 2 or not anchors.any():
        return 0.0, (np.zeros_like(fs.features) if want_grad else None)

    masked = np.where(off, S, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    ex = np.where(off, np.exp(masked - row_max), 0.0)
    denom = ex.sum(axis=1, keepdims=True)
    lse = (row_max + np.log(denom))[:, 0]
    # Each anchor with positives contributes LSE_i - mean_{j in P(i)} s_ij.
    pos_mean = np.where(anchors, (S * pos).sum(axis=1) / np.maximum(n_pos, 1), 0.0)
    value = float(np.sum(np.where(anchors, lse - pos_mean, 0.0)))
    if not want_grad:
        return value, None

    soft = ex / denom
    G = soft - pos / np.maximum(n_pos, 1)[:, None]
    G[~anchors] = 0.0
    g_pos = (G + G.T) @ Z / tau
    return value, _scatter(len(fs), fs.dim, idx, g_pos)


def supcon_batch(fs: FeatureSet, batch, params: LossParams) -> float:
    """Supervised contrastive loss of one batch, summed over anchors.

    Anchors whose class occurs once in the batch contribute nothing.
    """
    return _supcon_value_grad(fs, batch, params.tau, False)[0]


def supcon_total(fs: FeatureSet, batches: Sequence, params: LossParams) -> float:
    return float(sum(supcon_batch(fs, B, params) for B in batches))


# Range hinge -----------------------------------------------------------------


def _range_value_grad(fs: FeatureSet, batch, k: float, want_grad: bool, same_task_only: bool = True):
    idx = _batch_array(fs, batch)
    Z = fs.features[idx]
    y = fs.labels[idx]
    G = Z @ Z.T
    pairs = np.triu(y[:, None] != y[None, :], 1)
    if same_task_only:
        t = fs.task_ids[idx]
        pairs &= t[:, None] == t[None, :]
    active = pairs & (G < k)
    value = float(np.sum((k - G)[active]))
    if not want_grad:
        return value, None
    A = active.astype(np.float64)
    g_pos = -(A + A.T) @ Z
    return value, _scatter(len(fs), fs.dim, idx, g_pos)


def range_penalty(fs: FeatureSet, batch, k: float, same_task_only: bool = True) -> float:
    """Hinge ``sum max(0, k - <z_i, z_j>)`` over unordered cross-class pairs.

    With ``same_task_only`` (the default) only pairs from the same task are
    penalised; for single-task batches this makes no difference.
    """
    return _range_value_grad(fs, batch, k, False, same_task_only)[0]


# Position --------------------------------------------------------------------


def task_prototype(fs: FeatureSet, task_id: int, batch=None) -> TaskPrototype:
    idx = np.arange(len(fs)) if batch is None else _batch_array(fs, batch)
    sel = idx[fs.task_ids[idx] == task_id]
    if sel.size == 0:
        raise ValueError(f"no samples for task {task_id}")
    return TaskPrototype(fs.features[sel].mean(axis=0), int(sel.size))


def _position_value_grad(fs: FeatureSet, task_id: int, p_fix, batch, want_grad: bool):
    idx = np.arange(len(fs)) if batch is None else _batch_array(fs, batch)
    sel = idx[fs.task_ids[idx] == task_id]
    if sel.size == 0:
        raise ValueError(f"no samples for task {task_id}")
    p_fix = np.asarray(p_fix, dtype=np.float64)
    diff = fs.features[sel].mean(axis=0) - p_fix
    h = diff.size
    value = float(np.mean(diff**2))
    if not want_grad:
        return value, None
    g_row = (2.0 / h) * diff / sel.size
    return value, _scatter(len(fs), h, sel, np.broadcast_to(g_row, (sel.size, h)))


def position_loss(fs: FeatureSet, task_id: int, p_fix, batch=None) -> float:
    """Mean squared coordinate error between the task prototype and ``p_fix``."""
    return _position_value_grad(fs, task_id, p_fix, batch, False)[0]


# Distillation ----------------------------------------------------------------


def _check_aligned(fs_current: FeatureSet, fs_teacher: FeatureSet):
    if fs_current.features.shape != fs_teacher.features.shape:
        raise ValueError("current and teacher feature sets are not aligned")


def _distill_value_grad(fs_current, fs_teacher, buffer_indices, want_grad: bool):
    _check_aligned(fs_current, fs_teacher)
    idx = np.asarray(buffer_indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return 0.0, (np.zeros_like(fs_current.features) if want_grad else None)
    if idx.min() < 0 or idx.max() >= len(fs_current):
        raise IndexError("buffer index out of range")
    diff = fs_current.features[idx] - fs_teacher.features[idx]
    value = float(np.sum(diff**2))
    if not want_grad:
        return value, None
    return value, _scatter(len(fs_current), fs_current.dim, idx, 2.0 * diff)


def feature_distill(fs_current: FeatureSet, fs_teacher: FeatureSet, buffer_indices) -> float:
    """Sum of squared feature displacements over the buffer rows."""
    return _distill_value_grad(fs_current, fs_teacher, buffer_indices, False)[0]


def _log_softmax_offdiag(S: np.ndarray) -> np.ndarray:
    b = S.shape[0]
    off = ~np.eye(b, dtype=bool)
    masked = np.where(off, S, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    lse = m + np.log(np.where(off, np.exp(masked - m), 0.0).sum(axis=1, keepdims=True))
    return np.where(off, S - lse, 0.0)


def _ird_value_grad(fs_current, fs_teacher, batch, tau_star, tau, want_grad: bool):
    _check_aligned(fs_current, fs_teacher)
    idx = _batch_array(fs_current, batch)
    b = idx.size
    if b < 2:
        raise ValueError("relation distillation needs a batch of at least 2")
    off = ~np.eye(b, dtype=bool)
    Zs = fs_current.features[idx]
    Zt = fs_teacher.features[idx]
    p_t = np.where(off, np.exp(_log_softmax_offdiag(Zt @ Zt.T / tau_star)), 0.0)
    log_ps = _log_softmax_offdiag(Zs @ Zs.T / tau)
    value = float(-np.sum(p_t * log_ps))
    if not want_grad:
        return value, None
    p_s = np.where(off, np.exp(log_ps), 0.0)
    # d/ds_ij of -sum_j p_t log p_s, rows of p_t sum to one.
    G = p_s - p_t
    g_pos = (G + G.T) @ Zs / tau
    return value, _scatter(len(fs_current), fs_current.dim, idx, g_pos)


def ird_loss(fs_current: FeatureSet, fs_teacher: FeatureSet, batch, tau_star: float, tau: float) -> float:
    """Instance-relation distillation.

    For every anchor, cross-entropy between the teacher's softmax over
    similarities to the other batch members (temperature ``tau_star``) and
    the student's (temperature ``tau``), summed over anchors.
    """
    return _ird_value_grad(fs_current, fs_teacher, batch, tau_star, tau, False)[0]


# Total -----------------------------------------------------------------------


def _resolve_k(plan, params: LossParams) -> float:
    if params.k is None:
        return plan.k
    if plan is not None and abs(params.k - plan.k) > 1e-12:
        raise ValueError(f"loss threshold k={params.k} disagrees with plan k={plan.k}")
    return params.k


def gplasc_value_grad(
    fs: FeatureSet,
    batches: Sequence,
    plan,
    params: LossParams,
    teacher: FeatureSet | None = None,
    buffer_indices=(),
    want_grad: bool = True,
) -> tuple[LossBreakdown, np.ndarray | None]:
    """Total region-restricted loss and its gradient w.r.t. ``fs.features``.

    ``plan`` supplies ``k`` and the fixed prototypes (``plan.center(t)``);
    it may be ``None`` when both region weights are zero. The distillation
    and relation terms are skipped without a teacher.
    """
    use_region = params.lambda_range > 0 or params.lambda_position > 0
    k = _resolve_k(plan, params) if (plan is not None or params.k is not None) else None
    if use_region and (plan is None or k is None):
        raise ValueError("region terms need a plan")
    grad = np.zeros_like(fs.features) if want_grad else None
    out = LossBreakdown()

    def add(g, w):
        if want_grad and g is not None and w != 0.0:
            np.add(grad, w * g, out=grad)

    for B in batches:
        v, g = _supcon_value_grad(fs, B, params.tau, want_grad)
        out.supcon += v
        add(g, 1.0)
        if params.lambda_range > 0:
            v, g = _range_value_grad(fs, B, k, want_grad)
            out.range += v
            add(g, params.lambda_range)
        if params.lambda_position > 0:
            idx = _batch_array(fs, B)
            for t in np.unique(fs.task_ids[idx]):
                v, g = _position_value_grad(fs, int(t), plan.center(int(t)), B, want_grad)
                out.position += v
                add(g, params.lambda_position)
        if teacher is not None and params.lambda_ird > 0:
            v, g = _ird_value_grad(fs, teacher, B, params.ird_tau_teacher, params.ird_tau_student, want_grad)
            out.ird += v
            add(g, params.lambda_ird)
    if teacher is not None and params.lambda_distill > 0:
        v, g = _distill_value_grad(fs, teacher, buffer_indices, want_grad)
        out.distill = v
        add(g, params.lambda_distill)
    out.total = (
        out.supcon
        + params.lambda_range * out.range
        + params.lambda_position * out.position
        + params.lambda_distill * out.distill
        + params.lambda_ird * out.ird
    )
    return out, grad


def gplasc_total(fs, batches, plan, params, teacher=None, buffer_indices=()) -> LossBreakdown:
    return gplasc_value_grad(fs, batches, plan, params, teacher, buffer_indices, want_grad=False)[0]


_GRADS = {
    "supcon": lambda fs, batches, params: sum(
        (_supcon_value_grad(fs, B, params.tau, True)[1] for B in batches), np.zeros_like(fs.features)
    ),
    "range": lambda fs, batch, k, same_task_only=True: _range_value_grad(fs, batch, k, True, same_task_only)[1],
    "position": lambda fs, task_id, p_fix, batch=None: _position_value_grad(fs, task_id, p_fix, batch, True)[1],
    "distill": lambda fs, teacher, buffer_indices: _distill_value_grad(fs, teacher, buffer_indices, True)[1],
    "ird": lambda fs, teacher, batch, tau_star, tau: _ird_value_grad(fs, teacher, batch, tau_star, tau, True)[1],
    "gplasc": lambda *a, **kw: gplasc_value_grad(*a, want_grad=True, **kw)[1],
}


def grad_features(loss: str, *args, **kwargs) -> np.ndarray:
    """Euclidean gradient of the named loss w.r.t. every feature row.

    ``loss`` is one of ``supcon`` (same arguments as :func:`supcon_total`),
    ``range``, ``position``, ``distill``, ``ird`` or ``gplasc``; the
    remaining arguments are those of the matching value function.
    """
    try:
        fn = _GRADS[loss]
    except KeyError:
        raise ValueError(f"unknown loss {loss!r}; expected one of {sorted(_GRADS)}") from None
    return fn(*args, **kwargs)
