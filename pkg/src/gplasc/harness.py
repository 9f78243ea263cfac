"""Continual-learning runs with the NumPy encoder: streams, replay buffer, training, evaluation."""

from __future__ import annotations

import csv
import json
import math
import os
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .encoder import EncoderParams, forward, backward, init_params, sgd_step
from .geometry import RegionPlan, make_region_plan
from .losses import FeatureSet, LossParams, gplasc_value_grad
from .metrics import OverlapConfig, class_means, forgetting, ncm_accuracy, overlap_matrix

SCHEMA_VERSION = 1
METHODS = ("supcon", "supcon_ird", "gplasc")
# Seeds the shipped configs and acceptance runs are checked on.
SHIPPED_SEEDS = (0, 1, 2, 3, 4)
DIVERGENCE_LIMIT = 1e12


class DivergenceError(RuntimeError):
    pass


class StreamError(RuntimeError):
    pass


# Streams ----------------------------------------------------------------------


@dataclass
class TaskData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y_train))


@dataclass
class TaskStream:
    tasks: list[TaskData]
    classes_per_task: int
    means: np.ndarray
    sigma: float
    seed: int

    @property
    def task_count(self) -> int:
        return len(self.tasks)


def _class_means(rng: np.random.Generator, n: int, d: int, min_sep: float, max_attempts: int) -> np.ndarray:
    means = []
    for _ in range(max_attempts):
        if len(means) == n:
            break
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        if all(np.linalg.norm(v - m) >= min_sep for m in means):
            means.append(v)
    if len(means) < n:
        raise StreamError(f"placed only {len(means)} of {n} class means with separation {min_sep}")
    return np.stack(means)


def make_stream(
    T: int,
    C: int,
    d_in: int,
    n_train: int,
    n_test: int,
    sigma: float,
    seed: int = 0,
    min_sep: float = 0.5,
    max_attempts: int = 10_000,
) -> TaskStream:
    """``T`` tasks of ``C`` Gaussian classes; class ``t*C + c`` belongs to task ``t``.

    Class means are uniform on the unit sphere of ``R^d_in`` subject to a
    minimum pairwise distance; ``n_train`` and ``n_test`` are per class.
    """
    if T < 1 or C < 1 or d_in < 1:
        raise ValueError("need T, C, d_in >= 1")
    rng = np.random.default_rng(seed)
    means = _class_means(rng, T * C, d_in, min_sep, max_attempts)
    tasks = []
    for t in range(T):
        parts = {}
        for split, n in (("train", n_train), ("test", n_test)):
            ys = np.repeat(np.arange(C) + t * C, n)
            xs = means[ys] + sigma * rng.standard_normal((ys.size, d_in))
            order = rng.permutation(ys.size)
            parts[split] = (xs[order], ys[order])
        tasks.append(TaskData(*parts["train"], *parts["test"]))
    return TaskStream(tasks, C, means, sigma, seed)


# Replay buffer ------------------------------------------------------------------


class MemoryBuffer:
    """Class-balanced replay memory with one FIFO ring per class.

    After every update each class keeps at most its quota, the oldest items
    going first. Quotas split the capacity evenly over the seen classes;
    remainders go to the lowest class ids, and capacity unused by classes
    with too few items is handed to the others.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.rings: dict[int, deque] = {}

    def __len__(self) -> int:
        return sum(len(r) for r in self.rings.values())

    def counts(self) -> dict[int, int]:
        return {c: len(r) for c, r in sorted(self.rings.items())}

    def _quotas(self) -> dict[int, int]:
        avail = {c: len(r) for c, r in sorted(self.rings.items())}
        if sum(avail.values()) <= self.capacity:
            return avail
        # Highest level L with sum(min(avail, L)) <= capacity, then one extra
        # slot each for the lowest class ids that still have items above L.
        level = 0
        while sum(min(n, level + 1) for n in avail.values()) <= self.capacity:
            level += 1
        quota = {c: min(n, level) for c, n in avail.items()}
        left = self.capacity - sum(quota.values())
        for c, n in avail.items():
            if left == 0:
                break
            if n > level:
                quota[c] += 1
                left -= 1
        return quota

    def update(self, xs: np.ndarray, ys: np.ndarray, task_ids) -> "MemoryBuffer":
        task_ids = np.broadcast_to(np.asarray(task_ids), np.shape(ys))
        for x, y, t in zip(xs, ys, task_ids):
            self.rings.setdefault(int(y), deque()).append((np.array(x, dtype=np.float64), int(y), int(t)))
        for c, q in self._quotas().items():
            ring = self.rings[c]
            while len(ring) > q:
                ring.popleft()
        return self

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        items = [it for c in sorted(self.rings) for it in self.rings[c]]
        if not items:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        return (
            np.stack([it[0] for it in items]),
            np.array([it[1] for it in items], dtype=np.int64),
            np.array([it[2] for it in items], dtype=np.int64),
        )


# Runs ---------------------------------------------------------------------------


@dataclass
class ContinualConfig:
    method: str = "gplasc"
    seed: int = 0
    tasks: int = 5
    classes: int = 2
    d_in: int = 16
    hidden: int = 64
    dim: int = 8
    n_train: int = 50
    n_test: int = 50
    sigma: float = 0.3
    min_sep: float = 0.5
    buffer: int = 20
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    tau: float = 0.5
    margin: float = 0.1
    lambda_range: float = 1.0
    lambda_position: float = 200.0
    lambda_distill: float = 20.0
    lambda_ird: float = 0.1
    ird_tau_teacher: float = 0.1
    ird_tau_student: float = 0.2
    ema_decay: float = 0.9
    overlap_projection_dim: int = 3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.tasks < 1 or self.classes < 1:
            raise ValueError("tasks and classes must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0 or self.buffer < 0:
            raise ValueError("epochs and buffer must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    def loss_params(self, plan: RegionPlan | None) -> LossParams:
        region = self.method == "gplasc"
        return LossParams(
            tau=self.tau,
            lambda_range=self.lambda_range if region else 0.0,
            lambda_position=self.lambda_position if region else 0.0,
            lambda_distill=self.lambda_distill if region else 0.0,
            lambda_ird=self.lambda_ird if self.method in ("supcon_ird", "gplasc") else 0.0,
            k=plan.k if (region and plan is not None) else None,
            ird_tau_teacher=self.ird_tau_teacher,
            ird_tau_student=self.ird_tau_student,
        )

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}


def _sub_seeds(seed: int, n: int) -> list[int]:
    """Independent integer seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def stream_for(cfg: ContinualConfig) -> TaskStream:
    return make_stream(
        cfg.tasks, cfg.classes, cfg.d_in, cfg.n_train, cfg.n_test, cfg.sigma, _sub_seeds(cfg.seed, 4)[0], cfg.min_sep
    )


def plan_for(cfg: ContinualConfig) -> RegionPlan:
    return make_region_plan(cfg.tasks, cfg.classes, cfg.dim, margin=cfg.margin, seed=_sub_seeds(cfg.seed, 4)[1])


@dataclass
class RunReport:
    method: str
    seed: int
    config: dict
    acc_matrix: list
    til_matrix: list
    forgetting: float | None
    til_forgetting: float | None
    per_task: list
    overlap_matrix: list
    loss_curve_rows: list = field(default_factory=list, repr=False)

    @property
    def final_cil(self) -> float:
        return float(np.mean(self.acc_matrix[-1]))

    @property
    def final_til(self) -> float:
        return float(np.mean(self.til_matrix[-1]))

    def to_dict(self, loss_curves: str | None = None) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "acc_matrix": self.acc_matrix,
            "til_matrix": self.til_matrix,
            "final_cil": self.final_cil,
            "final_til": self.final_til,
            "forgetting": self.forgetting,
            "til_forgetting": self.til_forgetting,
            "per_task": self.per_task,
            "overlap_matrix": self.overlap_matrix,
            "loss_curves": loss_curves,
        }

    def write(self, out_dir, stem: str = "report") -> str:
        """Write ``<stem>.json`` plus a loss-curve CSV; paths in the JSON are relative."""
        os.makedirs(out_dir, exist_ok=True)
        csv_name = f"{stem}_loss.csv"
        write_loss_curves(os.path.join(out_dir, csv_name), self.loss_curve_rows)
        path = os.path.join(out_dir, f"{stem}.json")
        with open(path, "w") as fh:
            fh.write(dump_json(self.to_dict(csv_name)))
        return path


LOSS_COLUMNS = ("task", "epoch", "step", "supcon", "range", "position", "distill", "ird", "total")


def write_loss_curves(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r[c] if c in ("task", "epoch", "step") else repr(float(r[c])) for c in LOSS_COLUMNS])


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _encode(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    return forward(params, x)[0]


def _stratified_order(rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    """Round-robin over per-class permutations so every batch slice is class balanced."""
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    longest = max(len(p) for p in per_class)
    return np.array([p[j] for j in range(longest) for p in per_class if j < len(p)], dtype=np.int64)


def _batches(rng: np.random.Generator, labels: np.ndarray, n_buf: int, b: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """One epoch of (current rows, buffer rows) index pairs."""
    cur_per = math.ceil(b / 2) if n_buf else b
    buf_per = b // 2 if n_buf else 0
    order = _stratified_order(rng, labels)
    out = []
    for s in range(0, order.size, cur_per):
        cur = order[s : s + cur_per]
        if cur.size < 2:
            continue
        buf = rng.choice(n_buf, size=min(buf_per, n_buf), replace=False) if buf_per else np.zeros(0, dtype=np.int64)
        out.append((cur, buf))
    return out


def _evaluate(params: EncoderParams, stream: TaskStream, seen: int):
    """CIL and TIL accuracies on tasks ``0..seen`` using training-set class means."""
    feats_train = [_encode(params, stream.tasks[i].x_train) for i in range(seen + 1)]
    means = {}
    for i in range(seen + 1):
        means.update(class_means(feats_train[i], stream.tasks[i].y_train))
    cil, til, test_feats = [], [], []
    for i in range(seen + 1):
        task = stream.tasks[i]
        z = _encode(params, task.x_test)
        test_feats.append(z)
        cil.append(ncm_accuracy(z, task.y_test, means))
        til.append(ncm_accuracy(z, task.y_test, means, candidates=task.classes))
    return cil, til, test_feats


def run_continual(cfg: ContinualConfig, stream: TaskStream | None = None, plan: RegionPlan | None = None) -> RunReport:
    """Train one encoder task by task and evaluate after each task.

    Batches mix ``ceil(b/2)`` current rows with ``floor(b/2)`` buffer rows
    once the buffer holds data. The teacher is the encoder snapshot taken at
    the start of each task; distillation reads only the buffer rows.
    """
    stream = stream if stream is not None else stream_for(cfg)
    if cfg.method == "gplasc":
        plan = plan if plan is not None else plan_for(cfg)
        if plan.task_count_max < stream.task_count:
            raise ValueError(f"plan holds {plan.task_count_max} tasks, stream has {stream.task_count}")
        if plan.centers_fixed.shape[1] != cfg.dim:
            raise ValueError("plan dimension does not match the encoder output dimension")
    params_loss = cfg.loss_params(plan)
    _, init_seed, train_seed, _ = _sub_seeds(cfg.seed, 4)
    rng = np.random.default_rng(train_seed)
    params = init_params(stream.tasks[0].x_train.shape[1], cfg.hidden, cfg.dim, init_seed)
    velocity = None
    buf = MemoryBuffer(cfg.buffer)
    acc, til, protos, curves = [], [], [], []
    test_feats = []
    for t, task in enumerate(stream.tasks):
        teacher = params.copy() if t > 0 else None
        bx, by, bt = buf.arrays()
        ema = None
        step = 0
        for epoch in range(cfg.epochs):
            for cur, bidx in _batches(rng, task.y_train, by.size, cfg.batch_size):
                x = task.x_train[cur]
                y = task.y_train[cur]
                tid = np.full(cur.size, t)
                if bidx.size:
                    x = np.vstack([x, bx[bidx]])
                    y = np.concatenate([y, by[bidx]])
                    tid = np.concatenate([tid, bt[bidx]])
                z, cache = forward(params, x)
                fs = FeatureSet(z, y, tid)
                tfs = fs.with_features(_encode(teacher, x)) if teacher is not None else None
                buf_rows = np.arange(cur.size, cur.size + bidx.size)
                lb, g = gplasc_value_grad(fs, [np.arange(y.size)], plan, params_loss, tfs, buf_rows)
                if not math.isfinite(lb.total) or abs(lb.total) > DIVERGENCE_LIMIT:
                    raise DivergenceError(f"loss became {lb.total} on task {t}, epoch {epoch}, step {step}")
                grads = backward(params, cache, g)
                params, velocity = sgd_step(params, grads, cfg.lr, cfg.weight_decay, cfg.momentum, velocity)
                if not params.is_finite():
                    raise DivergenceError(f"parameters became non-finite on task {t}, step {step}")
                mean_cur = z[: cur.size].mean(axis=0)
                ema = mean_cur if ema is None else cfg.ema_decay * ema + (1.0 - cfg.ema_decay) * mean_cur
                curves.append({"task": t, "epoch": epoch, "step": step, **lb.to_dict()})
                step += 1
        buf.update(task.x_train, task.y_train, t)
        c, ti, test_feats = _evaluate(params, stream, t)
        acc.append(c)
        til.append(ti)
        if ema is None:
            ema = _encode(params, task.x_train).mean(axis=0)
        err = float(np.linalg.norm(ema - plan.center(t))) if plan is not None else None
        protos.append({"prototype": ema.tolist(), "prototype_error": err})
    M = overlap_matrix(test_feats, OverlapConfig(projection_dim=cfg.overlap_projection_dim))
    per_task = [
        {"task": i, "prototype_error": protos[i]["prototype_error"], "prototype": protos[i]["prototype"],
         "overlap_row": M[i].tolist()}
        for i in range(stream.task_count)
    ]
    T = stream.task_count
    return RunReport(
        method=cfg.method,
        seed=cfg.seed,
        config=asdict(cfg),
        acc_matrix=acc,
        til_matrix=til,
        forgetting=forgetting(acc) if T >= 2 else None,
        til_forgetting=forgetting(til) if T >= 2 else None,
        per_task=per_task,
        overlap_matrix=M.tolist(),
        loss_curve_rows=curves,
    )
