import json

import numpy as np
import pytest

from gplasc.harness import (
    METHODS,
    SCHEMA_VERSION,
    ContinualConfig,
    MemoryBuffer,
    StreamError,
    _batches,
    _stratified_order,
    dump_json,
    make_stream,
    run_continual,
)

SMALL = dict(tasks=3, classes=2, d_in=8, hidden=16, dim=4, n_train=12, n_test=10, epochs=2, batch_size=8, buffer=8)


# Streams ------------------------------------------------------------------------


def test_stream_shapes_and_labels():
    s = make_stream(3, 2, 5, 7, 4, 0.3, seed=1)
    assert s.task_count == 3 and s.means.shape == (6, 5)
    for t, task in enumerate(s.tasks):
        assert task.x_train.shape == (14, 5) and task.x_test.shape == (8, 5)
        assert task.classes == [2 * t, 2 * t + 1]
        assert np.bincount(task.y_train - 2 * t).tolist() == [7, 7]
    np.testing.assert_allclose(np.linalg.norm(s.means, axis=1), 1.0)


def test_stream_is_deterministic():
    a = make_stream(2, 3, 4, 5, 5, 0.2, seed=9)
    b = make_stream(2, 3, 4, 5, 5, 0.2, seed=9)
    for ta, tb in zip(a.tasks, b.tasks):
        np.testing.assert_array_equal(ta.x_train, tb.x_train)
        np.testing.assert_array_equal(ta.y_test, tb.y_test)
    c = make_stream(2, 3, 4, 5, 5, 0.2, seed=10)
    assert not np.array_equal(a.tasks[0].x_train, c.tasks[0].x_train)


def test_stream_zero_noise_sits_on_means():
    s = make_stream(2, 2, 3, 4, 4, 0.0, seed=0)
    for task in s.tasks:
        np.testing.assert_array_equal(task.x_train, s.means[task.y_train])


def test_stream_min_separation():
    s = make_stream(4, 3, 6, 2, 2, 0.1, seed=3, min_sep=0.8)
    D = np.linalg.norm(s.means[:, None] - s.means[None], axis=-1)
    assert D[np.triu_indices(12, 1)].min() >= 0.8
    with pytest.raises(StreamError):
        make_stream(5, 2, 1, 2, 2, 0.1, min_sep=1.5, max_attempts=200)


# Buffer -------------------------------------------------------------------------


def _fill(buf, classes, n, t=0, start=0):
    ys = np.repeat(classes, n)
    xs = np.arange(start, start + ys.size, dtype=float)[:, None]
    return buf.update(xs, ys, t)


def test_buffer_two_then_four_classes():
    buf = _fill(MemoryBuffer(20), [0, 1], 30)
    assert buf.counts() == {0: 10, 1: 10}
    _fill(buf, [2, 3], 30, t=1, start=100)
    assert buf.counts() == {0: 5, 1: 5, 2: 5, 3: 5}


def test_buffer_evicts_oldest_per_class():
    buf = MemoryBuffer(4)
    buf.update(np.array([[1.0], [2.0], [3.0]]), np.array([0, 0, 0]), 0)
    assert [it[0][0] for it in buf.rings[0]] == [1.0, 2.0, 3.0]
    buf.update(np.array([[4.0], [5.0]]), np.array([1, 1]), 1)
    assert [it[0][0] for it in buf.rings[0]] == [2.0, 3.0]
    assert [it[0][0] for it in buf.rings[1]] == [4.0, 5.0]
    _, ys, ts = buf.arrays()
    assert ys.tolist() == [0, 0, 1, 1] and ts.tolist() == [0, 0, 1, 1]


def test_buffer_hands_unused_capacity_to_others():
    buf = MemoryBuffer(10)
    buf.update(np.zeros((9, 1)), np.array([0] * 8 + [1]), 0)
    assert buf.counts() == {0: 8, 1: 1}
    buf = MemoryBuffer(7)
    _fill(buf, [0, 1, 2], 5)
    assert buf.counts() == {0: 3, 1: 2, 2: 2}


@pytest.mark.parametrize("seed", range(5))
def test_buffer_balance_invariant(seed):
    rng = np.random.default_rng(seed)
    cap = int(rng.integers(1, 30))
    buf = MemoryBuffer(cap)
    for step in range(6):
        ys = rng.integers(0, 2 * step + 2, size=int(rng.integers(1, 25)))
        avail = buf.counts()
        for y in ys:
            avail[int(y)] = avail.get(int(y), 0) + 1
        buf.update(np.zeros((ys.size, 2)), ys, step)
        counts = buf.counts()
        assert len(buf) == min(cap, sum(avail.values()))
        # A class trimmed below its supply sits within one of the largest class.
        top = max(counts.values())
        for c, n in counts.items():
            assert n == avail[c] or n >= top - 1


def test_buffer_zero_capacity():
    buf = _fill(MemoryBuffer(0), [0, 1], 3)
    assert len(buf) == 0
    x, y, t = buf.arrays()
    assert y.size == 0


# Batching -----------------------------------------------------------------------


def test_stratified_order_balances_prefixes():
    labels = np.repeat([4, 5, 6], 6)
    order = _stratified_order(np.random.default_rng(0), labels)
    assert sorted(order.tolist()) == list(range(18))
    for s in range(0, 18, 3):
        assert sorted(labels[order[s : s + 3]].tolist()) == [4, 5, 6]


def test_batches_split_current_and_buffer():
    labels = np.repeat([0, 1], 10)
    rng = np.random.default_rng(0)
    for cur, buf in _batches(rng, labels, n_buf=6, b=7):
        assert cur.size <= 4 and buf.size == 3
        assert len(set(buf.tolist())) == buf.size
    alone = _batches(rng, labels, n_buf=0, b=7)
    assert all(buf.size == 0 for _, buf in alone)
    assert sum(cur.size for cur, _ in alone) == 20


# Runs ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        ContinualConfig(method="replay")
    with pytest.raises(ValueError):
        ContinualConfig(batch_size=1)
    with pytest.raises(ValueError):
        ContinualConfig(ema_decay=1.0)


def test_loss_params_by_method():
    cfg = ContinualConfig(method="supcon")
    lp = cfg.loss_params(None)
    assert lp.lambda_range == lp.lambda_position == lp.lambda_distill == lp.lambda_ird == 0.0
    lp = ContinualConfig(method="supcon_ird").loss_params(None)
    assert lp.lambda_ird > 0 and lp.lambda_distill == 0.0


@pytest.fixture(scope="module")
def small_reports():
    return {m: run_continual(ContinualConfig(method=m, **SMALL)) for m in METHODS}


def test_report_structure(small_reports):
    for m, rep in small_reports.items():
        d = rep.to_dict()
        assert d["schema_version"] == SCHEMA_VERSION and d["method"] == m
        assert [len(r) for r in rep.acc_matrix] == [1, 2, 3]
        assert len(rep.per_task) == 3
        assert np.asarray(rep.overlap_matrix).shape == (3, 3)
        for row_c, row_t in zip(rep.acc_matrix, rep.til_matrix):
            assert all(0.0 <= a <= t <= 1.0 for a, t in zip(row_c, row_t))
        assert rep.forgetting is not None


def test_single_task_run_has_no_forgetting():
    rep = run_continual(ContinualConfig(**{**SMALL, "tasks": 1}))
    assert rep.forgetting is None and len(rep.acc_matrix) == 1


def test_run_is_byte_deterministic(tmp_path):
    cfg = ContinualConfig(**SMALL)
    a = run_continual(cfg).write(tmp_path / "a")
    b = run_continual(cfg).write(tmp_path / "b")
    assert open(a, "rb").read() == open(b, "rb").read()
    assert (tmp_path / "a" / "report_loss.csv").read_bytes() == (tmp_path / "b" / "report_loss.csv").read_bytes()
    d = json.loads(open(a).read())
    assert d["loss_curves"] == "report_loss.csv"


def test_dump_json_is_sorted_with_newline():
    s = dump_json({"b": 1, "a": [1.5]})
    assert s.endswith("\n") and s.index('"a"') < s.index('"b"')


def test_gplasc_three_task_ema_prototypes_near_targets():
    rep = run_continual(ContinualConfig(tasks=3))
    errors = [p["prototype_error"] for p in rep.per_task]
    assert max(errors) < 0.1


def test_single_task_never_reads_buffer(monkeypatch):
    calls = []
    original = MemoryBuffer.arrays

    def spy(self):
        out = original(self)
        calls.append(out[1].size)
        return out

    monkeypatch.setattr(MemoryBuffer, "arrays", spy)
    run_continual(ContinualConfig(**{**SMALL, "tasks": 1}))
    assert all(n == 0 for n in calls)
