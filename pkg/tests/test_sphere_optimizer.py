import csv
import math

import numpy as np
import pytest

import gplasc.sphere_optimizer as so
from gplasc.bounds import build_batch_plan, equality_check, theorem_bound
from gplasc.geometry import make_region_plan
from gplasc.sphere_optimizer import ToyConfig, init_points, run_continual_toy, run_toy


def test_init_points_unit_and_deterministic():
    a = init_points(50, 4, seed=3)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)
    assert a.tobytes() == init_points(50, 4, seed=3).tobytes()
    assert np.linalg.norm(init_points(1000, 3, seed=0).mean(axis=0)) < 0.1
    with pytest.raises(ValueError):
        init_points(0, 3)


def test_zero_steps_returns_init():
    traj = run_toy(ToyConfig(steps=0, seed=4))
    np.testing.assert_array_equal(traj.final.features, init_points(30, 3, seed=4))
    assert len(traj.losses) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        ToyConfig(lr=0.0)
    with pytest.raises(ValueError):
        ToyConfig(steps=-1)
    with pytest.raises(ValueError):
        ToyConfig(loss_mode="other")
    with pytest.raises(ValueError):
        run_toy(ToyConfig(loss_mode="r2scl", steps=1))


def test_rows_stay_on_sphere():
    traj = run_toy(ToyConfig(steps=60, snapshot_every=1, loss_mode="r2scl", threshold=0.3, lr=0.1))
    for _, Z in traj.snapshots:
        np.testing.assert_allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_supcon_toy_reaches_simplex(seed):
    cfg = ToyConfig(seed=seed)
    traj = run_toy(cfg)
    totals = np.array([lb.total for lb in traj.losses])
    assert np.all(np.diff(totals[100:]) <= 1e-12)
    rep = equality_check(traj.final, -0.5, tol=1e-2)
    assert rep.passed
    labels = traj.final.labels
    floor = theorem_bound(build_batch_plan(labels, [list(range(labels.size))]), -0.5)
    assert totals[-1] >= floor - 1e-6


@pytest.mark.parametrize("k", [0.3, 0.7])
def test_r2scl_toy_reaches_threshold(k):
    traj = run_toy(ToyConfig(loss_mode="r2scl", threshold=k, seed=1))
    rep = equality_check(traj.final, k, tol=1e-2)
    assert rep.cross_inner_dev < 1e-2
    assert rep.radius_dev < 1e-2
    assert rep.expected_radius == pytest.approx(math.sqrt((2 / 3) * (1 - k)))


def test_gplasc_single_task_passes_equality():
    traj = run_toy(ToyConfig(loss_mode="gplasc", threshold=0.5, seed=2))
    assert equality_check(traj.final, 0.5, tol=5e-2).passed


def test_divergence_is_reported(monkeypatch):
    monkeypatch.setattr(so, "DIVERGENCE_LIMIT", -1.0)
    with pytest.raises(so.DivergenceError):
        run_toy(ToyConfig(steps=3))


def test_one_task_continual_equals_run_toy():
    cfg = ToyConfig(steps=200, loss_mode="r2scl", seed=5)
    plan = make_region_plan(3, 3, 3, margin=0.5)
    single = run_toy(ToyConfig(steps=200, loss_mode="r2scl", seed=5, plan=plan))
    cont = run_continual_toy(plan, cfg, 1)
    np.testing.assert_array_equal(cont.global_set.features, single.final.features)


def test_continual_toy_checks_plan_size():
    plan = make_region_plan(2, 3, 3, margin=0.5)
    with pytest.raises(ValueError):
        run_continual_toy(plan, ToyConfig(steps=1, loss_mode="gplasc"), 3)
    with pytest.raises(ValueError):
        run_continual_toy(None, ToyConfig(steps=1, loss_mode="gplasc"), 1)


def test_continual_toy_frozen_tasks_do_not_move():
    plan = make_region_plan(2, 3, 3, margin=0.7)
    cfg = ToyConfig(steps=300, loss_mode="gplasc", lambda_position=10.0)
    res = run_continual_toy(plan, cfg, 2)
    first = res.trajectories[0].final.features
    np.testing.assert_array_equal(res.global_set.features[:30], first)


def test_continual_toy_joint_mode_distills_old_points():
    plan = make_region_plan(2, 3, 3, margin=0.7)
    cfg = ToyConfig(steps=200, loss_mode="gplasc", lambda_position=10.0, lambda_distill=5.0)
    res = run_continual_toy(plan, cfg, 2, freeze_past=False)
    second = res.trajectories[1]
    assert second.losses[0].distill == 0.0
    assert len(res.global_set) == 60


def test_csv_exports(tmp_path):
    traj = run_toy(ToyConfig(steps=10, snapshot_every=5, n_per_class=2))
    traj.write_loss_csv(tmp_path / "loss.csv")
    traj.write_snapshot_csv(tmp_path / "snap.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["step", "supcon", "range", "position", "distill", "ird", "total"]
    assert len(rows) == 12
    snap = list(csv.reader(open(tmp_path / "snap.csv")))
    assert [r[0] for r in snap[1:]] == ["0", "5", "10"]
    assert len(snap[0]) == 7 + 6 * 3
