import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevuncert import metrics
from bevuncert.metrics import (AVG_METRICS, PENALTY_METRICS, EpdmsInputs, MetricsReport, collision_rate, epdms_lite,
                               l2_displacement, lane_keeping_score, progress_score, read_metrics_csv, step_collisions,
                               ttc_score)
from bevuncert.scene import NoiseModel, SceneSpec, generate_scene, make_dataset


def _traj(t=6):
    return np.cumsum(np.tile([[2.0, 0.1]], (t, 1)), axis=0)


# L2


def test_l2_zero_and_offset():
    gt = _traj()
    np.testing.assert_array_equal(l2_displacement(gt, gt), 0.0)
    np.testing.assert_allclose(l2_displacement(gt + [0.3, 0.4], gt), 0.5, rtol=1e-15)


def test_l2_picks_horizon_steps_and_averages():
    gt = np.zeros((6, 2))
    pred = np.zeros((6, 2))
    pred[:, 0] = np.arange(1, 7)
    np.testing.assert_allclose(l2_displacement(pred, gt), [2.0, 4.0, 6.0, 4.0])
    rng = np.random.default_rng(0)
    p, g = rng.standard_normal((5, 6, 2)), rng.standard_normal((5, 6, 2))
    out = l2_displacement(p, g)
    assert out.shape == (5, 4)
    np.testing.assert_allclose(out[:, 3], out[:, :3].mean(axis=1))
    assert np.all(out >= 0)


def test_l2_shape_errors():
    with pytest.raises(ValueError):
        l2_displacement(np.zeros((6, 2)), np.zeros((5, 2)))
    with pytest.raises(ValueError):
        l2_displacement(np.zeros((4, 2)), np.zeros((4, 2)))


# collisions


def _agent(x, y, width=2.0, length=4.0, heading=0.0, vx=0.0, vy=0.0):
    return [x, y, 0.0, width, length, 1.5, heading, vx, vy]


def test_no_agents_no_collision():
    np.testing.assert_array_equal(collision_rate(_traj(), np.zeros((6, 0, 9))), 0.0)


def test_ego_inside_agent_every_step():
    traj = _traj()
    agents = np.array([[_agent(*p)] for p in traj])
    np.testing.assert_array_equal(collision_rate(traj, agents), 1.0)


def test_tangent_disc_counts():
    traj = np.zeros((6, 2))
    agents = np.tile(np.array(_agent(3.0, 0.0)), (6, 1, 1))  # near edge at x = 1 = ego radius
    assert step_collisions(traj, agents).all()
    agents[..., 0] = 3.0 + 1e-9
    assert not step_collisions(traj, agents).any()


def test_collision_rate_per_horizon():
    traj = np.zeros((6, 2))
    agents = np.tile(np.array(_agent(30.0, 0.0)), (6, 1, 1))
    agents[1, 0, 0] = 0.0  # only step 2 collides
    np.testing.assert_allclose(collision_rate(traj, agents), [0.5, 0.25, 1 / 6, (0.5 + 0.25 + 1 / 6) / 3])


def test_collision_rate_rotation_invariant():
    rng = np.random.default_rng(3)
    for _ in range(200):
        phi = rng.uniform(-math.pi, math.pi)
        c, s = math.cos(phi), math.sin(phi)
        rot = np.array([[c, -s], [s, c]])
        traj = np.cumsum(rng.normal(1.0, 1.0, (6, 2)), axis=0)
        agents = np.zeros((6, 3, 9))
        agents[..., :2] = traj[:, None] + rng.normal(0, 3, (6, 3, 2))
        agents[..., 3] = rng.uniform(1.5, 2.5, (6, 3))
        agents[..., 4] = rng.uniform(3.5, 5.5, (6, 3))
        agents[..., 6] = rng.uniform(-math.pi, math.pi, (6, 3))
        turned = agents.copy()
        turned[..., :2] = agents[..., :2] @ rot.T
        turned[..., 6] += phi
        np.testing.assert_array_equal(collision_rate(traj @ rot.T, turned), collision_rate(traj, agents))


# EPDMS


def _inputs(pen=None, avg=None, hpen=None, havg=None, weights=None):
    kw = {} if weights is None else {"weights": weights}
    return EpdmsInputs({m: 1.0 for m in PENALTY_METRICS} | (pen or {}), {m: 1.0 for m in AVG_METRICS} | (avg or {}),
                       {m: 1.0 for m in PENALTY_METRICS} | (hpen or {}), {m: 1.0 for m in AVG_METRICS} | (havg or {}),
                       **kw)


def test_epdms_all_ones():
    assert epdms_lite(_inputs()) == 1.0


def test_epdms_collision_zeroes_score():
    assert epdms_lite(_inputs(pen={"NC": 0.0})) == 0.0


def test_epdms_hand_example():
    assert epdms_lite(_inputs(avg={"TTC": 1.0, "EP": 0.5, "HC": 1.0, "LK": 0.0, "EC": 1.0})) == 0.7


def test_epdms_human_failure_is_forgiven():
    assert epdms_lite(_inputs(pen={"NC": 0.0}, hpen={"NC": 0.0})) == 1.0
    assert epdms_lite(_inputs(avg={"LK": 0.0}, havg={"LK": 0.4})) == 1.0
    assert epdms_lite(_inputs(avg={"LK": 0.0}, havg={"LK": 0.5})) == pytest.approx(0.8)


def test_epdms_weights():
    w = {m: 0.0 for m in AVG_METRICS} | {"EP": 1.0}
    assert epdms_lite(_inputs(avg={"EP": 0.25, "LK": 0.0}, weights=w)) == 0.25


@pytest.mark.parametrize("bad", [dict(pen={"NC": 1.5}), dict(avg={"EP": -0.1}),
                                 dict(weights={m: 0.0 for m in AVG_METRICS}),
                                 dict(weights={m: -1.0 if m == "EP" else 1.0 for m in AVG_METRICS})])
def test_epdms_validation(bad):
    with pytest.raises(ValueError):
        _inputs(**bad)
    with pytest.raises(ValueError):
        EpdmsInputs({"NC": 1.0}, {}, {}, {})


unit = st.floats(0.0, 1.0)
scores = st.fixed_dictionaries({m: unit for m in PENALTY_METRICS + AVG_METRICS})


@given(scores, scores, st.sampled_from(PENALTY_METRICS + AVG_METRICS), unit)
def test_epdms_monotone_in_agent_scores(agent, human, which, bump):
    def score(a):
        return epdms_lite(EpdmsInputs({m: a[m] for m in PENALTY_METRICS}, {m: a[m] for m in AVG_METRICS},
                                      {m: human[m] for m in PENALTY_METRICS}, {m: human[m] for m in AVG_METRICS}))
    hi = dict(agent)
    hi[which] = max(agent[which], bump)
    s_lo, s_hi = score(agent), score(hi)
    assert 0.0 <= s_lo <= s_hi + 1e-15 <= 1.0 + 1e-15


# sub-scores


def test_progress_score():
    gt = _traj()
    assert progress_score(gt, gt) == 1.0
    assert progress_score(gt / 2, gt) == pytest.approx(0.5)
    assert progress_score(-gt, gt) == 0.0
    assert progress_score(2 * gt, gt) == 1.0
    assert progress_score(gt, np.zeros((6, 2))) == 1.0


def test_ttc_score():
    traj = np.cumsum(np.tile([[1.0, 0.0]], (6, 1)), axis=0)  # 2 m/s at dt = 0.5
    assert ttc_score(traj, np.zeros((6, 0, 9)), 0.5) == 1.0
    far = np.tile(np.array(_agent(0.0, 50.0)), (6, 1, 1))
    assert ttc_score(traj, far, 0.5) == 1.0
    # stationary box ahead: from the last planned point (x = 6) the disc needs 1.55 s to reach
    # the rear edge at x = 10.1; the 0.1 s probe grid first sees contact at 1.6 s
    ahead = np.tile(np.array(_agent(12.1, 0.0)), (6, 1, 1))
    assert ttc_score(traj, ahead, 0.5) == pytest.approx(1.6 / 3.0)
    touching = np.tile(np.array(_agent(4.0, 0.0)), (6, 1, 1))
    assert ttc_score(traj, touching, 0.5) == 0.0


def test_lane_keeping_score():
    lanes = np.array([[[-10.0, 0.0], [50.0, 0.0]], [[-10.0, 3.5], [50.0, 3.5]]])
    traj = np.stack([np.arange(1.0, 7.0), np.array([0.0, 0.2, 0.6, 1.75, 3.3, 3.5])], axis=1)
    assert lane_keeping_score(traj, lanes) == pytest.approx(4 / 6)


def test_ground_truth_plan_scores_well():
    for s in make_dataset(SceneSpec(seed=1), NoiseModel(), 10):
        pen, avg = metrics.scene_subscores(s.ego_future, s)
        assert avg["EP"] == 1.0 and avg["LK"] == 1.0
        assert 0.0 <= metrics.scene_epdms(s.ego_future, s) <= 1.0


def test_constant_velocity_plan_shape():
    s = generate_scene(SceneSpec(), 0)
    plan = metrics.constant_velocity_plan(s)
    assert plan.shape == (6, 2)
    np.testing.assert_allclose(plan[1] - plan[0], s.ego_history[4:6, 0] * 0.5)


# report


def test_report_csv_round_trip(tmp_path):
    rep = MetricsReport(l2=np.array([0.1, 0.2, 0.3, 0.2]), collision=np.array([0.0, 0.01, 0.02, 0.01]),
                        mean_nll=1.2345678901234567, coverage={0.5: 0.49, 0.9: 0.91}, epdms=0.8, n_scenes=12,
                        mean_b=0.3, wall_time_per_forward=0.001)
    path = tmp_path / "m.csv"
    rep.write_csv(path)
    assert path.read_text(encoding="utf-8").startswith("metric,horizon,value\n")
    back = MetricsReport.read_csv(path)
    np.testing.assert_array_equal(back.l2, rep.l2)
    np.testing.assert_array_equal(back.collision, rep.collision)
    assert (back.mean_nll, back.coverage, back.epdms, back.n_scenes, back.mean_b) == \
           (rep.mean_nll, rep.coverage, rep.epdms, rep.n_scenes, rep.mean_b)
    rows = read_metrics_csv(path)
    assert ("epdms_const_DAC", "all", 1.0) in rows
    assert not any("wall" in m for m, _, _ in rows)


def test_metrics_csv_header_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n", encoding="utf-8")
    with pytest.raises(ValueError, match="header"):
        read_metrics_csv(path)
