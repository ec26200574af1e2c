import json
import math

import numpy as np
import pytest

from bevuncert import metrics
from bevuncert.scene import (LANE_SPACING, NEAR_RADIUS, DatasetError, GenerationError, NoiseModel, SceneSpec,
                             generate_scene, lane_pose, make_dataset, observe, occlusion_flags, read_dataset,
                             samples_equal, surrogate_features, write_dataset)


def test_spec_validation():
    for kw in (dict(n_agents=-1), dict(dt=0.0), dict(duration_steps=5), dict(complexity="busy"),
               dict(complexity="complex", n_agents=2), dict(n_lanes=0)):
        with pytest.raises(ValueError):
            SceneSpec(**kw)
    with pytest.raises(ValueError):
        NoiseModel(b0=-0.1)
    with pytest.raises(ValueError):
        NoiseModel(family="cauchy")


def test_empty_straight_scene_is_constant_velocity():
    spec = SceneSpec(n_agents=0, complexity="simple", straight_fraction=1.0, seed=3)
    for i in range(5):
        s = generate_scene(spec, i)
        assert s.curvature == 0.0
        plan = metrics.constant_velocity_plan(s)
        np.testing.assert_allclose(metrics.l2_displacement(plan, s.ego_future), 0.0, atol=1e-12)


def test_generation_is_deterministic():
    spec = SceneSpec(seed=11)
    a, b = generate_scene(spec, 4), generate_scene(spec, 4)
    assert samples_equal(a, b)
    assert not samples_equal(a, generate_scene(SceneSpec(seed=12), 4))


def test_keyed_streams_match_serial_generation():
    spec = SceneSpec(seed=2)
    noise = NoiseModel(0.2, 0.01, 0.3)
    whole = make_dataset(spec, noise, 6)
    part = make_dataset(spec, noise, 3, start=3)
    assert all(samples_equal(x, y) for x, y in zip(whole[3:], part))


@pytest.mark.parametrize("seed", range(3))
def test_complex_scenes_are_crowded(seed):
    spec = SceneSpec(seed=seed)
    for i in range(20):
        s = generate_scene(spec, i)
        d = np.hypot(*s.agent_states[s.now, :, :2].T)
        assert np.sum(d < NEAR_RADIUS) >= 3


def test_simple_scenes_are_sparse():
    spec = SceneSpec(n_agents=4, complexity="simple")
    for i in range(20):
        s = generate_scene(spec, i)
        assert np.sum(np.hypot(*s.agent_states[s.now, :, :2].T) < NEAR_RADIUS) <= 1


def test_lanes_are_concentric_and_agents_stay_on_them():
    spec = SceneSpec(straight_fraction=0.0, seed=5)
    s = generate_scene(spec, 0)
    kappa = s.curvature
    assert kappa != 0.0
    np.testing.assert_allclose(np.diff(s.lane_offsets), LANE_SPACING)
    center = np.array([0.0, 1.0 / kappa])
    radii = np.abs(1.0 / kappa - s.lane_offsets)
    for lane, r in zip(s.map_elements, radii):
        np.testing.assert_allclose(np.hypot(*(lane - center).T), r, rtol=1e-12)
    d_agents = np.hypot(*(s.agent_states[..., :2] - center).transpose(2, 0, 1))
    assert np.all(np.min(np.abs(d_agents[..., None] - radii), axis=-1) < 1e-9)
    np.testing.assert_allclose(np.hypot(*(s.ego_future - center).T), radii[len(radii) // 2], rtol=1e-12)


def test_lane_pose_straight():
    xy, h = lane_pose(0.0, 3.5, np.array([0.0, 2.0]))
    np.testing.assert_array_equal(xy, [[0.0, 3.5], [2.0, 3.5]])
    np.testing.assert_array_equal(h, 0.0)


def test_generation_error_after_retries():
    with pytest.raises(GenerationError):
        generate_scene(SceneSpec(), 0, max_retries=0)


# observation


def test_zero_noise_observes_ground_truth():
    s = observe(generate_scene(SceneSpec(), 0), NoiseModel(), seed=0)
    np.testing.assert_array_equal(s.observed_static, s.gt_static)
    np.testing.assert_array_equal(s.observed_dynamic, s.gt_dynamic)
    assert np.all(s.true_scales_static == 0) and np.all(s.true_scales_dynamic == 0)


def test_observed_shapes_match_ground_truth():
    spec = SceneSpec(n_lanes=2, n_agents=5, k_static=7)
    s = observe(generate_scene(spec, 1), NoiseModel(0.1, 0.01, 0.3), seed=0)
    assert s.observed_static.shape == s.true_scales_static.shape == (2, 7, 2)
    assert s.observed_dynamic.shape == s.true_scales_dynamic.shape == (5, 5, 2)
    assert s.input_features_static.shape == (2, 64) and s.input_features_dynamic.shape == (5, 64)
    assert s.history_features.shape == (5, 4, 64)
    assert np.all(s.true_scales_static >= 0)


@pytest.fixture(scope="module")
def noise_draws():
    """About 1.06e5 vertices (two axes each) of Laplace noise at b = 0.3."""
    spec = SceneSpec(k_static=700, seed=9)
    data = make_dataset(spec, NoiseModel(b0=0.3), 50)
    err = np.concatenate([np.concatenate([(s.observed_static - s.gt_static).reshape(-1, 2),
                                          (s.observed_dynamic - s.gt_dynamic).reshape(-1, 2)]) for s in data])
    return err


def test_noise_mean_abs_matches_scale(noise_draws):
    assert len(noise_draws) > 1e5
    assert np.abs(noise_draws).mean() == pytest.approx(0.3, rel=0.02)


def test_noise_is_zero_median_and_axes_independent(noise_draws):
    assert np.all(np.abs(np.median(noise_draws, axis=0)) < 0.01)
    assert abs(np.corrcoef(noise_draws.T)[0, 1]) < 0.02


def test_gaussian_mode_keeps_mean_abs_error():
    spec = SceneSpec(k_static=200, seed=9)
    data = make_dataset(spec, NoiseModel(b0=0.3, family="gaussian"), 20)
    err = np.concatenate([(s.observed_static - s.gt_static).ravel() for s in data])
    assert np.abs(err).mean() == pytest.approx(0.3, rel=0.03)
    # heavier-tailed Laplace vs Gaussian: kurtosis near 3, not 6
    k = np.mean(err ** 4) / np.mean(err ** 2) ** 2
    assert 2.7 < k < 3.3


def test_occluded_corners_noisier_than_visible():
    noise = NoiseModel(0.1, 0.01, 0.3)
    for i in range(10):
        s = observe(generate_scene(SceneSpec(), i), noise, seed=0)
        occ = s.occluded_dynamic
        b = s.true_scales_dynamic[..., 0]
        assert b[occ].mean() > b[~occ].mean()
        # far corners beat every visible corner of the same agent
        for a in range(len(occ)):
            if occ[a].any():
                assert b[a, occ[a]].min() > b[a, ~occ[a]][:4].min()


def test_occlusion_rule():
    # a box straight ahead: the two corners away from the ego are occluded, the center never is
    verts = np.array([[12.0, 1.0], [12.0, -1.0], [8.0, -1.0], [8.0, 1.0], [10.0, 0.0]])
    np.testing.assert_array_equal(occlusion_flags(verts), [True, True, False, False, False])


def test_surrogate_encoder_is_frozen_and_linear():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((3, 5, 2)) * 10
    occ = rng.random((3, 5)) < 0.5
    a = surrogate_features(v, occ, 16, tag=1)
    np.testing.assert_array_equal(a, surrogate_features(v, occ, 16, tag=1))
    z = np.zeros_like(v)
    lin = surrogate_features(2 * v, np.zeros_like(occ), 16, 0) - 2 * surrogate_features(v, np.zeros_like(occ), 16, 0)
    # range is |v|, which also scales by 2, so the zero-occlusion map is homogeneous
    np.testing.assert_allclose(lin, 0.0, atol=1e-12)
    np.testing.assert_array_equal(surrogate_features(z, np.zeros_like(occ), 16, 0), 0.0)


# persistence


def test_dataset_round_trip(tmp_path):
    data = make_dataset(SceneSpec(seed=4), NoiseModel(0.1, 0.01, 0.3), 3)
    data.append(generate_scene(SceneSpec(n_agents=0, complexity="simple"), 7))  # unobserved fields stay None
    path = tmp_path / "d.jsonl"
    write_dataset(data, path)
    back = read_dataset(path)
    assert len(back) == 4 and all(samples_equal(a, b) for a, b in zip(data, back))
    first = path.read_text(encoding="utf-8").split("\n")[0]
    assert json.loads(first) == {"schema": 1}


def test_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        write_dataset(make_dataset(SceneSpec(seed=1), NoiseModel(0.1, 0.01, 0.3), 2), tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_empty_dataset(tmp_path):
    path = tmp_path / "e.jsonl"
    write_dataset([], path)
    assert path.read_text(encoding="utf-8") == '{"schema": 1}\n'
    assert read_dataset(path) == []


def test_corrupted_line_is_reported(tmp_path):
    path = tmp_path / "c.jsonl"
    write_dataset(make_dataset(SceneSpec(), NoiseModel(), 3), path)
    lines = path.read_text(encoding="utf-8").split("\n")
    lines[2] = lines[2][:40]
    path.write_text("\n".join(lines), encoding="utf-8")
    with pytest.raises(DatasetError, match="line 3"):
        read_dataset(path)


def test_schema_mismatch(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text('{"schema": 2}\n', encoding="utf-8")
    with pytest.raises(DatasetError, match="schema"):
        read_dataset(path)


def test_floats_survive_exactly(tmp_path):
    s = generate_scene(SceneSpec(), 0)
    s.curvature = math.nextafter(0.01, 1.0)
    path = tmp_path / "f.jsonl"
    write_dataset([s], path)
    assert read_dataset(path)[0].curvature == s.curvature
