# -*- coding: utf-8 -*-
import math

import numpy as np
import pytest

from core.errors import ContractError, DomainError, LookupFailure
from core.scene import (
    ascent_optimum,
    back_rotate,
    constrained_optimum_oracle,
    dump_scenes,
    grid_search_optimum,
    joint_view_reward,
    load_scenes,
    make_scene,
    make_scenes,
    reward_gradients,
    rotation,
    scene_targets,
    single_view_rewards,
    target_view,
)


def test_scene_invariants():
    scene = make_scene(3, 4, seed=7, dim=3, gamma=0.25)
    assert scene.num_views == 4
    np.testing.assert_allclose(np.linalg.norm(scene.offsets, axis=1), 0.25, atol=1e-12)
    assert scene.gamma == pytest.approx(0.25, abs=1e-12)
    assert make_scene(3, 1, seed=7).gamma == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(scene.angles, [0.0, math.pi / 2, math.pi, 3 * math.pi / 2])
    again = make_scene(3, 4, seed=7, dim=3, gamma=0.25)
    np.testing.assert_array_equal(scene.base, again.base)
    np.testing.assert_array_equal(scene.offsets, again.offsets)
    assert not np.array_equal(make_scene(4, 4, seed=7, dim=3).base, scene.base)


def test_view_lookup_is_one_based():
    scene = make_scene(0, 2, seed=0)
    np.testing.assert_allclose(target_view(scene, 1), scene.base)
    with pytest.raises(LookupFailure):
        target_view(scene, 0)
    with pytest.raises(LookupFailure):
        target_view(scene, 3)


def test_rotation_requires_two_dimensions():
    with pytest.raises(DomainError):
        rotation(0.1, 1)


def test_rewards_peak_at_their_targets():
    scene = make_scene(1, 3, seed=2)
    goals = scene_targets(scene) + scene.offsets
    np.testing.assert_allclose(single_view_rewards(goals, scene), 0.0, atol=1e-12)
    assert joint_view_reward(scene_targets(scene), scene) == pytest.approx(0.0, abs=1e-12)
    assert joint_view_reward(goals, scene) < 0


def test_joint_reward_ignores_common_shift_in_view_coordinates(rng):
    scene = make_scene(0, 3, seed=5)
    x0 = rng.normal(size=(3, 2))
    shift = rng.normal(size=2)
    u = back_rotate(x0, scene) + shift
    shifted = np.stack([rotation(scene.angles[v], 2) @ u[v] for v in range(3)])
    assert joint_view_reward(shifted, scene) == pytest.approx(joint_view_reward(x0, scene), abs=1e-12)


def test_joint_reward_requires_all_views():
    scene = make_scene(0, 3, seed=0)
    with pytest.raises(ContractError):
        joint_view_reward(np.zeros((2, 2)), scene)


def test_reward_gradients_match_finite_differences(rng):
    scene = make_scene(2, 3, seed=1)
    x0 = rng.normal(size=(3, 2))
    single, joint = reward_gradients(x0, scene)
    h = 1e-6
    for v in range(3):
        for k in range(2):
            up, down = x0.copy(), x0.copy()
            up[v, k] += h
            down[v, k] -= h
            fd_single = (np.sum(single_view_rewards(up, scene)) - np.sum(single_view_rewards(down, scene))) / (2 * h)
            fd_joint = (joint_view_reward(up, scene) - joint_view_reward(down, scene)) / (2 * h)
            assert single[v, k] == pytest.approx(fd_single, abs=1e-6)
            assert joint[v, k] == pytest.approx(fd_joint, abs=1e-6)


def test_oracle_at_zero_multiplier_is_unconstrained_optimum():
    scene = make_scene(0, 3, seed=3)
    best = constrained_optimum_oracle(scene, 0.0)
    assert best.sum_single == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(best.points, scene_targets(scene) + scene.offsets, atol=1e-12)


def test_oracle_collapses_views_for_large_multiplier():
    scene = make_scene(0, 3, seed=3)
    assert abs(constrained_optimum_oracle(scene, 1e6).joint) < 1e-9
    assert constrained_optimum_oracle(scene, 5.0).joint > constrained_optimum_oracle(scene, 1.0).joint


@pytest.mark.parametrize("lam", [0.0, 1.0, 5.0])
def test_oracle_matches_grid_search(lam):
    scene = make_scene(0, 2, seed=11)
    oracle = constrained_optimum_oracle(scene, lam)
    grid = grid_search_optimum(scene, lam)
    oracle_value = oracle.sum_single + lam * oracle.joint
    grid_value = grid.sum_single + lam * grid.joint
    assert oracle_value >= grid_value - 1e-12
    assert grid_value == pytest.approx(oracle_value, abs=1e-3)
    np.testing.assert_allclose(grid.view_points, oracle.view_points, atol=0.03)


@pytest.mark.parametrize("lam", [0.5, 2.0])
def test_gradient_ascent_reaches_oracle(lam):
    scene = make_scene(1, 4, seed=0)
    oracle = constrained_optimum_oracle(scene, lam)
    ascent = ascent_optimum(scene, lam)
    np.testing.assert_allclose(ascent.points, oracle.points, atol=1e-8)


def test_negative_multiplier_rejected():
    scene = make_scene(0, 2, seed=0)
    with pytest.raises(DomainError):
        constrained_optimum_oracle(scene, -0.1)
    with pytest.raises(ContractError):
        grid_search_optimum(make_scene(0, 4, seed=0), 1.0)


def test_scene_dump_round_trip(tmp_path):
    scenes = make_scenes(3, 2, seed=4, dim=3)
    path = dump_scenes(scenes, tmp_path / "scenes.tsv")
    loaded = load_scenes(path)
    assert [s.prompt_id for s in loaded] == [0, 1, 2]
    for before, after in zip(scenes, loaded):
        np.testing.assert_array_equal(before.base, after.base)
        np.testing.assert_array_equal(before.offsets, after.offsets)
