# -*- coding: utf-8 -*-
import math

import numpy as np
import pytest

from core.diffusion import (
    ConstantNoisePredictor,
    GuidanceConfig,
    build_noise_schedule,
    denoise_step,
    predicted_clean,
    replay_log_probs,
    sample_trajectories,
)
from core.errors import ConfigError
from core.zigzag import (
    ZigzagSchedule,
    approximate_inversion,
    expected_predictions,
    zigzag_pass,
    zmv_sample,
)
from tests.helpers import make_model

GUIDANCE = GuidanceConfig(omega_high=7.0, omega_low=1.0)


def test_active_steps_per_mode():
    assert ZigzagSchedule().active_steps(4) == [4]
    assert ZigzagSchedule(mode="full-step").active_steps(3) == [3, 2, 1]
    assert ZigzagSchedule(mode="explicit", steps=[1, 3, 3]).active_steps(4) == [3, 1]
    assert ZigzagSchedule(mode="explicit").active_steps(4) == []


def test_explicit_steps_outside_range():
    with pytest.raises(ConfigError) as info:
        ZigzagSchedule(mode="explicit", steps=[5]).active_steps(4)
    assert info.value.key == "zigzag.steps"
    with pytest.raises(ValueError):
        ZigzagSchedule(mode="explicit", steps=[0])


@pytest.mark.parametrize("schedule, expected", [
    (ZigzagSchedule(), 4 + 2),
    (ZigzagSchedule(passes_per_step=2), 4 + 4),
    (ZigzagSchedule(mode="full-step"), 3 * 4),
    (ZigzagSchedule(mode="explicit"), 4),
])
def test_prediction_counts(schedule, expected):
    model = make_model(views=2, steps=4)
    trajectory = zmv_sample(model, 0, 2, schedule, GUIDANCE, np.random.default_rng(0))
    assert model.counter.predictions == expected == expected_predictions(4, schedule)
    assert model.counter.network_passes == 2 * expected
    assert trajectory.mode == "zigzag"


def test_empty_schedule_matches_standard_sampling_bit_for_bit():
    model = make_model(views=3, steps=4)
    standard = sample_trajectories(model, 1, 3, 7.0, np.random.default_rng(21))
    zigzag = zmv_sample(model, 1, 3, ZigzagSchedule(mode="explicit"), GUIDANCE, np.random.default_rng(21))
    np.testing.assert_array_equal(zigzag.latents, standard.latents)
    np.testing.assert_array_equal(zigzag.means, standard.means)
    np.testing.assert_array_equal(zigzag.log_probs, standard.log_probs)
    assert zigzag.zigzag_steps == ()


def test_zigzag_shares_initial_noise_with_standard_sampling(model):
    standard = sample_trajectories(model, 0, 2, 7.0, np.random.default_rng(4))
    zigzag = zmv_sample(model, 0, 2, ZigzagSchedule(), GUIDANCE, np.random.default_rng(4))
    np.testing.assert_array_equal(zigzag.latents[2], standard.latents[2])
    assert zigzag.zigzag_steps == (2,)
    assert not np.array_equal(zigzag.x0, standard.x0)


@pytest.mark.parametrize("schedule", [ZigzagSchedule(), ZigzagSchedule(passes_per_step=2),
                                      ZigzagSchedule(mode="full-step")])
def test_zigzag_reuses_the_standard_step_noise(schedule):
    model = make_model(views=2, steps=4)
    standard = sample_trajectories(model, 1, 2, 7.0, np.random.default_rng(31))
    zigzag = zmv_sample(model, 1, 2, schedule, GUIDANCE, np.random.default_rng(31))
    for t in range(4, 0, -1):
        np.testing.assert_allclose(zigzag.latents[t - 1] - zigzag.means[t],
                                   standard.latents[t - 1] - standard.means[t], atol=1e-12)


def test_inversion_with_zero_noise_prediction():
    schedule = build_noise_schedule(4)
    stub = ConstantNoisePredictor(schedule, [0.0, 0.0])
    x_prev = np.array([[0.4, -1.3]])
    for t in range(1, 5):
        expected = math.sqrt(schedule.alphabar[t]) / math.sqrt(schedule.alphabar[t - 1]) * x_prev
        np.testing.assert_allclose(approximate_inversion(stub, x_prev, t, 0), expected, atol=1e-12)


@pytest.mark.parametrize("t", [1, 2, 3])
def test_constant_predictor_round_trip(t):
    schedule = build_noise_schedule(3)
    eps = np.array([0.3, -0.7])
    stub = ConstantNoisePredictor(schedule, eps)
    x_prev = np.array([[1.1, 0.2]])
    x_tilde = approximate_inversion(stub, x_prev, t, 0)
    clean = predicted_clean(schedule, x_prev, t - 1, eps) if t > 1 else x_prev
    np.testing.assert_allclose(predicted_clean(schedule, x_tilde, t, eps), clean, atol=1e-10)

    result = denoise_step(stub, x_tilde, t, 0, 7.0, np.random.default_rng(0), eta=0.0)
    np.testing.assert_allclose(result.x_prev, x_prev, atol=1e-10)


def test_equal_scales_with_constant_predictor_reduce_to_plain_step():
    schedule = build_noise_schedule(3)
    stub = ConstantNoisePredictor(schedule, [0.5, 0.1])
    x_t = np.array([[0.2, -0.4]])
    plain = denoise_step(stub, x_t, 3, 0, 1.0, np.random.default_rng(0), eta=0.0)
    zig = zigzag_pass(stub, x_t, 3, 0, 1.0, 1.0, np.random.default_rng(0), eta=0.0)
    np.testing.assert_allclose(zig.x_prev, plain.x_prev, atol=1e-10)


def test_zigzag_pass_is_deterministic_per_seed(model):
    x_t = np.array([[0.5, 0.1], [-0.2, 0.3]])
    first = zigzag_pass(model, x_t, 2, 1, 7.0, 1.0, np.random.default_rng(9))
    second = zigzag_pass(model, x_t, 2, 1, 7.0, 1.0, np.random.default_rng(9))
    np.testing.assert_array_equal(first.x_prev, second.x_prev)
    assert not np.array_equal(first.source, x_t)


def test_zigzag_trajectories_replay_recorded_densities():
    model = make_model(views=2, steps=4)
    schedule = ZigzagSchedule(mode="full-step")
    trajectory = zmv_sample(model, 2, 2, schedule, GUIDANCE, np.random.default_rng(13))
    replay = replay_log_probs(model, trajectory)
    np.testing.assert_allclose(replay[2:], trajectory.log_probs[2:], atol=1e-10)
    assert np.all(np.isfinite(replay[2:]))


def test_standard_steps_condition_on_the_stored_latent():
    model = make_model(views=2, steps=3)
    trajectory = zmv_sample(model, 0, 2, ZigzagSchedule(), GUIDANCE, np.random.default_rng(2))
    np.testing.assert_array_equal(trajectory.sources[2], trajectory.latents[2])
    np.testing.assert_array_equal(trajectory.sources[1], trajectory.latents[1])
    assert not np.array_equal(trajectory.sources[3], trajectory.latents[3])
