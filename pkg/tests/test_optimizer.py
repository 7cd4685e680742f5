# -*- coding: utf-8 -*-
import math

import numpy as np
import pytest

from core.errors import TrainingError
from core.optimizer import AdamW, clip_grad_norm, global_norm


def test_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([[4.0, 0.0]])}
    assert global_norm(grads) == pytest.approx(5.0)


def test_clipping_rescales_to_cap():
    grads = {"a": np.array([30.0]), "b": np.array([40.0])}
    clipped, norm = clip_grad_norm(grads, 5.0)
    assert norm == pytest.approx(50.0)
    assert global_norm(clipped) == pytest.approx(5.0)
    np.testing.assert_allclose(clipped["a"], [3.0])
    assert grads["a"][0] == 30.0


def test_clipping_leaves_small_gradients():
    grads = {"a": np.array([0.3, -0.4])}
    clipped, norm = clip_grad_norm(grads, 5.0)
    np.testing.assert_array_equal(clipped["a"], grads["a"])
    assert norm == pytest.approx(0.5)


def test_non_finite_gradients_rejected():
    with pytest.raises(TrainingError):
        clip_grad_norm({"a": np.array([np.inf])}, 5.0)


def test_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -1.0])}
    AdamW(learning_rate=0.1, weight_decay=0.0).step(params, {"w": np.array([2.0, -0.5])})
    np.testing.assert_allclose(params["w"], [0.9, -0.9], atol=1e-7)


def test_weight_decay_is_decoupled():
    params = {"w": np.array([2.0])}
    AdamW(learning_rate=0.1, weight_decay=0.5).step(params, {"w": np.array([0.0])})
    assert params["w"][0] == pytest.approx(2.0 * (1.0 - 0.05))


def test_minimizes_quadratic():
    params = {"w": np.array([3.0, -2.0])}
    optimizer = AdamW(learning_rate=0.05, weight_decay=0.0)
    for _ in range(500):
        optimizer.step(params, {"w": 2.0 * params["w"]})
    assert np.linalg.norm(params["w"]) < 0.1


def test_state_round_trip_continues_identically():
    grads = {"w": np.array([0.3, -1.0])}
    a_params = {"w": np.array([1.0, 2.0])}
    a = AdamW()
    a.step(a_params, grads)
    b = AdamW()
    b.load_state_dict(a.state_dict())
    b_params = {"w": a_params["w"].copy()}
    a.step(a_params, grads)
    b.step(b_params, grads)
    np.testing.assert_array_equal(a_params["w"], b_params["w"])
    assert b.step_count == 2
    assert math.isfinite(float(b_params["w"][0]))
