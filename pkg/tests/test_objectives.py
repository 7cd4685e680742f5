# -*- coding: utf-8 -*-
import math

import numpy as np
import pytest

from core.diffusion import GuidanceConfig, replay_log_probs, sample_trajectories
from core.errors import ContractError, DomainError
from core.method_system import get_method
from core.objectives import (
    ObjectiveConfig,
    RewardRecord,
    TrajectoryPair,
    accumulate,
    attach_reference,
    clip_log_ratio,
    compute_loss,
    is_tied,
    log_prob_steps,
    mv_dpo_loss,
    mv_pg_loss,
    mv_rdl_loss,
    mv_zigal_loss,
    mvc_advantage,
    mvc_advantages,
    mvc_reward,
    mvc_zigal_loss,
    rank_pair,
    ws_advantages,
    ws_reward,
    zigzag_advantage,
)
from core.zigzag import ZigzagSchedule, zmv_sample
from tests.helpers import check_gradients, make_model

CONFIG = ObjectiveConfig()


def _record(single, joint, tag="s"):
    single = np.asarray(single, dtype=np.float64)
    return RewardRecord(single=single, joint=joint, tag=tag, single_norm=single.copy(), joint_norm=joint)


def make_pair(model, views, seed=0, zigzag=True, rewards=None):
    standard = sample_trajectories(model, 0, views, 7.0, np.random.default_rng(seed), seed=seed)
    if zigzag:
        partner = zmv_sample(model, 0, views, ZigzagSchedule(), GuidanceConfig(),
                             np.random.default_rng(seed), seed=seed)
    else:
        partner = sample_trajectories(model, 0, views, 7.0, np.random.default_rng(seed + 1000), seed=seed + 1000)
    if rewards is None:
        rng = np.random.default_rng(seed + 1)
        rewards = (_record(rng.normal(size=views), float(rng.normal())),
                   _record(rng.normal(size=views), float(rng.normal()), "z" if zigzag else "b"))
    return TrajectoryPair(standard, partner, rewards[0], rewards[1])


def perturbed(params, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    copy = params.copy()
    for name in sorted(copy.arrays):
        copy.arrays[name] = copy.arrays[name] + scale * rng.standard_normal(copy.arrays[name].shape)
    return copy


# ==================== 奖励与优势 ====================

def test_mvc_reward_examples():
    assert mvc_reward(0.7, 3.0, 0.0) == 0.7
    assert mvc_reward(1.0, 0.0, 1.0) == pytest.approx(0.5)
    assert mvc_reward(0.0, 1.2, 5.0) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        mvc_reward(1.0, 1.0, -1.0)


def test_ws_reward_examples():
    assert ws_reward(1.0, 2.0, 0.5) == pytest.approx(2.0)
    assert ws_reward(0.3, 9.0, 0.0) == 0.3
    with pytest.raises(DomainError):
        ws_reward(1.0, 1.0, -0.1)


def test_mvc_advantage_hand_example(model):
    pair = make_pair(model, 2, rewards=(_record([0.0, 0.0], 0.3), _record([1.0, 0.0], 0.3, "z")))
    np.testing.assert_allclose(mvc_advantages(pair, 1.0), [0.5, 0.0], atol=1e-15)
    assert mvc_advantage(pair, 1, 1.0) == pytest.approx(0.5)
    np.testing.assert_allclose(mvc_advantages(pair, 0.0), [1.0, 0.0])
    with pytest.raises(ContractError):
        mvc_advantage(pair, 3, 1.0)


def test_mvc_advantage_is_antisymmetric(model):
    pair = make_pair(model, 2, seed=3)
    for lam in (0.0, 0.7, 5.0):
        np.testing.assert_allclose(mvc_advantages(pair.swapped(), lam), -mvc_advantages(pair, lam), atol=1e-15)
    np.testing.assert_allclose(ws_advantages(pair.swapped(), 0.5), -ws_advantages(pair, 0.5), atol=1e-15)


def test_identical_joint_rewards_scale_advantage_by_multiplier(model):
    pair = make_pair(model, 2, rewards=(_record([0.2, -0.1], -0.4), _record([0.5, 0.3], -0.4, "z")))
    base = mvc_advantages(pair, 0.0)
    for lam in (0.5, 1.0, 5.0):
        np.testing.assert_allclose(mvc_advantages(pair, lam) * (1.0 + lam), base, atol=1e-14)


def test_zigzag_advantage_uses_normalized_joint(model):
    pair = make_pair(model, 2, rewards=(_record([0.0, 0.0], 0.1), _record([0.0, 0.0], 0.6, "z")))
    assert zigzag_advantage(pair) == pytest.approx(0.5)
    pair.partner_reward.joint_norm = None
    with pytest.raises(ContractError):
        zigzag_advantage(pair)


@pytest.mark.parametrize("raw, expected", [(0.0, 0.0), (-20.0, -math.log(1e4)), (5.0, 5.0), (20.0, math.log(1e4))])
def test_clip_log_ratio(raw, expected):
    assert clip_log_ratio(raw) == pytest.approx(expected, abs=1e-12)
    assert CONFIG.log_ratio_clip == pytest.approx(9.2103, abs=1e-4)


def test_pair_members_must_share_prompt(model):
    a = sample_trajectories(model, 0, 2, 7.0, np.random.default_rng(0))
    b = sample_trajectories(model, 1, 2, 7.0, np.random.default_rng(0))
    with pytest.raises(ContractError):
        TrajectoryPair(a, b)


# ==================== 损失取值 ====================

def test_zigal_loss_at_snapshot(model):
    pair = make_pair(model, 2, rewards=(_record([0.0, 0.0], 0.0), _record([0.0, 0.0], 0.0, "z")))
    snapshot = model.params.copy()
    assert mv_zigal_loss(model, pair, snapshot, CONFIG).value == 0.0

    pair.partner_reward.joint_norm = 0.5
    assert mv_zigal_loss(model, pair, snapshot, CONFIG).value == pytest.approx(0.25, abs=1e-15)


def test_per_step_residual_counts_every_step_and_view():
    model = make_model(views=2, steps=3)
    pair = make_pair(model, 2, rewards=(_record([0.0, 0.0], 0.0), _record([0.0, 0.0], 0.5, "z")))
    snapshot = model.params.copy()
    per_step = ObjectiveConfig(residual_mode="per-step")
    assert mv_zigal_loss(model, pair, snapshot, CONFIG).value == pytest.approx(0.25, abs=1e-15)
    assert mv_zigal_loss(model, pair, snapshot, per_step).value == pytest.approx(2 * 2 * 0.25, abs=1e-15)


def test_mvc_zigal_zero_at_snapshot_with_zero_advantages(model):
    pair = make_pair(model, 2, seed=4)
    result = mvc_zigal_loss(model, pair, np.zeros(2), model.params.copy(), CONFIG)
    assert result.value == 0.0
    assert all(not np.any(g) for g in result.grads.values())
    with pytest.raises(ContractError):
        mvc_zigal_loss(model, pair, np.zeros(3), model.params.copy(), CONFIG)


def test_mvc_zigal_is_independent_of_multiplier_for_identical_rewards(model):
    rewards = (_record([0.2, -0.3], 0.4), _record([0.2, -0.3], 0.4, "z"))
    pair = make_pair(model, 2, seed=6, rewards=rewards)
    prev = perturbed(model.params, 1)
    values = [mvc_zigal_loss(model, pair, mvc_advantages(pair, lam), prev, CONFIG).value
              for lam in (0.0, 1.0, 5.0)]
    assert values[0] == values[1] == values[2]


def test_mvc_zigal_at_zero_multiplier_is_single_view_zigal(model):
    pair = make_pair(model, 2, seed=8)
    prev = perturbed(model.params, 2)
    single_only = pair.partner_reward.single_norm - pair.standard_reward.single_norm
    constrained = mvc_zigal_loss(model, pair, mvc_advantages(pair, 0.0), prev, CONFIG).value
    direct = mvc_zigal_loss(model, pair, single_only, prev, CONFIG).value
    assert constrained == direct


def test_dpo_loss_is_log_two_at_reference(model):
    for seed in range(3):
        pair = make_pair(model, 2, seed=seed)
        result = mv_dpo_loss(model, pair, model.params.copy(), CONFIG)
        assert result.value == pytest.approx(math.log(2.0), abs=1e-12)


def test_dpo_loss_positive_away_from_reference(model):
    pair = make_pair(model, 2, seed=5)
    assert mv_dpo_loss(model, pair, perturbed(model.params, 3, scale=0.5), CONFIG).value > 0.0


def test_dpo_rejects_tied_pairs(model):
    pair = make_pair(model, 2, rewards=(_record([0.0, 0.0], 0.2), _record([1.0, 1.0], 0.2, "z")))
    with pytest.raises(ContractError):
        mv_dpo_loss(model, pair, model.params.copy(), CONFIG)


def test_dpo_method_skips_only_tied_pairs(model):
    method = get_method("mv-dpo", CONFIG)
    tied = make_pair(model, 2, rewards=(_record([0.0, 0.0], 0.2), _record([1.0, 1.0], 0.2, "z")))
    assert is_tied(tied)
    assert method.loss(model, tied) is None

    # 未评分或缺少参考似然的轨迹对属于调用错误，不能当作平局吞掉
    unscored = make_pair(model, 2, seed=3)
    with pytest.raises(ContractError):
        method.loss(model, TrajectoryPair(unscored.standard, unscored.partner))
    ranked = make_pair(model, 2, seed=3, zigzag=False)
    assert not is_tied(ranked)
    with pytest.raises(ContractError):
        method.loss(model, ranked)
    attach_reference(model, ranked, model.params.copy())
    assert method.loss(model, ranked).value == pytest.approx(math.log(2.0), abs=1e-12)


def test_cached_reference_is_used(model):
    pair = make_pair(model, 2, seed=2)
    prev = perturbed(model.params, 5)
    attach_reference(model, pair, prev)
    cached = mv_zigal_loss(model, pair, None, CONFIG).value
    assert cached == mv_zigal_loss(model, make_pair(model, 2, seed=2), prev, CONFIG).value
    with pytest.raises(ContractError):
        mv_zigal_loss(model, make_pair(model, 2, seed=2), None, CONFIG)


def test_accumulate_averages_in_order(model):
    pair = make_pair(model, 2, seed=1)
    prev = perturbed(model.params, 4)
    first = mv_zigal_loss(model, pair, prev, CONFIG)
    second = mv_rdl_loss(model, make_pair(model, 2, seed=1, zigzag=False), prev, CONFIG)
    total = accumulate([first, second])
    assert total.count == 2
    assert total.value == pytest.approx((first.value + second.value) / 2)
    for name in total.grads:
        np.testing.assert_allclose(total.grads[name], (first.grads[name] + second.grads[name]) / 2)
    with pytest.raises(ContractError):
        accumulate([])


# ==================== 梯度 ====================

def _loss_cases(model):
    prev = perturbed(model.params, 11)
    zig = make_pair(model, 2, seed=21)
    two = make_pair(model, 2, seed=22, zigzag=False)
    weights = [np.array([0.7, -0.2]), 1.3]
    trajectories = [zig.standard, zig.partner]
    return {
        "mv-pg": lambda: mv_pg_loss(model, trajectories, weights),
        "mv-dpo": lambda: mv_dpo_loss(model, zig, prev, CONFIG),
        "mv-rdl": lambda: mv_rdl_loss(model, two, prev, CONFIG),
        "mv-zigal": lambda: mv_zigal_loss(model, zig, prev, CONFIG),
        "mv-zigal-per-step": lambda: mv_zigal_loss(model, zig, prev, ObjectiveConfig(residual_mode="per-step")),
        "mvc-zigal": lambda: mvc_zigal_loss(model, zig, mvc_advantages(zig, 0.8), prev, CONFIG),
    }


@pytest.mark.parametrize("name", ["mv-pg", "mv-dpo", "mv-rdl", "mv-zigal", "mv-zigal-per-step", "mvc-zigal"])
def test_loss_gradients_match_finite_differences(name):
    model = make_model(views=2, steps=2, seed=3)
    loss = _loss_cases(model)[name]
    result = loss()
    check_gradients(lambda: loss().value, result.grads, model.params.arrays,
                    np.random.default_rng(100), samples=100)


def _log_likelihood_grads(model, trajectory):
    """Σ_{t,v} log p_θ 的值与梯度"""
    return compute_loss(model, lambda g, n: g.sum(g.add_all(log_prob_steps(g, n, model, trajectory))))


def test_pg_gradient_vanishes_for_zero_reward_and_follows_likelihood_for_unit_reward():
    model = make_model(views=2, steps=3, seed=4)
    trajectories = [sample_trajectories(model, p, 2, 7.0, np.random.default_rng(40 + p)) for p in (0, 1)]

    zero = mv_pg_loss(model, trajectories, [0.0, 0.0])
    assert zero.value == 0.0
    assert all(not np.any(g) for g in zero.grads.values())

    unit = mv_pg_loss(model, trajectories, [1.0, 1.0])
    likelihood = accumulate([_log_likelihood_grads(model, tr) for tr in trajectories])
    assert unit.value == pytest.approx(-likelihood.value, rel=1e-12)
    for name, grad in likelihood.grads.items():
        np.testing.assert_allclose(unit.grads[name], -grad, rtol=1e-12, atol=1e-15)


def test_dpo_step_towards_the_winner_lowers_the_loss():
    model = make_model(views=2, steps=3, seed=6)
    pair = make_pair(model, 2, seed=9)
    reference = model.params.copy()
    winner, loser, _ = rank_pair(pair)
    g_w = _log_likelihood_grads(model, winner).grads
    g_l = _log_likelihood_grads(model, loser).grads

    # 参考点处 σ(0) = 1/2：∇L = −(β/2)(∇log p_w − ∇log p_l)
    at_reference = mv_dpo_loss(model, pair, reference, CONFIG)
    for name in g_w:
        np.testing.assert_allclose(at_reference.grads[name], -0.5 * CONFIG.beta_dpo * (g_w[name] - g_l[name]),
                                   rtol=1e-9, atol=1e-12)

    direction = {name: g_w[name] - g_l[name] for name in g_w}
    h = 1e-3 / sum(float(np.sum(d * d)) for d in direction.values())
    for name, d in direction.items():
        model.params.arrays[name] = model.params.arrays[name] + h * d
    assert mv_dpo_loss(model, pair, reference, CONFIG).value < at_reference.value


# ==================== 单视角退化 ====================

def _log_ratio_total(model, trajectory, prev):
    current = replay_log_probs(model, trajectory)
    reference = replay_log_probs(model, trajectory, params=prev)
    return sum(float(current[t][0] - reference[t][0]) for t in trajectory.likelihood_steps())


@pytest.mark.parametrize("seed", range(20))
def test_single_view_losses_match_single_image_objectives(seed):
    model = make_model(views=1, steps=3, seed=seed)
    prev = perturbed(model.params, seed + 50)
    zig = make_pair(model, 1, seed=seed)
    two = make_pair(model, 1, seed=seed, zigzag=False)
    s_rec, z_rec = zig.records()

    # 策略梯度：−R·Σ_t log p
    lp = replay_log_probs(model, zig.standard)
    expected_pg = -1.7 * sum(float(lp[t][0]) for t in zig.standard.likelihood_steps())
    assert mv_pg_loss(model, [zig.standard], [1.7]).value == pytest.approx(expected_pg, rel=1e-12, abs=1e-12)

    # 优势学习：((Δz − Δs)/η − A)²
    gap = _log_ratio_total(model, zig.partner, prev) - _log_ratio_total(model, zig.standard, prev)
    advantage = z_rec.joint_norm - s_rec.joint_norm
    assert mv_zigal_loss(model, zig, prev, CONFIG).value == pytest.approx((gap - advantage) ** 2, rel=1e-12, abs=1e-12)

    # 奖励差学习
    a_rec, b_rec = two.records()
    gap_b = _log_ratio_total(model, two.partner, prev) - _log_ratio_total(model, two.standard, prev)
    expected_rdl = (gap_b - (b_rec.joint_norm - a_rec.joint_norm)) ** 2
    assert mv_rdl_loss(model, two, prev, CONFIG).value == pytest.approx(expected_rdl, rel=1e-12, abs=1e-12)

    # 约束优势学习（逐步残差）
    adv = mvc_advantages(zig, 0.6)
    current_z, current_s = replay_log_probs(model, zig.partner), replay_log_probs(model, zig.standard)
    ref_z, ref_s = replay_log_probs(model, zig.partner, prev), replay_log_probs(model, zig.standard, prev)
    expected_mvc = sum(((current_z[t][0] - ref_z[t][0]) - (current_s[t][0] - ref_s[t][0]) - adv[0]) ** 2
                       for t in zig.standard.likelihood_steps())
    value = mvc_zigal_loss(model, zig, adv, prev, CONFIG).value
    assert value == pytest.approx(float(expected_mvc), rel=1e-12, abs=1e-12)

    # 偏好优化：−log σ(β·(Δw − Δl))
    if s_rec.joint != z_rec.joint:
        winner, loser = (zig.standard, zig.partner) if s_rec.joint > z_rec.joint else (zig.partner, zig.standard)
        margin = _log_ratio_total(model, winner, prev) - _log_ratio_total(model, loser, prev)
        expected_dpo = math.log1p(math.exp(-margin))
        assert mv_dpo_loss(model, zig, prev, CONFIG).value == pytest.approx(expected_dpo, rel=1e-12, abs=1e-12)
