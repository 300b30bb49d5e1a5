from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regnav import nav
from regnav.expert import ExpertConfig, RoomExpert
from regnav.nav import (
    CURVE_FIELDS,
    PolicyAgent,
    PolicyConfig,
    RandomAgent,
    RewardConfig,
    ShortestPathAgent,
    StepContext,
    TrainConfig,
    TrainingDivergedError,
    act,
    encode_visual,
    fuse,
    gae,
    ppo_loss_grads,
    relation_features,
    run_episode,
    step_reward,
    train_policy,
)
from regnav.nn import softmax
from regnav.sim import D_OBS, DIFFICULTIES, Action, generate_house, heading_gap, sample_episode


@pytest.fixture(scope="module")
def houses():
    return [generate_house(s, 3) for s in range(2)]


@pytest.fixture(scope="module")
def expert():
    return RoomExpert(ExpertConfig(seed=0))


# rewards --------------------------------------------------------------------------------


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(d_s=0.0)
    with pytest.raises(ValueError):
        RewardConfig(alpha_s=180.0)
    with pytest.raises(ValueError):
        StepContext(-1.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        StepContext(0.0, 0.0, 4.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1.01, 20.0), min_size=2, max_size=30), st.lists(st.floats(0, math.pi), min_size=30, max_size=30))
def test_far_rewards_telescope(ds, angles):
    """Away from the goal the heading term is off and progress rewards telescope."""
    cfg = RewardConfig()
    total = sum(step_reward(StepContext(ds[t], ds[t - 1], angles[t], angles[t - 1]), cfg) for t in range(1, len(ds)))
    assert total == pytest.approx(ds[0] - ds[-1] - (len(ds) - 1) * cfg.slack, abs=1e-9)


# agent ----------------------------------------------------------------------------------


@pytest.mark.parametrize("fusion,aux", [("none", 0), ("implicit", 32), ("explicit", 2)])
def test_agent_shapes(fusion, aux):
    agent = PolicyAgent(fusion)
    assert agent.aux_dim == aux
    B = 3
    rng = np.random.default_rng(0)
    obs, goal = rng.normal(size=(B, D_OBS)), rng.normal(size=(B, D_OBS))
    a = None if aux == 0 else rng.normal(size=(B, aux))
    logits, values, h = agent.step_batch(obs, goal, a, agent.initial_state(B))
    assert logits.shape == (B, 4) and values.shape == (B,) and h.shape == (2, B, 64)
    p = softmax(logits)
    assert np.all(p[:, Action.STOP] < p[:, Action.MOVE_FORWARD])  # stop bias


def test_unknown_fusion():
    with pytest.raises(ValueError):
        PolicyAgent("late")


def test_act_matches_step_batch(expert):
    rng = np.random.default_rng(1)
    obs, goal = rng.normal(size=D_OBS), rng.normal(size=D_OBS)
    for fusion in ("none", "implicit", "explicit"):
        agent = PolicyAgent(fusion, PolicyConfig(seed=2))
        h = agent.initial_state()
        fused = fuse(agent, encode_visual(agent, obs, goal), expert, obs, goal)
        probs, value, h1 = act(agent, fused, h, prev_action=Action.TURN_LEFT)
        aux = relation_features(agent, expert, obs, goal)
        logits, v2, h2 = agent.step_batch(obs, goal, aux, h, np.asarray(int(Action.TURN_LEFT)))
        assert np.allclose(probs, softmax(logits))
        assert value == pytest.approx(float(v2))
        assert np.allclose(h1, h2)


def test_act_rejects_wrong_width():
    agent = PolicyAgent("explicit")
    with pytest.raises(ValueError):
        act(agent, np.zeros(64), agent.initial_state())
    with pytest.raises(ValueError):
        encode_visual(agent, np.zeros(5), np.zeros(5))


def test_relation_features_sources(expert):
    agent = PolicyAgent("explicit")
    obs = np.zeros((2, D_OBS))
    flags = relation_features(agent, None, obs, obs, np.array([True, False]), "oracle")
    assert flags.tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert relation_features(PolicyAgent("none"), None, obs, obs) is None
    with pytest.raises(ValueError):
        relation_features(agent, None, obs, obs)
    with pytest.raises(ValueError):
        relation_features(agent, expert, obs, obs, None, "oracle")


def test_agent_checkpoint_round_trip(tmp_path):
    agent = PolicyAgent("implicit", PolicyConfig(seed=5))
    agent.save(tmp_path / "a.ckpt")
    back = PolicyAgent.load(tmp_path / "a.ckpt")
    assert back.fusion == "implicit" and back.config == agent.config
    for k, v in agent.params.items():
        assert np.allclose(back.params[k], v, atol=1e-6)


# PPO pieces -------------------------------------------------------------------------------


def _gae_oracle(r, v, d, last, gamma, lam):
    """Direct sum of discounted TD residuals, truncated at episode ends."""
    T = len(r)
    vals = list(v) + [last]
    deltas = [r[t] + gamma * vals[t + 1] * (1 - d[t]) - vals[t] for t in range(T)]
    out = []
    for t in range(T):
        acc, w = 0.0, 1.0
        for k in range(t, T):
            acc += w * deltas[k]
            if d[k]:
                break
            w *= gamma * lam
        out.append(acc)
    return np.array(out)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_gae_matches_oracle(seed, T):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=T), rng.normal(size=T)
    d = (rng.random(T) < 0.3).astype(float)
    last = float(rng.normal())
    adv, ret = gae(r, v, d, np.array(last), 0.99, 0.95)
    assert np.allclose(adv, _gae_oracle(r, v, d, last, 0.99, 0.95))
    assert np.allclose(ret, adv + v)


def test_ppo_loss_at_unit_ratio():
    cfg = TrainConfig()
    logits = np.zeros((2, 3, 4))
    acts = np.zeros((2, 3), dtype=int)
    old = np.full((2, 3), math.log(0.25))
    adv = np.arange(6.0).reshape(2, 3)
    total, pl, vl, ent, _, _ = ppo_loss_grads(logits, np.zeros((2, 3)), acts, old, adv, np.ones((2, 3)), cfg)
    assert pl == pytest.approx(-adv.mean())
    assert vl == pytest.approx(0.5)
    assert ent == pytest.approx(math.log(4))
    assert total == pytest.approx(pl + cfg.value_coef * vl - cfg.entropy_coef * ent)


def test_ppo_clip_zeroes_gradient():
    cfg = TrainConfig(clip=0.2)
    logits = np.array([[[2.0, 0.0, 0.0, 0.0]]])
    p0 = softmax(logits[0, 0])[0]
    old = np.array([[math.log(p0 / 1.5)]])  # ratio 1.5 > 1 + clip with positive advantage
    *_, d_logits, _ = ppo_loss_grads(logits, np.zeros((1, 1)), np.array([[0]]), old, np.ones((1, 1)), np.zeros((1, 1)), cfg)
    # only the entropy term remains
    p = softmax(logits[0, 0])
    H = -(p * np.log(p)).sum()
    assert np.allclose(d_logits[0, 0], cfg.entropy_coef * p * (np.log(p) + H))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(n_minibatches=64, n_envs=8).validate()
    with pytest.raises(ValueError):
        TrainConfig(difficulties=("impossible",)).validate()
    with pytest.raises(ValueError):
        TrainConfig(relation_source="psychic").validate()


# episodes ---------------------------------------------------------------------------------


@pytest.mark.parametrize("difficulty", DIFFICULTIES)
def test_shortest_path_agent_is_optimal(houses, difficulty):
    for k in range(4):
        ep = sample_episode(houses[k % 2], difficulty, seed=1, episode_id=k)
        res = run_episode(ShortestPathAgent(), houses[k % 2], ep)
        assert res.success and res.actions[-1] == Action.STOP
        assert res.path_length_taken == pytest.approx(res.shortest_path)
        assert res.final_distance == 0.0
        aligned = heading_gap(res.poses[-1].heading, ep.goal.heading) <= math.radians(25)
        assert res.rewards[-1] == pytest.approx(-0.01 + 5.0 * (1 + aligned))


def test_random_agent_episode_is_reproducible(houses):
    ep = sample_episode(houses[0], "medium", seed=0, episode_id=3)
    a = run_episode(RandomAgent(), houses[0], ep, greedy=False, max_steps=50)
    b = run_episode(RandomAgent(), houses[0], ep, greedy=False, max_steps=50)
    assert a.actions == b.actions and a.steps_used <= 50
    assert len(a.poses) == sum(x != Action.STOP for x in a.actions) + 1
    assert a.success == (a.actions[-1] == Action.STOP and a.final_distance <= 1.0)


def test_policy_episode_runs(houses, expert):
    ep = sample_episode(houses[1], "easy", seed=0, episode_id=0)
    for fusion, source in (("none", "expert"), ("implicit", "expert"), ("explicit", "oracle")):
        res = run_episode(PolicyAgent(fusion), houses[1], ep, expert, max_steps=30, relation_source=source)
        assert 1 <= res.steps_used <= 30
        assert res.to_dict()["goal"] == [ep.goal.x, ep.goal.y, ep.goal.heading]


# training ---------------------------------------------------------------------------------

SMALL = TrainConfig(n_envs=4, rollout_len=16, n_minibatches=2, max_steps=40)


def test_train_policy_smoke(tmp_path, houses, expert):
    agent, hist = train_policy(houses, expert, "explicit", 256, SMALL, log_path=tmp_path / "c.csv")
    assert len(hist) == 4 and hist[-1]["steps"] == 256
    rows = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert list(rows[0]) == CURVE_FIELDS and len(rows) == 4
    again, _ = train_policy(houses, expert, "explicit", 256, SMALL)
    assert all(np.array_equal(v, again.params[k]) for k, v in agent.params.items())


def test_train_policy_edge_cases(houses, expert):
    agent, hist = train_policy(houses, None, "none", 0, SMALL)
    assert hist == [] and agent.fusion == "none"
    with pytest.raises(ValueError):
        train_policy(houses, None, "implicit", 64, SMALL)
    with pytest.raises(ValueError):
        train_policy([], expert, "none", 64, SMALL)
    # oracle flags need no expert
    train_policy(houses, None, "explicit", 64, TrainConfig(n_envs=4, rollout_len=16, n_minibatches=2, relation_source="oracle"))


def test_train_policy_divergence_saves_diagnostics(tmp_path, houses, monkeypatch):
    real = nav.ppo_loss_grads

    def poisoned(*args, **kwargs):
        out = list(real(*args, **kwargs))
        out[0] = float("nan")
        return tuple(out)

    monkeypatch.setattr(nav, "ppo_loss_grads", poisoned)
    with pytest.raises(TrainingDivergedError):
        train_policy(houses, None, "none", 64, SMALL, diag_path=tmp_path / "diag.ckpt")
    assert PolicyAgent.load(tmp_path / "diag.ckpt").fusion == "none"
