"""Navigation rewards, the recurrent actor-critic agent and its PPO trainer."""
from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from regnav.expert import RoomExpert
from regnav.nn import DenseNet, GRUStack, Optimizer, log_softmax, load_checkpoint, prefixed, save_checkpoint, softmax
from regnav.sim import (
    CELL,
    D_OBS,
    DIFFICULTIES,
    Action,
    Episode,
    EpisodeSamplingError,
    House,
    Pose,
    heading_gap,
    render,
    sample_episode,
    step,
)

log = logging.getLogger(__name__)

FUSION_MODES = ("none", "implicit", "explicit")
RELATION_SOURCES = ("expert", "oracle")
N_ACTIONS = len(Action)


class TrainingDivergedError(RuntimeError):
    pass


# rewards ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class RewardConfig:
    d_s: float = 1.0  # meters
    alpha_s: float = 25.0  # degrees
    slack: float = 0.01
    success_scale: float = 5.0

    def __post_init__(self):
        if not self.d_s > 0:
            raise ValueError("d_s must be > 0")
        if not 0 < self.alpha_s < 180:
            raise ValueError("alpha_s must be in (0, 180) degrees")
        if self.slack < 0:
            raise ValueError("slack must be >= 0")


@dataclass(frozen=True)
class StepContext:
    d_t: float
    d_prev: float
    alpha_t: float  # radians
    alpha_prev: float

    def __post_init__(self):
        if self.d_t < 0 or self.d_prev < 0:
            raise ValueError("distances must be >= 0")
        for a in (self.alpha_t, self.alpha_prev):
            if not 0 <= a <= math.pi:
                raise ValueError(f"angles must lie in [0, pi], got {a}")


def step_reward(ctx: StepContext, cfg: RewardConfig = RewardConfig()) -> float:
    r = ctx.d_prev - ctx.d_t
    if ctx.d_t <= cfg.d_s:
        r += ctx.alpha_prev - ctx.alpha_t
    return r - cfg.slack


def success_reward(d_t: float, alpha_t: float, cfg: RewardConfig = RewardConfig()) -> float:
    near = d_t <= cfg.d_s
    aligned = near and alpha_t <= math.radians(cfg.alpha_s)
    return cfg.success_scale * (int(near) + int(aligned))


# agent ------------------------------------------------------------------------------------


@dataclass
class PolicyConfig:
    obs_dim: int = D_OBS
    vis_dim: int = 64
    encoder_hidden: int = 128
    fusion_hidden: int = 64
    core_hidden: int = 64
    core_layers: int = 2
    emb_dim: int = 16
    stop_bias: float = -2.0  # initial STOP logit offset; discourages stopping before exploring
    prev_action: bool = True  # feed the previous action (one-hot) to the recurrent core
    seed: int = 0


class PolicyAgent:
    """E_v over concat(obs, goal), optional room-expert fusion, GRU core, actor/critic heads."""

    def __init__(self, fusion: str = "none", config: PolicyConfig | None = None):
        if fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {fusion!r}")
        self.fusion = fusion
        self.config = c = config or PolicyConfig()
        rng = np.random.default_rng([c.seed, 0xA6E7])
        self.visual_encoder = DenseNet([2 * c.obs_dim, c.encoder_hidden, c.vis_dim], "relu", rng, out_activation="relu")
        self.fusion_net: DenseNet | None = None
        if fusion != "none":
            self.fusion_net = DenseNet([c.vis_dim + self.aux_dim, c.fusion_hidden, c.vis_dim], "relu", rng, out_activation="relu")
        self.core = GRUStack(c.vis_dim + (N_ACTIONS if c.prev_action else 0), c.core_hidden, c.core_layers, rng)
        self.actor = DenseNet([c.core_hidden, N_ACTIONS], "identity", rng)
        self.critic = DenseNet([c.core_hidden, 1], "identity", rng)
        self.actor.params["W0"] *= 0.01  # near-uniform initial policy
        self.actor.params["b0"][Action.STOP] = c.stop_bias

    @property
    def aux_dim(self) -> int:
        return {"none": 0, "implicit": 2 * self.config.emb_dim, "explicit": 2}[self.fusion]

    def modules(self) -> dict:
        mods = {"encoder": self.visual_encoder, "core": self.core, "actor": self.actor, "critic": self.critic}
        if self.fusion_net is not None:
            mods["fusion"] = self.fusion_net
        return mods

    @property
    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, mod in self.modules().items():
            out.update(prefixed(name, mod.params))
        return out

    def initial_state(self, batch: int | None = None) -> np.ndarray:
        return self.core.initial_state(batch)

    # batched computation -------------------------------------------------------------

    def _trunk_forward(self, obs, goal, aux):
        v, c_enc = self.visual_encoder.forward_cached(np.concatenate([obs, goal], axis=-1))
        if self.fusion_net is None:
            return v, (c_enc, None)
        z, c_fus = self.fusion_net.forward_cached(np.concatenate([v, aux], axis=-1))
        return z, (c_enc, c_fus)

    def _trunk_backward(self, cache, dz):
        c_enc, c_fus = cache
        grads = {}
        dv = dz
        if c_fus is not None:
            g, dzin = self.fusion_net.backward_cached(c_fus, dz)
            grads.update(prefixed("fusion", g))
            dv = dzin[..., : self.config.vis_dim]
        g, _ = self.visual_encoder.backward_cached(c_enc, dv)
        grads.update(prefixed("encoder", g))
        return grads

    def _core_input(self, z, prev):
        if not self.config.prev_action:
            return z
        p = np.full(z.shape[:-1], -1) if prev is None else np.broadcast_to(prev, z.shape[:-1])
        onehot = (p[..., None] == np.arange(N_ACTIONS)).astype(np.float64)
        return np.concatenate([z, onehot], axis=-1)

    def step_batch(self, obs, goal, aux, h, prev=None):
        """One recurrent step for a batch: (logits (B, 4), values (B,), h').

        ``prev`` holds the previous action per row (-1 at episode start).
        """
        z, _ = self._trunk_forward(obs, goal, aux)
        out, h_new, _ = self.core.step(self._core_input(z, prev), h)
        return self.actor(out), self.critic(out)[..., 0], h_new

    def forward_sequence(self, obs, goal, aux, h0, masks, prev=None):
        """Inputs shaped (T, B, ...). Returns (logits (T, B, 4), values (T, B), cache)."""
        T, B = obs.shape[:2]
        flat = lambda a: None if a is None else a.reshape(T * B, -1)
        z, c_trunk = self._trunk_forward(flat(obs), flat(goal), flat(aux))
        xs = self._core_input(z.reshape(T, B, -1), prev)
        outs, _, c_core = self.core.forward_sequence(xs, h0, masks)
        o = outs.reshape(T * B, -1)
        logits, c_a = self.actor.forward_cached(o)
        values, c_c = self.critic.forward_cached(o)
        return logits.reshape(T, B, -1), values.reshape(T, B), (T, B, c_trunk, c_core, c_a, c_c)

    def backward_sequence(self, cache, d_logits, d_values) -> dict[str, np.ndarray]:
        T, B, c_trunk, c_core, c_a, c_c = cache
        g_a, do_a = self.actor.backward_cached(c_a, d_logits.reshape(T * B, -1))
        g_c, do_c = self.critic.backward_cached(c_c, d_values.reshape(T * B, 1))
        g_core, dz, _ = self.core.backward_sequence(c_core, (do_a + do_c).reshape(T, B, -1))
        dz = dz[..., : self.config.vis_dim]
        grads = self._trunk_backward(c_trunk, dz.reshape(T * B, -1))
        grads.update(prefixed("core", g_core))
        grads.update(prefixed("actor", g_a))
        grads.update(prefixed("critic", g_c))
        return grads

    # persistence -------------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        header = {"kind": "policy_agent", "fusion": self.fusion, "config": asdict(self.config)}
        save_checkpoint(path, header, self.params)

    @classmethod
    def load(cls, path: str | Path) -> "PolicyAgent":
        header, tensors = load_checkpoint(path)
        if header.get("kind") != "policy_agent":
            raise ValueError(f"{path} is not a policy checkpoint")
        agent = cls(header["fusion"], PolicyConfig(**header["config"]))
        for name, p in agent.params.items():
            p[...] = tensors[name]
        return agent

    def runner(self, house: House, episode: Episode, goal_obs: np.ndarray, expert, relation_source: str = "expert"):
        return _PolicyRunner(self, goal_obs, expert, relation_source)


def _check_obs(agent: PolicyAgent, *arrays) -> None:
    for a in arrays:
        if np.shape(a)[-1] != agent.config.obs_dim:
            raise ValueError(f"observation dim {np.shape(a)[-1]} != {agent.config.obs_dim}")


def encode_visual(agent: PolicyAgent, obs: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """v_vis from the concatenated observation and goal features."""
    _check_obs(agent, obs, goal)
    return agent.visual_encoder(np.concatenate([obs, goal], axis=-1))


def relation_features(
    agent: PolicyAgent, expert: RoomExpert | None, obs, goal, same_room=None, relation_source: str = "expert"
) -> np.ndarray | None:
    """Extra policy inputs supplied by the (frozen) expert, or by the simulator oracle."""
    if agent.fusion == "none":
        return None
    if agent.fusion == "explicit" and relation_source == "oracle":
        if same_room is None:
            raise ValueError("oracle relation flags need same_room")
        same = np.asarray(same_room, dtype=np.float64)
        return np.stack([1.0 - same, same], axis=-1)
    if expert is None:
        raise ValueError(f"fusion={agent.fusion!r} requires a room expert")
    if agent.fusion == "implicit":
        return np.concatenate([expert.embed(obs), expert.embed(goal)], axis=-1)
    return expert.relation(obs, goal)


def fuse(agent: PolicyAgent, v_vis, expert: RoomExpert | None, obs, goal, relation: np.ndarray | None = None) -> np.ndarray:
    """Policy input: v_vis (none), I_fusion output (implicit) or v_vis + 2-dim flag (explicit)."""
    if agent.fusion == "none":
        return v_vis
    if agent.fusion == "explicit":
        flag = relation if relation is not None else relation_features(agent, expert, obs, goal)
        return np.concatenate([v_vis, flag], axis=-1)
    aux = relation_features(agent, expert, obs, goal)
    return agent.fusion_net(np.concatenate([v_vis, aux], axis=-1))


def act(agent: PolicyAgent, fused: np.ndarray, h: np.ndarray, prev_action: int | None = None):
    """(action probabilities, value, h'). Explicit inputs pass through E_fusion first."""
    z = agent.fusion_net(fused) if agent.fusion == "explicit" else fused
    if np.shape(z)[-1] != agent.config.vis_dim:
        raise ValueError(f"policy input dim {np.shape(fused)[-1]} does not match fusion mode {agent.fusion!r}")
    prev = None if prev_action is None else np.asarray(prev_action)
    out, h_new, _ = agent.core.step(agent._core_input(z, prev), h)
    value = agent.critic(out)[..., 0]
    return softmax(agent.actor(out)), (float(value) if np.ndim(value) == 0 else value), h_new


# episodes ---------------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    scene_id: str
    episode_id: int
    difficulty: str
    actions: list[int]
    poses: list[Pose]
    rewards: list[float]
    success: bool
    path_length_taken: float
    shortest_path: float
    steps_used: int
    final_distance: float
    goal: Pose | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["poses"] = [[p.x, p.y, p.heading] for p in self.poses]
        d["goal"] = None if self.goal is None else [self.goal.x, self.goal.y, self.goal.heading]
        return d


class _PolicyRunner:
    def __init__(self, agent: PolicyAgent, goal_obs, expert, relation_source):
        self.agent = agent
        self.goal = goal_obs
        self.expert = expert
        self.source = relation_source
        self.h = agent.initial_state()
        self.prev = -1

    def __call__(self, obs, pose, same_room, greedy, rng) -> int:
        aux = relation_features(self.agent, self.expert, obs, self.goal, same_room, self.source)
        logits, _, self.h = self.agent.step_batch(obs, self.goal, aux, self.h, np.asarray(self.prev))
        if greedy:
            self.prev = int(np.argmax(logits))
        else:
            self.prev = int(rng.choice(N_ACTIONS, p=softmax(logits)))
        return self.prev


class RandomAgent:
    """Uniform over the four actions."""

    def runner(self, house, episode, goal_obs, expert=None, relation_source="expert"):
        return lambda obs, pose, same_room, greedy, rng: int(rng.integers(N_ACTIONS))


class ShortestPathAgent:
    """Follows the BFS distance field to the goal cell, then stops."""

    _DIRS = {0: (0, 1), 90: (1, 0), 180: (0, -1), 270: (-1, 0)}

    def runner(self, house, episode, goal_obs, expert=None, relation_source="expert"):
        field_ = house.distance_field(*episode.goal.cell)

        def choose(obs, pose, same_room, greedy, rng):
            r, c = pose.cell
            here = field_[r, c]
            if here == 0:
                return int(Action.STOP)
            best = None
            for heading, (dr, dc) in self._DIRS.items():
                if field_[r + dr, c + dc] == here - 1:
                    gap = heading_gap(pose.heading, heading)
                    if best is None or gap < best[0]:
                        best = (gap, heading)
            target = best[1]
            if pose.heading == target:
                return int(Action.MOVE_FORWARD)
            diff = (target - pose.heading) % 360
            return int(Action.TURN_RIGHT if diff <= 180 else Action.TURN_LEFT)

        return choose


def run_episode(
    agent,
    house: House,
    episode: Episode,
    expert: RoomExpert | None = None,
    greedy: bool = True,
    rng: np.random.Generator | None = None,
    max_steps: int = 200,
    reward: RewardConfig = RewardConfig(),
    relation_source: str = "expert",
    render_seed: int = 0,
) -> EpisodeResult:
    """Roll ``agent`` until STOP or the step cap. Success requires STOP within d_s."""
    rng = rng if rng is not None else np.random.default_rng([episode.episode_id, 0x5EED])
    goal = episode.goal
    goal_obs = render(house, goal, render_seed)
    goal_room = house.room_at(goal)
    field_ = house.distance_field(*goal.cell)
    choose = agent.runner(house, episode, goal_obs, expert, relation_source)
    pose = episode.start
    d = field_[pose.cell] * CELL
    alpha = heading_gap(pose.heading, goal.heading)
    shortest = d
    actions: list[int] = []
    poses = [pose]
    rewards: list[float] = []
    taken = 0.0
    success = False
    for _ in range(max_steps):
        obs = render(house, pose, render_seed)
        a = choose(obs, pose, house.room_at(pose) == goal_room, greedy, rng)
        actions.append(a)
        if a == Action.STOP:
            rewards.append(step_reward(StepContext(d, d, alpha, alpha), reward) + success_reward(d, alpha, reward))
            success = d <= reward.d_s
            break
        new = step(house, pose, a)
        taken += math.hypot(new.x - pose.x, new.y - pose.y)
        d_new = field_[new.cell] * CELL
        alpha_new = heading_gap(new.heading, goal.heading)
        rewards.append(step_reward(StepContext(d_new, d, alpha_new, alpha), reward))
        pose, d, alpha = new, d_new, alpha_new
        poses.append(pose)
    return EpisodeResult(
        scene_id=house.scene_id,
        episode_id=episode.episode_id,
        difficulty=episode.difficulty,
        actions=actions,
        poses=poses,
        rewards=rewards,
        success=bool(success),
        path_length_taken=float(taken),
        shortest_path=float(shortest),
        steps_used=len(actions),
        final_distance=float(d),
        goal=goal,
    )


# training ---------------------------------------------------------------------------------


@dataclass
class TrainConfig:
    n_envs: int = 32
    rollout_len: int = 64
    ppo_epochs: int = 4
    n_minibatches: int = 4
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    reward_scale: float = 0.1  # keeps value targets O(1) so critic gradients do not swamp the policy
    learning_rate: float = 1e-3
    max_grad_norm: float = 0.5
    max_steps: int = 200
    difficulties: tuple[str, ...] = DIFFICULTIES
    relation_source: str = "expert"
    seed: int = 0
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)

    def validate(self) -> None:
        if self.n_envs < 1 or self.rollout_len < 1 or self.ppo_epochs < 1:
            raise ValueError("n_envs, rollout_len and ppo_epochs must be >= 1")
        if not 1 <= self.n_minibatches <= self.n_envs:
            raise ValueError("n_minibatches must be in [1, n_envs]")
        if not self.reward_scale > 0:
            raise ValueError("reward_scale must be > 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.difficulties or any(d not in DIFFICULTIES for d in self.difficulties):
            raise ValueError(f"difficulties must be a non-empty subset of {DIFFICULTIES}")
        if self.relation_source not in RELATION_SOURCES:
            raise ValueError(f"relation_source must be one of {RELATION_SOURCES}")


class _Slot:
    __slots__ = ("house", "episode", "goal_obs", "goal_room", "field", "pose", "d", "alpha", "t")


class VecNav:
    """``n`` independent episodes advanced in lockstep; finished slots restart immediately."""

    def __init__(self, houses: Sequence[House], n: int, cfg: TrainConfig):
        self.houses = list(houses)
        self.cfg = cfg
        self.rng = np.random.default_rng([cfg.seed, 0xE4F])
        self.next_id = 0
        self.slots = [self._new_slot() for _ in range(n)]

    def _new_slot(self) -> _Slot:
        for _ in range(100):
            house = self.houses[int(self.rng.integers(len(self.houses)))]
            diff = self.cfg.difficulties[int(self.rng.integers(len(self.cfg.difficulties)))]
            self.next_id += 1
            try:
                ep = sample_episode(house, diff, seed=self.cfg.seed + 7919, episode_id=self.next_id)
            except EpisodeSamplingError:
                continue
            s = _Slot()
            s.house, s.episode, s.pose, s.t = house, ep, ep.start, 0
            s.goal_obs = render(house, ep.goal)
            s.goal_room = house.room_at(ep.goal)
            s.field = house.distance_field(*ep.goal.cell)
            s.d = s.field[ep.start.cell] * CELL
            s.alpha = heading_gap(ep.start.heading, ep.goal.heading)
            return s
        raise EpisodeSamplingError("could not sample a training episode")

    def observe(self):
        obs = np.stack([render(s.house, s.pose) for s in self.slots])
        goal = np.stack([s.goal_obs for s in self.slots])
        same = np.array([s.house.room_at(s.pose) == s.goal_room for s in self.slots])
        return obs, goal, same

    def step(self, actions: np.ndarray):
        """Returns (rewards, dones, finished) where finished lists (success, difficulty)."""
        rc = self.cfg.reward
        rewards = np.empty(len(self.slots))
        dones = np.zeros(len(self.slots), dtype=bool)
        finished = []
        for i, (s, a) in enumerate(zip(self.slots, actions)):
            s.t += 1
            if a == Action.STOP:
                rewards[i] = step_reward(StepContext(s.d, s.d, s.alpha, s.alpha), rc) + success_reward(s.d, s.alpha, rc)
                dones[i] = True
                finished.append((s.d <= rc.d_s, s.episode.difficulty))
            else:
                new = step(s.house, s.pose, a)
                d = s.field[new.cell] * CELL
                alpha = heading_gap(new.heading, s.episode.goal.heading)
                rewards[i] = step_reward(StepContext(d, s.d, alpha, s.alpha), rc)
                s.pose, s.d, s.alpha = new, d, alpha
                if s.t >= self.cfg.max_steps:
                    dones[i] = True
                    finished.append((False, s.episode.difficulty))
            if dones[i]:
                self.slots[i] = self._new_slot()
        return rewards, dones, finished


def _sample_actions(rng: np.random.Generator, logits: np.ndarray) -> np.ndarray:
    p = softmax(logits)
    u = rng.random((len(p), 1))
    return np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), N_ACTIONS - 1)


def ppo_loss_grads(logits, values, actions, old_logp, advantages, returns, cfg: TrainConfig):
    """Clipped-surrogate loss terms and their gradients w.r.t. logits and values."""
    n = actions.size
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    logp = np.take_along_axis(logp_all, actions[..., None], axis=-1)[..., 0]
    ratio = np.exp(logp - old_logp)
    s1 = ratio * advantages
    s2 = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * advantages
    policy_loss = -float(np.mean(np.minimum(s1, s2)))
    entropy = -(p * logp_all).sum(axis=-1)
    value_loss = 0.5 * float(np.mean((values - returns) ** 2))
    d_logp = np.where(s1 <= s2, -advantages * ratio, 0.0) / n
    onehot = np.eye(N_ACTIONS)[actions]
    d_logits = d_logp[..., None] * (onehot - p)
    d_logits += cfg.entropy_coef * p * (logp_all + entropy[..., None]) / n
    d_values = cfg.value_coef * (values - returns) / n
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * float(entropy.mean())
    return total, policy_loss, value_loss, float(entropy.mean()), d_logits, d_values


def gae(rewards, values, dones, last_value, gamma: float, lam: float):
    T = len(rewards)
    adv = np.zeros_like(rewards)
    running = np.zeros_like(last_value)
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        next_v = last_value if t == T - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv, adv + values


def train_policy(
    houses: Sequence[House],
    expert: RoomExpert | None,
    fusion: str,
    total_steps: int,
    config: TrainConfig | None = None,
    log_path: str | Path | None = None,
    diag_path: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[PolicyAgent, list[dict]]:
    """PPO over parallel episodes with the room expert frozen. Returns (agent, curves)."""
    cfg = config or TrainConfig()
    cfg.validate()
    if not houses:
        raise ValueError("need at least one training house")
    if total_steps < 0:
        raise ValueError("total_steps must be >= 0")
    agent = PolicyAgent(fusion, cfg.policy)
    if fusion == "implicit" or (fusion == "explicit" and cfg.relation_source == "expert"):
        if expert is None:
            raise ValueError(f"fusion={fusion!r} requires a room expert")
    history: list[dict] = []
    if total_steps == 0:
        return agent, history
    expert_sum = expert.checksum() if expert is not None else None
    B = cfg.n_envs
    envs = VecNav(houses, B, cfg)
    opt = Optimizer("adam", cfg.learning_rate, 0.0, max_grad_norm=cfg.max_grad_norm)
    rng = np.random.default_rng([cfg.seed, 0xAC7])
    params = agent.params
    h = agent.initial_state(B)
    done_prev = np.ones(B)
    prev = np.full(B, -1)
    recent: deque = deque(maxlen=100)
    steps = 0
    iteration = 0
    while steps < total_steps:
        T = min(cfg.rollout_len, -(-(total_steps - steps) // B))
        buf = {k: [] for k in ("obs", "goal", "aux", "prev", "act", "logp", "val", "rew", "done", "mask")}
        h_start = h * (1.0 - done_prev)[None, :, None]
        for _ in range(T):
            obs, goal, same = envs.observe()
            aux = relation_features(agent, expert, obs, goal, same, cfg.relation_source)
            mask = 1.0 - done_prev
            h = h * mask[None, :, None]
            logits, values, h = agent.step_batch(obs, goal, aux, h, prev)
            actions = _sample_actions(rng, logits)
            logp = log_softmax(logits)[np.arange(B), actions]
            rewards, dones, finished = envs.step(actions)
            recent.extend(ok for ok, _ in finished)
            for k, v in (("obs", obs), ("goal", goal), ("aux", aux), ("prev", prev), ("act", actions), ("logp", logp),
                         ("val", values), ("rew", rewards), ("done", dones.astype(float)), ("mask", mask)):
                buf[k].append(v)
            done_prev = dones.astype(float)
            prev = np.where(dones, -1, actions)
        obs, goal, same = envs.observe()
        aux = relation_features(agent, expert, obs, goal, same, cfg.relation_source)
        _, last_value, _ = agent.step_batch(obs, goal, aux, h * (1.0 - done_prev)[None, :, None], prev)
        R = {k: (np.stack(v) if v[0] is not None else None) for k, v in buf.items()}
        adv, ret = gae(cfg.reward_scale * R["rew"], R["val"], R["done"], last_value, cfg.gamma, cfg.gae_lambda)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        stats = []
        for _ in range(cfg.ppo_epochs):
            for idx in np.array_split(rng.permutation(B), cfg.n_minibatches):
                pick = lambda a: None if a is None else a[:, idx]
                logits, values, cache = agent.forward_sequence(
                    pick(R["obs"]), pick(R["goal"]), pick(R["aux"]), h_start[:, idx], pick(R["mask"]), pick(R["prev"])
                )
                total, pl, vl, ent, d_logits, d_values = ppo_loss_grads(
                    logits, values, pick(R["act"]), pick(R["logp"]), pick(adv), pick(ret), cfg
                )
                if not np.isfinite(total):
                    _abort(agent, diag_path, f"non-finite PPO loss at iteration {iteration}")
                grads = agent.backward_sequence(cache, d_logits, d_values)
                try:
                    opt.step(params, grads)
                except FloatingPointError as exc:
                    _abort(agent, diag_path, str(exc))
                stats.append((pl, vl, ent))
        steps += T * B
        pl, vl, ent = np.mean(stats, axis=0)
        row = {
            "iteration": iteration,
            "steps": steps,
            "mean_reward": float(R["rew"].mean()),
            "SR_rolling": float(np.mean(recent)) if recent else 0.0,
            "policy_loss": float(pl),
            "value_loss": float(vl),
            "entropy": float(ent),
        }
        history.append(row)
        if progress is not None:
            progress(row)
        log.debug("ppo %s", row)
        iteration += 1
    if expert is not None and expert.checksum() != expert_sum:
        raise RuntimeError("room expert parameters changed during policy training")
    if log_path is not None:
        write_curves(history, log_path)
    return agent, history


def _abort(agent: PolicyAgent, diag_path, reason: str):
    if diag_path is not None:
        agent.save(diag_path)
    raise TrainingDivergedError(f"{reason}; diagnostic checkpoint: {diag_path}")


CURVE_FIELDS = ["iteration", "steps", "mean_reward", "SR_rolling", "policy_loss", "value_loss", "entropy"]


def write_curves(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in CURVE_FIELDS})
