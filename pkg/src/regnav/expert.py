"""Room expert: style encoder + relation network trained from unlabeled views.

Pseudo-labels come from InfoMap clustering of style-embedding distances
refined by pairwise must-link / cannot-link constraints. Training minimizes
cluster-contrastive loss against a centroid memory plus the relation
cross-entropy.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from regnav.data import TrainingView
from regnav.infomap import PseudoLabeling, cluster_centroids, infomap_cluster
from regnav.nn import (
    DenseNet,
    Optimizer,
    bce_relation_loss,
    infonce_cluster_loss,
    l2_normalize,
    l2_normalize_backward,
    load_checkpoint,
    save_checkpoint,
    softmax,
)
from regnav.sim import D_OBS

log = logging.getLogger(__name__)

MUST_LINK = 1.0
PROBABLY_SAME = 0.5
PROBABLY_DIFFERENT = -0.5
CANNOT_LINK = -1.0


class ClusterCollapseError(RuntimeError):
    pass


# constraints and refinement ------------------------------------------------------------


def build_constraints(view: TrainingView) -> np.ndarray:
    """Pairwise room-relation prior M with entries in {-1, -0.5, 0, 0.5, 1}.

    Different scene: -1. Same capture location (scene, episode, start/target):
    +1. Same episode, different location: +0.5 if easy, -0.5 if hard, else 0.
    """
    n = len(view)
    if n == 0:
        raise ValueError("empty dataset")
    _, scene = np.unique(np.asarray(view.scene_ids), return_inverse=True)
    ep = np.asarray(view.episode_ids)
    _, tag = np.unique(np.asarray(view.location_tags), return_inverse=True)
    diff = np.asarray(view.difficulties)
    same_scene = scene[:, None] == scene[None, :]
    same_ep = same_scene & (ep[:, None] == ep[None, :])
    same_loc = same_ep & (tag[:, None] == tag[None, :])
    easy = diff == "easy"
    hard = diff == "hard"
    M = np.zeros((n, n))
    other_loc = same_ep & ~same_loc
    M[other_loc & easy[:, None] & easy[None, :]] = PROBABLY_SAME
    M[other_loc & hard[:, None] & hard[None, :]] = PROBABLY_DIFFERENT
    M[same_loc] = MUST_LINK
    M[~same_scene] = CANNOT_LINK
    return M


def adaptive_gamma(D: np.ndarray, scale: float = 0.25) -> float:
    """Refinement strength: ``scale`` times the median pairwise distance."""
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    upper = D[np.triu_indices(n, k=1)]
    if not np.any(upper > 0):
        raise ClusterCollapseError("all pairwise distances are zero (collapsed embeddings)")
    return float(scale * np.median(upper))


def refine_distances(D: np.ndarray, M: np.ndarray, gamma: float) -> np.ndarray:
    """D - gamma * M, clamped at zero and symmetrized."""
    D = np.asarray(D, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if D.shape != M.shape or D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError(f"shape mismatch: D {D.shape} vs M {M.shape}")
    R = np.maximum(D - gamma * M, 0.0)
    return 0.5 * (R + R.T)


def pairwise_distances(E: np.ndarray) -> np.ndarray:
    sq = np.sum(E * E, axis=1)
    D2 = sq[:, None] + sq[None, :] - 2.0 * E @ E.T
    D = np.sqrt(np.maximum(D2, 0.0))
    np.fill_diagonal(D, 0.0)
    return 0.5 * (D + D.T)


# model --------------------------------------------------------------------------------


@dataclass
class ExpertConfig:
    emb_dim: int = 16
    hidden: int = 64
    tau: float = 0.05
    omega: float = 1.0
    k_neighbors: int = 30
    gamma_scale: float = 0.25
    refine: bool = True
    learning_rate: float = 3e-3
    weight_decay: float = 5e-4
    batch_size: int = 64
    centroid_momentum: float = 0.2
    infomap_trials: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.gamma_scale < 0:
            raise ValueError("gamma_scale must be >= 0")
        if not 0 <= self.centroid_momentum < 1:
            raise ValueError("centroid_momentum must be in [0, 1)")
        if self.batch_size < 1 or self.emb_dim < 1 or self.hidden < 1:
            raise ValueError("sizes must be positive")


class RoomExpert:
    """Style encoder E_s (d_obs -> hidden -> emb, L2-normalized) and relation net E_r."""

    def __init__(self, config: ExpertConfig | None = None, d_obs: int = D_OBS):
        self.config = config or ExpertConfig()
        c = self.config
        rng = np.random.default_rng([c.seed, 0xE5])
        self.d_obs = d_obs
        self.style_encoder = DenseNet([d_obs, c.hidden, c.emb_dim], "relu", rng)
        self.relation_net = DenseNet([2 * c.emb_dim, c.hidden, 2], "relu", rng)
        self.memory = PseudoLabeling(np.zeros(0, dtype=np.int64), 0, np.zeros((0, c.emb_dim)))

    def embed(self, features: np.ndarray) -> np.ndarray:
        raw = self.style_encoder(np.asarray(features, dtype=np.float64))
        return l2_normalize(raw)[0]

    def relation_from_embeddings(self, e_obs: np.ndarray, e_goal: np.ndarray) -> np.ndarray:
        logits = self.relation_net(np.concatenate([e_obs, e_goal], axis=-1))
        return softmax(logits)

    def relation(self, obs: np.ndarray, goal: np.ndarray) -> np.ndarray:
        """2-way distribution [P(different room), P(same room)]."""
        return self.relation_from_embeddings(self.embed(obs), self.embed(goal))

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"style.{k}": v for k, v in self.style_encoder.params.items()}
        out.update({f"relation.{k}": v for k, v in self.relation_net.params.items()})
        if self.memory.centroids is not None and len(self.memory.centroids):
            out["memory.centroids"] = self.memory.centroids
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.tensors().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        header = {"kind": "room_expert", "d_obs": self.d_obs, "config": asdict(self.config), "K": self.memory.K}
        save_checkpoint(path, header, self.tensors())

    @classmethod
    def load(cls, path: str | Path) -> "RoomExpert":
        header, tensors = load_checkpoint(path)
        if header.get("kind") != "room_expert":
            raise ValueError(f"{path} is not a room expert checkpoint")
        expert = cls(ExpertConfig(**header["config"]), header["d_obs"])
        for k in expert.style_encoder.params:
            expert.style_encoder.params[k] = tensors[f"style.{k}"]
        for k in expert.relation_net.params:
            expert.relation_net.params[k] = tensors[f"relation.{k}"]
        cents = tensors.get("memory.centroids", np.zeros((0, expert.config.emb_dim)))
        expert.memory = PseudoLabeling(np.zeros(0, dtype=np.int64), int(header["K"]), cents)
        return expert


def predict_relation(expert: RoomExpert, obs: np.ndarray, goal: np.ndarray) -> tuple[np.ndarray, bool]:
    flag = expert.relation(obs, goal)
    return flag, bool(np.argmax(flag) == 1)


# training -------------------------------------------------------------------------------


def pseudo_label(expert: RoomExpert, view: TrainingView, M: np.ndarray | None, seed: int = 0) -> tuple[PseudoLabeling, np.ndarray]:
    """Embed, (optionally) refine distances with M, cluster. Returns (labels, embeddings)."""
    c = expert.config
    E = expert.embed(view.features)
    D = pairwise_distances(E)
    if c.refine and M is not None:
        D = refine_distances(D, M, adaptive_gamma(D, c.gamma_scale))
    pl = infomap_cluster(D, c.k_neighbors, seed=seed, trials=c.infomap_trials)
    return pl.with_centroids(E), E


def relation_targets(labels: np.ndarray, M: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Same pseudo-cluster => 1, overridden by hard constraints (M=+1 => 1, M=-1 => 0)."""
    y = (labels[i] == labels[j]).astype(np.int64)
    m = M[i, j]
    y[m == MUST_LINK] = 1
    y[m == CANNOT_LINK] = 0
    return y


def _sample_partners(rng, labels, scene, batch, members, scene_members) -> np.ndarray:
    partners = np.empty(len(batch), dtype=np.int64)
    u = rng.random(len(batch))
    n = len(labels)
    for t, i in enumerate(batch):
        if u[t] < 0.5:
            pool = members[labels[i]]
        elif u[t] < 0.85:
            pool = scene_members[scene[i]]
        else:
            partners[t] = rng.integers(n)
            continue
        partners[t] = pool[rng.integers(len(pool))]
    return partners


def expert_epoch(
    expert: RoomExpert,
    view: TrainingView,
    M: np.ndarray,
    memory: PseudoLabeling,
    opt: Optimizer,
    rng: np.random.Generator,
) -> dict:
    """One pass of minibatch updates against fixed pseudo labels; updates centroids in place."""
    c = expert.config
    X = view.features
    labels = memory.labels
    centroids = memory.centroids
    _, scene = np.unique(np.asarray(view.scene_ids), return_inverse=True)
    members = [np.flatnonzero(labels == k) for k in range(memory.K)]
    scene_members = [np.flatnonzero(scene == s) for s in range(scene.max() + 1)]
    perm = rng.permutation(len(X))
    sums = {"cluster": 0.0, "pred": 0.0, "n": 0}
    es, er = expert.style_encoder, expert.relation_net
    for start in range(0, len(perm), c.batch_size):
        bi = perm[start : start + c.batch_size]
        bj = _sample_partners(rng, labels, scene, bi, members, scene_members)
        both = np.concatenate([bi, bj])
        raw, cache_s = es.forward_cached(X[both])
        f, norm = l2_normalize(raw)
        B = len(bi)
        l_cluster, df_anchor, _ = infonce_cluster_loss(f[:B], centroids, labels[bi], c.tau)
        df = np.zeros_like(f)
        df[:B] = df_anchor
        grads = {}
        l_pred = 0.0
        if c.omega > 0:
            fi, fj = f[:B], f[B:]
            pair_in = np.concatenate([np.concatenate([fi, fj], 1), np.concatenate([fj, fi], 1)])
            y = relation_targets(labels, M, bi, bj)
            logits, cache_r = er.forward_cached(pair_in)
            l_pred, dlogits = bce_relation_loss(logits, np.concatenate([y, y]))
            g_r, d_in = er.backward_cached(cache_r, c.omega * dlogits)
            grads.update({f"relation.{k}": v for k, v in g_r.items()})
            e = c.emb_dim
            df[:B] += d_in[:B, :e] + d_in[B:, e:]
            df[B:] += d_in[:B, e:] + d_in[B:, :e]
        g_s, _ = es.backward_cached(cache_s, l2_normalize_backward(f, norm, df))
        grads.update({f"style.{k}": v for k, v in g_s.items()})
        params = {f"style.{k}": v for k, v in es.params.items()}
        params.update({f"relation.{k}": v for k, v in er.params.items()})
        opt.step(params, grads)
        # centroid memory: momentum update toward the batch mean of each cluster
        fb = f[:B]
        for k in np.unique(labels[bi]):
            mean = fb[labels[bi] == k].mean(axis=0)
            v = c.centroid_momentum * centroids[k] + (1.0 - c.centroid_momentum) * mean
            centroids[k] = v / max(np.linalg.norm(v), 1e-12)
        sums["cluster"] += l_cluster * B
        sums["pred"] += l_pred * B
        sums["n"] += B
    n = max(sums["n"], 1)
    return {"L_cluster": sums["cluster"] / n, "L_pred": sums["pred"] / n}


def total_loss(expert: RoomExpert, view: TrainingView, M: np.ndarray, memory: PseudoLabeling, seed: int = 0) -> float:
    """L_cluster + omega * L_pred on the full dataset with deterministic partners."""
    c = expert.config
    rng = np.random.default_rng(seed)
    E = expert.embed(view.features)
    l_cluster, _, _ = infonce_cluster_loss(E, memory.centroids, memory.labels, c.tau)
    _, scene = np.unique(np.asarray(view.scene_ids), return_inverse=True)
    members = [np.flatnonzero(memory.labels == k) for k in range(memory.K)]
    scene_members = [np.flatnonzero(scene == s) for s in range(scene.max() + 1)]
    idx = np.arange(len(E))
    j = _sample_partners(rng, memory.labels, scene, idx, members, scene_members)
    logits = expert.relation_net(np.concatenate([E[idx], E[j]], 1))
    l_pred, _ = bce_relation_loss(logits, relation_targets(memory.labels, M, idx, j))
    return l_cluster + c.omega * l_pred


def train_expert(
    view: TrainingView,
    epochs: int,
    config: ExpertConfig | None = None,
    oracle: Callable[[RoomExpert], float] | None = None,
    log_path: str | Path | None = None,
) -> tuple[RoomExpert, list[dict]]:
    """Alternate InfoMap pseudo-labeling and joint contrastive/relation updates.

    ``oracle`` (optional) scores the expert against ground truth for the
    training-curve log only; it never influences training.
    """
    config = config or ExpertConfig()
    config.validate()
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    expert = RoomExpert(config, view.features.shape[1])
    M = build_constraints(view)
    opt = Optimizer("adam", config.learning_rate, config.weight_decay)
    rng = np.random.default_rng([config.seed, 0x7A11])
    history: list[dict] = []
    collapsed = 0
    for epoch in range(epochs):
        memory, _ = pseudo_label(expert, view, M, seed=config.seed * 1000 + epoch)
        collapsed = collapsed + 1 if memory.K == 1 else 0
        if collapsed >= 3:
            raise ClusterCollapseError(f"pseudo labels collapsed to a single cluster for 3 epochs (epoch {epoch})")
        stats = expert_epoch(expert, view, M, memory, opt, rng)
        expert.memory = memory
        row = {"epoch": epoch, **stats, "K": memory.K}
        if oracle is not None:
            row["oracle_accuracy"] = float(oracle(expert))
        history.append(row)
        log.info("expert epoch %d: %s", epoch, row)
    if log_path is not None:
        write_history(history, log_path)
    return expert, history


def write_history(history: list[dict], path: str | Path) -> None:
    fields = ["epoch", "L_cluster", "L_pred", "K", "oracle_accuracy"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k, "") for k in fields})


# evaluation against simulator ground truth ------------------------------------------------


def relation_pairs(room_keys: list[tuple[str, int]], n_pairs: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Balanced same-scene pairs: half same room, half different room."""
    rng = np.random.default_rng(seed)
    keys = np.array([f"{s}|{r}" for s, r in room_keys])
    scenes = np.array([s for s, _ in room_keys])
    by_room = {k: np.flatnonzero(keys == k) for k in np.unique(keys)}
    by_scene = {s: np.flatnonzero(scenes == s) for s in np.unique(scenes)}
    I, J, Y = [], [], []
    n = len(keys)
    tries = 0
    while len(I) < n_pairs and tries < 100 * n_pairs:
        tries += 1
        i = int(rng.integers(n))
        want_same = len(I) % 2 == 0
        pool = by_room[keys[i]] if want_same else by_scene[scenes[i]]
        j = int(pool[rng.integers(len(pool))])
        if j == i or (keys[i] == keys[j]) != want_same:
            continue
        I.append(i)
        J.append(j)
        Y.append(int(want_same))
    return np.array(I), np.array(J), np.array(Y)


def relation_accuracy(expert: RoomExpert, features: np.ndarray, room_keys, n_pairs: int = 2000, seed: int = 0) -> float:
    I, J, Y = relation_pairs(room_keys, n_pairs, seed)
    E = expert.embed(features)
    p = expert.relation_from_embeddings(E[I], E[J])
    return float(np.mean((p[:, 1] > 0.5) == (Y == 1)))
