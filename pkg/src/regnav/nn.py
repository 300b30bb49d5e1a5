"""Small numpy neural-network substrate with explicit backward passes.

Everything works on single vectors or on leading batch dimensions. Layers
keep their parameters in a ``params`` dict of float64 arrays; gradients are
returned as dicts with the same keys, so optimizers can update in place.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1.0 - a * a)
    return g


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(z, axis))


class BackwardBeforeForward(RuntimeError):
    pass


class DenseNet:
    """Multi-layer perceptron: affine maps each followed by an activation."""

    def __init__(
        self,
        layer_sizes: list[int],
        activations: list[str] | str = "relu",
        seed: int | np.random.Generator = 0,
        out_activation: str = "identity",
    ):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        n_layers = len(layer_sizes) - 1
        if isinstance(activations, str):
            activations = [activations] * (n_layers - 1) + [out_activation]
        if len(activations) != n_layers or any(a not in ACTIVATIONS for a in activations):
            raise ValueError(f"bad activations {activations} for {n_layers} layers")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.layer_sizes = list(layer_sizes)
        self.activations = list(activations)
        self.params: dict[str, np.ndarray] = {}
        for i in range(n_layers):
            fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
            gain = np.sqrt(2.0) if activations[i] == "relu" else 1.0
            bound = gain * np.sqrt(3.0 / fan_in)
            self.params[f"W{i}"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            self.params[f"b{i}"] = np.zeros(fan_out)
        self._cache = None

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def forward_cached(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.layer_sizes[0]:
            raise ValueError(f"input dim {x.shape[-1]} != {self.layer_sizes[0]}")
        cache = [x]
        a = x
        for i, act in enumerate(self.activations):
            z = a @ self.params[f"W{i}"] + self.params[f"b{i}"]
            a = _act(act, z)
            cache.append((z, a))
        return a, cache

    def backward_cached(self, cache, grad_out: np.ndarray):
        """Return (parameter gradients, gradient w.r.t. the input)."""
        grads: dict[str, np.ndarray] = {}
        g = np.asarray(grad_out, dtype=np.float64)
        for i in range(self.n_layers - 1, -1, -1):
            z, a = cache[i + 1]
            a_in = cache[0] if i == 0 else cache[i][1]
            gz = _act_grad(self.activations[i], z, a, g)
            if gz.ndim == 1:
                grads[f"W{i}"] = np.outer(a_in, gz)
                grads[f"b{i}"] = gz.copy()
            else:
                a2 = a_in.reshape(-1, a_in.shape[-1])
                gz2 = gz.reshape(-1, gz.shape[-1])
                grads[f"W{i}"] = a2.T @ gz2
                grads[f"b{i}"] = gz2.sum(axis=0)
            g = gz @ self.params[f"W{i}"].T
        return grads, g

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, self._cache = self.forward_cached(x)
        return y

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def backward(self, grad_out: np.ndarray):
        if self._cache is None:
            raise BackwardBeforeForward("backward() called before forward()")
        return self.backward_cached(self._cache, grad_out)

    def state(self) -> dict:
        return {"layer_sizes": self.layer_sizes, "activations": self.activations}


class GRUCell:
    """Gated recurrent unit: h' = (1 - z) * h + z * n.

    Gate blocks in the stacked weight matrices are ordered reset, update,
    candidate.
    """

    def __init__(self, input_size: int, hidden_size: int, seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.input_size = input_size
        self.hidden_size = hidden_size
        k = 1.0 / np.sqrt(hidden_size)
        self.params = {
            "Wx": rng.uniform(-k, k, (input_size, 3 * hidden_size)),
            "Wh": rng.uniform(-k, k, (hidden_size, 3 * hidden_size)),
            "bx": np.zeros(3 * hidden_size),
            "bh": np.zeros(3 * hidden_size),
        }

    def forward_cached(self, x: np.ndarray, h: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64)
        if x.shape[-1] != self.input_size or h.shape[-1] != self.hidden_size:
            raise ValueError(
                f"GRU expects input {self.input_size} / hidden {self.hidden_size}, got {x.shape[-1]} / {h.shape[-1]}"
            )
        H = self.hidden_size
        p = self.params
        gx = x @ p["Wx"] + p["bx"]
        gh = h @ p["Wh"] + p["bh"]
        r = sigmoid(gx[..., :H] + gh[..., :H])
        z = sigmoid(gx[..., H : 2 * H] + gh[..., H : 2 * H])
        hn = gh[..., 2 * H :]
        n = np.tanh(gx[..., 2 * H :] + r * hn)
        h_new = (1.0 - z) * h + z * n
        return h_new, (x, h, r, z, n, hn)

    def backward_cached(self, cache, grad_h_new: np.ndarray):
        """Return (parameter gradients, dL/dx, dL/dh)."""
        x, h, r, z, n, hn = cache
        g = grad_h_new
        dz = g * (n - h)
        dn = g * z
        dh = g * (1.0 - z)
        dan = dn * (1.0 - n * n)
        dr = dan * hn
        dhn = dan * r
        dar = dr * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgx = np.concatenate([dar, daz, dan], axis=-1)
        dgh = np.concatenate([dar, daz, dhn], axis=-1)
        if dgx.ndim == 1:
            grads = {"Wx": np.outer(x, dgx), "Wh": np.outer(h, dgh), "bx": dgx.copy(), "bh": dgh.copy()}
        else:
            x2, h2 = x.reshape(-1, x.shape[-1]), h.reshape(-1, h.shape[-1])
            dgx2, dgh2 = dgx.reshape(-1, dgx.shape[-1]), dgh.reshape(-1, dgh.shape[-1])
            grads = {"Wx": x2.T @ dgx2, "Wh": h2.T @ dgh2, "bx": dgx2.sum(0), "bh": dgh2.sum(0)}
        dx = dgx @ self.params["Wx"].T
        dh = dh + dgh @ self.params["Wh"].T
        return grads, dx, dh

    def __call__(self, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        return self.forward_cached(x, h)[0]


def recurrent_step(cell: GRUCell, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    return cell(x, h)


class GRUStack:
    """Stack of GRU cells unrolled over (T, B, ...) sequences with episode resets."""

    def __init__(self, input_size: int, hidden_size: int, n_layers: int = 2, seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.hidden_size = hidden_size
        self.cells = [GRUCell(input_size if i == 0 else hidden_size, hidden_size, rng) for i in range(n_layers)]

    @property
    def n_layers(self) -> int:
        return len(self.cells)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"l{i}.{k}": v for i, c in enumerate(self.cells) for k, v in c.params.items()}

    def initial_state(self, batch: int | None = None) -> np.ndarray:
        shape = (self.n_layers, self.hidden_size) if batch is None else (self.n_layers, batch, self.hidden_size)
        return np.zeros(shape)

    def step(self, x: np.ndarray, hs: np.ndarray):
        """One time step; returns (top output, new hidden stack, caches)."""
        new = np.empty_like(hs)
        caches = []
        inp = x
        for i, cell in enumerate(self.cells):
            h_new, c = cell.forward_cached(inp, hs[i])
            new[i] = h_new
            caches.append(c)
            inp = h_new
        return inp, new, caches

    def forward_sequence(self, xs: np.ndarray, h0: np.ndarray, masks: np.ndarray | None = None):
        """xs: (T, B, in); h0: (L, B, H); masks[t] = 0 resets the state before step t."""
        T = xs.shape[0]
        hs = h0
        outs = np.empty((T,) + xs.shape[1:-1] + (self.hidden_size,))
        caches = []
        for t in range(T):
            if masks is not None:
                hs = hs * masks[t][None, :, None]
            out, hs, c = self.step(xs[t], hs)
            outs[t] = out
            caches.append(c)
        return outs, hs, (caches, masks)

    def backward_sequence(self, cache, d_outs: np.ndarray):
        """BPTT. Returns (parameter gradients, d xs, d h0)."""
        caches, masks = cache
        T = len(caches)
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        L = self.n_layers
        dxs = None
        dh = [np.zeros_like(caches[0][i][1]) for i in range(L)]
        for t in range(T - 1, -1, -1):
            g_top = d_outs[t]
            for i in range(L - 1, -1, -1):
                gi, dx, dhi = self.cells[i].backward_cached(caches[t][i], g_top + dh[i])
                for k, v in gi.items():
                    grads[f"l{i}.{k}"] += v
                dh[i] = dhi
                g_top = dx
            if dxs is None:
                dxs = np.empty((T,) + g_top.shape)
            dxs[t] = g_top
            if masks is not None:
                for i in range(L):
                    dh[i] = dh[i] * masks[t][:, None]
        return grads, dxs, np.stack(dh)


# losses ----------------------------------------------------------------------------


def l2_normalize(x: np.ndarray, eps: float = 1e-12):
    """Return (x / ||x||, norms) along the last axis."""
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + eps)
    return x / norm, norm


def l2_normalize_backward(y: np.ndarray, norm: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return (gy - y * np.sum(gy * y, axis=-1, keepdims=True)) / norm


def infonce_cluster_loss(feature: np.ndarray, centroids: np.ndarray, positive_index, tau: float):
    """Cluster-level contrastive loss -log softmax(f . phi / tau)[positive].

    ``feature`` may be (d,) or (B, d) with ``positive_index`` an int or (B,)
    array; the batched loss is the mean. Returns (loss, d_feature, d_centroids).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.ndim != 2 or centroids.shape[0] == 0:
        raise ValueError("need at least one centroid")
    f = np.asarray(feature, dtype=np.float64)
    single = f.ndim == 1
    F = f[None] if single else f
    pos = np.atleast_1d(np.asarray(positive_index, dtype=np.int64))
    K = centroids.shape[0]
    if np.any(pos < 0) or np.any(pos >= K):
        raise ValueError(f"positive index out of range [0, {K})")
    logits = F @ centroids.T / tau
    logp = log_softmax(logits)
    B = F.shape[0]
    loss = -float(np.mean(logp[np.arange(B), pos]))
    g = np.exp(logp)
    g[np.arange(B), pos] -= 1.0
    g /= tau * B
    d_feature = g @ centroids
    d_centroids = g.T @ F
    return loss, (d_feature[0] if single else d_feature), d_centroids


def bce_relation_loss(output, label, reduction: str = "mean"):
    """Relation cross-entropy.

    ``output`` is either a 2-way logit vector (or (B, 2) batch), class 1
    meaning "same room", or a scalar probability of "same room". Returns
    (loss, gradient w.r.t. ``output``).
    """
    out = np.asarray(output, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    if out.ndim == 0:
        p = float(np.clip(out, 1e-12, 1 - 1e-12))
        loss = -(y * np.log(p) + (1 - y) * np.log(1 - p))
        grad = -(y / p) + (1 - y) / (1 - p)
        return float(loss), float(grad)
    single = out.ndim == 1
    Z = out[None] if single else out
    Y = np.atleast_1d(y).astype(np.int64)
    logp = log_softmax(Z)
    B = Z.shape[0]
    losses = -logp[np.arange(B), Y]
    g = np.exp(logp)
    g[np.arange(B), Y] -= 1.0
    if reduction == "mean":
        loss = float(losses.mean())
        g /= B
    elif reduction == "sum":
        loss = float(losses.sum())
    else:
        raise ValueError(reduction)
    return loss, (g[0] if single else g)


# optimization ---------------------------------------------------------------------


@dataclass
class Optimizer:
    """SGD or Adam; weight decay is added to the gradient (L2)."""

    kind: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        if self.max_grad_norm is not None:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = min(1.0, self.max_grad_norm / (total + 1e-12))
        else:
            scale = 1.0
        self.t += 1
        lr = self.learning_rate
        for name, g in grads.items():
            p = params[name]
            g = g * scale
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.kind == "sgd":
                p -= lr * g
            else:
                m = self.m.get(name)
                if m is None:
                    m = self.m[name] = np.zeros_like(p)
                    self.v[name] = np.zeros_like(p)
                v = self.v[name]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                mhat = m / (1 - self.beta1**self.t)
                vhat = v / (1 - self.beta2**self.t)
                p -= lr * mhat / (np.sqrt(vhat) + self.eps)
            if not np.all(np.isfinite(p)):
                raise FloatingPointError(f"non-finite parameter {name} after update")


def prefixed(prefix: str, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


# checkpoints --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "regnav-ckpt/1"


def encode_checkpoint(header: dict, tensors: Mapping[str, np.ndarray]) -> bytes:
    """JSON document: header, tensor table and base64 little-endian float32 blob."""
    table = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += int(arr.size)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "header": header,
        "tensors": table,
        "blob": base64.b64encode(b"".join(chunks)).decode("ascii"),
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    doc = json.loads(data)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint")
    flat = np.frombuffer(base64.b64decode(doc["blob"]), dtype="<f4")
    tensors = {}
    for t in doc["tensors"]:
        seg = flat[t["offset"] : t["offset"] + t["count"]]
        tensors[t["name"]] = seg.astype(np.float64).reshape(tuple(t["shape"]))
    return doc["header"], tensors


def save_checkpoint(path: str | Path, header: dict, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(header, tensors))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
