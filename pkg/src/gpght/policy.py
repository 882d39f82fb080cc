"""History-aware decision Transformer policy over next edges."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as te
from .tensor import ParameterStore, Tensor

VARIANTS = ("full", "no_history", "linear")


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    num_edges: int
    num_nodes: int
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_history_len: int = 64
    variant: str = "full"
    ffn_mult: int = 1
    # split the edge/time cross-attention into heads (no projections either way)
    history_heads: bool = True
    # add the time embedding after every encoder block, not only the first
    residual_every_block: bool = True
    # half-width of the uniform init of the 1 -> d maps for the time and budget scalars
    scalar_init: float = 3.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.max_history_len < 1:
            raise ValueError("max_history_len must be >= 1")
        if self.num_layers < 1 or self.num_edges < 1 or self.num_nodes < 1:
            raise ValueError("num_layers, num_edges and num_nodes must be positive")
        if not self.scalar_init > 0:
            raise ValueError("scalar_init must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


DESK = dict(embed_dim=64, num_layers=2, num_heads=4)
PAPER_SCALE = dict(embed_dim=256, num_layers=4, num_heads=8)


@dataclass(frozen=True)
class TrajectoryState:
    """Policy input: traversed edges, their realised times, position, goal and budget."""

    edges: tuple[int, ...]
    times: tuple[float, ...]
    current: int
    destination: int
    remaining_budget: float
    budget_total: float

    def __post_init__(self):
        if len(self.edges) != len(self.times):
            raise StateError("edge and time histories must have equal length")
        if abs(self.remaining_budget - (self.budget_total - float(np.sum(self.times)))) > 1e-9 * max(
                1.0, abs(self.budget_total)):
            raise StateError("remaining budget must equal total budget minus elapsed time")

    @classmethod
    def start(cls, origin: int, destination: int, budget: float) -> "TrajectoryState":
        return cls((), (), origin, destination, float(budget), float(budget))

    def advance(self, edge: int, head: int, time: float) -> "TrajectoryState":
        return TrajectoryState(self.edges + (edge,), self.times + (float(time),), head,
                               self.destination, self.budget_total - float(np.sum(self.times + (float(time),))),
                               self.budget_total)


@dataclass
class StateBatch:
    """Right-padded batch of states.  ``times`` holds raw travel times."""

    edges: np.ndarray     # (B, K) int
    times: np.ndarray     # (B, K) float
    lengths: np.ndarray   # (B,) int
    current: np.ndarray   # (B,) int
    destination: np.ndarray
    remaining: np.ndarray  # (B,) float

    @classmethod
    def from_states(cls, states: Sequence[TrajectoryState]) -> "StateBatch":
        b = len(states)
        k = max((len(s.edges) for s in states), default=0)
        edges = np.zeros((b, k), dtype=np.int64)
        times = np.zeros((b, k))
        for i, s in enumerate(states):
            edges[i, :len(s.edges)] = s.edges
            times[i, :len(s.times)] = s.times
        return cls(edges, times, np.array([len(s.edges) for s in states], dtype=np.int64),
                   np.array([s.current for s in states], dtype=np.int64),
                   np.array([s.destination for s in states], dtype=np.int64),
                   np.array([s.remaining_budget for s in states], dtype=np.float64))

    def __len__(self):
        return int(self.lengths.shape[0])


@dataclass
class ActionDistribution:
    probs: np.ndarray
    feasible_mask: np.ndarray


@dataclass
class Embedded:
    edges: Tensor      # (B, K, d) edge stream (BOS at l = 0)
    times: Tensor      # (B, K, d) travel-time stream
    positional: np.ndarray  # (K, d)
    key_mask: np.ndarray    # (B, K) bool
    query: Tensor      # (B, 1, d) current + destination + budget + position-l


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : dim // 2])
    return table


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return te.add(te.matmul(x, w), b)


class Policy:
    """pi(next edge | trajectory state) with learnable parameters in ``self.params``.

    ``edge_mean``/``edge_std`` standardise realised times per edge before the
    time embedding; ``budget_scale`` (normally t_LET) normalises the remaining
    budget.
    """

    def __init__(self, config: PolicyConfig, outgoing_mask, edge_mean, edge_std, budget_scale: float,
                 seed: int = 0):
        self.config = config
        self.outgoing_mask = np.asarray(outgoing_mask, dtype=bool)
        if self.outgoing_mask.shape != (config.num_nodes, config.num_edges):
            raise ValueError("outgoing mask must be num_nodes x num_edges")
        self.edge_mean = np.asarray(edge_mean, dtype=np.float64)
        self.edge_std = np.asarray(edge_std, dtype=np.float64)
        self.budget_scale = float(budget_scale)
        if not self.budget_scale > 0:
            raise ValueError("budget_scale must be positive")
        self.seed = seed
        self.params = ParameterStore()
        self._pe = sinusoid_table(config.max_history_len + 1, config.embed_dim)
        self._init_params(np.random.default_rng(seed))

    @classmethod
    def for_network(cls, net, budget_scale: float, seed: int = 0, **config) -> "Policy":
        config.setdefault("max_history_len", 4 * net.num_nodes)
        cfg = PolicyConfig(num_edges=net.num_edges, num_nodes=net.num_nodes, **config)
        return cls(cfg, net.outgoing_mask, net.mu, net.std, budget_scale, seed)

    # -- parameters ------------------------------------------------------------

    def _init_params(self, rng):
        c = self.config
        d = c.embed_dim
        bound = 1.0 / np.sqrt(d)
        p = self.params

        def weight(name, *shape):
            p.add(name, rng.uniform(-bound, bound, size=shape))

        def zeros(name, *shape):
            p.add(name, np.zeros(shape))

        weight("edge_embed", c.num_edges + 1, d)  # last row is the begin-of-trajectory token
        weight("node_embed", c.num_nodes, d)
        weight("bos_time", d)
        # A scalar feature fans in from one input, so the d-wide bound would leave
        # the travel-time signal buried under the d-dimensional embeddings.
        p.add("time_w", rng.uniform(-c.scalar_init, c.scalar_init, size=(1, d)))
        zeros("time_b", d)
        p.add("budget_w", rng.uniform(-c.scalar_init, c.scalar_init, size=(1, d)))
        zeros("budget_b", d)
        if c.variant == "linear":
            weight("linear_w", 2 * d, c.num_edges)
            zeros("linear_b", c.num_edges)
            return
        for stack in ("enc", "dec"):
            for layer in range(c.num_layers):
                pre = f"{stack}{layer}."
                for proj in ("q", "k", "v", "o"):
                    weight(pre + f"w{proj}", d, d)
                    zeros(pre + f"b{proj}", d)
                for ln in ("ln1", "ln2"):
                    p.add(pre + ln + ".g", np.ones(d))
                    zeros(pre + ln + ".b", d)
                weight(pre + "ff1.w", d, c.ffn_mult * d)
                zeros(pre + "ff1.b", c.ffn_mult * d)
                weight(pre + "ff2.w", c.ffn_mult * d, d)
                zeros(pre + "ff2.b", d)
        weight("head_w", d, c.num_edges)
        zeros("head_b", c.num_edges)

    # -- features ----------------------------------------------------------------

    def time_features(self, edges: np.ndarray, times: np.ndarray) -> np.ndarray:
        std = self.edge_std[edges]
        safe = np.where(std > 0, std, 1.0)
        return np.where(std > 0, (times - self.edge_mean[edges]) / safe, 0.0)

    def _check(self, batch: StateBatch):
        c = self.config
        if batch.lengths.size and batch.lengths.max() > c.max_history_len:
            raise StateError(f"history longer than max_history_len={c.max_history_len}")
        kk = batch.edges.shape[1]
        hist = batch.edges[np.arange(kk)[None, :] < batch.lengths[:, None]] if kk else batch.edges.ravel()
        for name, arr, hi in (("edge", hist, c.num_edges), ("node", batch.current, c.num_nodes),
                              ("node", batch.destination, c.num_nodes)):
            if arr.size and (arr.min() < 0 or arr.max() >= hi):
                raise StateError(f"{name} id out of range")

    # -- forward pieces -------------------------------------------------------------

    def embed(self, batch: StateBatch) -> Embedded:
        self._check(batch)
        c = self.config
        p = self.params
        b = len(batch)
        k = max(int(batch.lengths.max(initial=0)), 1)
        pos_idx = np.arange(k)[None, :]
        valid = pos_idx < batch.lengths[:, None]
        is_bos = (batch.lengths == 0)[:, None] & (pos_idx == 0)
        key_mask = valid | is_bos

        edges = np.full((b, k), c.num_edges, dtype=np.int64)
        feats = np.zeros((b, k))
        kk = min(batch.edges.shape[1], k)
        if kk:
            hist = np.where(valid[:, :kk], batch.edges[:, :kk], 0)
            edges[:, :kk] = np.where(valid[:, :kk], hist, c.num_edges)
            feats[:, :kk] = np.where(valid[:, :kk], self.time_features(hist, batch.times[:, :kk]), 0.0)

        e_stream = te.embedding(p["edge_embed"], edges)
        lin = _linear(te.as_tensor(feats[:, :, None]), p["time_w"], p["time_b"])
        r_stream = te.add(te.mul(lin, valid[:, :, None].astype(np.float64)),
                          te.mul(te.as_tensor(is_bos[:, :, None].astype(np.float64)), p["bos_time"]))

        budget = (batch.remaining / self.budget_scale)[:, None, None]
        query = te.add(te.embedding(p["node_embed"], batch.current[:, None]),
                       te.embedding(p["node_embed"], batch.destination[:, None]))
        query = te.add(query, _linear(te.as_tensor(budget), p["budget_w"], p["budget_b"]))
        query = te.add(query, self._pe[batch.lengths][:, None, :])
        return Embedded(e_stream, r_stream, self._pe[:k], key_mask, query)

    def _split(self, x: Tensor, heads: int) -> Tensor:
        b, t, d = x.shape
        return te.transpose(te.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        b, h, t, dh = x.shape
        return te.reshape(te.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray, heads: int) -> Tensor:
        qh, kh, vh = self._split(q, heads), self._split(k, heads), self._split(v, heads)
        scores = te.scale(te.matmul(qh, te.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(qh.shape[-1]))
        weights = te.masked_softmax(scores, key_mask[:, None, None, :])
        return self._merge(te.matmul(weights, vh))

    def history_attention(self, emb: Embedded) -> Tensor:
        """Edges as queries over travel times as keys and values, no projections."""
        heads = self.config.num_heads if self.config.history_heads else 1
        return self._attend(emb.edges, emb.times, emb.times, emb.key_mask, heads)

    def _mha(self, pre: str, q: Tensor, kv: Tensor, key_mask: np.ndarray) -> Tensor:
        p = self.params
        out = self._attend(_linear(q, p[pre + "wq"], p[pre + "bq"]),
                           _linear(kv, p[pre + "wk"], p[pre + "bk"]),
                           _linear(kv, p[pre + "wv"], p[pre + "bv"]),
                           key_mask, self.config.num_heads)
        return _linear(out, p[pre + "wo"], p[pre + "bo"])

    def _block(self, pre: str, x: Tensor, kv: Tensor, key_mask: np.ndarray) -> Tensor:
        p = self.params
        x = te.layer_norm(te.add(x, self._mha(pre, x, kv, key_mask)), p[pre + "ln1.g"], p[pre + "ln1.b"])
        ff = _linear(te.relu(_linear(x, p[pre + "ff1.w"], p[pre + "ff1.b"])), p[pre + "ff2.w"], p[pre + "ff2.b"])
        return te.layer_norm(te.add(x, ff), p[pre + "ln2.g"], p[pre + "ln2.b"])

    def encode(self, emb: Embedded) -> Tensor:
        if self.config.variant == "no_history":
            x = te.add(emb.times, emb.positional)
        else:
            x = te.add(self.history_attention(emb), emb.positional)
        for layer in range(self.config.num_layers):
            x = self._block(f"enc{layer}.", x, x, emb.key_mask)
            if layer == 0 or self.config.residual_every_block:
                x = te.add(x, emb.times)
        return x

    def decode(self, x_enc: Tensor, emb: Embedded) -> Tensor:
        q = emb.query
        for layer in range(self.config.num_layers):
            q = self._block(f"dec{layer}.", q, x_enc, emb.key_mask)
        return q

    def logits(self, batch: StateBatch) -> Tensor:
        emb = self.embed(batch)
        p = self.params
        b = len(batch)
        if self.config.variant == "linear":
            weights = emb.key_mask / emb.key_mask.sum(axis=1, keepdims=True)
            pooled = te.sum(te.mul(te.add(emb.edges, emb.times), weights[:, :, None]), axis=1)
            feats = te.concat([pooled, te.reshape(emb.query, (b, self.config.embed_dim))], axis=1)
            return _linear(feats, p["linear_w"], p["linear_b"])
        x_dec = self.decode(self.encode(emb), emb)
        return _linear(te.reshape(x_dec, (b, self.config.embed_dim)), p["head_w"], p["head_b"])

    def forward(self, batch: StateBatch) -> Tensor:
        """(B, L) probabilities, zero outside the outgoing edges of each current node."""
        feasible = self.outgoing_mask[batch.current]
        if not feasible.any(axis=1).all():
            raise StateError("dead-end node: no outgoing edges")
        return te.masked_softmax(self.logits(batch), feasible)

    def action_distribution(self, state: TrajectoryState) -> ActionDistribution:
        with te.no_grad():
            probs = self.forward(StateBatch.from_states([state])).data[0]
        return ActionDistribution(probs, self.outgoing_mask[state.current].copy())

    # -- persistence ------------------------------------------------------------------

    def header(self) -> dict:
        return {
            "policy_config": self.config.to_dict(),
            "outgoing_mask": self.outgoing_mask.astype(int).tolist(),
            "edge_mean": self.edge_mean.tolist(),
            "edge_std": self.edge_std.tolist(),
            "budget_scale": self.budget_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_header(cls, header: dict) -> "Policy":
        return cls(PolicyConfig(**header["policy_config"]), np.array(header["outgoing_mask"], dtype=bool),
                   header["edge_mean"], header["edge_std"], header["budget_scale"], header.get("seed", 0))

    def save(self, path, extra: dict | None = None):
        te.save_store(path, self.params, {**self.header(), **(extra or {})})

    @classmethod
    def load(cls, path) -> "Policy":
        policy = cls.from_header(te.read_header(path))
        te.load_store(path, policy.params)
        return policy

    def load_into(self, path) -> dict:
        """Load parameters saved by a policy with an identical configuration."""
        header = te.read_header(path)
        theirs = header.get("policy_config", {})
        if theirs != self.config.to_dict():
            raise te.CheckpointError(f"policy configuration mismatch: {theirs} vs {self.config.to_dict()}")
        return te.load_store(path, self.params)
