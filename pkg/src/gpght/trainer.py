"""Rollouts, generalized / vanilla policy-gradient estimators and the training loop."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as te
from .network import RealizedNetwork, StochasticNetwork, sample_times
from .policy import Policy, StateBatch, StateError, TrajectoryState
from .tensor import Tensor

ESTIMATORS = ("gpg", "vanilla_pg")


class RolloutError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 200
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0
    max_steps: int | None = None      # None -> 4 * num_nodes
    estimator: str = "gpg"
    eval_every: int = 5
    eval_samples: int = 2000
    eval_chunks: int = 10
    rollouts_per_network: int = 1
    baseline: bool = False
    train_pool: int = 10000
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1 or self.rollouts_per_network < 1:
            raise ValueError("batch_size and rollouts_per_network must be >= 1")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.eval_samples < 1 or self.eval_chunks < 1 or self.train_pool < 1:
            raise ValueError("eval_samples, eval_chunks and train_pool must be >= 1")

    def steps_for(self, net: StochasticNetwork) -> int:
        return self.max_steps if self.max_steps is not None else 4 * net.num_nodes

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# --- simulation --------------------------------------------------------------------

@dataclass
class Rollouts:
    """Outcome of B simultaneous trajectories (step-major arrays, -1 padded)."""

    actions: np.ndarray    # (B, S) edge ids
    times: np.ndarray      # (B, S) realised edge times
    decision: np.ndarray   # (B, S) True where the node had more than one outgoing edge
    lengths: np.ndarray    # (B,)
    reached: np.ndarray    # (B,)
    G: np.ndarray          # (B,) total time, +inf when the destination was not reached
    origin: int
    destination: int
    budget: float

    def __len__(self):
        return int(self.lengths.shape[0])

    def on_time(self, budget: float | None = None) -> np.ndarray:
        return self.G <= (self.budget if budget is None else budget)

    def state_batch(self, rows: np.ndarray, ks, net_tails, net_heads) -> StateBatch:
        """States before step ``ks`` (scalar or per row) of the given rows, right-padded."""
        ks = np.broadcast_to(np.asarray(ks, dtype=np.int64), rows.shape)
        width = int(ks.max(initial=0))
        pad = np.arange(width)[None, :] < ks[:, None]
        edges = np.where(pad, self.actions[rows, :width], 0)
        times = np.where(pad, self.times[rows, :width], 0.0)
        prev = self.actions[rows, np.maximum(ks - 1, 0)] if width else np.zeros(rows.shape, dtype=np.int64)
        current = np.where(ks == 0, self.origin, net_heads[prev])
        return StateBatch(edges, times, ks.copy(), current, np.full(rows.shape, self.destination),
                          self.budget - times.sum(axis=1))


def _sample_actions(probs: np.ndarray, feasible: np.ndarray, u: np.ndarray, greedy: bool) -> np.ndarray:
    if greedy:
        return np.argmax(np.where(feasible, probs, -1.0), axis=1)
    cdf = np.cumsum(probs, axis=1)
    pick = (cdf <= u[:, None]).sum(axis=1)
    overflow = pick >= probs.shape[1]
    if overflow.any():
        # u beyond the rounded cdf total: take the last feasible edge
        last = probs.shape[1] - 1 - np.argmax(feasible[:, ::-1], axis=1)
        pick = np.where(overflow, last, pick)
    return pick


def simulate(policy: Policy, net: StochasticNetwork, times: np.ndarray, origin: int, destination: int,
             budget: float, max_steps: int, rng: np.random.Generator, greedy: bool = False) -> Rollouts:
    """Roll out one trajectory per row of ``times`` (B x L realised edge times), no graph.

    Every trajectory active at step k has exactly k edges behind it, so each
    step is a single batched policy evaluation.  Nodes with one outgoing edge
    need no evaluation: the masked softmax there is exactly one-hot.
    """
    times = np.asarray(times, dtype=np.float64)
    b = times.shape[0]
    actions = np.full((b, max_steps), -1, dtype=np.int64)
    step_times = np.zeros((b, max_steps))
    decision = np.zeros((b, max_steps), dtype=bool)
    lengths = np.zeros(b, dtype=np.int64)
    reached = np.zeros(b, dtype=bool)
    pos = np.full(b, origin, dtype=np.int64)
    elapsed = np.zeros(b)
    done = np.zeros(b, dtype=bool)
    if origin == destination:
        reached[:] = True
        done[:] = True
    degree = policy.outgoing_mask.sum(axis=1)
    for k in range(max_steps):
        rows = np.flatnonzero(~done)
        if rows.size == 0:
            break
        if np.any(degree[pos[rows]] == 0):
            raise RolloutError(f"dead-end node {int(pos[rows][degree[pos[rows]] == 0][0])} reached")
        feasible = policy.outgoing_mask[pos[rows]]
        u = rng.random(rows.size)
        probs = feasible.astype(np.float64)
        choice = degree[pos[rows]] > 1
        if choice.any():
            sel = rows[choice]
            batch = StateBatch(actions[sel, :k], step_times[sel, :k], np.full(sel.size, k, dtype=np.int64),
                               pos[sel], np.full(sel.size, destination), budget - elapsed[sel])
            with te.no_grad():
                probs[choice] = policy.forward(batch).data
        a = _sample_actions(probs, feasible, u, greedy)
        t = times[rows, a]
        actions[rows, k] = a
        step_times[rows, k] = t
        decision[rows, k] = choice
        elapsed[rows] += t
        lengths[rows] += 1
        pos[rows] = net.heads[a]
        arrived = pos[rows] == destination
        reached[rows[arrived]] = True
        done[rows[arrived]] = True
        if k + 1 == max_steps:
            done[:] = True
    width = int(lengths.max(initial=0))
    G = np.where(reached, step_times.sum(axis=1), np.inf)
    return Rollouts(actions[:, :width], step_times[:, :width], decision[:, :width], lengths, reached, G,
                    origin, destination, float(budget))


def log_prob_sum(policy: Policy, net: StochasticNetwork, roll: Rollouts, rows: np.ndarray,
                 weights: np.ndarray) -> Tensor | None:
    """Graph for sum_j weights[j] * log pi(tau_j) over the given rows.

    Forced moves contribute log 1 = 0 with exactly zero gradient and are skipped.
    Returns None when no row has a real decision.
    """
    rows = np.asarray(rows, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    steps = np.arange(roll.actions.shape[1])
    live = (roll.lengths[rows, None] > steps[None, :]) & roll.decision[rows]
    if not live.any():
        return None
    # every decision of every row in one padded batch
    r_idx, k_idx = np.nonzero(live)
    batch = roll.state_batch(rows[r_idx], k_idx, net.tails, net.heads)
    probs = policy.forward(batch)
    taken = roll.actions[rows[r_idx], k_idx]
    return te.sum(te.mul(te.log(te.gather(probs, taken)), weights[r_idx]))


def trajectory_weights(roll: Rollouts, estimator: str, baseline: bool = False) -> np.ndarray:
    """Per-trajectory weight multiplying grad log pi(tau).

    gpg: the on-time indicator.  vanilla_pg: the negated travel time, with
    unreached trajectories charged twice the budget.
    """
    if estimator == "gpg":
        w = roll.on_time().astype(np.float64)
    elif estimator == "vanilla_pg":
        w = np.where(roll.reached, -np.where(roll.reached, roll.G, 0.0), -2.0 * roll.budget)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    if baseline:
        w = w - w.mean()
    return w


def surrogate_gradient(policy: Policy, net: StochasticNetwork, roll: Rollouts, estimator: str = "gpg",
                       baseline: bool = False) -> float:
    """Accumulate grad of -(1/M) sum_j w_j log pi(tau_j) into the policy parameters.

    Only rows with nonzero weight are replayed through the network.  Returns the
    mean weight (the batch on-time rate for gpg).
    """
    w = trajectory_weights(roll, estimator, baseline)
    rows = np.flatnonzero(w != 0.0)
    if rows.size:
        total = log_prob_sum(policy, net, roll, rows, w[rows])
        if total is not None:
            te.backward(te.scale(total, -1.0 / len(roll)))
    return float(w.mean())


# --- single-trajectory API -------------------------------------------------------------

@dataclass
class Step:
    state: TrajectoryState
    action: int
    reward: float


@dataclass
class Trajectory:
    steps: list[Step]
    reached: bool
    G: float
    log_prob: Tensor   # graph of sum_k log pi(a_k | s_k)

    @property
    def edges(self) -> list[int]:
        return [s.action for s in self.steps]


@dataclass
class RolloutBatch:
    trajectories: list[Trajectory]
    budget: float
    networks: list[RealizedNetwork] = field(default_factory=list)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("a rollout batch needs at least one trajectory")


def rollout(policy: Policy, realized: RealizedNetwork, origin: int, destination: int, budget: float,
            max_steps: int, rng: np.random.Generator) -> Trajectory:
    """Sample one trajectory, recording the log-probability graph of the taken actions."""
    net = realized.network
    state = TrajectoryState.start(origin, destination, budget)
    steps: list[Step] = []
    log_prob = te.Tensor(0.0)
    reached = origin == destination
    while not reached and len(steps) < max_steps:
        feasible = policy.outgoing_mask[state.current]
        if not feasible.any():
            raise RolloutError(f"dead-end node {state.current} reached")
        u = rng.random(1)
        if feasible.sum() > 1:
            probs = policy.forward(StateBatch.from_states([state]))
            a = int(_sample_actions(probs.data, feasible[None, :], u, False)[0])
            log_prob = te.add(log_prob, te.sum(te.log(te.gather(probs, np.array([a])))))
        else:
            a = int(np.flatnonzero(feasible)[0])
        t = float(realized.times[a])
        steps.append(Step(state, a, t))
        state = state.advance(a, int(net.heads[a]), t)
        reached = state.current == destination
    G = float(np.sum([s.reward for s in steps])) if reached else float("inf")
    return Trajectory(steps, reached, G, log_prob)


def _batch_gradient(batch: RolloutBatch, weights) -> None:
    total = None
    for traj, w in zip(batch.trajectories, weights):
        if w == 0.0 or not traj.log_prob.requires_grad:
            continue
        term = te.scale(traj.log_prob, w)
        total = term if total is None else te.add(total, term)
    if total is not None:
        te.backward(te.scale(total, -1.0 / len(batch.trajectories)))


def gpg_gradient(batch: RolloutBatch) -> None:
    """Accumulate grad of -(1/M) sum_j 1{G_j <= T} log pi(tau_j)."""
    _batch_gradient(batch, [1.0 if t.G <= batch.budget else 0.0 for t in batch.trajectories])


def vanilla_pg_gradient(batch: RolloutBatch) -> None:
    """Accumulate grad of -(1/M) sum_j (-G_j) log pi(tau_j); unreached count as G = 2T."""
    _batch_gradient(batch, [-t.G if t.reached else -2.0 * batch.budget for t in batch.trajectories])


# --- evaluation ----------------------------------------------------------------------

def evaluate(policy: Policy, net: StochasticNetwork, origin: int, destination: int, budget: float,
             times: np.ndarray, seed: int, max_steps: int, chunks: int = 1, greedy: bool = False,
             chunk_size: int = 5000):
    """(J, chunk std, Rollouts) of the policy on the given realisations."""
    rng = np.random.default_rng(seed)
    parts = []
    for start in range(0, times.shape[0], chunk_size):
        parts.append(simulate(policy, net, times[start:start + chunk_size], origin, destination, budget,
                              max_steps, rng, greedy))
    hits = np.concatenate([p.on_time() for p in parts])
    j = float(hits.mean())
    chunk_j = [c.mean() for c in np.array_split(hits, min(chunks, hits.size))]
    return j, float(np.std(chunk_j)), parts


# --- training -------------------------------------------------------------------------

@dataclass
class CurvePoint:
    iteration: int
    J_mean: float
    J_std: float
    wallclock_s: float


@dataclass
class TrainState:
    policy: Policy
    iteration: int
    rng: np.random.Generator
    curve: list[CurvePoint]

    def rng_state(self) -> dict:
        return self.rng.bit_generator.state


def _seeds(seed: int):
    pool, evals, actions = np.random.SeedSequence(seed).spawn(3)
    return pool, evals, actions


def training_pool(net: StochasticNetwork, config: TrainConfig) -> np.ndarray:
    pool_seq, _, _ = _seeds(config.seed)
    return sample_times(net, config.train_pool, np.random.default_rng(pool_seq))


def heldout_set(net: StochasticNetwork, config: TrainConfig) -> tuple[np.ndarray, int]:
    _, eval_seq, _ = _seeds(config.seed)
    rng = np.random.default_rng(eval_seq)
    times = sample_times(net, config.eval_samples, rng)
    return times, int(rng.integers(2 ** 31))


def initial_state(policy: Policy, config: TrainConfig) -> TrainState:
    _, _, act_seq = _seeds(config.seed)
    return TrainState(policy, 0, np.random.default_rng(act_seq), [])


def train(policy: Policy, net: StochasticNetwork, origin: int, destination: int, budget: float,
          config: TrainConfig, state: TrainState | None = None, checkpoint_path=None,
          progress: Callable[[int, float], None] | None = None) -> TrainState:
    """Train ``policy`` in place until ``config.iterations`` total iterations.

    Each iteration draws M networks (with replacement) from the training pool,
    rolls out ``rollouts_per_network`` trajectories on each, applies the chosen
    estimator and one Adam step.  Every ``eval_every`` iterations (and at the
    last one) J is measured on the held-out set with a fixed action seed.
    Passing a ``state`` from :func:`load_checkpoint` resumes exactly.
    """
    if not 0 <= origin < net.num_nodes or not 0 <= destination < net.num_nodes:
        raise ValueError("origin/destination outside the network")
    state = state if state is not None else initial_state(policy, config)
    if state.policy is not policy:
        raise ValueError("state belongs to a different policy object")
    max_steps = config.steps_for(net)
    if max_steps > policy.config.max_history_len:
        raise StateError("max_steps exceeds the policy's max_history_len")
    pool = training_pool(net, config)
    eval_times, eval_seed = heldout_set(net, config)
    clock = time.perf_counter()
    while state.iteration < config.iterations:
        idx = state.rng.integers(pool.shape[0], size=config.batch_size)
        times = np.repeat(pool[idx], config.rollouts_per_network, axis=0)
        roll = simulate(policy, net, times, origin, destination, budget, max_steps, state.rng)
        policy.params.zero_grad()
        rate = surrogate_gradient(policy, net, roll, config.estimator, config.baseline)
        te.adam_step(policy.params, config.lr)
        state.iteration += 1
        it = state.iteration
        if progress is not None:
            progress(it, rate)
        if (config.eval_every and it % config.eval_every == 0) or it == config.iterations:
            j, sd, _ = evaluate(policy, net, origin, destination, budget, eval_times, eval_seed, max_steps,
                                config.eval_chunks)
            state.curve.append(CurvePoint(it, j, sd, time.perf_counter() - clock))
        if checkpoint_path is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, state, net, origin, destination, budget, config)
    return state


# --- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, state: TrainState, net: StochasticNetwork, origin: int, destination: int,
                    budget: float, config: TrainConfig) -> None:
    extra = {
        "train": {
            "iteration": state.iteration,
            "rng_state": state.rng_state(),
            "curve": [asdict(p) for p in state.curve],
            "config": asdict(config),
            "origin": origin,
            "destination": destination,
            "budget": budget,
            "network": net.to_dict(),
        }
    }
    state.policy.save(path, extra)


def load_checkpoint(path, policy: Policy | None = None):
    """Restore ``(state, network, origin, destination, budget, config)`` from ``path``.

    With ``policy`` given, parameters load into it (configs must match);
    otherwise a policy is rebuilt from the checkpoint header.
    """
    from .network import network_from_dict

    header = te.read_header(path)
    if "train" not in header:
        raise te.CheckpointError(f"{path} is a bare policy checkpoint without training state")
    if policy is None:
        policy = Policy.load(path)
    else:
        policy.load_into(path)
    info = header["train"]
    rng = np.random.default_rng()
    rng.bit_generator.state = info["rng_state"]
    curve = [CurvePoint(**p) for p in info["curve"]]
    state = TrainState(policy, int(info["iteration"]), rng, curve)
    config = TrainConfig.from_dict(info["config"])
    return (state, network_from_dict(info["network"]), int(info["origin"]), int(info["destination"]),
            float(info["budget"]), config)


def config_json(config: TrainConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True)


def with_iterations(config: TrainConfig, iterations: int) -> TrainConfig:
    return replace(config, iterations=iterations)
