"""Small shared builders for the test-suite."""
import numpy as np

from gpght import tensor as te
from gpght.network import StochasticNetwork, build_sioux_falls, build_synthetic, normal_cdf, sample_times
from gpght.policy import Policy, StateBatch, TrajectoryState
from gpght.tensor import finite_difference_check
from gpght.trainer import TrainConfig, simulate, surrogate_gradient

BANDIT_BUDGET = 5.0


def bandit(mu=(1.0, 10.0), var=(0.0, 0.0)):
    """Two parallel edges 0 -> 1: one decision, then the destination."""
    return StochasticNetwork(2, [0, 0], [1, 1], list(mu), np.diag(var), name="bandit")


def bandit_policy(net, seed, **config):
    return Policy.for_network(net, BANDIT_BUDGET, seed=seed, **config)


def prob_first(policy):
    return float(policy.action_distribution(TrajectoryState.start(0, 1, BANDIT_BUDGET)).probs[0])


def bandit_steps_to(policy, net, seed, target=0.95, max_steps=500, batch=16, estimator="gpg"):
    """Adam steps until P(edge 0) exceeds ``target`` (None if never)."""
    rng = np.random.default_rng(seed)
    for step in range(1, max_steps + 1):
        times = np.tile(net.mu, (batch, 1))
        roll = simulate(policy, net, times, 0, 1, BANDIT_BUDGET, 2, rng)
        policy.params.zero_grad()
        surrogate_gradient(policy, net, roll, estimator)
        te.adam_step(policy.params, TrainConfig().lr)
        if prob_first(policy) > target:
            return step
    return None


def bandit_gradient_vs_closed_form(n=10_000, seed=7):
    """(sampled estimator, exact expectation, per-coordinate standard error) of the head bias gradient.

    A ~ N(1, 1), B ~ N(2, 1), budget 1.5: the on-time chances are q_A = Phi(0.5), q_B = Phi(-0.5),
    so the expected gradient is sum_a q_a p_a grad log p_a.
    """
    net = bandit(mu=(1.0, 2.0), var=(1.0, 1.0))
    budget = 1.5
    q = np.array([normal_cdf(0.5), normal_cdf(-0.5)])
    policy = bandit_policy(net, 3, embed_dim=16)
    start = TrajectoryState.start(0, 1, budget)
    score = []
    for a in range(2):
        policy.params.zero_grad()
        te.backward(te.log(te.gather(policy.forward(StateBatch.from_states([start])), np.array([a]))))
        score.append(policy.params["head_b"].grad.copy())
    p = policy.action_distribution(start).probs
    exact = q[0] * p[0] * score[0] + q[1] * p[1] * score[1]

    rng = np.random.default_rng(seed)
    roll = simulate(policy, net, sample_times(net, n, rng), 0, 1, budget, 2, rng)
    policy.params.zero_grad()
    surrogate_gradient(policy, net, roll, "gpg")
    empirical = -policy.params["head_b"].grad
    per_sample = roll.on_time()[:, None] * np.where(roll.actions[:, :1] == 0, score[0], score[1])
    np.testing.assert_allclose(per_sample.mean(axis=0), empirical, rtol=1e-9)
    se = per_sample.std(axis=0, ddof=1) / np.sqrt(n)
    return empirical, exact, se


def random_states(net, rng, count, max_len, budget=100.0):
    """Random walks from random nodes; histories of length 0..max_len."""
    states = []
    while len(states) < count:
        node = int(rng.integers(net.num_nodes))
        s = TrajectoryState.start(node, int(rng.integers(net.num_nodes)), budget)
        for _ in range(int(rng.integers(max_len + 1))):
            out = net.outgoing[s.current]
            if len(out) == 0:
                break
            e = int(rng.choice(out))
            s = s.advance(e, int(net.heads[e]), float(rng.uniform(0.5, 2.0) * max(net.mu[e], 0.5)))
        if len(net.outgoing[s.current]):
            states.append(s)
    return states


def support_violations(net, variant="full"):
    """States (node, history length) where the action distribution leaves the feasible set
    or fails to normalise; checks the start state and random histories at every node."""
    policy = Policy.for_network(net, 100.0, seed=1, embed_dim=16, num_heads=4, variant=variant)
    rng = np.random.default_rng(0)
    bad = []
    for v in range(net.num_nodes):
        if not len(net.outgoing[v]):
            continue
        states = [TrajectoryState.start(v, (v + 1) % net.num_nodes, 50.0)]
        states += [s for s in random_states(net, rng, 30, 4) if s.current == v][:3]
        for s in states:
            dist = policy.action_distribution(s)
            if (np.any(dist.probs[~dist.feasible_mask] != 0.0) or not np.all(dist.probs[dist.feasible_mask] > 0.0)
                    or abs(dist.probs.sum() - 1.0) > 1e-12):
                bad.append((v, len(s.edges)))
    return bad


def policy_gradcheck_error(seed):
    """Max relative finite-difference error of a weighted log-likelihood through the full policy."""
    net = build_sioux_falls() if seed % 2 else build_synthetic()
    policy = Policy.for_network(net, 40.0, seed=seed, embed_dim=8, num_heads=2, num_layers=2)
    rng = np.random.default_rng(seed)
    # move away from the initialisation so no parameter sits at a symmetric point
    for t in policy.params.params.values():
        t.data += 0.1 * rng.standard_normal(t.shape)
    states = [s for s in random_states(net, rng, 60, 4, budget=40.0) if len(net.outgoing[s.current]) > 1][:6]
    batch = StateBatch.from_states(states)
    feasible = policy.outgoing_mask[batch.current]
    actions = np.array([rng.choice(np.flatnonzero(f)) for f in feasible])
    weights = rng.uniform(0.5, 1.5, len(states))

    def loss():
        probs = policy.forward(batch)
        return te.sum(te.mul(te.log(te.gather(probs, actions)), weights))

    params = list(policy.params.params.values())
    max_coords = None if seed == 0 else 12
    # floor 1e-5: coordinates with smaller gradients are compared on an absolute scale,
    # well above the central-difference roundoff of about 1e-10 at h = 1e-5
    return finite_difference_check(loss, params, h=1e-5, floor=1e-5, max_coords=max_coords, rng=rng)


def brute_force_path(num_nodes, tails, heads, weights, origin, destination):
    """Cheapest simple path by enumeration; ties to the smallest node sequence."""
    best = None

    def walk(path, cost):
        nonlocal best
        v = path[-1]
        if v == destination:
            key = (cost, tuple(path))
            if best is None or key < best:
                best = key
            return
        for e, (t, h) in enumerate(zip(tails, heads)):
            if t == v and h not in path:
                walk(path + [h], cost + float(weights[e]))

    walk([origin], 0.0)
    return best


# one "criterion N: PASS/FAIL ..." line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
