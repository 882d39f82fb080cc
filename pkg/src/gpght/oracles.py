"""Reference values: Gaussian conditioning, the synthetic optimal-policy bound,
Monte Carlo cross-checks and an exhaustive discretised-policy search."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr

from .network import StochasticNetwork, build_synthetic, normal_cdf, sample_times

PAPER_BOUND = 0.537


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionalGaussian:
    """Law of one coordinate given others: mean = slope . x + intercept."""

    slope: np.ndarray
    intercept: float
    variance: float

    def mean(self, x) -> float:
        return float(np.dot(self.slope, np.atleast_1d(x))) + self.intercept


@dataclass(frozen=True)
class OracleResult:
    value: float
    method: str
    error_estimate: float
    config: dict

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise OracleError(f"probability out of range: {self.value}")

    def to_dict(self) -> dict:
        return asdict(self)


def conditional(sigma, mu, observed, target: int) -> ConditionalGaussian:
    """Gaussian conditioning of coordinate ``target`` on the ``observed`` coordinates."""
    sigma = np.asarray(sigma, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    obs = list(observed)
    if not obs:
        return ConditionalGaussian(np.zeros(0), float(mu[target]), float(sigma[target, target]))
    s_oo = sigma[np.ix_(obs, obs)]
    s_to = sigma[target, obs]
    if np.linalg.matrix_rank(s_oo) < len(obs):
        raise OracleError("observed covariance block is singular")
    slope = np.linalg.solve(s_oo, s_to)
    intercept = float(mu[target] - slope @ mu[obs])
    resid = float(sigma[target, target] - s_to @ slope)
    return ConditionalGaussian(slope, intercept, max(resid, 0.0))


# --- synthetic network bound -----------------------------------------------------------

def _branch_laws(net: StochasticNetwork):
    return (conditional(net.sigma, net.mu, [0], 1), conditional(net.sigma, net.mu, [0], 2))


def _best_branch_prob(x, budget, laws, tail_time: float = 1.0):
    """max over the two branches of P(x + X_branch + tail <= T | X1 = x)."""
    best = None
    for law in laws:
        m = law.slope[0] * x + law.intercept
        s = math.sqrt(law.variance)
        z = (budget - tail_time - x - m) / s
        p = ndtr(z)
        best = p if best is None else np.maximum(best, p)
    return best


def _adaptive_simpson(f, a, b, tol, max_depth=50, panels=32):
    def simpson(fa, fm, fb, h):
        return h / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, m - a)
        right = simpson(fm, frm, fb, b - m)
        if depth <= 0 or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0, abs(left + right - whole)
        lv, le = recurse(a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        rv, re = recurse(m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        return lv + rv, le + re

    # start from a uniform split so narrow features are not missed by the first estimate
    edges = np.linspace(a, b, panels + 1)
    total, err = 0.0, 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        fa, fb, fm = f(lo), f(hi), f(0.5 * (lo + hi))
        v, e = recurse(lo, hi, fa, fm, fb, simpson(fa, fm, fb, hi - lo), tol / panels, max_depth)
        total += v
        err += e
    return total, err


def synthetic_upper_bound(budget: float, net: StochasticNetwork | None = None, tol: float = 1e-7) -> OracleResult:
    """On-time probability of the optimal history-dependent policy on the synthetic net.

    The only real decision is at B after observing X1 = x, so the value is
    E_x[max_branch P(on time | x, branch)], integrated over x in mean +- 8 sd by
    adaptive Simpson.
    """
    net = net or build_synthetic()
    laws = _branch_laws(net)
    m1, s1 = float(net.mu[0]), math.sqrt(net.sigma[0, 0])

    def f(x):
        return math.exp(-0.5 * ((x - m1) / s1) ** 2) / (s1 * math.sqrt(2 * math.pi)) * float(
            _best_branch_prob(x, budget, laws, float(net.mu[3])))

    value, err = _adaptive_simpson(f, m1 - 8 * s1, m1 + 8 * s1, tol)
    value = min(max(float(value), 0.0), 1.0)
    return OracleResult(value, "quadrature", float(err), {"budget": budget, "tolerance": tol})


def fixed_route_value(budget: float, branch: int, net: StochasticNetwork | None = None) -> float:
    """P(on time) for always taking ABCE (branch 1) or ABDE (branch 2)."""
    net = net or build_synthetic()
    idx = [0, branch]
    mean = float(net.mu[idx].sum() + net.mu[3])
    var = float(net.sigma[np.ix_(idx, idx)].sum())
    return normal_cdf((budget - mean) / math.sqrt(var))


def solve_budget(target: float = PAPER_BOUND, lo: float = 50.0, hi: float = 200.0, tol: float = 1e-9,
                 net: StochasticNetwork | None = None) -> float:
    """Budget T at which the synthetic bound equals ``target`` (bisection; the bound is monotone)."""
    if not 0.0 < target < 1.0:
        raise OracleError("target probability must lie in (0, 1)")
    f_lo = synthetic_upper_bound(lo, net).value - target
    f_hi = synthetic_upper_bound(hi, net).value - target
    if f_lo > 0 or f_hi < 0:
        raise OracleError("target not bracketed by [lo, hi]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if synthetic_upper_bound(mid, net).value < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def oracle_policy_rollout_value(budget: float, num_samples: int, seed, net: StochasticNetwork | None = None,
                                policy: str = "optimal", chunk: int = 1_000_000) -> OracleResult:
    """Monte Carlo value of the conditional-optimal rule (or a fixed route).

    Draws X1, picks the branch with the larger conditional on-time probability,
    then draws that branch from its conditional law.  ``policy`` may be
    "optimal", "ABCE" or "ABDE".
    """
    if num_samples < 1:
        raise OracleError("num_samples must be >= 1")
    net = net or build_synthetic()
    laws = _branch_laws(net)
    rng = np.random.default_rng(seed)
    tail = float(net.mu[3])
    hits = 0
    done = 0
    while done < num_samples:
        n = min(chunk, num_samples - done)
        x = net.mu[0] + math.sqrt(net.sigma[0, 0]) * rng.standard_normal(n)
        if policy == "optimal":
            pc = ndtr((budget - tail - x - (laws[0].slope[0] * x + laws[0].intercept)) / math.sqrt(laws[0].variance))
            pd = ndtr((budget - tail - x - (laws[1].slope[0] * x + laws[1].intercept)) / math.sqrt(laws[1].variance))
            take_c = pc >= pd
        elif policy in ("ABCE", "ABDE"):
            take_c = np.full(n, policy == "ABCE")
        else:
            raise OracleError(f"unknown policy {policy!r}")
        z = rng.standard_normal(n)
        mean = np.where(take_c, laws[0].slope[0] * x + laws[0].intercept, laws[1].slope[0] * x + laws[1].intercept)
        sd = np.where(take_c, math.sqrt(laws[0].variance), math.sqrt(laws[1].variance))
        total = x + mean + sd * z + tail
        hits += int(np.count_nonzero(total <= budget))
        done += n
    p = hits / num_samples
    return OracleResult(p, "monte_carlo", math.sqrt(p * (1 - p) / num_samples),
                        {"budget": budget, "num_samples": num_samples, "seed": seed, "policy": policy})


# --- exhaustive discretised-policy search ----------------------------------------------

def _edge_bins(net: StochasticNetwork, bins: int) -> list[np.ndarray]:
    """Interior cut points of equiprobable bins of each edge's marginal."""
    from scipy.special import ndtri

    cuts = []
    q = ndtri(np.arange(1, bins) / bins)
    for e in range(net.num_edges):
        sd = math.sqrt(net.sigma[e, e])
        cuts.append(np.empty(0) if sd == 0 or bins <= 1 else net.mu[e] + sd * q)
    return cuts


def exhaustive_policy_value(net: StochasticNetwork, origin: int, destination: int, budget: float,
                            bins: int = 64, num_samples: int = 100_000, seed=0, max_steps: int | None = None,
                            max_entries: int = 1_000_000) -> OracleResult:
    """Best deterministic history-dependent policy over binned observations.

    Policies see the node sequence so far and, for every traversed edge, the
    equiprobable bin its realised time fell in.  All policies share the same
    samples (common random numbers); because the value of a policy is a sum
    over observation cells, the maximum over the whole policy table is found by
    maximising cell by cell.  Routes are simple paths (optionally capped at
    ``max_steps`` edges).  Raises when more than ``max_entries`` table cells
    would be needed.
    """
    if net.num_nodes > 8:
        raise OracleError("exhaustive search is limited to networks with at most 8 nodes")
    rng = np.random.default_rng(seed)
    times = sample_times(net, num_samples, rng)
    cuts = _edge_bins(net, bins)
    out = [list(map(int, net.outgoing[v])) for v in range(net.num_nodes)]
    cap = max_steps if max_steps is not None else net.num_nodes
    entries = 0

    def best(node, visited, elapsed, idx, depth):
        # elapsed is aligned with idx
        nonlocal entries
        if node == destination:
            return int(np.count_nonzero(elapsed <= budget))
        if depth >= cap:
            return 0
        entries += 1
        if entries > max_entries:
            raise OracleError(f"policy table exceeds {max_entries} entries")
        top = 0
        for e in out[node]:
            h = int(net.heads[e])
            if h in visited:
                continue
            t = times[idx, e]
            new_elapsed = elapsed + t
            if cuts[e].size:
                cell = np.searchsorted(cuts[e], t)
                total = 0
                for c in np.unique(cell):
                    m = cell == c
                    total += best(h, visited | {h}, new_elapsed[m], idx[m], depth + 1)
            else:
                total = best(h, visited | {h}, new_elapsed, idx, depth + 1)
            top = max(top, total)
        return top

    count = best(origin, frozenset({origin}), np.zeros(num_samples), np.arange(num_samples), 0)
    p = count / num_samples
    return OracleResult(p, "exhaustive", math.sqrt(p * (1 - p) / num_samples),
                        {"budget": budget, "bins": bins, "num_samples": num_samples, "seed": seed,
                         "table_entries": entries})
