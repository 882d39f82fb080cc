"""Road networks with jointly Gaussian edge travel times."""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

TIME_FLOOR = 1e-3
SYM_TOL = 1e-9
EIG_TOL = -1e-8


class NetworkError(ValueError):
    """Raised for invalid network definitions or files."""


@dataclass(frozen=True, eq=False)
class StochasticNetwork:
    num_nodes: int
    tails: np.ndarray
    heads: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tails", np.asarray(self.tails, dtype=np.int64))
        object.__setattr__(self, "heads", np.asarray(self.heads, dtype=np.int64))
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=np.float64))
        for arr in (self.tails, self.heads, self.mu, self.sigma):
            arr.setflags(write=False)
        self._validate()

    def _validate(self):
        n_edges = self.tails.shape[0]
        if self.num_nodes < 1:
            raise NetworkError("network needs at least one node")
        if self.heads.shape != (n_edges,) or self.mu.shape != (n_edges,):
            raise NetworkError("edge arrays and mu must all have length L")
        if self.sigma.shape != (n_edges, n_edges):
            raise NetworkError(f"sigma must be {n_edges}x{n_edges}, got {self.sigma.shape}")
        if n_edges and (min(self.tails.min(), self.heads.min()) < 0
                        or max(self.tails.max(), self.heads.max()) >= self.num_nodes):
            raise NetworkError("edge endpoint refers to a node id outside 0..N-1")
        if not np.all(np.isfinite(self.mu)) or not np.all(np.isfinite(self.sigma)):
            raise NetworkError("mu and sigma must be finite")
        if np.any(self.mu < 0):
            raise NetworkError("mean travel times must be non-negative")
        if np.max(np.abs(self.sigma - self.sigma.T), initial=0.0) > SYM_TOL:
            raise NetworkError("sigma is not symmetric")
        if np.any(np.diag(self.sigma) < 0):
            raise NetworkError("sigma has a negative variance")
        if n_edges and np.linalg.eigvalsh(self.sigma).min() < EIG_TOL:
            raise NetworkError("sigma is not positive semi-definite")

    @property
    def num_edges(self) -> int:
        return int(self.tails.shape[0])

    @property
    def deterministic_mask(self) -> np.ndarray:
        return np.diag(self.sigma) == 0.0

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma))

    @cached_property
    def outgoing(self) -> list[np.ndarray]:
        """Edge ids leaving each node, ascending."""
        return [np.flatnonzero(self.tails == v) for v in range(self.num_nodes)]

    @cached_property
    def outgoing_mask(self) -> np.ndarray:
        """Boolean N x L matrix: ``mask[v, e]`` iff edge e leaves node v."""
        m = np.zeros((self.num_nodes, self.num_edges), dtype=bool)
        m[self.tails, np.arange(self.num_edges)] = True
        m.setflags(write=False)
        return m

    @cached_property
    def _factor(self) -> np.ndarray:
        # F = V sqrt(W) from the eigendecomposition, so F F^T = sigma; eigh tolerates singular sigma.
        w, v = np.linalg.eigh(self.sigma)
        return v * np.sqrt(np.clip(w, 0.0, None))

    def edge_index(self, tail: int, head: int) -> int:
        hits = np.flatnonzero((self.tails == tail) & (self.heads == head))
        if hits.size == 0:
            raise KeyError(f"no edge {tail}->{head}")
        return int(hits[0])

    def scaled(self, factor: float) -> "StochasticNetwork":
        """Copy with covariance multiplied by ``factor`` (0 gives a deterministic net)."""
        return StochasticNetwork(self.num_nodes, self.tails, self.heads, self.mu,
                                 self.sigma * factor, self.name)

    def __eq__(self, other):
        if not isinstance(other, StochasticNetwork):
            return NotImplemented
        return (self.num_nodes == other.num_nodes
                and np.array_equal(self.tails, other.tails)
                and np.array_equal(self.heads, other.heads)
                and np.array_equal(self.mu, other.mu)
                and np.array_equal(self.sigma, other.sigma))

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "nodes": self.num_nodes,
            "edges": [{"id": i, "tail": int(t), "head": int(h)}
                      for i, (t, h) in enumerate(zip(self.tails, self.heads))],
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


@dataclass(frozen=True)
class RealizedNetwork:
    network: StochasticNetwork
    times: np.ndarray
    seed: int | None = None


@dataclass(frozen=True)
class CorrelationDraw:
    raw: np.ndarray
    covariance: np.ndarray
    correlation: np.ndarray = field(repr=False, default=None)


# --- benchmark instances -------------------------------------------------------

SYNTHETIC_NODES = "ABCDE"


def build_synthetic() -> StochasticNetwork:
    """Five-node network A..E with routes ABCE and ABDE.

    AB, BC, BD are jointly Gaussian; CE and DE are fixed at 1.
    """
    tails = [0, 1, 1, 2, 3]
    heads = [1, 2, 3, 4, 4]
    mu = [5.0, 100.0, 100.0, 1.0, 1.0]
    sigma = np.zeros((5, 5))
    sigma[:3, :3] = [[1.0, 0.5, 0.0], [0.5, 2.0, -1.0], [0.0, -1.0, 2.0]]
    return StochasticNetwork(5, tails, heads, mu, sigma, name="synthetic")


# Sioux Falls directed links (1-based node labels as usually published).
SIOUX_FALLS_LINKS = [
    (1, 2), (1, 3), (2, 1), (2, 6), (3, 1), (3, 4), (3, 12), (4, 3), (4, 5), (4, 11),
    (5, 4), (5, 6), (5, 9), (6, 2), (6, 5), (6, 8), (7, 8), (7, 18), (8, 6), (8, 7),
    (8, 9), (8, 16), (9, 5), (9, 8), (9, 10), (10, 9), (10, 11), (10, 15), (10, 16), (10, 17),
    (11, 4), (11, 10), (11, 12), (11, 14), (12, 3), (12, 11), (12, 13), (13, 12), (13, 24), (14, 11),
    (14, 15), (14, 23), (15, 10), (15, 14), (15, 19), (15, 22), (16, 8), (16, 10), (16, 17), (16, 18),
    (17, 10), (17, 16), (17, 19), (18, 7), (18, 16), (18, 20), (19, 15), (19, 17), (19, 20), (20, 18),
    (20, 19), (20, 21), (20, 22), (21, 20), (21, 22), (21, 24), (22, 15), (22, 20), (22, 21), (22, 23),
    (23, 14), (23, 22), (23, 24), (24, 13), (24, 21), (24, 23),
]

# OD pairs of the SFN benchmark, 1-based labels.
SIOUX_FALLS_OD = [(2, 15), (4, 7), (10, 13), (13, 19), (17, 24)]


def build_sioux_falls(seed: int = 0, mu=None, variances=None) -> StochasticNetwork:
    """Sioux Falls topology (24 nodes, 76 links) with Gaussian link times.

    Node label k is stored as id k-1.  Unless supplied, link parameters come from
    a seeded recipe: the two directions of a road share a mean drawn from
    U(2, 10) and a coefficient of variation drawn from U(0.1, 0.5).  The
    covariance is built by :func:`generate_covariance` with ``seed + 1``.
    """
    rng = np.random.default_rng(seed)
    tails = np.array([a - 1 for a, _ in SIOUX_FALLS_LINKS])
    heads = np.array([b - 1 for _, b in SIOUX_FALLS_LINKS])
    if mu is None or variances is None:
        road_mu, road_cv = {}, {}
        for a, b in SIOUX_FALLS_LINKS:
            key = (min(a, b), max(a, b))
            if key not in road_mu:
                road_mu[key] = round(float(rng.uniform(2.0, 10.0)), 3)
                road_cv[key] = float(rng.uniform(0.1, 0.5))
        keys = [(min(a, b), max(a, b)) for a, b in SIOUX_FALLS_LINKS]
        gen_mu = np.array([road_mu[k] for k in keys])
        gen_var = np.array([(road_cv[k] * road_mu[k]) ** 2 for k in keys])
        mu = gen_mu if mu is None else np.asarray(mu, dtype=np.float64)
        variances = gen_var if variances is None else np.asarray(variances, dtype=np.float64)
    draw = generate_covariance(variances, seed + 1)
    return StochasticNetwork(24, tails, heads, mu, draw.covariance, name=f"sioux_falls(seed={seed})")


# --- covariance construction ---------------------------------------------------

def _check_symmetric(a: np.ndarray):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NetworkError(f"expected a square matrix, got shape {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > SYM_TOL:
        raise NetworkError("matrix is not symmetric")


def nearest_psd(a) -> np.ndarray:
    """Clip negative eigenvalues to zero, then rescale back to the input diagonal.

    Single pass; the rescaling is a congruence so it preserves semi-definiteness
    up to roundoff.  Rows with zero diagonal come out exactly zero.
    """
    a = np.array(a, dtype=np.float64)
    _check_symmetric(a)
    a = 0.5 * (a + a.T)
    diag = np.diag(a).copy()
    live = diag > 0
    out = np.zeros_like(a)
    if not live.any():
        return out
    sub = a[np.ix_(live, live)]
    w, v = np.linalg.eigh(sub)
    if w.min() >= 0:
        clipped = sub
    else:
        clipped = (v * np.clip(w, 0.0, None)) @ v.T
        clipped = 0.5 * (clipped + clipped.T)
        new_diag = np.diag(clipped)
        s = np.where(new_diag > 0, np.sqrt(diag[live] / np.where(new_diag > 0, new_diag, 1.0)), 0.0)
        clipped = clipped * np.outer(s, s)
        np.fill_diagonal(clipped, diag[live])
    out[np.ix_(live, live)] = clipped
    return out


def generate_covariance(variances, seed) -> CorrelationDraw:
    """Random covariance with prescribed variances and U(-1, 1) pairwise correlations."""
    var = np.asarray(variances, dtype=np.float64)
    if var.ndim != 1:
        raise NetworkError("variances must be a vector")
    if np.any(var < 0):
        raise NetworkError("variances must be non-negative")
    n = var.size
    rng = np.random.default_rng(seed)
    raw = np.eye(n)
    iu = np.triu_indices(n, k=1)
    raw[iu] = rng.uniform(-1.0, 1.0, size=iu[0].size)
    raw.T[iu] = raw[iu]
    sd = np.sqrt(var)
    cov = nearest_psd(raw * np.outer(sd, sd))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(np.outer(sd, sd) > 0, cov / np.outer(sd, sd), 0.0)
    return CorrelationDraw(raw=raw, covariance=cov, correlation=corr)


# --- sampling ------------------------------------------------------------------

def sample_times(net: StochasticNetwork, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` realisations as an (n, L) array, floored at TIME_FLOOR."""
    z = rng.standard_normal((n, net.num_edges))
    times = net.mu + z @ net._factor.T
    det = net.deterministic_mask
    times[:, det] = net.mu[det]
    np.maximum(times, TIME_FLOOR, out=times)
    return times


def sample_realization(net: StochasticNetwork, seed) -> RealizedNetwork:
    rng = np.random.default_rng(seed)
    times = sample_times(net, 1, rng)[0]
    times.setflags(write=False)
    return RealizedNetwork(net, times, seed)


# --- least expected time path ----------------------------------------------------

def shortest_path(num_nodes, tails, heads, weights, origin, destination):
    """Dijkstra on non-negative weights; ties go to the lexicographically smallest node sequence.

    Returns ``(nodes, edges, cost)``.
    """
    if origin == destination:
        return [origin], [], 0.0
    adj = [[] for _ in range(num_nodes)]
    for e, (t, h) in enumerate(zip(tails, heads)):
        adj[int(t)].append((int(h), e))
    frontier = [(0.0, (int(origin),), ())]
    settled = set()
    while frontier:
        cost, nodes, edges = heapq.heappop(frontier)
        v = nodes[-1]
        if v in settled:
            continue
        settled.add(v)
        if v == destination:
            return list(nodes), list(edges), cost
        for h, e in adj[v]:
            if h not in settled:
                heapq.heappush(frontier, (cost + float(weights[e]), nodes + (h,), edges + (e,)))
    raise NetworkError(f"node {destination} is unreachable from {origin}")


def let_path(net: StochasticNetwork, origin: int, destination: int):
    """Least-expected-time path: ``(node sequence, t_LET)``.

    An empty node sequence is returned when origin == destination.
    """
    nodes, _, cost = shortest_path(net.num_nodes, net.tails, net.heads, net.mu, origin, destination)
    return (nodes if len(nodes) > 1 else []), cost


def reachable(net: StochasticNetwork, origin: int, destination: int) -> bool:
    try:
        let_path(net, origin, destination)
    except NetworkError:
        return False
    return True


# --- file format -----------------------------------------------------------------

def network_from_dict(doc: dict) -> StochasticNetwork:
    try:
        n = int(doc["nodes"])
        edges = sorted(doc["edges"], key=lambda e: int(e["id"]))
        ids = [int(e["id"]) for e in edges]
        if ids != list(range(len(edges))):
            raise NetworkError("edge ids must be dense and unique (0..L-1)")
        tails = [int(e["tail"]) for e in edges]
        heads = [int(e["head"]) for e in edges]
        mu = np.asarray(doc["mu"], dtype=np.float64)
        sig = doc["sigma"]
        if isinstance(sig, dict):
            sigma = generate_covariance(sig["variances"], int(sig["correlation_seed"])).covariance
        else:
            sigma = np.asarray(sig, dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise NetworkError(f"malformed network document: {exc!r}") from exc
    except ValueError as exc:
        if isinstance(exc, NetworkError):
            raise
        raise NetworkError(f"malformed network document: {exc}") from exc
    return StochasticNetwork(n, tails, heads, mu, sigma, name=str(doc.get("name", "")))


def load_network(path) -> StochasticNetwork:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise NetworkError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise NetworkError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise NetworkError(f"{path}: top-level JSON value must be an object")
    return network_from_dict(doc)


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))
