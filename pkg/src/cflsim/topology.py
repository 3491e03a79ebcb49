"""Random geometric P2P networks and range-based cluster division."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from .errors import ClusterInfeasible

log = logging.getLogger(__name__)

ClientId = int


@dataclass(frozen=True, eq=False)
class NetworkTopology:
    """Clients on a square plane; an edge joins every pair within ``comm_range``."""

    positions: np.ndarray
    comm_range: float
    area_side: float
    edges: tuple[tuple[int, int], ...]
    adjacency: dict[int, frozenset[int]] = field(repr=False)

    @classmethod
    def from_positions(cls, positions, comm_range: float, area_side: float | None = None) -> "NetworkTopology":
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        if area_side is None:
            area_side = float(pos.max()) if len(pos) else 0.0
        if len(pos) > 1:
            pairs = cKDTree(pos).query_pairs(comm_range, output_type="ndarray")
            edges = tuple(sorted((int(a), int(b)) for a, b in pairs))
        else:
            edges = ()
        adj: dict[int, set[int]] = {i: set() for i in range(len(pos))}
        for a, b in edges:
            adj[a].add(b)
            adj[b].add(a)
        pos.setflags(write=False)
        return cls(pos, float(comm_range), float(area_side), edges, {k: frozenset(v) for k, v in adj.items()})

    @property
    def n_clients(self) -> int:
        return len(self.positions)

    @property
    def clients(self) -> range:
        return range(self.n_clients)

    def neighbors(self, client: ClientId) -> frozenset[int]:
        return self.adjacency[client]

    def degree(self, client: ClientId) -> int:
        return len(self.adjacency[client])

    def mean_degree(self) -> float:
        return 2.0 * len(self.edges) / max(self.n_clients, 1)

    def has_edge(self, a: ClientId, b: ClientId) -> bool:
        return b in self.adjacency.get(a, ())

    def components(self, nodes: Iterable[int] | None = None) -> list[list[int]]:
        """Connected components of the subgraph induced by ``nodes`` (all clients by default)."""
        keep = set(self.clients if nodes is None else nodes)
        return connected_components({v: self.adjacency[v] & keep for v in keep})

    def is_connected(self, nodes: Iterable[int] | None = None) -> bool:
        return len(self.components(nodes)) <= 1

    def write_edge_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["a", "b", "ax", "ay", "bx", "by"])
            for a, b in self.edges:
                (ax, ay), (bx, by) = self.positions[a], self.positions[b]
                w.writerow([a, b, repr(float(ax)), repr(float(ay)), repr(float(bx)), repr(float(by))])

    def __eq__(self, other) -> bool:
        if not isinstance(other, NetworkTopology):
            return NotImplemented
        return (
            self.comm_range == other.comm_range
            and self.area_side == other.area_side
            and self.edges == other.edges
            and np.array_equal(self.positions, other.positions)
        )

    __hash__ = None


def connected_components(adj: dict[int, Iterable[int]]) -> list[list[int]]:
    """Components of an adjacency map, each sorted, listed by smallest member."""
    seen: set[int] = set()
    out = []
    for start in sorted(adj):
        if start in seen:
            continue
        comp = [start]
        seen.add(start)
        q = deque([start])
        while q:
            u = q.popleft()
            for v in adj[u]:
                if v not in seen and v in adj:
                    seen.add(v)
                    comp.append(v)
                    q.append(v)
        out.append(sorted(comp))
    return out


def generate_topology(n_clients: int, area_side: float, comm_range: float, seed: int) -> NetworkTopology:
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if comm_range <= 0:
        raise ValueError("comm_range must be > 0")
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0.0, area_side, size=(n_clients, 2))
    return NetworkTopology.from_positions(pos, comm_range, area_side)


def pair_within_probability(t: float) -> float:
    # P(|U - V| <= t * side) for U, V uniform in the unit square, valid for 0 <= t <= 1
    return math.pi * t * t - 8.0 * t**3 / 3.0 + t**4 / 2.0


def expected_mean_degree(n_clients: int, area_side: float, comm_range: float) -> float:
    t = min(comm_range / area_side, 1.0)
    return (n_clients - 1) * pair_within_probability(t)


def range_for_mean_degree(n_clients: int, area_side: float, mean_degree: float) -> float:
    """Communication range whose expected mean degree (boundary effects included) is ``mean_degree``."""
    if not 0 < mean_degree < n_clients - 1:
        raise ValueError("mean_degree must lie in (0, n_clients - 1)")
    f = lambda r: expected_mean_degree(n_clients, area_side, r) - mean_degree
    return float(brentq(f, 1e-12 * area_side, area_side, xtol=1e-12))


@dataclass(frozen=True)
class Cluster:
    index: int
    members: tuple[int, ...]
    leader: int
    server_adjacent: frozenset[int]
    targets: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def n_targets(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class ClusterPlan:
    clusters: tuple[Cluster, ...]
    isolated: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.clusters)

    def __iter__(self):
        return iter(self.clusters)

    def __getitem__(self, h: int) -> Cluster:
        return self.clusters[h]

    def cluster_of(self, client: ClientId) -> Cluster:
        for c in self.clusters:
            if client in c.members:
                return c
        raise KeyError(client)

    @property
    def all_targets(self) -> list[int]:
        return [t for c in self.clusters for t in c.targets]

    @property
    def leaders(self) -> list[int]:
        return [c.leader for c in self.clusters]

    def with_cluster(self, cluster: Cluster) -> "ClusterPlan":
        cs = list(self.clusters)
        cs[cluster.index] = cluster
        return replace(self, clusters=tuple(cs))

    def to_dict(self) -> dict:
        return {
            "clusters": [
                {
                    "index": c.index,
                    "members": list(c.members),
                    "targets": list(c.targets),
                    "leader": c.leader,
                    "server_adjacent": sorted(c.server_adjacent),
                }
                for c in self.clusters
            ],
            "isolated": list(self.isolated),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterPlan":
        return cls(
            tuple(
                Cluster(
                    c["index"],
                    tuple(c["members"]),
                    c["leader"],
                    frozenset(c["server_adjacent"]),
                    tuple(c.get("targets", ())),
                )
                for c in d["clusters"]
            ),
            tuple(d.get("isolated", ())),
        )


def _kmeans_labels(pos: np.ndarray, k: int, rng: np.random.Generator, restarts: int = 8) -> tuple[np.ndarray, np.ndarray]:
    best = None
    for _ in range(restarts):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            centroids, labels = kmeans2(pos, k, minit="++", seed=rng, iter=50)
        if len(np.unique(labels)) < k:
            continue
        inertia = float(((pos - centroids[labels]) ** 2).sum())
        if best is None or inertia < best[0]:
            best = (inertia, centroids, labels)
    if best is None:
        raise ClusterInfeasible(f"k-means could not form {k} non-empty clusters")
    return best[1], best[2]


def divide_clusters(
    topology: NetworkTopology,
    n_clusters: int,
    seed: int,
    server_fraction: float = 0.1,
    server_adjacent: Iterable[int] | None = None,
) -> ClusterPlan:
    """Partition clients into ``n_clusters`` geographically compact, connected clusters.

    Positions are grouped by k-means; each group keeps its largest connected
    piece as a core and the remaining clients are re-attached by a
    multi-source BFS over topology edges, so every cluster's induced
    subgraph stays connected.  Clients no core can reach end up in
    ``ClusterPlan.isolated``.

    ``server_adjacent`` fixes the clients directly linked to the server;
    otherwise ``ceil(server_fraction * z_h)`` members of each cluster are
    drawn at random.
    """
    n = topology.n_clients
    if not 1 <= n_clusters <= n:
        raise ValueError(f"need 1 <= n_clusters <= {n}")
    rng = np.random.default_rng(seed)
    if n_clusters == 1:
        centroids = topology.positions.mean(axis=0, keepdims=True)
        labels = np.zeros(n, dtype=int)
    else:
        centroids, labels = _kmeans_labels(topology.positions, n_clusters, rng)

    assign = np.full(n, -1, dtype=int)
    for h in range(n_clusters):
        members = np.flatnonzero(labels == h).tolist()
        comps = topology.components(members)
        core = max(comps, key=lambda c: (len(c), -c[0]))
        assign[core] = h

    # grow the cores outward one BFS layer at a time
    frontier = [v for v in range(n) if assign[v] >= 0]
    while frontier:
        claims: dict[int, set[int]] = {}
        for u in frontier:
            for v in topology.adjacency[u]:
                if assign[v] < 0:
                    claims.setdefault(v, set()).add(int(assign[u]))
        frontier = []
        for v in sorted(claims):
            hs = sorted(claims[v])
            d = [float(np.sum((topology.positions[v] - centroids[h]) ** 2)) for h in hs]
            assign[v] = hs[int(np.argmin(d))]
            frontier.append(v)

    isolated = tuple(int(v) for v in np.flatnonzero(assign < 0))
    if isolated:
        log.info("%d client(s) unreachable from any cluster core: %s", len(isolated), isolated)

    fixed_adjacent = None if server_adjacent is None else frozenset(int(v) for v in server_adjacent)
    clusters = []
    for h in range(n_clusters):
        members = tuple(int(v) for v in np.flatnonzero(assign == h))
        if fixed_adjacent is not None:
            adjacent = frozenset(v for v in members if v in fixed_adjacent)
        else:
            k = math.ceil(server_fraction * len(members)) if server_fraction > 0 else 0
            adjacent = frozenset(int(v) for v in rng.choice(members, size=min(k, len(members)), replace=False))
        if not adjacent:
            raise ClusterInfeasible(f"cluster {h} has no server-adjacent member")
        leader = int(rng.choice(sorted(adjacent)))
        clusters.append(Cluster(h, members, leader, adjacent))
    return ClusterPlan(tuple(clusters), isolated)


def mark_targets(plan: ClusterPlan, fraction: float, seed: int) -> ClusterPlan:
    """Mark ``ceil(fraction * z_h)`` members of each cluster as targets; the leader is always one."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    for c in plan.clusters:
        k = max(1, math.ceil(fraction * c.size - 1e-12))
        others = [v for v in c.members if v != c.leader]
        picked = rng.choice(others, size=k - 1, replace=False).tolist() if k > 1 else []
        out.append(replace(c, targets=(c.leader, *sorted(int(v) for v in picked))))
    return replace(plan, clusters=tuple(out))


def reelect_leader(cluster: Cluster, excluded: Iterable[int], rng: np.random.Generator) -> Cluster:
    """Pick a new leader among live server-adjacent targets of ``cluster``."""
    excluded = set(excluded)
    cands = sorted(v for v in cluster.targets if v in cluster.server_adjacent and v not in excluded)
    if not cands:
        raise ClusterInfeasible(f"cluster {cluster.index}: no live server-adjacent target")
    leader = int(rng.choice(cands))
    targets = (leader, *[t for t in cluster.targets if t != leader])
    return replace(cluster, leader=leader, targets=targets)


def equal_cluster_plan(sizes: Sequence[int], start_id: int = 0) -> ClusterPlan:
    """Hand-built plan with consecutive ids, every member a target, first member leading."""
    clusters = []
    nxt = start_id
    for h, z in enumerate(sizes):
        members = tuple(range(nxt, nxt + z))
        nxt += z
        clusters.append(Cluster(h, members, members[0], frozenset({members[0]}), members))
    return ClusterPlan(tuple(clusters))
