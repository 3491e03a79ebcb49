"""Masked inner-cluster aggregation along a depth-first route, then
cross-cluster weighting and the global update.

A client's weighted update p_{h,i} x is relayed as ``count * x`` with the
contributors' dataset total as an implied denominator that the leader
applies after unmasking.  The result is the same p-weighted sum, and p is
automatically renormalized over whoever actually contributed.

In fixed-point mode ``x`` is first quantized to ``round(x * 2**frac_bits)``
so masking, relaying and unmasking are exact integer operations (wrapping
int64) and the only rounding happens once, when the server combines
clusters.  The float mode uses plain float64 throughout.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .crypto import (
    DEFAULT_WINDOW_MS,
    Envelope,
    NonceRegistry,
    StampedPayload,
    ae_decrypt,
    ae_encrypt,
    decode_vector,
    encode_vector,
    validate_timestamp,
)
from .errors import DimensionMismatch, RouteInfeasible, StaleTimestamp, WeightMismatch

log = logging.getLogger(__name__)

DEFAULT_MASK_BOUND = 1e3
FRAC_BITS = 32
_RAW_LIMIT = 1 << 56


# -- arithmetic ------------------------------------------------------------------

@dataclass(frozen=True)
class FixedPoint:
    frac_bits: int = FRAC_BITS
    name = "fixed"

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    def quantize(self, x) -> np.ndarray:
        v = np.rint(np.asarray(x, dtype=np.float64) * self.scale)
        if v.size and np.abs(v).max() >= _RAW_LIMIT:
            raise OverflowError("update too large for fixed-point accumulation")
        return v.astype(np.int64)

    def encode_update(self, x, count: int) -> np.ndarray:
        raw = self.quantize(x) * np.int64(count)
        if raw.size and np.abs(raw).max() >= _RAW_LIMIT:
            raise OverflowError("weighted update too large for fixed-point accumulation")
        return raw

    def zero(self, d: int) -> np.ndarray:
        return np.zeros(d, dtype=np.int64)

    def add(self, a, b) -> np.ndarray:
        return np.add(a, b, dtype=np.int64)  # wraps modulo 2**64

    def sub(self, a, b) -> np.ndarray:
        return np.subtract(a, b, dtype=np.int64)

    def draw_mask(self, d: int, bound: float, denom: int, rng: np.random.Generator) -> np.ndarray:
        hi = int(bound * self.scale) * max(int(denom), 1)
        return rng.integers(-hi, hi, size=d, endpoint=True, dtype=np.int64)

    def to_float(self, raw, denom: int = 1) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64) / (float(self.scale) * denom)


@dataclass(frozen=True)
class FloatPoint:
    name = "float"

    def encode_update(self, x, count: int) -> np.ndarray:
        return float(count) * np.asarray(x, dtype=np.float64)

    def zero(self, d: int) -> np.ndarray:
        return np.zeros(d, dtype=np.float64)

    def add(self, a, b) -> np.ndarray:
        return np.add(a, b, dtype=np.float64)

    def sub(self, a, b) -> np.ndarray:
        return np.subtract(a, b, dtype=np.float64)

    def draw_mask(self, d: int, bound: float, denom: int, rng: np.random.Generator) -> np.ndarray:
        hi = bound * max(int(denom), 1)
        return rng.uniform(-hi, hi, size=d)

    def to_float(self, raw, denom: int = 1) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64) / denom


FIXED = FixedPoint()
FLOAT = FloatPoint()


def arithmetic(name: str):
    return {"fixed": FIXED, "float": FLOAT}[name]


# -- masking -----------------------------------------------------------------------

def mask(leader_x: np.ndarray, seed, bound: float = DEFAULT_MASK_BOUND, arith=FIXED, denom: int = 1):
    """Return (masked, noise) with noise uniform in [-bound, bound] per dimension."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = arith.draw_mask(len(leader_x), bound, denom, rng)
    return arith.add(leader_x, s), s


# -- routing ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AggregationRoute:
    cluster: int
    leader: int
    order: tuple[int, ...]
    required: frozenset[int]

    @property
    def transmissions(self) -> int:
        return len(self.order) - 1

    @property
    def revisits(self) -> int:
        """Hops that re-enter an already visited client, not counting the final return to the leader."""
        return max(self.transmissions - len(set(self.order)), 0)

    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.order, self.order[1:]))


def _bfs_path(adj: Mapping[int, Sequence[int]], src: int, dst: int) -> list[int] | None:
    if src == dst:
        return [src]
    prev = {src: None}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in prev:
                prev[v] = u
                if v == dst:
                    path = [v]
                    while prev[path[-1]] is not None:
                        path.append(prev[path[-1]])
                    return path[::-1]
                q.append(v)
    return None


def _bfs_nearest(adj, src: int, goals: set[int]) -> list[int] | None:
    prev = {src: None}
    q = deque([src])
    while q:
        u = q.popleft()
        if u in goals:
            path = [u]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            return path[::-1]
        for v in adj[u]:
            if v not in prev:
                prev[v] = u
                q.append(v)
    return None


def _reaches(adj, start: int, blocked: set[int], goals: set[int]) -> bool:
    if start in goals:
        return True
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v in seen or v in blocked:
                continue
            if v in goals:
                return True
            seen.add(v)
            stack.append(v)
    return False


def plan_route(
    graph: Mapping[int, Iterable[int]],
    targets: Iterable[int],
    leader: int,
    *,
    relays: Iterable[int] = (),
    start: int | None = None,
    visited: Iterable[int] = (),
    rng: np.random.Generator | None = None,
    cluster: int = -1,
) -> AggregationRoute:
    """Depth-first aggregation route from ``start`` (default: the leader) back to the leader.

    Unvisited targets are always preferred, the one with the fewest unvisited
    neighbours first (random tie-break when ``rng`` is given).  Other nodes
    (``relays``, already-visited targets) are entered only if an unvisited
    target lies beyond them.  Dead ends are left by backtracking along the
    DFS stack, and the route closes along a shortest path to the leader.
    """
    start = leader if start is None else start
    targets = set(targets)
    allowed = targets | set(relays) | {leader, start}
    adj = {v: sorted(w for w in graph.get(v, ()) if w in allowed and w != v) for v in allowed}
    pending = targets - set(visited) - {start}
    reach = {start}
    frontier = [start]
    while frontier:
        u = frontier.pop()
        for v in adj[u]:
            if v not in reach:
                reach.add(v)
                frontier.append(v)
    if leader not in reach or not pending <= reach:
        raise RouteInfeasible(f"cluster {cluster}: live targets are not connected to {start}")

    tie = (lambda v: rng.random()) if rng is not None else (lambda v: v)
    order = [start]
    stack = [start]
    seen = {start}
    while pending:
        cur = stack[-1]
        fresh = [w for w in adj[cur] if w not in seen]
        cand = [w for w in fresh if w in pending]
        if cand:
            keyed = [(sum(1 for u in adj[w] if u in pending and u not in seen and u != w), tie(w), w) for w in cand]
            nxt = min(keyed)[2]
        else:
            cand = [w for w in fresh if _reaches(adj, w, seen, pending)]
            nxt = min(cand, key=tie) if cand else None
        if nxt is None:
            stack.pop()
            if stack:
                order.append(stack[-1])
                continue
            # every remaining target hides behind already-visited nodes: walk
            # the shortest path to the nearest one and resume from there
            path = _bfs_nearest(adj, order[-1], pending)
            if path is None:
                raise RouteInfeasible(f"cluster {cluster}: traversal exhausted with targets pending")
            for v in path[1:]:
                seen.add(v)
                pending.discard(v)
            order.extend(path[1:])
            stack = [path[-1]]
            continue
        seen.add(nxt)
        stack.append(nxt)
        order.append(nxt)
        pending.discard(nxt)
    back = _bfs_path(adj, order[-1], leader)
    order.extend(back[1:])
    return AggregationRoute(cluster, leader, tuple(order), frozenset(targets))


# -- relay -----------------------------------------------------------------------------

@dataclass
class MaskedAccumulator:
    vector: np.ndarray
    hop_index: int
    round: int


def seal(acc: MaskedAccumulator, key: bytes, registry: NonceRegistry, *, now_ms: int = 0,
         key_pair: tuple[int, int] | None = None) -> Envelope:
    stamped = StampedPayload(encode_vector(acc.vector), acc.round, acc.hop_index, int(now_ms))
    nonce = registry.next_nonce(key, acc.round, acc.hop_index)
    return ae_encrypt(stamped, key, nonce, registry, key_pair)


def open_envelope(env: Envelope, key: bytes, expected: tuple[int, int], now_ms: int = 0,
                  window_ms: int = DEFAULT_WINDOW_MS) -> MaskedAccumulator:
    """Decrypt and check the timestamp; raises AuthFailure or StaleTimestamp."""
    stamped = ae_decrypt(env, key)
    if not validate_timestamp(stamped, expected, now_ms, window_ms):
        raise StaleTimestamp(f"got {(stamped.round, stamped.step)} expected {expected}")
    return MaskedAccumulator(decode_vector(stamped.payload), stamped.step, stamped.round)


def relay_step(
    acc: MaskedAccumulator,
    own_x: np.ndarray | None,
    comm_key: bytes,
    registry: NonceRegistry,
    arith=FIXED,
    *,
    now_ms: int = 0,
    key_pair: tuple[int, int] | None = None,
) -> tuple[Envelope, MaskedAccumulator]:
    """Add ``own_x`` (None on a revisit), advance the hop and seal for the next client."""
    vec = acc.vector if own_x is None else arith.add(acc.vector, own_x)
    nxt = MaskedAccumulator(vec, acc.hop_index + 1, acc.round)
    return seal(nxt, comm_key, registry, now_ms=now_ms, key_pair=key_pair), nxt


def unmask_and_sum(acc: MaskedAccumulator, s: np.ndarray, arith=FIXED) -> np.ndarray:
    return arith.sub(acc.vector, s)


# -- cross-cluster -------------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterSum:
    """A cluster's aggregate.  ``denom`` is the implied divisor of fixed-point values (1 for float)."""

    values: np.ndarray
    denom: int = 1


def cross_cluster_aggregate(sums: Sequence[tuple], arith=FIXED) -> np.ndarray:
    """Weighted sum of cluster results; returns float64.

    Each entry is ``(sum_h, q_h)``.  In fixed-point mode ``sum_h`` is a
    ClusterSum and ``q_h`` a Fraction; the combination is carried out in
    exact rational arithmetic and rounded once.
    """
    if not sums:
        raise WeightMismatch("no cluster sums to aggregate")
    qs = [q for _, q in sums]
    if all(isinstance(q, Fraction) for q in qs):
        if sum(qs) != 1:
            raise WeightMismatch(f"cluster weights sum to {sum(qs)}, not 1")
    elif abs(math.fsum(float(q) for q in qs) - 1.0) > 1e-12:
        raise WeightMismatch(f"cluster weights sum to {math.fsum(float(q) for q in qs)}, not 1")

    if arith.name == "float":
        vals = [
            np.asarray(s.values, dtype=np.float64) / s.denom if isinstance(s, ClusterSum) else np.asarray(s, dtype=np.float64)
            for s, _ in sums
        ]
        _same_dim(vals)
        out = np.zeros_like(vals[0])
        for v, q in zip(vals, qs):
            out = out + float(q) * v
        return out

    coeffs = []
    for s, q in sums:
        if not isinstance(s, ClusterSum):
            s = ClusterSum(np.asarray(s), 1)
        coeffs.append((s.values, Fraction(q) / s.denom))
    _same_dim([v for v, _ in coeffs])
    common = math.lcm(*(c.denominator for _, c in coeffs))
    num = [0] * len(coeffs[0][0])
    for v, c in coeffs:
        f = int(c * common)
        for k, x in enumerate(v.tolist()):
            num[k] += x * f
    raw = np.array([_round_div(n, common) for n in num], dtype=np.int64)
    return arith.to_float(raw)


def _round_div(n: int, d: int) -> int:
    """n / d rounded half to even, exact for Python ints."""
    q, r = divmod(n, d)
    twice = 2 * r
    if twice > d or (twice == d and q % 2 == 1):
        q += 1
    return q


def _same_dim(vals) -> None:
    if len({np.shape(v) for v in vals}) > 1:
        raise DimensionMismatch("cluster sums differ in dimension")


def global_update(w: np.ndarray, total: np.ndarray) -> np.ndarray:
    w, total = np.asarray(w, dtype=np.float64), np.asarray(total, dtype=np.float64)
    if w.shape != total.shape:
        raise DimensionMismatch(f"{w.shape} vs {total.shape}")
    return w + total


def flat_update(w: np.ndarray, updates: Mapping[int, np.ndarray], sizes: Mapping[int, int], arith=FIXED) -> np.ndarray:
    """Single-level weighted aggregation over all clients, as a server with direct links would do it."""
    total = sum(sizes[i] for i in updates)
    if arith.name == "float":
        acc = np.zeros(len(w))
        for i, x in updates.items():
            acc = acc + (sizes[i] / total) * np.asarray(x, dtype=np.float64)
        return global_update(w, acc)
    num = [0] * len(w)
    for i, x in updates.items():
        for k, v in enumerate(arith.quantize(x).tolist()):
            num[k] += v * sizes[i]
    raw = np.array([_round_div(n, total) for n in num], dtype=np.int64)
    return global_update(w, arith.to_float(raw))


# -- synchronous single-cluster pipeline ---------------------------------------------------

@dataclass
class Observation:
    """An accumulator value held by a client during a round."""

    round: int
    cluster: int
    holder: int
    hop: int
    value: np.ndarray
    contributed: tuple[int, ...]


@dataclass
class ClusterResult:
    sum: ClusterSum
    route: AggregationRoute
    messages: int
    bytes: int
    mask: np.ndarray = field(repr=False)
    observations: list[Observation] = field(default_factory=list, repr=False)


def aggregate_cluster(
    route: AggregationRoute,
    weighted: Mapping[int, np.ndarray],
    comm_key,
    registry: NonceRegistry,
    rng: np.random.Generator,
    *,
    round_: int = 0,
    arith=FIXED,
    denom: int = 1,
    bound: float = DEFAULT_MASK_BOUND,
    observe: bool = False,
) -> ClusterResult:
    """Run mask, sealed relays and unmask along a fixed route, without a network model.

    ``weighted`` holds each target's encoded update; ``comm_key(a, b)``
    returns the pair's communication key.
    """
    leader = route.leader
    masked, s = mask(weighted[leader], rng, bound, arith, denom)
    acc = MaskedAccumulator(masked, 0, round_)
    contributed = [leader]
    obs: list[Observation] = []
    n_bytes = 0
    order = route.order
    for hop, (a, b) in enumerate(zip(order, order[1:])):
        key = comm_key(a, b)
        if hop == 0:
            env = seal(acc, key, registry, key_pair=(a, b))
        else:
            own = weighted[a] if a in weighted and a not in contributed else None
            if own is not None:
                contributed.append(a)
            env, acc = relay_step(acc, own, key, registry, arith, key_pair=(a, b))
        n_bytes += env.nbytes
        acc = open_envelope(env, key, (round_, acc.hop_index))
        if observe and b != leader:
            obs.append(Observation(round_, route.cluster, b, acc.hop_index, acc.vector.copy(), tuple(contributed)))
    total = unmask_and_sum(acc, s, arith)
    return ClusterResult(ClusterSum(total, denom), route, route.transmissions, n_bytes, s, obs)
