"""Deterministic discrete-event network simulator.

Messages travel over single-hop links with a constant latency, every
transmission is counted and traced, and faults (per-round dropouts,
hijacked relays) are injected from a seeded plan.  ``Simulation`` runs
whole aggregation rounds for either the clustered protocol (one masked
cycle per cluster, concurrently) or the single-cycle baseline (one masked
cycle over every live target on the physical topology).

Link model: inside a cluster the single-hop links are the pairs holding a
communication key.  The baseline routes over physical topology edges.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from .aggregation import (
    DEFAULT_MASK_BOUND,
    FIXED,
    ClusterSum,
    MaskedAccumulator,
    Observation,
    cross_cluster_aggregate,
    mask,
    open_envelope,
    plan_route,
    seal,
    unmask_and_sum,
)
from .crypto import DEFAULT_WINDOW_MS, Envelope, NonceRegistry, encode_vector
from .errors import AuthFailure, ClusterInfeasible, NotNeighbor, NotVotingMember, RouteInfeasible, StaleTimestamp
from .keying import HASH_NAME, KeyPool, KeyStore, Pair, cast_vote, rekey, revoke, setup_votes, verify_and_mark
from .topology import ClusterPlan, NetworkTopology, reelect_leader

log = logging.getLogger(__name__)

SERVER = -1
DEFAULT_LATENCY_MS = 10
DEFAULT_TIMEOUT_MS = 100
SCRIPTS = ("tamper", "eavesdrop", "impersonate")
RELAY_POLICIES = ("none", "fallback", "always")


# -- event loop ----------------------------------------------------------------------

@dataclass(order=True, frozen=True)
class SimEvent:
    time: int
    seq: int
    kind: str = field(compare=False)
    src: int = field(compare=False)
    dst: int = field(compare=False)
    payload: Any = field(compare=False, default=None, repr=False)


class EventLoop:
    """Min-heap of events ordered by (time, insertion order)."""

    def __init__(self):
        self._heap: list[SimEvent] = []
        self._handlers: dict[int, Callable[[SimEvent], None]] = {}
        self._seq = itertools.count()
        self.now = 0

    def schedule(self, delay: int, kind: str, src: int, dst: int, payload=None, handler=None) -> SimEvent:
        ev = SimEvent(self.now + int(delay), next(self._seq), kind, src, dst, payload)
        heapq.heappush(self._heap, ev)
        if handler is not None:
            self._handlers[ev.seq] = handler
        return ev

    def run(self) -> int:
        n = 0
        while self._heap:
            ev = heapq.heappop(self._heap)
            self.now = ev.time
            h = self._handlers.pop(ev.seq, None)
            if h is not None:
                h(ev)
            n += 1
        return n

    def __len__(self) -> int:
        return len(self._heap)


# -- faults --------------------------------------------------------------------------

@dataclass
class FaultPlan:
    dropout_fraction: float = 0.0
    dropout_seed: int = 0
    hijacked: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.dropout_fraction < 1.0:
            raise ValueError("dropout_fraction must lie in [0, 1)")
        for c, s in self.hijacked.items():
            if s not in SCRIPTS:
                raise ValueError(f"unknown attack script {s!r} for client {c}")

    def dropouts(self, round_: int, candidates: Iterable[int]) -> frozenset[int]:
        """A fresh draw of round(fraction * |candidates|) clients for this round."""
        cands = sorted(candidates)
        k = math.floor(self.dropout_fraction * len(cands) + 0.5)
        if k == 0:
            return frozenset()
        rng = np.random.default_rng([self.dropout_seed, round_])
        return frozenset(int(v) for v in rng.choice(cands, size=k, replace=False))

    def to_dict(self) -> dict:
        return {
            "dropout_fraction": self.dropout_fraction,
            "dropout_seed": self.dropout_seed,
            "hijacked": {str(k): v for k, v in sorted(self.hijacked.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FaultPlan":
        return cls(
            float(d.get("dropout_fraction", 0.0)),
            int(d.get("dropout_seed", 0)),
            {int(k): str(v) for k, v in d.get("hijacked", {}).items()},
        )


# -- network -------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    round: int
    time: int
    kind: str  # hop | upload | broadcast
    src: int
    dst: int
    cluster: int
    nbytes: int
    lost: bool = False

    def to_dict(self) -> dict:
        return {
            "round": self.round, "time": self.time, "kind": self.kind, "src": self.src,
            "dst": self.dst, "cluster": self.cluster, "bytes": self.nbytes, "lost": self.lost,
        }


class Network:
    """Single-hop delivery with latency, loss to dead clients and message accounting."""

    def __init__(
        self,
        loop: EventLoop,
        links: Mapping[int, Iterable[int]],
        server_adjacent: Iterable[int] = (),
        *,
        latency_ms: int = DEFAULT_LATENCY_MS,
        timeout_ms: int = DEFAULT_TIMEOUT_MS,
        dead: Iterable[int] = (),
        round_: int = 0,
    ):
        self.loop = loop
        self.links = {v: set(ns) for v, ns in links.items()}
        self.server_adjacent = set(server_adjacent)
        self.latency_ms = latency_ms
        self.timeout_ms = timeout_ms
        self.dead = set(dead)
        self.round = round_
        self.trace: list[TraceRecord] = []
        self.listeners: list[Callable[[int, int, Any], None]] = []

    def is_link(self, a: int, b: int) -> bool:
        if b == SERVER:
            return a in self.server_adjacent
        return b in self.links.get(a, ())

    def deliver(
        self,
        src: int,
        dst: int,
        nbytes: int,
        payload=None,
        on_arrival: Callable[[SimEvent], None] | None = None,
        on_lost: Callable[[SimEvent], None] | None = None,
        *,
        kind: str = "hop",
        cluster: int = -1,
    ) -> bool:
        """Send one message; returns False when it is lost because ``dst`` is down."""
        if not self.is_link(src, dst):
            raise NotNeighbor(f"{src} -> {dst} is not a single-hop link")
        lost = dst in self.dead
        self.trace.append(TraceRecord(self.round, self.loop.now, kind, src, dst, cluster, int(nbytes), lost))
        for fn in self.listeners:
            fn(src, dst, payload)
        if lost:
            if on_lost is not None:
                self.loop.schedule(self.timeout_ms, "timer", src, dst, payload, on_lost)
            return False
        self.loop.schedule(self.latency_ms, "deliver", src, dst, payload, on_arrival)
        return True

    def neighborhood_broadcast(self, origin: int, payload=None, *, within: Iterable[int] | None = None,
                               nbytes: int = 0, cluster: int = -1) -> set[int]:
        """Flood with per-client deduplication; every reached client forwards once.

        The origin sends to all its neighbours, every other client forwards to
        all neighbours except the one it first heard from.  Dead clients
        neither receive nor forward.
        """
        keep = None if within is None else set(within)

        def nbrs(v):
            return sorted(w for w in self.links.get(v, ()) if (keep is None or w in keep))

        if origin in self.dead:
            return set()
        reached = {origin}
        queue = [(origin, None, 0)]
        while queue:
            nxt = []
            for v, parent, depth in queue:
                t = self.loop.now + depth * self.latency_ms
                for w in nbrs(v):
                    if w == parent:
                        continue
                    lost = w in self.dead
                    self.trace.append(TraceRecord(self.round, t, "broadcast", v, w, cluster, nbytes, lost))
                    if lost or w in reached:
                        continue
                    reached.add(w)
                    nxt.append((w, v, depth + 1))
            queue = nxt
        return reached

    def count(self, kind: str) -> int:
        return sum(1 for r in self.trace if r.kind == kind)


# -- reports -------------------------------------------------------------------------

CSV_HEADER = [
    "round", "protocol", "arithmetic", "messages_sent", "aggregation_messages", "hop_messages",
    "upload_messages", "broadcast_messages", "lost_messages", "bytes_sent", "dropouts",
    "clusters_ok", "clusters_total", "contributors", "revoked", "hash",
]


@dataclass
class RoundReport:
    round: int
    protocol: str
    arithmetic: str
    status: dict[int, str]
    routes: dict[int, tuple[int, ...]]
    contributors: dict[int, tuple[int, ...]]
    cluster_sums: dict[int, ClusterSum] = field(repr=False)
    weights: dict[int, Fraction]
    total: np.ndarray | None = field(repr=False)
    dropouts: tuple[int, ...]
    trace: list[TraceRecord] = field(repr=False)
    observations: list[Observation] = field(default_factory=list, repr=False)
    eavesdrop_log: list[dict] = field(default_factory=list, repr=False)
    revoked: tuple[int, ...] = ()
    stranded: tuple[int, ...] = ()
    hash_name: str = HASH_NAME
    weighting: str = "survivors"  # p and q are renormalized over the clients that contributed
    # instrumentation only (``observe=True``): the mask in force for each observation
    observation_masks: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def hop_messages(self) -> int:
        return sum(1 for r in self.trace if r.kind == "hop")

    @property
    def upload_messages(self) -> int:
        return sum(1 for r in self.trace if r.kind == "upload")

    @property
    def broadcast_messages(self) -> int:
        return sum(1 for r in self.trace if r.kind == "broadcast")

    @property
    def aggregation_messages(self) -> int:
        """Hops plus leader uploads: the count compared against the baseline."""
        return self.hop_messages + self.upload_messages

    @property
    def messages_sent(self) -> int:
        return len(self.trace)

    @property
    def lost_messages(self) -> int:
        return sum(1 for r in self.trace if r.lost)

    @property
    def bytes_sent(self) -> int:
        return sum(r.nbytes for r in self.trace)

    @property
    def completed(self) -> bool:
        return self.total is not None

    @property
    def all_contributors(self) -> list[int]:
        return sorted(c for cs in self.contributors.values() for c in cs)

    def csv_row(self) -> list:
        ok = sum(1 for s in self.status.values() if s.startswith("ok"))
        return [
            self.round, self.protocol, self.arithmetic, self.messages_sent, self.aggregation_messages,
            self.hop_messages, self.upload_messages, self.broadcast_messages, self.lost_messages,
            self.bytes_sent, len(self.dropouts), ok, len(self.status), len(self.all_contributors),
            " ".join(map(str, self.revoked)), self.hash_name,
        ]

    def write_trace(self, fh) -> None:
        for r in self.trace:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def write_reports_csv(reports: Iterable[RoundReport], fh) -> None:
    w = csv.writer(fh)
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow(r.csv_row())


# -- one masked cycle ----------------------------------------------------------------

class _Cycle:
    """State of one masked aggregation cycle (a cluster, or the whole baseline)."""

    def __init__(self, sim: "Simulation", index: int, members: list[int], targets: list[int],
                 leader: int, graph: Mapping[int, set[int]], relays: Iterable[int], key_of):
        self.sim = sim
        self.index = index
        self.members = members
        self.targets = set(targets)
        self.leader = leader
        self.graph = graph
        self.relay_pool = set(relays)
        self.key_of = key_of
        self.known_dead: set[int] = set()
        self.attempt = 0
        self.status = "pending"
        self.route_log: list[int] = []
        self.result: ClusterSum | None = None
        self.contributed: list[int] = []
        self.stranded: list[int] = []

    # planning
    def _plan(self, start: int):
        dead = self.known_dead
        g = {v: {w for w in ns if w not in dead} for v, ns in self.graph.items() if v not in dead}
        pending = [t for t in self.targets if t not in dead]
        rng = np.random.default_rng([self.sim.seed, self.sim._round, self.index + 1, self.attempt, len(self.route_log)])
        policy = self.sim.relay_policy
        relays = set() if policy == "none" else self.relay_pool - dead
        if policy == "fallback":
            try:
                return plan_route(g, pending, self.leader, start=start, visited=self.contributed, rng=rng,
                                  cluster=self.index)
            except RouteInfeasible:
                log.info("round %d cluster %d: routing through non-target relays", self.sim._round, self.index)
        return plan_route(g, pending, self.leader, relays=relays, start=start, visited=self.contributed,
                          rng=rng, cluster=self.index)

    def begin(self) -> None:
        sim = self.sim
        own = sim._enc.get(self.leader)
        self.contributed = [self.leader] if own is not None else []
        self.route_log = [self.leader]
        rng = np.random.default_rng([sim.seed, sim._round, self.index + 1, self.attempt, 0xA5])
        scale = sum(sim._sizes[t] for t in self.targets)
        if own is None:
            own = sim.arith.zero(sim._dim)
        masked, self.s = mask(own, rng, sim.mask_bound, sim.arith, scale)
        self.acc = MaskedAccumulator(masked, 0, sim._round)
        try:
            self.route = self._plan(self.leader).order
        except RouteInfeasible:
            self.status = "infeasible"
            return
        self.pos = 0
        self._send()

    def _send(self) -> None:
        sim = self.sim
        a, b = self.route[self.pos], self.route[self.pos + 1]
        key = self.key_of(a, b)
        env = seal(self.acc, key, sim.registry, now_ms=sim._loop.now, key_pair=(a, b))
        env = sim._apply_script(a, env, self.acc)
        sim._net.deliver(a, b, env.nbytes, env, self._arrive, self._lost, cluster=self.index)

    def _lost(self, ev: SimEvent) -> None:
        self.known_dead.add(ev.dst)
        try:
            self.route = self._plan(ev.src).order
        except RouteInfeasible:
            # the dropouts cut some live targets off; serve the ones still reachable
            self._strand_unreachable(ev.src)
            try:
                self.route = self._plan(ev.src).order
            except RouteInfeasible:
                self.status = "infeasible"
                return
        self.pos = 0
        if len(self.route) == 1:  # already back at the leader
            self._finish()
        else:
            self._send()

    def _strand_unreachable(self, start: int) -> None:
        dead = self.known_dead
        usable = set(self.targets) | (set() if self.sim.relay_policy == "none" else self.relay_pool)
        usable = (usable | {self.leader, start}) - dead
        reach, stack = {start}, [start]
        while stack:
            u = stack.pop()
            for w in self.graph.get(u, ()):
                if w in usable and w not in reach:
                    reach.add(w)
                    stack.append(w)
        lost = sorted(t for t in self.targets if t not in reach and t not in dead and t not in self.contributed)
        if lost:
            log.info("round %d cluster %d: targets %s unreachable after dropouts", self.sim._round, self.index, lost)
            self.stranded.extend(lost)
            self.targets -= set(lost)

    def _arrive(self, ev: SimEvent) -> None:
        sim = self.sim
        a, b, env = ev.src, ev.dst, ev.payload
        try:
            acc = open_envelope(env, self.key_of(a, b), (sim._round, self.acc.hop_index), sim._loop.now, sim.window_ms)
        except (AuthFailure, StaleTimestamp) as exc:
            log.info("round %d cluster %d: %s -> %s rejected (%s)", sim._round, self.index, a, b, exc)
            sim.observe_attack(b, a)
            self._retry(suspect=a)
            return
        self.pos += 1
        self.route_log.append(b)
        if b in sim.faults.hijacked and sim.faults.hijacked[b] == "eavesdrop":
            sim._eavesdrop.append({"round": sim._round, "observer": b, "kind": "accumulator",
                                   "hop": acc.hop_index, "cluster": self.index, "value": acc.vector.copy()})
        if self.pos == len(self.route) - 1:
            self.acc = acc
            self._finish()
            return
        if sim.observe:
            sim._observations.append(Observation(sim._round, self.index, b, acc.hop_index, acc.vector.copy(),
                                                 tuple(self.contributed)))
            sim._observation_masks.append(self.s)
        own = None
        if b in self.targets and b not in self.contributed:
            own = sim._enc[b]
            self.contributed.append(b)
        vec = acc.vector if own is None else sim.arith.add(acc.vector, own)
        self.acc = MaskedAccumulator(vec, acc.hop_index + 1, acc.round)
        self._send()

    def _retry(self, suspect: int) -> None:
        if self.attempt >= self.sim.max_retries or suspect == self.leader:
            self.status = "aborted"
            return
        self.attempt += 1
        # the retry avoids the suspect for the rest of the round
        self.known_dead = self.known_dead | {suspect}
        self.targets.discard(suspect)
        self.graph = self.sim._cycle_graph(self.index, self.members)
        self.targets = {t for t in self.targets if t not in self.sim.keys.revoked}
        self.relay_pool -= self.sim.keys.revoked
        if self.leader in self.sim.keys.revoked:
            self.status = "aborted"
            return
        self.begin()

    def _finish(self) -> None:
        sim = self.sim
        if not self.contributed:
            self.status = "empty"
            return
        total = unmask_and_sum(self.acc, self.s, sim.arith)
        denom = sum(sim._sizes[c] for c in self.contributed)
        self.result = ClusterSum(total, denom)
        body = encode_vector(total)
        sim._net.deliver(self.leader, SERVER, len(body) + 8, self.result, self._uploaded,
                         kind="upload", cluster=self.index)

    def _uploaded(self, ev: SimEvent) -> None:
        self.status = "ok" if self.attempt == 0 else "ok-retry"


# -- simulation ----------------------------------------------------------------------

class Simulation:
    """Persistent protocol state across rounds: keys, votes, revocations and the nonce registry."""

    def __init__(
        self,
        plan: ClusterPlan,
        keys: KeyStore,
        *,
        topology: NetworkTopology | None = None,
        ppt_graph: Mapping[int, Iterable[int]] | None = None,
        seed: int = 0,
        arith=FIXED,
        mask_bound: float = DEFAULT_MASK_BOUND,
        latency_ms: int = DEFAULT_LATENCY_MS,
        timeout_ms: int = DEFAULT_TIMEOUT_MS,
        window_ms: int = DEFAULT_WINDOW_MS,
        faults: FaultPlan | None = None,
        relay_policy: str = "fallback",
        vote_threshold: int | None = None,
        rekey_on_revoke: bool = True,
        max_retries: int = 1,
        observe: bool = False,
        strict: bool = False,
    ):
        if relay_policy not in RELAY_POLICIES:
            raise ValueError(f"relay_policy must be one of {RELAY_POLICIES}")
        self.plan = plan
        self.keys = keys
        self.topology = topology
        self.seed = seed
        self.arith = arith
        self.mask_bound = mask_bound
        self.latency_ms = latency_ms
        self.timeout_ms = timeout_ms
        self.window_ms = window_ms
        self.faults = faults or FaultPlan()
        self.relay_policy = relay_policy
        self.vote_threshold = vote_threshold
        self.rekey_on_revoke = rekey_on_revoke
        self.max_retries = max_retries
        self.observe = observe
        self.strict = strict
        self.registry = NonceRegistry()
        self.votes = {}
        self.revocations: list[int] = []
        self.offround_trace: list[TraceRecord] = []
        self._ppt_graph = ppt_graph
        self._ppt_keys: dict[Pair, bytes] | None = None
        self._net: Network | None = None
        self._round = 0

    # -- keys and links
    @property
    def server_adjacent(self) -> set[int]:
        return {v for c in self.plan.clusters for v in c.server_adjacent}

    def _cycle_graph(self, index: int, members) -> dict[int, set[int]]:
        return self.keys.key_graph(members)

    def cfl_links(self) -> dict[int, set[int]]:
        return self.keys.key_graph([v for c in self.plan.clusters for v in c.members])

    def ppt_links(self) -> dict[int, set[int]]:
        if self._ppt_graph is not None:
            g = self._ppt_graph
        elif self.topology is not None:
            g = self.topology.adjacency
        else:
            raise ValueError("the baseline needs a topology or an explicit ppt_graph")
        drop = self.keys.revoked
        return {int(v): {int(w) for w in ns if w not in drop} for v, ns in g.items() if v not in drop}

    def _ppt_key(self, a: int, b: int) -> bytes:
        if self._ppt_keys is None:
            pool = KeyPool(np.random.default_rng([self.seed, 0x99]))
            links = self.ppt_links()
            pairs = sorted({tuple(sorted((v, w))) for v, ns in links.items() for w in ns})
            self._ppt_keys = {Pair(p): pool.draw() for p in pairs}
        return self._ppt_keys[Pair((a, b))]

    def _cfl_key(self, a: int, b: int) -> bytes:
        k = self.keys.comm_key(a, b)
        if k is None:
            raise NotNeighbor(f"{a} and {b} share no communication key")
        return k

    # -- attacks
    def inject_hijack(self, client: int, script: str) -> None:
        if script not in SCRIPTS:
            raise ValueError(f"unknown attack script {script!r}")
        self.plan.cluster_of(client)  # KeyError for unknown clients
        self.faults.hijacked[client] = script

    def _apply_script(self, sender: int, env: Envelope, acc: MaskedAccumulator) -> Envelope:
        script = self.faults.hijacked.get(sender)
        if script is None or sender in self.keys.revoked:
            return env
        if script == "tamper":
            rng = np.random.default_rng([self.seed, self._round, sender, acc.hop_index])
            return env.flip_bit(int(rng.integers(env.n_bits)))
        if script == "impersonate":
            fake = np.random.default_rng([self.seed, self._round, sender, 0x1F]).bytes(16)
            return seal(acc, fake, self.registry, now_ms=self._loop.now, key_pair=env.key_pair)
        return env

    def _overhear(self, src: int, dst: int, payload) -> None:
        if not isinstance(payload, Envelope):
            return
        for spy, script in self.faults.hijacked.items():
            if script != "eavesdrop" or spy in self.keys.revoked:
                continue
            near = {spy}
            if self.topology is not None:
                near |= set(self.topology.adjacency.get(spy, ()))
            if src in near or dst in near:
                self._eavesdrop.append({"round": self._round, "observer": spy, "kind": "ciphertext",
                                        "src": src, "dst": dst, "bytes": payload.wire_bytes()})

    def observe_attack(self, observer: int, suspect: int) -> bool:
        """``observer`` saw evidence against ``suspect``: vote, flood the vote, tally.

        Returns True once the suspect is revoked.
        """
        if suspect in self.keys.revoked:
            return True
        if suspect == SERVER or observer == SERVER:
            return False
        state = self.votes.get(suspect)
        if state is None:
            members = sorted(self.keys.neighbors(suspect))
            rng = np.random.default_rng([self.seed, suspect, 0x707E])
            state = setup_votes(suspect, members, rng, self.vote_threshold)
        try:
            vote = cast_vote(observer, suspect, state)
        except NotVotingMember:
            log.info("client %d may not vote against %d", observer, suspect)
            return False
        cluster = self.plan.cluster_of(suspect)
        net = self._net
        if net is None:
            net = Network(EventLoop(), self.cfl_links(), latency_ms=self.latency_ms, round_=self._round)
        within = [v for v in cluster.members if v != suspect and v not in self.keys.revoked]
        reached = net.neighborhood_broadcast(observer, vote, within=within, nbytes=len(vote), cluster=cluster.index)
        if self._net is None:
            self.offround_trace.extend(net.trace)
        for m in sorted(reached):
            if m in state.voting_keys:
                state = verify_and_mark(state, vote, verifier=m)
        self.votes[suspect] = state
        if state.revocation_met:
            self._revoke(suspect)
            return True
        return False

    def _revoke(self, suspect: int) -> None:
        c = self.plan.cluster_of(suspect)
        if c.leader == suspect:
            rng = np.random.default_rng([self.seed, suspect, 0x1EAD])
            c = reelect_leader(c, self.keys.revoked | {suspect}, rng)
            self.plan = self.plan.with_cluster(c)
        self.keys, partners = revoke(self.keys, self.plan, suspect)
        self.revocations.append(suspect)
        log.info("client %d revoked; re-keying %d partner(s)", suspect, len(partners))
        if self.rekey_on_revoke and partners:
            self.keys = rekey(self.keys, self.plan, partners, self.seed * 1009 + len(self.revocations))

    # -- rounds
    def run_round(self, protocol: str, round_: int, updates: Mapping[int, np.ndarray],
                  sizes: Mapping[int, int]) -> RoundReport:
        """One aggregation round.  ``updates`` are raw local updates, ``sizes`` dataset sizes."""
        if protocol not in ("cfl", "ppt"):
            raise ValueError("protocol must be 'cfl' or 'ppt'")
        self._round = round_
        revoked = self.keys.revoked
        all_targets = sorted(t for t in self.plan.all_targets if t not in revoked)
        dead = self.faults.dropouts(round_, all_targets)
        live_targets = [t for t in all_targets if t not in dead]
        self._sizes = {int(k): int(v) for k, v in sizes.items()}
        self._enc = {t: self.arith.encode_update(updates[t], self._sizes[t]) for t in live_targets}
        self._dim = len(next(iter(updates.values())))
        self._loop = EventLoop()
        self._observations: list[Observation] = []
        self._observation_masks: list[np.ndarray] = []
        self._eavesdrop: list[dict] = []
        links = self.cfl_links() if protocol == "cfl" else self.ppt_links()
        self._net = Network(self._loop, links, self.server_adjacent - revoked, latency_ms=self.latency_ms,
                            timeout_ms=self.timeout_ms, dead=dead, round_=round_)
        self._net.listeners.append(self._overhear)

        cycles: list[_Cycle] = []
        status: dict[int, str] = {}
        if protocol == "cfl":
            for c in self.plan.clusters:
                leader = self._leader_for(c, dead)
                if leader is None:
                    status[c.index] = "no_leader"
                    continue
                members = [v for v in c.members if v not in revoked]
                # dead targets stay on the plan: the cycle only learns of them by timeout
                targets = [t for t in c.targets if t not in revoked]
                cyc = _Cycle(self, c.index, members, targets, leader, self._cycle_graph(c.index, members),
                             [v for v in members if v not in targets], self._cfl_key)
                cycles.append(cyc)
        else:
            rng = np.random.default_rng([self.seed, round_, 0xB5])
            cands = sorted(t for t in live_targets if t in self.server_adjacent)
            if not cands:
                cands = sorted(v for v in self.server_adjacent if v not in dead and v not in revoked and v in links)
            if not cands:
                status[0] = "no_leader"
            else:
                leader = int(rng.choice(cands))
                tset = set(all_targets)
                pool = [v for v in links if v not in tset]
                cycles.append(_Cycle(self, 0, sorted(links), all_targets, leader, links, pool, self._ppt_key))
        for cyc in cycles:
            cyc.begin()
        self._loop.run()

        sums, contributors, routes = {}, {}, {}
        for cyc in cycles:
            if cyc.status == "pending":
                cyc.status = "aborted"
            status[cyc.index] = cyc.status
            routes[cyc.index] = tuple(cyc.route_log)
            if cyc.status.startswith("ok"):
                sums[cyc.index] = cyc.result
                contributors[cyc.index] = tuple(sorted(cyc.contributed))
        if self.strict:
            bad = [h for h, s in status.items() if s == "infeasible"]
            if bad:
                raise RouteInfeasible(f"round {round_}: no route in cluster(s) {bad}")
        weights, total = {}, None
        grand = sum(s.denom for s in sums.values())
        if grand:
            weights = {h: Fraction(s.denom, grand) for h, s in sorted(sums.items())}
            total = cross_cluster_aggregate([(sums[h], weights[h]) for h in sorted(sums)], self.arith)
        report = RoundReport(
            round_, protocol, self.arith.name, dict(sorted(status.items())), routes, contributors, sums,
            weights, total, tuple(sorted(dead)), list(self._net.trace), self._observations, self._eavesdrop,
            tuple(self.revocations), tuple(sorted(v for cyc in cycles for v in cyc.stranded)),
        )
        report.observation_masks = self._observation_masks
        self._net = None
        return report

    def _leader_for(self, c, dead) -> int | None:
        excluded = set(dead) | self.keys.revoked
        if c.leader not in excluded:
            return c.leader
        rng = np.random.default_rng([self.seed, self._round, c.index, 0x1E])
        try:
            return reelect_leader(c, excluded, rng).leader
        except ClusterInfeasible:
            pass
        # no live server-adjacent target: a server-adjacent relay leads and contributes nothing
        cands = sorted(v for v in c.server_adjacent if v not in excluded)
        return int(rng.choice(cands)) if cands else None
