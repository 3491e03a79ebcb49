"""Pairwise key predistribution, challenge-response key discovery, voting
revocation and re-keying within clusters."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .crypto import BLOCK_BYTES, KEY_BYTES, ck_decrypt, ck_encrypt, xor_bytes
from .errors import ClusterInfeasible, NoSharedKey, NotVotingMember, RingInfeasible
from .topology import ClusterPlan

log = logging.getLogger(__name__)

HASH_NAME = "sha256"
VOTE_KEY_BYTES = 32
CHALLENGE_BYTES = BLOCK_BYTES
DEFAULT_REKEY_PERIOD = 10

Pair = frozenset


def vote_hash(v: bytes) -> bytes:
    return hashlib.new(HASH_NAME, v).digest()


@dataclass(frozen=True)
class RingEntry:
    peer: int
    key: bytes


@dataclass(frozen=True)
class KeyRing:
    owner: int
    entries: tuple[RingEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def peers(self) -> tuple[int, ...]:
        return tuple(e.peer for e in self.entries)

    @property
    def keys(self) -> tuple[bytes, ...]:
        return tuple(e.key for e in self.entries)

    def key_for(self, peer: int) -> bytes | None:
        for e in self.entries:
            if e.peer == peer:
                return e.key
        return None


# -- random pairing -----------------------------------------------------------

def _pair_stubs(
    need: Mapping[int, int],
    forbidden: Mapping[int, set[int]],
    rng: np.random.Generator,
    max_restarts: int = 50,
) -> tuple[list[tuple[int, int]], dict[int, int]]:
    """Randomly join nodes so node v gains ``need[v]`` new distinct partners.

    ``forbidden`` holds partners a node already has.  Dead ends are repaired
    by switching one previously made edge (a, b) into (u, a), (v, b); only
    edges made in this call are switched.  Returns the new edges and any
    deficit that could not be placed.
    """
    nodes = sorted(v for v, k in need.items() if k > 0)
    for _ in range(max_restarts):
        adj = {v: set(forbidden.get(v, ())) for v in need}
        stubs = [v for v in nodes for _ in range(need[v])]
        rng.shuffle(stubs)
        made: list[tuple[int, int]] = []
        left: dict[int, int] = {}
        stuck = False
        while stubs:
            u = stubs.pop()
            partner_idx = None
            if stubs:
                for _ in range(24):
                    i = int(rng.integers(len(stubs)))
                    if stubs[i] != u and stubs[i] not in adj[u]:
                        partner_idx = i
                        break
                else:
                    ok = [i for i, w in enumerate(stubs) if w != u and w not in adj[u]]
                    if ok:
                        partner_idx = ok[int(rng.integers(len(ok)))]
            if partner_idx is not None:
                v = stubs[partner_idx]
                stubs[partner_idx] = stubs[-1]
                stubs.pop()
                adj[u].add(v)
                adj[v].add(u)
                made.append((u, v))
                continue
            if not stubs:
                left[u] = left.get(u, 0) + 1
                continue
            # dead end: u cannot pair with any remaining stub, so v == u or v is
            # already adjacent to u; switch an earlier edge (a, b) into (u, a), (v, b)
            v = stubs[-1]
            switched = False
            for ei in (rng.permutation(len(made)) if made else ()):
                a, b = made[ei]
                for a_, b_ in ((a, b), (b, a)):
                    if a_ == u or a_ in adj[u] or b_ == v or b_ in adj[v]:
                        continue
                    adj[a_].discard(b_)
                    adj[b_].discard(a_)
                    made[ei] = (u, a_)
                    adj[u].add(a_)
                    adj[a_].add(u)
                    made.append((v, b_))
                    adj[v].add(b_)
                    adj[b_].add(v)
                    stubs.pop()
                    switched = True
                    break
                if switched:
                    break
            if not switched:
                stuck = True
                break
        if not stuck:
            return made, left
    raise RingInfeasible("random pairing failed to converge; ring size too close to cluster size")


def random_ring_graph(members: Iterable[int], m: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Edges of a uniform-ish random graph where every member has exactly ``m`` partners.

    When ``len(members) * m`` is odd one member necessarily gets ``m + 1``.
    """
    members = sorted(members)
    n = len(members)
    if m < 0:
        raise ValueError("ring size must be >= 0")
    if m == 0:
        return []
    if m >= n:
        raise RingInfeasible(f"ring size {m} needs more than {n - 1} distinct peers")
    if m == n - 1:
        return [(a, b) for i, a in enumerate(members) for b in members[i + 1:]]
    edges, left = _pair_stubs({v: m for v in members}, {}, rng)
    adj: dict[int, set[int]] = {v: set() for v in members}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    for u, k in left.items():
        for _ in range(k):
            cands = [w for w in members if w != u and w not in adj[u]]
            w = cands[int(rng.integers(len(cands)))]
            edges.append((u, w))
            adj[u].add(w)
            adj[w].add(u)
    return edges


class KeyPool:
    """Seeded stream of fresh pairwise keys; never hands out the same key twice."""

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self._issued: set[bytes] = set()

    def draw(self) -> bytes:
        while True:
            k = self._rng.bytes(KEY_BYTES)
            if k not in self._issued:
                self._issued.add(k)
                return k


def _rings_from_edges(members: Iterable[int], edges, pool: KeyPool) -> dict[int, KeyRing]:
    entries: dict[int, list[RingEntry]] = {v: [] for v in members}
    for a, b in edges:
        k = pool.draw()
        entries[a].append(RingEntry(b, k))
        entries[b].append(RingEntry(a, k))
    return {v: KeyRing(v, tuple(sorted(es, key=lambda e: e.peer))) for v, es in entries.items()}


def _ring_size_for(m_h, cluster_index: int) -> int:
    return int(m_h[cluster_index]) if isinstance(m_h, Mapping) else int(m_h)


def predistribute_keyrings(plan: ClusterPlan, m_h, pool_seed: int) -> dict[int, KeyRing]:
    """Give each client ``m_h`` (peer, key) entries matched within its own cluster.

    ``m_h`` is an int or a mapping from cluster index to ring size.  A size of
    0 is only meaningful for single-member clusters and yields empty rings.
    """
    rings: dict[int, KeyRing] = {}
    for c in plan.clusters:
        m = _ring_size_for(m_h, c.index)
        if m < 0 or (m == 0 and c.size > 1):
            raise ValueError(f"cluster {c.index}: ring size must be >= 1")
        if m >= c.size and c.size > 1 or (m > 0 and c.size == 1):
            raise RingInfeasible(f"cluster {c.index}: m_h={m} >= z_h={c.size}")
        rng = np.random.default_rng([pool_seed, c.index])
        edges = random_ring_graph(c.members, m, rng)
        rings.update(_rings_from_edges(c.members, edges, KeyPool(rng)))
    return rings


# -- challenge / response -------------------------------------------------------

@dataclass(frozen=True)
class Challenge:
    broadcaster: int
    plaintext: bytes
    ciphertexts: tuple[bytes, ...]


def challenge(broadcaster: int, ring: KeyRing, nonce_seed) -> Challenge:
    if not ring.entries:
        raise ValueError("cannot challenge with an empty ring")
    rng = nonce_seed if isinstance(nonce_seed, np.random.Generator) else np.random.default_rng(nonce_seed)
    a = rng.bytes(CHALLENGE_BYTES)
    return Challenge(broadcaster, a, tuple(ck_encrypt(k, a) for k in ring.keys))


def discover_shared(responder_ring: KeyRing, ch: Challenge) -> list[bytes]:
    """Keys in the responder's ring that decrypt one of the challenge ciphertexts to its plaintext."""
    if not ch.ciphertexts:
        return []
    blob = b"".join(ch.ciphertexts)
    n = len(ch.ciphertexts)
    shared = []
    for k in responder_ring.keys:
        plain = ck_decrypt(k, blob)
        if any(plain[i * BLOCK_BYTES:(i + 1) * BLOCK_BYTES] == ch.plaintext for i in range(n)):
            shared.append(k)
    return shared


def derive_comm_key(shared: list[bytes]) -> bytes:
    """XOR all shared keys.  An all-zero result falls back to the smallest shared key."""
    if not shared:
        raise NoSharedKey("no shared pairwise key")
    k = xor_bytes(shared)
    if not any(k):
        log.warning("shared keys XOR to zero; falling back to lexicographically first key")
        return min(shared)
    return k


def establish_comm_keys(
    rings: Mapping[int, KeyRing],
    members: Iterable[int],
    seed,
    broadcasters: Iterable[int] | None = None,
) -> dict[Pair, bytes]:
    """Run the challenge-response exchange among ``members``.

    Every broadcaster challenges; every other member responds.  A pair's key
    is derived once, on the first challenge that reveals it.
    """
    members = sorted(members)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out: dict[Pair, bytes] = {}
    for i in sorted(members if broadcasters is None else broadcasters):
        ring = rings.get(i)
        if ring is None or not ring.entries:
            continue
        ch = challenge(i, ring, rng)
        for j in members:
            if j == i or Pair((i, j)) in out:
                continue
            shared = discover_shared(rings[j], ch)
            if shared:
                out[Pair((i, j))] = derive_comm_key(shared)
    return out


# -- voting -----------------------------------------------------------------------

def default_threshold(n_members: int) -> int:
    return max(1, min(n_members, math.ceil(n_members / 2) + 1))


@dataclass(frozen=True)
class VoteState:
    suspect: int
    voting_members: tuple[int, ...]
    voting_keys: Mapping[int, bytes] = field(repr=False)
    known_hashes: Mapping[int, Mapping[int, bytes]] = field(repr=False)
    threshold: int
    marked: frozenset[int] = frozenset()

    @property
    def revocation_met(self) -> bool:
        return len(self.marked) >= self.threshold


def setup_votes(suspect: int, members: Iterable[int], rng: np.random.Generator, threshold: int | None = None) -> VoteState:
    """Trusted setup: one voting key per member, each member learns the others' hashes."""
    members = tuple(sorted(members))
    keys = {m: rng.bytes(VOTE_KEY_BYTES) for m in members}
    hashes = {m: vote_hash(k) for m, k in keys.items()}
    known = {m: {o: hashes[o] for o in members if o != m} for m in members}
    l_h = default_threshold(len(members)) if threshold is None else threshold
    return VoteState(suspect, members, keys, known, l_h)


def cast_vote(member: int, suspect: int, state: VoteState) -> bytes:
    if suspect != state.suspect or member not in state.voting_keys:
        raise NotVotingMember(f"client {member} is not a voting member for {suspect}")
    return state.voting_keys[member]


def verify_and_mark(state: VoteState, vote: bytes, verifier: int | None = None) -> VoteState:
    h = vote_hash(vote)
    views = [state.known_hashes[verifier]] if verifier is not None else state.known_hashes.values()
    owner = None
    for view in views:
        for m, hm in view.items():
            if hm == h:
                owner = m
                break
        if owner is not None:
            break
    if owner is None:
        log.debug("vote against %s rejected: unknown hash", state.suspect)
        return state
    if owner in state.marked:
        return state
    return replace(state, marked=state.marked | {owner})


# -- key store ----------------------------------------------------------------------

@dataclass(frozen=True)
class KeyStore:
    """Rings and communication keys for every cluster of a plan."""

    rings: Mapping[int, KeyRing]
    comm_keys: Mapping[Pair, bytes]
    ring_sizes: Mapping[int, int]
    revoked: frozenset[int] = frozenset()
    stale: frozenset[int] = frozenset()

    def comm_key(self, a: int, b: int) -> bytes | None:
        return self.comm_keys.get(Pair((a, b)))

    def neighbors(self, client: int) -> set[int]:
        if client in self.revoked:
            return set()
        out = set()
        for p in self.comm_keys:
            if client in p:
                (other,) = p - {client}
                if other not in self.revoked:
                    out.add(other)
        return out

    def key_graph(self, nodes: Iterable[int]) -> dict[int, set[int]]:
        keep = set(nodes) - self.revoked
        adj = {v: set() for v in keep}
        for p in self.comm_keys:
            a, b = tuple(p)
            if a in keep and b in keep:
                adj[a].add(b)
                adj[b].add(a)
        return adj

    def dump(self, path) -> None:
        """Write every secret in the store to JSON.  Debug use only."""
        doc = {
            "hash": HASH_NAME,
            "revoked": sorted(self.revoked),
            "rings": {str(o): [[e.peer, e.key.hex()] for e in r.entries] for o, r in sorted(self.rings.items())},
            "comm_keys": [[*sorted(p), k.hex()] for p, k in sorted(self.comm_keys.items(), key=lambda kv: sorted(kv[0]))],
        }
        Path(path).write_text(json.dumps(doc, indent=1))


def establish_keys(plan: ClusterPlan, m_h, seed: int) -> KeyStore:
    """Predistribute rings and run challenge-response in every cluster."""
    rings = predistribute_keyrings(plan, m_h, seed)
    comm: dict[Pair, bytes] = {}
    for c in plan.clusters:
        comm.update(establish_comm_keys(rings, c.members, np.random.default_rng([seed, c.index, 1])))
    sizes = {c.index: _ring_size_for(m_h, c.index) for c in plan.clusters}
    return KeyStore(rings, comm, sizes)


def revoke(store: KeyStore, plan: ClusterPlan, suspect: int) -> tuple[KeyStore, frozenset[int]]:
    """Cut every key involving ``suspect``; returns the new store and its ex-partners.

    Raises ClusterInfeasible when the suspect currently leads its cluster:
    the caller must elect a new leader and revoke again.
    """
    ring = store.rings.get(suspect)
    if ring is None or suspect in store.revoked:
        return store, frozenset()
    for c in plan.clusters:
        if c.leader == suspect:
            raise ClusterInfeasible(f"revoked client {suspect} leads cluster {c.index}; re-elect first")
    partners = frozenset(ring.peers) | frozenset(
        next(iter(p - {suspect})) for p in store.comm_keys if suspect in p
    )
    rings = dict(store.rings)
    rings[suspect] = KeyRing(suspect)
    for p in ring.peers:
        r = rings[p]
        rings[p] = KeyRing(p, tuple(e for e in r.entries if e.peer != suspect))
    comm = {p: k for p, k in store.comm_keys.items() if suspect not in p}
    new = replace(store, rings=rings, comm_keys=comm, revoked=store.revoked | {suspect},
                  stale=(store.stale | partners) - {suspect})
    return new, partners


def rekey(store: KeyStore, plan: ClusterPlan, affected: Iterable[int], seed: int) -> KeyStore:
    """Rebuild keys among ``affected`` clients; every other ring stays byte-identical.

    Entries between two affected clients are dropped and each affected
    client is refilled to its cluster's ring size by fresh pairings among the
    affected set, then challenge-response is rerun for them.
    """
    affected = set(affected) - store.revoked
    if not affected:
        return store
    rings = dict(store.rings)
    comm = dict(store.comm_keys)
    for c in plan.clusters:
        aff = sorted(affected & set(c.members))
        if not aff:
            continue
        rng = np.random.default_rng([seed, c.index, 2])
        pool = KeyPool(rng)
        aff_set = set(aff)
        for a in aff:
            rings[a] = KeyRing(a, tuple(e for e in rings[a].entries if e.peer not in aff_set))
        m = store.ring_sizes.get(c.index, 0)
        live = [v for v in c.members if v not in store.revoked]
        # revocations shrink the cluster; a ring can hold at most every live peer
        m = min(m, max(len(live) - 1, 0))
        need = {a: max(0, m - len(rings[a])) for a in aff}
        forbidden = {a: set(rings[a].peers) for a in aff}
        edges, left = _pair_stubs(need, forbidden, rng)
        if left:
            log.info("rekey cluster %d: %d ring slot(s) left unfilled", c.index, sum(left.values()))
        fresh = _rings_from_edges(aff, edges, pool)
        for a in aff:
            rings[a] = KeyRing(a, tuple(sorted(rings[a].entries + fresh[a].entries, key=lambda e: e.peer)))
        for p in [p for p in comm if p & aff_set]:
            del comm[p]
        comm.update(establish_comm_keys(rings, live, rng, broadcasters=aff))
    return replace(store, rings=rings, comm_keys=comm, stale=store.stale - affected)
