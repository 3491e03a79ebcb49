from fractions import Fraction
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cflsim.aggregation import (
    FIXED,
    FLOAT,
    AggregationRoute,
    ClusterSum,
    MaskedAccumulator,
    _round_div,
    aggregate_cluster,
    cross_cluster_aggregate,
    flat_update,
    global_update,
    mask,
    open_envelope,
    plan_route,
    relay_step,
    seal,
    unmask_and_sum,
)
from cflsim.crypto import NonceRegistry, ae_gen
from cflsim.errors import AuthFailure, DimensionMismatch, RouteInfeasible, WeightMismatch


def complete(nodes):
    return {v: [w for w in nodes if w != v] for v in nodes}


def pair_keys(seed=0):
    cache = {}

    def key(a, b):
        p = (min(a, b), max(a, b))
        if p not in cache:
            cache[p] = ae_gen(seed=[seed, *p])
        return cache[p]

    return key


def check_route(route, graph, targets, leader, allowed):
    assert route.order[0] == leader and route.order[-1] == leader
    assert set(targets) <= set(route.order)
    assert set(route.order) <= set(allowed)
    for a, b in route.edges():
        assert b in graph[a]


# -- masking -------------------------------------------------------------------------

@pytest.mark.parametrize("arith", [FIXED, FLOAT])
def test_mask_removes_exactly(arith):
    x = arith.encode_update(np.linspace(-3, 3, 50), 7)
    masked, s = mask(x, 1, 100.0, arith)
    if arith is FIXED:
        assert np.array_equal(arith.sub(masked, s), x)
    else:
        assert np.allclose(arith.sub(masked, s), x, rtol=0, atol=1e-9)
    assert not np.array_equal(masked, x)


def test_mask_bounds():
    x = FIXED.encode_update(np.ones(10), 1)
    masked, s = mask(x, 0, 0.0)
    assert np.array_equal(masked, x) and not s.any()
    _, s = mask(FIXED.zero(10_000), 2, 5.0)
    assert np.abs(s).max() <= 5 * FIXED.scale
    _, s = mask(FLOAT.zero(10_000), 2, 5.0, FLOAT, denom=3)
    assert np.abs(s).max() <= 15.0


def test_masks_differ_across_seeds():
    x = FIXED.zero(4)
    seen = {mask(x, [a, b])[1].tobytes() for a in range(100) for b in range(100)}
    assert len(seen) == 10_000


# -- routing ---------------------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3, 6, 9])
def test_complete_graph_needs_one_transmission_per_target(n):
    g = complete(list(range(n)))
    r = plan_route(g, range(n), 0, rng=np.random.default_rng(n))
    check_route(r, g, range(n), 0, range(n))
    # the optimum is a Hamiltonian cycle; confirm one exists of that length by brute force
    best = min(len(p) + 1 for p in permutations(range(1, n)))
    assert r.transmissions == best == n and r.revisits == 0


def test_path_graph_walks_out_and_back():
    g = {0: [1], 1: [0, 2], 2: [1]}
    r = plan_route(g, [0, 1, 2], 0)
    assert r.order == (0, 1, 2, 1, 0)
    assert r.transmissions == 4 and r.revisits == 1


def test_two_clients():
    r = plan_route({0: [1], 1: [0]}, [0, 1], 0)
    assert r.order == (0, 1, 0)


def test_disconnected_targets_are_infeasible():
    g = {0: [1], 1: [0], 2: [3], 3: [2]}
    with pytest.raises(RouteInfeasible):
        plan_route(g, [0, 2], 0)


def test_relays_are_used_only_when_needed():
    g = {0: [1, 2], 1: [0, 3], 2: [0], 3: [1]}
    r = plan_route(g, [0, 3], 0, relays=[1, 2])
    assert r.order == (0, 1, 3, 1, 0)
    with pytest.raises(RouteInfeasible):
        plan_route(g, [0, 3], 0)


def test_replan_from_midway_skips_visited():
    g = complete(list(range(5)))
    r = plan_route(g, range(5), 0, start=2, visited={0, 1, 2})
    assert r.order[0] == 2 and r.order[-1] == 0
    assert {3, 4} <= set(r.order) and 1 not in r.order


@st.composite
def connected_graphs(draw):
    n = draw(st.integers(2, 25))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    adj = {v: set() for v in range(n)}
    for v in range(1, n):  # random spanning tree plus extra edges
        u = int(rng.integers(v))
        adj[u].add(v)
        adj[v].add(u)
    for _ in range(int(rng.integers(0, 2 * n))):
        a, b = rng.integers(n, size=2)
        if a != b:
            adj[int(a)].add(int(b))
            adj[int(b)].add(int(a))
    k = draw(st.integers(1, n))
    targets = rng.choice(n, size=k, replace=False).tolist()
    return adj, targets, seed


@given(connected_graphs())
def test_routes_are_valid_closed_walks(case):
    adj, targets, seed = case
    leader = targets[0]
    r = plan_route(adj, targets, leader, relays=range(len(adj)), rng=np.random.default_rng(seed))
    check_route(r, adj, targets, leader, range(len(adj)))
    assert r.transmissions >= len(set(targets)) - (len(set(targets)) == 1)


# -- relaying ---------------------------------------------------------------------------

def test_relay_adds_once_and_revisit_keeps_value():
    key = ae_gen(seed=1)
    reg = NonceRegistry()
    acc = MaskedAccumulator(np.array([5, 6], dtype=np.int64), 0, 3)
    env, nxt = relay_step(acc, np.array([1, 1], dtype=np.int64), key, reg)
    got = open_envelope(env, key, (3, 1))
    assert np.array_equal(got.vector, [6, 7]) and got.hop_index == 1
    env, again = relay_step(got, None, key, reg)
    assert np.array_equal(open_envelope(env, key, (3, 2)).vector, [6, 7])


def test_tampered_relay_is_rejected():
    key = ae_gen(seed=2)
    env = seal(MaskedAccumulator(np.arange(4, dtype=np.int64), 0, 0), key, NonceRegistry())
    for bit in (0, 100, env.n_bits - 1):
        with pytest.raises(AuthFailure):
            open_envelope(env.flip_bit(bit), key, (0, 0))


def test_unmask_examples():
    acc = MaskedAccumulator(np.array([10, 20], dtype=np.int64), 4, 0)
    assert np.array_equal(unmask_and_sum(acc, np.array([3, -5], dtype=np.int64)), [7, 25])
    acc = MaskedAccumulator(np.array([1.5]), 1, 0)
    assert np.array_equal(unmask_and_sum(acc, np.array([0.5]), FLOAT), [1.0])


def test_cluster_pipeline_sums_exactly():
    rng = np.random.default_rng(0)
    g = complete(list(range(6)))
    route = plan_route(g, range(6), 0, rng=rng)
    counts = {i: int(rng.integers(1, 50)) for i in range(6)}
    xs = {i: rng.normal(size=8) for i in range(6)}
    weighted = {i: FIXED.encode_update(xs[i], counts[i]) for i in range(6)}
    res = aggregate_cluster(route, weighted, pair_keys(), NonceRegistry(), rng, denom=sum(counts.values()),
                            observe=True)
    assert np.array_equal(res.sum.values, np.sum(list(weighted.values()), axis=0))
    assert res.messages == 6 and len(res.observations) == 5


# -- cross-cluster --------------------------------------------------------------------

def test_cross_cluster_matches_flat_example():
    rng = np.random.default_rng(5)
    sizes = {0: 100, 1: 200, 2: 700}
    xs = {i: rng.normal(size=16) for i in sizes}
    sums = [(ClusterSum(FIXED.encode_update(xs[i], sizes[i]), sizes[i]), Fraction(sizes[i], 1000)) for i in sizes]
    w = rng.normal(size=16)
    assert np.array_equal(global_update(w, cross_cluster_aggregate(sums)), flat_update(w, xs, sizes))
    fl = cross_cluster_aggregate([(xs[i], sizes[i] / 1000) for i in sizes], FLOAT)
    assert np.allclose(fl, 0.1 * xs[0] + 0.2 * xs[1] + 0.7 * xs[2], atol=1e-12)


def test_cross_cluster_rejects_bad_weights():
    v = ClusterSum(np.zeros(3, dtype=np.int64), 1)
    with pytest.raises(WeightMismatch):
        cross_cluster_aggregate([(v, Fraction(1, 2)), (v, Fraction(1, 3))])
    with pytest.raises(WeightMismatch):
        cross_cluster_aggregate([])
    with pytest.raises(DimensionMismatch):
        cross_cluster_aggregate([(v, Fraction(1, 2)), (ClusterSum(np.zeros(4, dtype=np.int64)), Fraction(1, 2))])


def test_global_update_examples():
    assert np.array_equal(global_update([1, 2], [0.5, -0.5]), [1.5, 1.5])
    assert np.array_equal(global_update([1, 2], [0, 0]), [1, 2])
    with pytest.raises(DimensionMismatch):
        global_update([1, 2], [1])


@given(st.integers(-10**30, 10**30), st.integers(1, 10**12))
def test_round_div_is_half_even(n, d):
    q = _round_div(n, d)
    diff = Fraction(n, d) - q
    assert abs(diff) <= Fraction(1, 2)
    if abs(diff) == Fraction(1, 2):
        assert q % 2 == 0


@given(st.lists(st.lists(st.integers(1, 1000), min_size=1, max_size=6), min_size=1, max_size=5),
       st.integers(0, 2**31))
def test_hierarchical_equals_flat(clusters, seed):
    rng = np.random.default_rng(seed)
    d = 5
    sizes, xs, members, cid = {}, {}, [], 0
    for c in clusters:
        ids = list(range(cid, cid + len(c)))
        cid += len(c)
        members.append(ids)
        for i, k in zip(ids, c):
            sizes[i], xs[i] = k, rng.normal(size=d)
    total = sum(sizes.values())
    w = rng.normal(size=d)

    fixed = []
    for ids in members:
        denom = sum(sizes[i] for i in ids)
        vals = np.sum([FIXED.encode_update(xs[i], sizes[i]) for i in ids], axis=0)
        fixed.append((ClusterSum(vals, denom), Fraction(denom, total)))
    assert np.array_equal(global_update(w, cross_cluster_aggregate(fixed)), flat_update(w, xs, sizes))

    flt = []
    for ids in members:
        denom = sum(sizes[i] for i in ids)
        vals = np.sum([FLOAT.encode_update(xs[i], sizes[i]) for i in ids], axis=0)
        flt.append((ClusterSum(vals, denom), Fraction(denom, total)))
    got = global_update(w, cross_cluster_aggregate(flt, FLOAT))
    assert np.allclose(got, flat_update(w, xs, sizes, FLOAT), rtol=0, atol=1e-9)


def test_route_dataclass_counts():
    r = AggregationRoute(0, 0, (0, 1, 2, 1, 0), frozenset({0, 1, 2}))
    assert r.transmissions == 4 and r.revisits == 1
    assert r.edges() == [(0, 1), (1, 2), (2, 1), (1, 0)]
