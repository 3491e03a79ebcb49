import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as cc

from cflsim.errors import ClusterInfeasible
from cflsim.topology import (
    ClusterPlan,
    NetworkTopology,
    divide_clusters,
    equal_cluster_plan,
    expected_mean_degree,
    generate_topology,
    mark_targets,
    pair_within_probability,
    range_for_mean_degree,
    reelect_leader,
)


def n_components(n, edges):
    if n == 0:
        return 0
    e = np.array(edges, dtype=int).reshape(-1, 2)
    g = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    return cc(g, directed=False)[0]


def test_single_client_has_no_edges():
    topo = generate_topology(1, 10.0, 3.0, seed=0)
    assert topo.edges == ()
    assert topo.degree(0) == 0


def test_coincident_clients_share_an_edge():
    topo = NetworkTopology.from_positions([[1.0, 1.0], [1.0, 1.0]], 1.0)
    assert topo.edges == ((0, 1),)


@given(st.integers(2, 40), st.floats(0.5, 40.0), st.integers(0, 2**32 - 1))
def test_edges_match_brute_force_distances(n, r, seed):
    topo = generate_topology(n, 50.0, r, seed)
    pos = topo.positions
    brute = {(a, b) for a in range(n) for b in range(a + 1, n) if np.hypot(*(pos[a] - pos[b])) <= r}
    assert set(topo.edges) == brute
    assert all(a < b for a, b in topo.edges)
    assert len(set(topo.edges)) == len(topo.edges)


def test_pair_probability_matches_sampling():
    rng = np.random.default_rng(7)
    u, v = rng.uniform(size=(2, 400_000, 2))
    d = np.hypot(*(u - v).T)
    for t in (0.05, 0.14, 0.3):
        assert abs(np.mean(d <= t) - pair_within_probability(t)) < 4e-3


def test_range_calibration_over_many_seeds():
    r = range_for_mean_degree(200, 100.0, 10.0)
    assert expected_mean_degree(200, 100.0, r) == pytest.approx(10.0, rel=1e-9)
    counts = [len(generate_topology(200, 100.0, r, s).edges) for s in range(100)]
    assert abs(np.mean(counts) - 1000) < 30
    seeded = len(generate_topology(200, 100.0, r, 42).edges)
    assert 800 <= seeded <= 1200


def test_generation_is_deterministic():
    a = generate_topology(50, 20.0, 4.0, 9)
    b = generate_topology(50, 20.0, 4.0, 9)
    assert a == b
    assert a != generate_topology(50, 20.0, 4.0, 10)


def test_complete_graph_single_cluster():
    topo = NetworkTopology.from_positions(np.random.default_rng(0).uniform(0, 1, (10, 2)), 5.0)
    plan = divide_clusters(topo, 1, seed=3)
    assert len(plan) == 1
    assert sorted(plan[0].members) == list(range(10))
    assert plan[0].leader in plan[0].server_adjacent


def test_two_components_become_two_clusters():
    rng = np.random.default_rng(1)
    pos = np.vstack([rng.uniform(0, 1, (8, 2)), rng.uniform(0, 1, (6, 2)) + 50])
    topo = NetworkTopology.from_positions(pos, 2.0)
    plan = divide_clusters(topo, 2, seed=0)
    groups = sorted(sorted(c.members) for c in plan)
    assert groups == [list(range(8)), list(range(8, 14))]


@pytest.mark.parametrize("seed", range(5))
def test_table_scenario_partition_and_connectivity(seed):
    r = range_for_mean_degree(200, 100.0, 10.0)
    topo = generate_topology(200, 100.0, r, seed)
    plan = mark_targets(divide_clusters(topo, 5, seed), 0.5, seed)
    assert len(plan) == 5
    members = [v for c in plan for v in c.members]
    assert len(members) == len(set(members))
    assert sorted(members + list(plan.isolated)) == list(range(200))
    for c in plan:
        idx = {v: i for i, v in enumerate(c.members)}
        sub = [(idx[a], idx[b]) for a, b in topo.edges if a in idx and b in idx]
        assert n_components(len(idx), sub) == 1
        assert c.leader in c.targets and c.leader in c.server_adjacent
        assert len(c.server_adjacent) == math.ceil(0.1 * c.size)
    assert abs(len(plan.all_targets) - 100) <= 5


def test_isolated_clients_are_flagged():
    pos = np.array([[0, 0], [1, 0], [0, 1], [90, 90]], dtype=float)
    topo = NetworkTopology.from_positions(pos, 2.0, 100.0)
    plan = divide_clusters(topo, 1, seed=0)
    assert plan.isolated == (3,)


def test_no_server_adjacent_member_is_infeasible():
    topo = generate_topology(20, 10.0, 5.0, 0)
    with pytest.raises(ClusterInfeasible):
        divide_clusters(topo, 2, seed=0, server_fraction=0.0)


def test_plan_is_deterministic():
    topo = generate_topology(120, 60.0, 9.0, 4)
    assert divide_clusters(topo, 4, 11) == divide_clusters(topo, 4, 11)


def test_mark_targets_fractions():
    topo = generate_topology(200, 100.0, range_for_mean_degree(200, 100.0, 10.0), 2)
    plan = divide_clusters(topo, 5, 2)
    full = mark_targets(plan, 1.0, 0)
    assert all(set(c.targets) == set(c.members) for c in full)
    tiny = mark_targets(plan, 1e-9, 0)
    assert all(c.targets == (c.leader,) for c in tiny)
    half = mark_targets(plan, 0.5, 0)
    assert all(c.n_targets == math.ceil(0.5 * c.size) for c in half)
    with pytest.raises(ValueError):
        mark_targets(plan, 0.0, 0)


def test_reelect_leader_picks_live_server_adjacent_target():
    plan = equal_cluster_plan([6])
    c = plan[0]
    c = c.__class__(c.index, c.members, c.leader, frozenset({0, 2, 4}), c.targets)
    new = reelect_leader(c, {0}, np.random.default_rng(0))
    assert new.leader in {2, 4}
    assert new.targets[0] == new.leader
    with pytest.raises(ClusterInfeasible):
        reelect_leader(c, {0, 2, 4}, np.random.default_rng(0))


def test_plan_dict_round_trip(tmp_path):
    topo = generate_topology(60, 30.0, 7.0, 5)
    plan = mark_targets(divide_clusters(topo, 3, 5), 0.5, 5)
    assert ClusterPlan.from_dict(plan.to_dict()) == plan
    topo.write_edge_csv(tmp_path / "edges.csv")
    lines = (tmp_path / "edges.csv").read_text().splitlines()
    assert len(lines) == len(topo.edges) + 1
