from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cflsim.errors import DimensionMismatch
from cflsim.trainer import (
    AggregationWeights,
    DatasetShard,
    SyntheticTask,
    accuracy,
    centralized_sgd,
    compute_update,
    load_csv_dataset,
    local_train,
    loss_and_grad,
    read_shard_manifest,
    sample_shard_sizes,
    shard_dataset,
    shards_from_arrays,
    weigh_update,
    write_shard_manifest,
)


def fd_grad(w, x, y, h=1e-6):
    g = np.zeros_like(w)
    for k in range(len(w)):
        e = np.zeros_like(w)
        e[k] = h
        g[k] = (loss_and_grad(w + e, x, y)[0] - loss_and_grad(w - e, x, y)[0]) / (2 * h)
    return g


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = int(rng.integers(2, 10))
        n = int(rng.integers(1, 20))
        x = rng.normal(size=(n, d))
        y = rng.integers(0, 2, n).astype(float)
        w = rng.normal(size=d)
        _, g = loss_and_grad(w, x, y)
        fd = fd_grad(w, x, y)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


def test_single_sample_full_batch_step():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 5))
    y = np.array([1.0])
    w0 = rng.normal(size=5)
    w = local_train(w0, DatasetShard(0, x, y), epochs=1, lr=0.3, batch_size=0)
    expected = w0 - 0.3 * fd_grad(w0, x, y)
    assert np.linalg.norm(w - expected) <= 1e-5 * np.linalg.norm(w0 - expected)


def test_no_epochs_or_zero_rate_returns_global():
    shard = shard_dataset(1, 50, 0, seed=0, task=SyntheticTask(dim=6))[0]
    w0 = np.arange(6.0)
    assert np.array_equal(local_train(w0, shard, epochs=0), w0)
    assert np.array_equal(local_train(w0, shard, epochs=3, lr=0.0), w0)
    with pytest.raises(DimensionMismatch):
        local_train(np.zeros(5), shard)


def test_training_is_deterministic_and_learns():
    task = SyntheticTask(dim=8, seed=3)
    shard = shard_dataset(1, 2000, 0, seed=3, task=task)[0]
    a = local_train(np.zeros(8), shard, epochs=2, seed=11)
    b = local_train(np.zeros(8), shard, epochs=2, seed=11)
    assert a.tobytes() == b.tobytes()
    assert accuracy(a, shard.features, shard.labels) > 0.8


def test_update_and_weighting_examples():
    assert np.array_equal(compute_update([1, 2], [0.5, 0.5]), [0.5, 1.5])
    assert np.array_equal(compute_update([3, 4], [3, 4]), [0, 0])
    assert np.array_equal(compute_update([3, 4], [0, 0]), [3, 4])
    with pytest.raises(DimensionMismatch):
        compute_update([1, 2], [1, 2, 3])
    assert np.array_equal(weigh_update([4, -8], 0.25), [1, -2])
    assert np.array_equal(weigh_update([4, -8], 1.0), [4, -8])
    assert np.array_equal(weigh_update([4, -8], 0.0), [0, 0])
    with pytest.raises(ValueError):
        weigh_update([1], 1.5)


def test_shard_sizes():
    shards = shard_dataset(10, 600, 0, seed=0, task=SyntheticTask(dim=4))
    assert all(s.size == 600 for s in shards)
    means = [sample_shard_sizes(100, 600, 100, np.random.default_rng(s)).mean() for s in range(50)]
    assert abs(np.mean(means) - 600) < 10
    tiny = sample_shard_sizes(1000, 1, 500, np.random.default_rng(0))
    assert tiny.min() >= 1
    var = sample_shard_sizes(20000, 600, 100, np.random.default_rng(1), spread_is_variance=True)
    assert abs(var.std() - 10) < 0.5
    with pytest.raises(ValueError):
        sample_shard_sizes(3, 0, 1, np.random.default_rng(0))


@given(st.dictionaries(st.integers(0, 5), st.dictionaries(st.integers(0, 1000), st.integers(1, 10_000), min_size=1),
                       min_size=1))
def test_hierarchical_weights_match_flat(sizes):
    seen, clean = set(), {}
    for h, members in sizes.items():
        m = {i: k for i, k in members.items() if i not in seen}
        seen |= set(m)
        if m:
            clean[h] = m
    w = AggregationWeights.from_sizes(clean)
    total = sum(k for m in clean.values() for k in m.values())
    assert sum(w.q.values()) == 1
    for h, m in clean.items():
        assert sum(w.p[i] for i in m) == 1
        for i, k in m.items():
            assert w.global_weight(i) == Fraction(k, total)


def test_centralized_baseline_beats_chance():
    task = SyntheticTask(dim=10, seed=0)
    x, y = task.sample(3000, np.random.default_rng(0))
    w = centralized_sgd(x, y, epochs=2)
    assert accuracy(w, x, y) > 0.85


def test_csv_loader_and_manifest(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f1,f2,label\n1,2,0\n3,4,1\n5,6,1\n")
    x, y = load_csv_dataset(path)
    assert x.shape == (3, 3) and np.array_equal(x[:, -1], [1, 1, 1])
    assert np.array_equal(y, [0, 1, 1])
    shards = shards_from_arrays(x, y, {7: 2, 9: 1})
    assert [s.size for s in shards] == [2, 1]
    write_shard_manifest(shards, tmp_path / "m.json")
    assert read_shard_manifest(tmp_path / "m.json") == {7: 2, 9: 1}
    with pytest.raises(ValueError):
        shards_from_arrays(x, y, {1: 4})
