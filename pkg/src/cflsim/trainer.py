"""Local training: a logistic-regression reference model, synthetic shards,
and the per-client / per-cluster aggregation weights."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch

DEFAULT_DIM = 64
DEFAULT_LR = 0.1


@dataclass(frozen=True, eq=False)
class DatasetShard:
    owner: int
    features: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SyntheticTask:
    """Two Gaussian classes at +-mean; the last feature is a constant bias term."""

    dim: int = DEFAULT_DIM
    separation: float = 2.5
    seed: int = 0

    @property
    def direction(self) -> np.ndarray:
        u = np.random.default_rng([self.seed, 0xD1]).standard_normal(self.dim - 1)
        return u / np.linalg.norm(u)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        y = rng.integers(0, 2, size=n).astype(np.float64)
        mu = 0.5 * self.separation * self.direction
        x = rng.standard_normal((n, self.dim - 1)) + np.where(y[:, None] > 0, mu, -mu)
        return np.hstack([x, np.ones((n, 1))]), y


def sample_shard_sizes(n: int, mean: float, spread: float, rng: np.random.Generator, spread_is_variance: bool = False) -> np.ndarray:
    if mean <= 0:
        raise ValueError("mean must be > 0")
    sd = math.sqrt(spread) if spread_is_variance else spread
    raw = rng.normal(mean, sd, size=n) if sd > 0 else np.full(n, float(mean))
    return np.maximum(1, np.rint(raw)).astype(np.int64)


def shard_dataset(
    n_targets: int,
    mean: float = 600,
    variance: float = 100,
    seed: int = 0,
    *,
    spread_is_variance: bool = False,
    task: SyntheticTask | None = None,
    owners: Sequence[int] | None = None,
) -> list[DatasetShard]:
    """Synthetic shards whose sizes follow a truncated, rounded normal.

    ``variance`` is read as a standard deviation unless
    ``spread_is_variance`` is set.
    """
    rng = np.random.default_rng(seed)
    task = task or SyntheticTask(seed=seed)
    sizes = sample_shard_sizes(n_targets, mean, variance, rng, spread_is_variance)
    owners = list(range(n_targets)) if owners is None else list(owners)
    if len(owners) != n_targets:
        raise ValueError("owners must match n_targets")
    shards = []
    for owner, k in zip(owners, sizes):
        x, y = task.sample(int(k), rng)
        shards.append(DatasetShard(owner, x, y))
    return shards


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def loss_and_grad(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of a linear logit model and its gradient."""
    z = x @ w
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    grad = x.T @ (_sigmoid(z) - y) / len(y)
    return loss, grad


def local_train(
    global_w: np.ndarray,
    shard: DatasetShard,
    epochs: int = 1,
    lr: float = DEFAULT_LR,
    seed=0,
    batch_size: int = 32,
) -> np.ndarray:
    w = np.array(global_w, dtype=np.float64, copy=True)
    if w.shape != (shard.dim,):
        raise DimensionMismatch(f"model has dim {w.shape}, shard features {shard.dim}")
    rng = np.random.default_rng(seed)
    n = shard.size
    bs = n if batch_size <= 0 else min(batch_size, n)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            _, g = loss_and_grad(w, shard.features[idx], shard.labels[idx])
            w -= lr * g
    return w


def compute_update(w: np.ndarray, global_w: np.ndarray) -> np.ndarray:
    w, global_w = np.asarray(w, dtype=np.float64), np.asarray(global_w, dtype=np.float64)
    if w.shape != global_w.shape:
        raise DimensionMismatch(f"{w.shape} vs {global_w.shape}")
    return w - global_w


def weigh_update(x: np.ndarray, p: float) -> np.ndarray:
    if not 0.0 <= p <= 1.0:
        raise ValueError("weight must lie in [0, 1]")
    return p * np.asarray(x, dtype=np.float64)


def accuracy(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((x @ w > 0) == (y > 0.5)))


def centralized_sgd(x, y, epochs: int, lr: float = DEFAULT_LR, seed=0, batch_size: int = 32) -> np.ndarray:
    pooled = DatasetShard(-1, np.asarray(x), np.asarray(y))
    return local_train(np.zeros(pooled.dim), pooled, epochs, lr, seed, batch_size)


@dataclass(frozen=True)
class AggregationWeights:
    """In-cluster weights p[client] and per-cluster weights q[cluster], as exact fractions."""

    p: Mapping[int, Fraction]
    q: Mapping[int, Fraction]
    cluster_of: Mapping[int, int]

    @classmethod
    def from_sizes(cls, sizes: Mapping[int, Mapping[int, int]]) -> "AggregationWeights":
        """``sizes[cluster][client]`` are dataset sizes of the participating clients."""
        total = sum(sum(s.values()) for s in sizes.values())
        p, q, where = {}, {}, {}
        for h, members in sizes.items():
            s_h = sum(members.values())
            if s_h == 0:
                continue
            q[h] = Fraction(s_h, total)
            for i, k in members.items():
                p[i] = Fraction(k, s_h)
                where[i] = h
        return cls(p, q, where)

    def global_weight(self, client: int) -> Fraction:
        return self.q[self.cluster_of[client]] * self.p[client]


# -- external data ---------------------------------------------------------------

def load_csv_dataset(path, label_column: str = "label") -> tuple[np.ndarray, np.ndarray]:
    """Rows of pre-vectorized features plus a 0/1 label column; a bias column is appended."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    cols = [c for c in rows[0] if c != label_column]
    x = np.array([[float(r[c]) for c in cols] for r in rows])
    y = np.array([float(r[label_column]) for r in rows])
    return np.hstack([x, np.ones((len(x), 1))]), y


def shards_from_arrays(x: np.ndarray, y: np.ndarray, sizes: Mapping[int, int], seed=0) -> list[DatasetShard]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    need = sum(sizes.values())
    if need > len(y):
        raise ValueError(f"dataset has {len(y)} rows, shards need {need}")
    out, at = [], 0
    for owner, k in sizes.items():
        idx = order[at:at + k]
        at += k
        out.append(DatasetShard(owner, x[idx], y[idx]))
    return out


def write_shard_manifest(shards: Sequence[DatasetShard], path) -> None:
    Path(path).write_text(json.dumps({"shards": [{"owner": s.owner, "size": s.size} for s in shards]}, indent=1))


def read_shard_manifest(path) -> dict[int, int]:
    doc = json.loads(Path(path).read_text())
    return {int(s["owner"]): int(s["size"]) for s in doc["shards"]}
