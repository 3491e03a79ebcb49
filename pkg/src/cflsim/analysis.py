"""Key-ring sizing from the random-graph connectivity threshold, with Monte Carlo checks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DomainError
from .keying import random_ring_graph


def _check(n_h: int, p_c: float) -> None:
    if n_h < 2:
        raise DomainError("n_h must be >= 2")
    if not 0.0 < p_c < 1.0:
        raise DomainError(f"P_c must lie strictly between 0 and 1, got {p_c}")


def threshold_constant(p_c: float) -> float:
    """The constant c with exp(-exp(-c)) = P_c."""
    if not 0.0 < p_c < 1.0:
        raise DomainError(f"P_c must lie strictly between 0 and 1, got {p_c}")
    return -math.log(-math.log(p_c))


def ring_size_real(n_h: int, p_c: float) -> float:
    _check(n_h, p_c)
    return math.log(n_h) + threshold_constant(p_c)


def ring_size(n_h: int, p_c: float) -> int:
    """Smallest integer ring size at or above ln(n_h) - ln(-ln P_c), clamped to [1, n_h - 1]."""
    m = math.ceil(ring_size_real(n_h, p_c))
    return max(1, min(n_h - 1, m))


def edge_probability(n_h: int, p_c: float) -> float:
    _check(n_h, p_c)
    r = (math.log(n_h) + threshold_constant(p_c)) / n_h
    return min(1.0, max(0.0, r))


def connectivity_from_constant(c: float) -> float:
    return math.exp(-math.exp(-c))


@dataclass(frozen=True)
class ConnectivitySpec:
    n_h: int
    p_c: float
    r_h: float
    c: float
    e: float
    m_h: int

    @classmethod
    def build(cls, n_h: int, p_c: float) -> "ConnectivitySpec":
        r = edge_probability(n_h, p_c)
        e = r * n_h * (n_h - 1) / 2
        return cls(n_h, p_c, r, threshold_constant(p_c), e, ring_size(n_h, p_c))


def _is_connected(n: int, edges: np.ndarray) -> bool:
    if n <= 1:
        return True
    if len(edges) == 0:
        return False
    g = coo_matrix((np.ones(len(edges), dtype=np.int8), (edges[:, 0], edges[:, 1])), shape=(n, n))
    k, _ = connected_components(g, directed=False)
    return k == 1


def _er_edges(n: int, r: float, rng: np.random.Generator) -> np.ndarray:
    n_pairs = n * (n - 1) // 2
    k = int(rng.binomial(n_pairs, r))
    if k == 0:
        return np.empty((0, 2), dtype=np.int64)
    idx = rng.choice(n_pairs, size=k, replace=False)
    # unrank idx into (i, j), i < j, row-major over the upper triangle
    i = (n - 2 - np.floor(np.sqrt(-8 * idx + 4 * n * (n - 1) - 7) / 2.0 - 0.5)).astype(np.int64)
    j = (idx + i + 1 - n * (n - 1) // 2 + (n - i) * ((n - i) - 1) // 2).astype(np.int64)
    return np.stack([i, j], axis=1)


def monte_carlo_connectivity(
    n_h: int,
    trials: int,
    seed: int,
    *,
    r_h: float | None = None,
    m_h: int | None = None,
) -> float:
    """Fraction of sampled graphs that are connected.

    Exactly one of ``r_h`` (Erdős–Rényi edge probability) or ``m_h``
    (random pairwise key rings of that size) selects the graph model.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if (r_h is None) == (m_h is None):
        raise ValueError("give exactly one of r_h or m_h")
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        if r_h is not None:
            edges = _er_edges(n_h, r_h, rng)
        else:
            edges = np.asarray(random_ring_graph(range(n_h), m_h, rng), dtype=np.int64).reshape(-1, 2)
        hits += _is_connected(n_h, edges)
    return hits / trials


@dataclass(frozen=True)
class SweepRow:
    n: int
    p_c: float
    m_h: int
    r_h: float
    ring_connectivity: float
    er_connectivity: float


def connectivity_sweep(ns: Sequence[int], pcs: Sequence[float], trials: int, seed: int) -> list[SweepRow]:
    rows = []
    for n in ns:
        for pc in pcs:
            m = ring_size(n, pc)
            r = edge_probability(n, pc)
            s = [seed, n, int(round(pc * 1e6))]
            rows.append(SweepRow(
                n, pc, m, r,
                monte_carlo_connectivity(n, trials, s + [0], m_h=m),
                monte_carlo_connectivity(n, trials, s + [1], r_h=r),
            ))
    return rows


SWEEP_HEADER = ["n", "p_c", "m_h", "r_h", "ring_connectivity", "er_connectivity"]


def write_sweep_csv(rows: Iterable[SweepRow], fh) -> None:
    w = csv.writer(fh)
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r.n, r.p_c, r.m_h, f"{r.r_h:.8f}", f"{r.ring_connectivity:.4f}", f"{r.er_connectivity:.4f}"])
