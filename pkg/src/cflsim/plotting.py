"""Figures written next to the CSV outputs (matplotlib, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis import SweepRow  # noqa: E402
from .topology import ClusterPlan, NetworkTopology  # noqa: E402


def plot_topology(topo: NetworkTopology, plan: ClusterPlan, path, routes: dict | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 6))
    pos = topo.positions
    for a, b in topo.edges:
        ax.plot(pos[[a, b], 0], pos[[a, b], 1], color="0.85", lw=0.5, zorder=1)
    cmap = plt.get_cmap("tab10")
    for c in plan.clusters:
        col = cmap(c.index % 10)
        mem = list(c.members)
        tgt = set(c.targets)
        ax.scatter(pos[mem, 0], pos[mem, 1], s=[28 if v in tgt else 10 for v in mem], color=col, zorder=2)
        ax.scatter(pos[c.leader, 0], pos[c.leader, 1], marker="*", s=160, color=col, edgecolor="k", zorder=4)
        if routes and c.index in routes:
            r = list(routes[c.index])
            ax.plot(pos[r, 0], pos[r, 1], color=col, lw=1.2, alpha=0.8, zorder=3)
    if plan.isolated:
        iso = list(plan.isolated)
        ax.scatter(pos[iso, 0], pos[iso, 1], marker="x", color="k", zorder=2)
    ax.set_aspect("equal")
    ax.set_title("clusters, leaders (stars) and aggregation routes")
    return _save(fig, path)


def plot_connectivity(rows: Sequence[SweepRow], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for pc in sorted({r.p_c for r in rows}):
        sel = sorted((r for r in rows if r.p_c == pc), key=lambda r: r.n)
        ns = [r.n for r in sel]
        ax.plot(ns, [r.ring_connectivity for r in sel], "o-", label=f"key rings, P_c={pc:g}")
        ax.plot(ns, [r.er_connectivity for r in sel], "s--", label=f"random graph, P_c={pc:g}")
        ax.axhline(pc, color="0.6", lw=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("clients per cluster")
    ax.set_ylabel("fraction connected")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_dropout_table(rows: Sequence[Sequence], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    pct = [float(r[0]) for r in rows]
    ax.plot(pct, [int(r[1]) for r in rows], "o-", label="single cycle baseline")
    ax.plot(pct, [int(r[2]) for r in rows], "s-", label="clustered")
    ax.set_xlabel("dropout (%)")
    ax.set_ylabel("aggregation messages")
    ax.legend()
    return _save(fig, path)


def plot_accuracy(acc: Sequence[float], central: float, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(acc) + 1), acc, "o-", label="federated")
    ax.axhline(central, color="k", ls="--", lw=1, label="centralized")
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.legend()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
