"""Declarative experiment configuration and the end-to-end training driver."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregation import DEFAULT_MASK_BOUND, arithmetic, global_update
from .analysis import ring_size
from .crypto import DEFAULT_WINDOW_MS
from .errors import ConfigError
from .keying import DEFAULT_REKEY_PERIOD, KeyStore, establish_keys, rekey
from .simnet import (
    DEFAULT_LATENCY_MS,
    DEFAULT_TIMEOUT_MS,
    RELAY_POLICIES,
    FaultPlan,
    RoundReport,
    Simulation,
    write_reports_csv,
)
from .topology import (
    ClusterPlan,
    NetworkTopology,
    divide_clusters,
    equal_cluster_plan,
    generate_topology,
    mark_targets,
    range_for_mean_degree,
)
from .trainer import (
    SyntheticTask,
    accuracy,
    centralized_sgd,
    compute_update,
    load_csv_dataset,
    local_train,
    shard_dataset,
    shards_from_arrays,
    sample_shard_sizes,
)

log = logging.getLogger(__name__)


@dataclass
class ScenarioConfig:
    layout: str = "geometric"  # geometric | equal
    n_clients: int = 200
    area_side: float = 100.0
    comm_range: float | None = None  # derived from mean_degree when unset
    mean_degree: float = 10.0
    n_clusters: int = 5
    target_fraction: float = 0.5
    server_fraction: float = 0.1
    cluster_sizes: list[int] = field(default_factory=list)  # layout "equal"


@dataclass
class KeyConfig:
    p_c: float = 0.999
    ring_size: int | None = None  # fixed m_h for every cluster; "complete" rings use -1
    vote_threshold: int | None = None
    rekey_period: int = DEFAULT_REKEY_PERIOD
    rekey_on_revoke: bool = True
    debug_key_dump: str | None = None


@dataclass
class AggregationConfig:
    arithmetic: str = "fixed"
    mask_bound: float = DEFAULT_MASK_BOUND
    window_ms: int = DEFAULT_WINDOW_MS
    latency_ms: int = DEFAULT_LATENCY_MS
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    relay_policy: str = "fallback"
    max_retries: int = 1


@dataclass
class TrainerConfig:
    dim: int = 64
    separation: float = 2.5
    shard_mean: float = 600.0
    shard_spread: float = 100.0
    spread_is_variance: bool = False
    epochs: int = 1
    lr: float = 0.1
    batch_size: int = 32
    test_size: int = 4000
    central_epochs: int = 5
    data_csv: str | None = None


@dataclass
class Seeds:
    topology: int = 0
    clusters: int = 1
    targets: int = 2
    keys: int = 3
    data: int = 4
    training: int = 5
    simulation: int = 6


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    keys: KeyConfig = field(default_factory=KeyConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    faults: FaultPlan = field(default_factory=FaultPlan)
    seeds: Seeds = field(default_factory=Seeds)
    protocol: str = "cfl"
    rounds: int = 20
    epsilon: float = 1e-4
    out_dir: str = "out"
    plot: bool = False

    def validate(self) -> None:
        s = self.scenario
        if self.protocol not in ("cfl", "ppt"):
            raise ConfigError(f"protocol must be cfl or ppt, got {self.protocol!r}")
        if s.layout not in ("geometric", "equal"):
            raise ConfigError(f"unknown layout {s.layout!r}")
        if s.layout == "equal" and not s.cluster_sizes:
            raise ConfigError("layout 'equal' needs cluster_sizes")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.aggregation.arithmetic not in ("fixed", "float"):
            raise ConfigError("arithmetic must be fixed or float")
        if self.aggregation.relay_policy not in RELAY_POLICIES:
            raise ConfigError(f"relay_policy must be one of {RELAY_POLICIES}")
        if not 0 < self.keys.p_c < 1:
            raise ConfigError("p_c must lie strictly between 0 and 1")
        if not 0 < s.target_fraction <= 1:
            raise ConfigError("target_fraction must lie in (0, 1]")
        if self.keys.rekey_period < 0:
            raise ConfigError("rekey_period must be >= 0 (0 disables)")

    # -- serialization
    def to_dict(self) -> dict:
        d = asdict(self)
        d["faults"] = self.faults.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        def build(tp, data):
            known = {f.name for f in fields(tp)}
            extra = set(data) - known
            if extra:
                raise ConfigError(f"unknown {tp.__name__} field(s): {sorted(extra)}")
            return tp(**data)

        try:
            kw = dict(d)
            subs = {"scenario": ScenarioConfig, "keys": KeyConfig, "aggregation": AggregationConfig,
                    "trainer": TrainerConfig, "seeds": Seeds}
            for name, tp in subs.items():
                if name in kw:
                    kw[name] = build(tp, kw[name])
            if "faults" in kw:
                kw["faults"] = FaultPlan.from_dict(kw["faults"])
            cfg = build(cls, kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)


# -- scenario construction -------------------------------------------------------------

@dataclass
class Scenario:
    topology: NetworkTopology | None
    plan: ClusterPlan
    keys: KeyStore
    ring_sizes: dict[int, int]
    ppt_graph: dict[int, set[int]] | None = None


def cluster_ring_sizes(plan: ClusterPlan, cfg: KeyConfig) -> dict[int, int]:
    out = {}
    for c in plan.clusters:
        if c.size < 2:
            out[c.index] = 0
        elif cfg.ring_size == -1:
            out[c.index] = c.size - 1
        elif cfg.ring_size is not None:
            out[c.index] = min(cfg.ring_size, c.size - 1)
        else:
            out[c.index] = ring_size(c.size, cfg.p_c)
    return out


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    s, seeds = cfg.scenario, cfg.seeds
    if s.layout == "equal":
        plan = equal_cluster_plan(s.cluster_sizes)
        n = sum(s.cluster_sizes)
        topo = None
        ppt = {v: set(range(n)) - {v} for v in range(n)}
    else:
        r = s.comm_range if s.comm_range is not None else range_for_mean_degree(s.n_clients, s.area_side, s.mean_degree)
        topo = generate_topology(s.n_clients, s.area_side, r, seeds.topology)
        plan = divide_clusters(topo, s.n_clusters, seeds.clusters, s.server_fraction)
        plan = mark_targets(plan, s.target_fraction, seeds.targets)
        ppt = None
    sizes = cluster_ring_sizes(plan, cfg.keys)
    keys = establish_keys(plan, sizes, seeds.keys)
    if cfg.keys.debug_key_dump:
        log.warning("writing secret key material to %s", cfg.keys.debug_key_dump)
        keys.dump(cfg.keys.debug_key_dump)
    return Scenario(topo, plan, keys, sizes, ppt)


def make_simulation(cfg: ExperimentConfig, sc: Scenario, **overrides) -> Simulation:
    a = cfg.aggregation
    kw = dict(
        topology=sc.topology, ppt_graph=sc.ppt_graph, seed=cfg.seeds.simulation, arith=arithmetic(a.arithmetic),
        mask_bound=a.mask_bound, latency_ms=a.latency_ms, timeout_ms=a.timeout_ms, window_ms=a.window_ms,
        faults=FaultPlan(cfg.faults.dropout_fraction, cfg.faults.dropout_seed, dict(cfg.faults.hijacked)),
        relay_policy=a.relay_policy, vote_threshold=cfg.keys.vote_threshold,
        rekey_on_revoke=cfg.keys.rekey_on_revoke, max_retries=a.max_retries, strict=True,
    )
    kw.update(overrides)
    return Simulation(sc.plan, sc.keys, **kw)


# -- training driver ---------------------------------------------------------------------

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[RoundReport]
    model: np.ndarray
    accuracy: list[float]
    central_accuracy: float
    converged: bool
    rounds_run: int

    def summary(self) -> dict:
        return {
            "protocol": self.config.protocol,
            "rounds_run": self.rounds_run,
            "converged": self.converged,
            "final_accuracy": self.accuracy[-1] if self.accuracy else None,
            "central_accuracy": self.central_accuracy,
            "aggregation_messages": sum(r.aggregation_messages for r in self.reports),
            "messages_sent": sum(r.messages_sent for r in self.reports),
            "revoked": sorted({c for r in self.reports for c in r.revoked}),
        }


def _datasets(cfg: ExperimentConfig, plan: ClusterPlan):
    t = cfg.trainer
    owners = sorted(plan.all_targets)
    if t.data_csv:
        x, y = load_csv_dataset(t.data_csv)
        rng = np.random.default_rng(cfg.seeds.data)
        k = sample_shard_sizes(len(owners), t.shard_mean, t.shard_spread, rng, t.spread_is_variance)
        n_test = min(t.test_size, len(y) // 5)
        shards = shards_from_arrays(x[n_test:], y[n_test:], dict(zip(owners, map(int, k))), cfg.seeds.data)
        return shards, x[:n_test], y[:n_test]
    task = SyntheticTask(t.dim, t.separation, cfg.seeds.data)
    shards = shard_dataset(len(owners), t.shard_mean, t.shard_spread, cfg.seeds.data,
                           spread_is_variance=t.spread_is_variance, task=task, owners=owners)
    xt, yt = task.sample(t.test_size, np.random.default_rng([cfg.seeds.data, 0x7E57]))
    return shards, xt, yt


def run_experiment(cfg: ExperimentConfig, scenario: Scenario | None = None, on_round=None) -> ExperimentResult:
    """Train for ``cfg.rounds`` rounds or until the relative update norm drops below epsilon.

    ``on_round(round, w, updates, sizes, report)`` is called after every
    aggregation with the model the round started from.
    """
    cfg.validate()
    sc = scenario or build_scenario(cfg)
    sim = make_simulation(cfg, sc)
    shards, x_test, y_test = _datasets(cfg, sc.plan)
    by_owner = {s.owner: s for s in shards}
    sizes = {o: s.size for o, s in by_owner.items()}
    t = cfg.trainer
    dim = shards[0].dim
    w = np.zeros(dim)

    pooled_x = np.vstack([s.features for s in shards])
    pooled_y = np.concatenate([s.labels for s in shards])
    central = accuracy(centralized_sgd(pooled_x, pooled_y, t.central_epochs, t.lr, cfg.seeds.training, t.batch_size),
                       x_test, y_test)

    reports, acc = [], []
    converged = False
    for rnd in range(cfg.rounds):
        ups = {}
        for o, shard in by_owner.items():
            if o in sim.keys.revoked:
                continue
            local = local_train(w, shard, t.epochs, t.lr, [cfg.seeds.training, rnd, o], t.batch_size)
            ups[o] = compute_update(local, w)
        rep = sim.run_round(cfg.protocol, rnd, ups, sizes)
        reports.append(rep)
        if on_round is not None:
            on_round(rnd, w, ups, sizes, rep)
        if rep.total is None:
            log.warning("round %d: no cluster completed; model unchanged", rnd)
            acc.append(accuracy(w, x_test, y_test))
            continue
        new_w = global_update(w, rep.total)
        rel = float(np.linalg.norm(rep.total) / max(np.linalg.norm(new_w), 1e-300))
        w = new_w
        acc.append(accuracy(w, x_test, y_test))
        log.info("round %d: acc %.4f, %d messages, rel update %.2e", rnd, acc[-1], rep.aggregation_messages, rel)
        p = cfg.keys.rekey_period
        if p and (rnd + 1) % p == 0:
            members = [v for c in sim.plan.clusters for v in c.members]
            sim.keys = rekey(sim.keys, sim.plan, members, cfg.seeds.keys * 7919 + rnd)
        if rel < cfg.epsilon:
            converged = True
            break
    return ExperimentResult(cfg, reports, w, acc, central, converged, len(reports))


def write_outputs(res: ExperimentResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "config": out / "config.json",
        "rounds": out / "rounds.csv",
        "trace": out / "trace.jsonl",
        "accuracy": out / "accuracy.csv",
        "model": out / "model.npy",
        "summary": out / "summary.json",
    }
    paths["config"].write_text(res.config.to_json())
    with open(paths["rounds"], "w", newline="") as fh:
        write_reports_csv(res.reports, fh)
    with open(paths["trace"], "w") as fh:
        for r in res.reports:
            r.write_trace(fh)
    with open(paths["accuracy"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "accuracy"])
        for i, a in enumerate(res.accuracy):
            w.writerow([i, f"{a:.6f}"])
    np.save(paths["model"], res.model)
    paths["summary"].write_text(json.dumps(res.summary(), indent=2, sort_keys=True))
    return paths


# -- communication table -------------------------------------------------------------------

DROPOUT_LEVELS = (0.0, 0.01, 0.02, 0.05, 0.10, 0.15)
TABLE_HEADER = ["dropout_pct", "ppt_messages", "cfl_messages", "ratio", "improvement_pct"]


def _table_row(cfg: ExperimentConfig, sc: Scenario, frac: float) -> list:
    dim = 4
    targets = sorted(sc.plan.all_targets)
    ups = {t: np.full(dim, 1e-3 * (i + 1)) for i, t in enumerate(targets)}
    sizes = {t: 600 for t in targets}
    faults = FaultPlan(frac, cfg.faults.dropout_seed)
    counts = {}
    for proto in ("ppt", "cfl"):
        sim = make_simulation(cfg, sc, faults=faults)
        counts[proto] = sim.run_round(proto, 0, ups, sizes).aggregation_messages
    ratio = counts["cfl"] / counts["ppt"]
    return [f"{100 * frac:g}", counts["ppt"], counts["cfl"], f"{ratio:.4f}", f"{100 * (1 - ratio):.2f}"]


def dropout_table(cfg: ExperimentConfig, levels: Sequence[float] = DROPOUT_LEVELS, workers: int = 1) -> list[list]:
    """Aggregation-message counts for both protocols at each dropout level on one scenario."""
    sc = build_scenario(cfg)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(lambda f: _table_row(cfg, sc, f), levels))
    return [_table_row(cfg, sc, f) for f in levels]


def table1_config(**overrides) -> ExperimentConfig:
    """The communication-table scenario: 200 clients, 100 targets, 5 clusters, mean degree 10."""
    cfg = ExperimentConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg
