import csv
import json

import pytest

from cflsim.analysis import SWEEP_HEADER, ring_size
from cflsim.cli import BENCH_HEADER, BENCH_OPS, bench_rows, main
from cflsim.experiment import TABLE_HEADER, ExperimentConfig


def small_config(tmp_path, **over):
    cfg = ExperimentConfig()
    cfg.scenario.n_clients = 60
    cfg.scenario.area_side = 40.0
    cfg.scenario.n_clusters = 3
    cfg.trainer.dim = 8
    cfg.trainer.shard_mean = 80
    cfg.trainer.shard_spread = 10
    cfg.trainer.test_size = 300
    cfg.rounds = 3
    for k, v in over.items():
        setattr(cfg, k, v)
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_writes_reports(tmp_path, capsys):
    cfg = small_config(tmp_path)
    out = tmp_path / "a"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("config.json", "rounds.csv", "trace.jsonl", "accuracy.csv", "model.npy", "summary.json"):
        assert (out / name).exists()
    rows = read_csv(out / "rounds.csv")
    assert len(rows) == 4
    assert "rounds=3" in capsys.readouterr().out


def test_runs_are_reproducible(tmp_path):
    cfg = small_config(tmp_path)
    for d in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / d), "--dropout", "10", "--seed", "5"]) == 0
    for name in ("rounds.csv", "trace.jsonl", "accuracy.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_zero_rounds(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "z"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--rounds", "0"]) == 0
    assert read_csv(out / "rounds.csv") == [read_csv(out / "rounds.csv")[0]]


def test_plot_flag_renders_figures(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "p"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--plot", "--rounds", "2"]) == 0
    assert (out / "topology.png").stat().st_size > 0
    assert (out / "accuracy.png").stat().st_size > 0


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"rounds": 3, "bogus": 1}))
    assert main(["run", "--config", str(bad)]) == 2
    cfg = small_config(tmp_path)
    assert main(["run", "--config", str(cfg), "--dropout", "150"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["run", "--protocol", "nope"])
    assert exc.value.code == 2


def test_infeasible_protocol_exits_3(tmp_path, capsys):
    cfg = ExperimentConfig()
    cfg.scenario.layout = "equal"
    cfg.scenario.cluster_sizes = [20, 20]
    cfg.keys.ring_size = 1
    cfg.trainer.dim = 4
    cfg.trainer.shard_mean = 50
    cfg.trainer.test_size = 100
    cfg.rounds = 1
    path = tmp_path / "ring1.json"
    path.write_text(cfg.to_json())
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "x")]) == 3
    assert "infeasible" in capsys.readouterr().err


def test_connectivity_rows(tmp_path, capsys):
    out = tmp_path / "conn.csv"
    assert main(["connectivity", "--n", "40,100,1000", "--pc", "0.999", "--trials", "10", "--out", str(out),
                 "--plot"]) == 0
    rows = read_csv(out)
    assert rows[0] == SWEEP_HEADER and len(rows) == 4
    for r in rows[1:]:
        assert int(r[2]) == ring_size(int(r[0]), float(r[1]))
    assert out.with_suffix(".png").exists()
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].split(",") == SWEEP_HEADER


def test_connectivity_empty_lists(capsys):
    assert main(["connectivity", "--n", "", "--pc", "0.99", "--trials", "5"]) == 0
    assert capsys.readouterr().out.strip().split(",") == SWEEP_HEADER


def test_bench_schema_and_scaling(tmp_path):
    rows = bench_rows([100, 10_000], iterations=20)
    assert [r[0] for r in rows] == list(BENCH_OPS) * 2
    small = {r[0]: r for r in rows[:5]}
    big = {r[0]: r for r in rows[5:]}
    for op in BENCH_OPS:
        assert big[op][2] > small[op][2]
    assert float(big["noise generation"][4]) > float(small["noise generation"][4])
    out = tmp_path / "bench.csv"
    assert main(["bench", "--dims", "50", "--iterations", "3", "--out", str(out)]) == 0
    got = read_csv(out)
    assert got[0] == BENCH_HEADER and len(got) == 6


def test_table_has_a_row_per_level(tmp_path, capsys):
    cfg = small_config(tmp_path)
    out = tmp_path / "t"
    assert main(["table", "--config", str(cfg), "--out", str(out), "--plot"]) == 0
    rows = read_csv(out / "dropout_table.csv")
    assert rows[0] == TABLE_HEADER and len(rows) == 7
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "5", "10", "15"]
    assert (out / "dropout_table.png").exists()


def test_init_config_round_trips(tmp_path):
    path = tmp_path / "default.json"
    assert main(["init-config", str(path)]) == 0
    cfg = ExperimentConfig.load(path)
    assert cfg.to_dict() == ExperimentConfig().to_dict()
