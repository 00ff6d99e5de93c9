import json
import os

import pytest
import yaml

from adaptdiff.cli import main, parse_bytes
from adaptdiff.data import golden_fixture_path
from adaptdiff.telemetry import read_log
from adaptdiff.workload import ColumnProfile, WorkloadSpec, generate_pair


@pytest.fixture
def job_config(tmp_path):
    spec = WorkloadSpec(rows_per_side=3000, seed=8)
    generate_pair(spec, tmp_path / "data")
    cfg = {"job": {"source": "data/a.csv", "target": "data/b.csv"},
           "policy": {"params": {"b_min": 100, "b_step_min": 20}},
           "caps": {"mem": "4GB", "cpu": 4},
           "out_dir": str(tmp_path / "out")}
    path = tmp_path / "job.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path, spec


def test_parse_bytes():
    assert parse_bytes("4GB") == 4e9
    assert parse_bytes("512MiB") == 512 * 2 ** 20
    assert parse_bytes(1000) == 1000
    with pytest.raises(Exception):
        parse_bytes("lots")


def test_profile(job_config, capsys):
    path, _ = job_config
    assert main(["profile", str(path)]) == 0
    out = capsys.readouterr().out
    assert "bytes/row (W)" in out
    saved = json.loads((path.parent / "out" / "profile.json").read_text())
    assert saved["bytes_per_row"] > 0


def test_profile_reports_16_byte_rows(tmp_path, capsys):
    spec = WorkloadSpec(rows_per_side=4000, columns=(ColumnProfile("v", "integer"),), seed=2)
    generate_pair(spec, tmp_path)
    cfg = tmp_path / "job.yaml"
    cfg.write_text(yaml.safe_dump({"job": {"source": "a.csv", "target": "b.csv"}, "out_dir": str(tmp_path)}))
    assert main(["profile", str(cfg)]) == 0
    line = next(x for x in capsys.readouterr().out.splitlines() if x.startswith("bytes/row"))
    w = float(line.split()[2])
    assert abs(w - 16) <= 1.6


def test_missing_input_file(tmp_path, capsys):
    cfg = tmp_path / "job.yaml"
    cfg.write_text(yaml.safe_dump({"job": {"source": "nope.csv", "target": "nope2.csv"}}))
    code = main(["profile", str(cfg)])
    assert code != 0
    assert "nope.csv" in capsys.readouterr().err


def test_missing_config(tmp_path, capsys):
    assert main(["run", str(tmp_path / "absent.yaml")]) == 2
    assert "absent.yaml" in capsys.readouterr().err


def test_usage_errors(job_config):
    path, _ = job_config
    assert main(["run", str(path), "--policy", "greedy"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["run", str(path), "--policy", "fixed"]) == 1


def test_run_adaptive(job_config, capsys):
    path, spec = job_config
    assert main(["run", str(path)]) == 0
    out = capsys.readouterr().out
    assert "backend inmem" in out and "kappa*M_cap" in out
    out_dir = path.parent / "out"
    verdicts = (out_dir / "verdicts.jsonl").read_text().splitlines()
    counts = json.loads(verdicts[-1])["summary"]["counts"]
    assert (counts["changed"], counts["added"], counts["removed"]) == (spec.n_changed, spec.n_added, spec.n_removed)
    [section] = read_log(out_dir / "telemetry.jsonl", strict=True)
    assert section.header["config"]["b_min"] == 100
    assert section.header["config"]["mem_cap"] == 4e9
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["oom_events"] == 0


def test_run_fixed_zero_reconfigs(job_config):
    path, _ = job_config
    assert main(["run", str(path), "--policy", "fixed", "--b", "500", "--k", "2", "--backend", "taskpool"]) == 0
    summary = json.loads((path.parent / "out" / "summary.json").read_text())
    assert summary["reconfig_count"] == 0


def test_flags_override_file_and_env(job_config, monkeypatch):
    path, _ = job_config
    monkeypatch.setenv("ADAPTDIFF_CAPS_CPU", "2")
    assert main(["run", str(path), "--caps-mem", "8GB"]) == 0
    [section] = read_log(path.parent / "out" / "telemetry.jsonl")
    assert section.header["config"]["mem_cap"] == 8e9
    assert section.header["config"]["cpu_cap"] == 2


def test_tiny_caps_abort_infeasible(job_config, capsys):
    path, _ = job_config
    assert main(["run", str(path), "--caps-mem", "10MB"]) == 3
    assert "infeasible" in capsys.readouterr().err.lower()


def test_analyze_fixture(tmp_path, capsys):
    assert main(["analyze", "--fixture", "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "13.9 ± 0.4" in out and "242.7 ± 4.8" in out
    first = (tmp_path / "tables.txt").read_text()
    assert main(["analyze", golden_fixture_path(), "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "tables.txt").read_text() == first


def test_analyze_strict_corrupt(tmp_path, capsys):
    log = tmp_path / "bad.jsonl"
    lines = open(golden_fixture_path()).read().splitlines()[:5]
    lines.insert(3, "garbage")
    log.write_text("\n".join(lines) + "\n")
    assert main(["analyze", str(log), "--strict", "--out-dir", str(tmp_path)]) != 0
    assert "line 4" in capsys.readouterr().err


def test_analyze_version_mismatch(tmp_path, capsys):
    log = tmp_path / "v2.jsonl"
    header = json.loads(open(golden_fixture_path()).readline())
    header["version"] = 2
    log.write_text(json.dumps(header) + "\n")
    assert main(["analyze", str(log), "--out-dir", str(tmp_path)]) != 0
    err = capsys.readouterr().err
    assert "2" in err and "1" in err


def test_analyze_equals_live_summary(job_config):
    path, _ = job_config
    assert main(["run", str(path)]) == 0
    out_dir = path.parent / "out"
    live = json.loads((out_dir / "summary.json").read_text())
    assert main(["analyze", str(out_dir / "telemetry.jsonl"), "--out-dir", str(out_dir / "an")]) == 0
    import csv

    [row] = list(csv.DictReader(open(out_dir / "an" / "report.csv")))
    assert float(row["p95_mean"]) == live["job_p95"]
    assert float(row["peak_rss_mean"]) == live["peak_rss"]


def test_bench_smoke(tmp_path, capsys):
    matrix = {"sizes": [10_000, 20_000], "reference_sizes": [1_000_000, 2_000_000], "repetitions": 3,
              "ablations": {"hysteresis_m": [1, 2, 3]}, "out_dir": str(tmp_path / "bench")}
    path = tmp_path / "matrix.yaml"
    path.write_text(yaml.safe_dump(matrix))
    assert main(["bench", str(path)]) == 0
    out = capsys.readouterr().out
    assert out.count("Workload |") == 3
    produced = os.listdir(tmp_path / "bench")
    assert "tables.txt" in produced and "hysteresis_m_3__tables.txt" in produced
    assert os.listdir(tmp_path / "bench" / "logs")


def test_bench_rejects_two_repetitions(tmp_path):
    path = tmp_path / "matrix.yaml"
    path.write_text(yaml.safe_dump({"repetitions": 2}))
    assert main(["bench", str(path)]) == 1
