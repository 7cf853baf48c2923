import json
import subprocess
import sys

import pytest

from sloplan.cli import main
from sloplan.perf_model import PerfModel, synthetic_profile, write_profile

MODEL = PerfModel(((8e-5, 3e-3, 0.008), (0.0, 4e-3, 0.025)))


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_fit(tmp_path, capsys):
    prof = tmp_path / "p.csv"
    write_profile(prof, synthetic_profile(MODEL, [1, 64, 256, 512, 1024, 2048, 4096], (0, 2, 4), noise=0.02, seed=1))
    code, out, _ = run_cli(capsys, "fit", str(prof), "--out", str(tmp_path / "m.json"))
    assert code == 0
    assert json.loads(out)["r_squared"] >= 0.99
    assert json.loads((tmp_path / "m.json").read_text())["terms"]


def test_fit_reports_bad_line(tmp_path, capsys):
    prof = tmp_path / "bad.csv"
    prof.write_text("num_tokens,spec_step,latency_seconds\n1,0,0.01\nx,0,0.02\n")
    code, _, err = run_cli(capsys, "fit", str(prof), "--out", str(tmp_path / "m.json"))
    assert code == 2
    assert "line 3" in err


def test_generate_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for path in (a, b):
        code, out, _ = run_cli(capsys, "generate", "--config", "coder", "--seed", "3", "--duration", "40", "--rate", "2", "--out", str(path))
        assert code == 0
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(out)["requests"] == len(a.read_text().splitlines()) > 0


def test_simulate_toy(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "simulate", "--config", "toy", "--out", str(tmp_path))
    assert code == 0
    s = json.loads(out)
    assert s["attainment"] == 1.0
    assert s["demoted"] == 1
    assert s["overall_attainment"] == pytest.approx(6 / 7)
    assert {p.name for p in tmp_path.iterdir()} == {"metrics.jsonl", "requests.csv", "summary.json"}


def test_simulate_toy_prefill_greedy_violates(tmp_path, capsys):
    code, _, _ = run_cli(capsys, "simulate", "--config", "toy", "--scheduler", "prefill-greedy", "--out", str(tmp_path))
    assert code == 0
    recs = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()[:-1]]
    tpot_violators = [
        r["id"] for r in recs if any(st["kind"] == "decode" and any(x > st["tpot_s"] for x in st["tpot_samples"]) for st in r["stages"])
    ]
    assert len(tpot_violators) >= 2


def test_simulate_deterministic_with_noise_and_spec(tmp_path, capsys):
    exp = tmp_path / "exp.json"
    exp.write_text(
        json.dumps(
            {
                "scenario": "chatbot",
                "model": MODEL.to_dict(),
                "cluster": {"replicas": 2, "routing_limit": 1},
                "duration_s": 10,
            }
        )
    )
    outs = []
    for k in range(2):
        d = tmp_path / f"o{k}"
        code, _, _ = run_cli(capsys, "simulate", "--config", str(exp), "--rate", "3", "--seed", "5", "--noise", "0.02", "--spec", "on", "--debug-log", "--out", str(d))
        assert code == 0
        outs.append({p.name: p.read_bytes() for p in d.iterdir()})
    assert outs[0] == outs[1]
    assert "events.jsonl" in outs[0]


def test_capacity_command(tmp_path, capsys):
    exp = tmp_path / "exp.json"
    exp.write_text(
        json.dumps(
            {
                "scenario": "chatbot",
                "model": MODEL.to_dict(),
                "duration_s": 8,
                "capacity": {"rate_bounds": [0.5, 40], "tolerance": 0.2, "seeds": [0]},
            }
        )
    )
    code, out, _ = run_cli(capsys, "capacity", "--config", str(exp), "--scheduler", "slos", "--out", str(tmp_path / "c"))
    assert code == 0
    rows = json.loads((tmp_path / "c" / "capacity.json").read_text())
    assert rows[0]["scheduler"] == "slos" and rows[0]["capacity_per_gpu"] > 0.5
    assert out.splitlines()[0] == "scheduler,replicas,capacity_per_gpu,total_rate"


def test_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run_cli(capsys, "simulate", "--config", str(bad), "--out", str(tmp_path))
    assert code == 2 and "invalid JSON" in err
    code, _, err = run_cli(capsys, "simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path))
    assert code == 2


def test_unknown_scheduler_knob(tmp_path, capsys):
    exp = tmp_path / "exp.json"
    exp.write_text(json.dumps({"scenario": "chatbot", "model": MODEL.to_dict(), "scheduler": {"speed": 2}}))
    code, _, err = run_cli(capsys, "simulate", "--config", str(exp), "--out", str(tmp_path))
    assert code == 2 and "speed" in err


def test_module_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "sloplan.cli", "simulate", "--config", "toy", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
        check=True,
    )
    assert json.loads(res.stdout)["demoted"] == 1
