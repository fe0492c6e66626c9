import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from frlhf.cli import main
from frlhf.federation.server import run_federation
from frlhf.federation.transport import InProcessClient
from frlhf.harness.config import ExperimentConfig
from frlhf.harness.runner import build_trainers

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

CONSTANTS = {"L": 2.0, "mu": 0.5, "G": 1.0, "sigma2": 1.0, "h_max": 1.0, "lambda": 0.1, "K": 2, "T": 10, "j_star": 1.0, "j0": 0.2}


def _write(path: Path, doc) -> str:
    path.write_text(json.dumps(doc))
    return str(path)


def test_bounds_prints_terms(tmp_path, capsys):
    path = _write(tmp_path / "c.json", CONSTANTS)
    assert main(["bounds", path, "--epsilon", "0.5"]) == 0
    doc = json.loads(capsys.readouterr().out)
    # hand-computed: 2/(0.5*10)*0.8, (1+1)/(2*0.5*2), (2/0.5)*0.1
    assert doc["terms"] == pytest.approx({"rounds": 0.32, "variance": 1.0, "feedback": 0.4})
    assert doc["bound"] == pytest.approx(1.72)
    sc = doc["sample_complexity"]
    assert sc["T_min"] == pytest.approx(19.2) and sc["K_min"] == pytest.approx(12.0)
    assert sc["N"] == pytest.approx(230.4)
    assert (sc["clients"], sc["rounds"]) == (12, 20)
    assert sc["lambda_hmax_cap"] == pytest.approx(0.5 * 0.5 / 6)
    assert sc["feedback_budget_met"] is False
    assert doc["constants"]["lambda"] == 0.1


def test_bounds_rejects_bad_constants(tmp_path, capsys):
    path = _write(tmp_path / "c.json", {**CONSTANTS, "mu": 0.0})
    assert main(["bounds", path]) == 1
    assert "mu" in capsys.readouterr().err


def test_simulate_bad_config_exits_2(tmp_path, capsys):
    path = _write(tmp_path / "bad.json", {"scenario": "recommender", "local": {"tau": -1}})
    assert main(["simulate", path]) == 2
    assert "config error: local" in capsys.readouterr().err


def test_simulate_small_run(tmp_path, capsys):
    doc = json.loads((CONFIGS / "centralized_equiv.json").read_text())
    doc["T"] = 20
    path = _write(tmp_path / "cfg.json", doc)
    out = tmp_path / "out"
    assert main(["simulate", path, "--out", str(out), "--seeds", "1", "2"]) == 0
    text = capsys.readouterr().out
    assert "PASS" in text and "FAIL" not in text
    assert json.loads((out / "summary.json").read_text())["passed"]


def test_sweep_with_lambdas(tmp_path, capsys):
    doc = json.loads((CONFIGS / "lambda_sweep.json").read_text())
    doc["T"] = 40
    path = _write(tmp_path / "cfg.json", doc)
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", path, "--lambdas", "0,0.1,0.2,0.4,0.8", "--seeds", "0", "1", "--out", str(out)])
    assert code in (0, 1)
    summary = json.loads((out / "summary.json").read_text())
    assert [r["lambda"] for r in summary["rows"]] == [0.0, 0.1, 0.2, 0.4, 0.8]
    assert "zero_lambda_inert" in capsys.readouterr().out


def test_sweep_rejects_short_lambda_list(tmp_path):
    path = str(CONFIGS / "lambda_sweep.json")
    assert main(["sweep", "--config", path, "--lambdas", "0.1,0.2"]) == 2


def test_client_id_out_of_range(tmp_path):
    assert main(["client", "--connect", "127.0.0.1:1", "--id", "10", "--config", str(CONFIGS / "recommender.json")]) == 2


def test_serve_and_clients_over_loopback(tmp_path):
    doc = json.loads((CONFIGS / "recommender.json").read_text())
    doc.update(K=3, T=2)
    cfg_path = _write(tmp_path / "cfg.json", doc)
    out = tmp_path / "serve"
    cmd = [sys.executable, "-m", "frlhf.cli"]
    server = subprocess.Popen(
        cmd + ["serve", "--listen", "127.0.0.1:0", "--config", cfg_path, "--out", str(out), "--timeout", "60"],
        stdout=subprocess.PIPE,
        text=True,
    )
    clients = []
    try:
        line = server.stdout.readline()
        assert line.startswith("listening on "), line
        addr = line.split()[2]
        clients = [
            subprocess.Popen(cmd + ["client", "--connect", addr, "--id", str(k), "--config", cfg_path, "--timeout", "60"], stdout=subprocess.PIPE, text=True)
            for k in range(3)
        ]
        for c in clients:
            assert c.wait(timeout=120) == 0
        assert server.wait(timeout=120) == 0
    finally:
        for p in [server, *clients]:
            if p.poll() is None:
                p.kill()
            p.wait()
            if p.stdout:
                p.stdout.close()

    cfg = ExperimentConfig.from_dict(doc)
    theta0, trainers = build_trainers(cfg, cfg.seeds[0])
    local = run_federation(theta0, [InProcessClient(t) for t in trainers], cfg.T)
    remote = np.array(json.loads((out / "theta_final.json").read_text()))
    assert remote.tobytes() == local.theta_final.tobytes()
    assert len((out / "rounds.jsonl").read_text().splitlines()) == 2
