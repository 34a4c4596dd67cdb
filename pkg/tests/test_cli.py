import json
import subprocess
import sys

import pytest
import yaml

from conftest import TINY
from varsguard.cli import main
from varsguard.io import file_digest


@pytest.fixture
def tiny_yaml(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


def test_desk_recipe_end_to_end(tmp_path, tiny_yaml, capsys):
    rd = str(tmp_path / "run")
    for cmd in ("synth", "train-rs", "attack", "train-denoiser", "train-detector", "defend-eval", "detect-eval",
                "shift-eval", "report", "export-embeddings"):
        extra = ["--config", str(tiny_yaml)] if cmd == "synth" else []
        code, out, err = run_cli(capsys, cmd, "--run-dir", rd, *extra)
        assert code == 0, (cmd, err)
    for name in ("metrics.json", "metrics.csv", "roc.csv", "eps_sweep.csv", "distance_histograms.csv",
                 "detection.csv", "embeddings.bin"):
        assert (tmp_path / "run" / "report" / name).exists()
    snaps = {p.stem for p in (tmp_path / "run" / "snapshots").glob("*.json")}
    assert {"synth", "train-rs", "attack", "train-denoiser", "train-detector", "defend-eval"} <= snaps

    # single catalog rerun gives the same manifest
    code, out, _ = run_cli(capsys, "attack", "--run-dir", rd, "--method", "pgd", "--eps", "16")
    assert code == 0 and out["catalogs"] == ["eval_pgd_eps16"]
    man = tmp_path / "run" / "manifests" / "eval_pgd_eps16" / "manifest.json"
    first = file_digest(man)
    run_cli(capsys, "attack", "--run-dir", rd, "--method", "pgd", "--eps", "16")
    assert file_digest(man) == first

    # a multi-budget sweep in one call, including a budget outside the config
    code, out, _ = run_cli(capsys, "attack", "--run-dir", rd, "--method", "fgsm", "--eps", "8", "64")
    assert out["catalogs"] == ["eval_fgsm_eps8", "eval_fgsm_eps64"]
    m64 = json.loads((tmp_path / "run" / "manifests" / "eval_fgsm_eps64" / "manifest.json").read_text())
    assert max(m64["achieved_linf"].values()) <= 64 / 255 + 1e-6


def test_missing_dependency(tmp_path, tiny_yaml, capsys):
    rd = str(tmp_path / "run")
    assert run_cli(capsys, "synth", "--run-dir", rd, "--config", str(tiny_yaml))[0] == 0
    code, _, err = run_cli(capsys, "defend-eval", "--run-dir", rd)
    assert code == 3 and err["error"] == "dependency" and err["command"] == "train-denoiser"
    code, _, err = run_cli(capsys, "train-denoiser", "--run-dir", rd)
    assert code == 3 and err["command"] == "attack"


def test_config_errors(tmp_path, tiny_yaml, capsys):
    rd = str(tmp_path / "run")
    code, _, err = run_cli(capsys, "synth", "--run-dir", rd, "--config", str(tiny_yaml), "--set", "loss.beta=-2")
    assert code == 2 and err == {"error": "config", "field": "loss.beta", "message": err["message"]}
    code, _, err = run_cli(capsys, "synth", "--run-dir", rd, "--config", str(tiny_yaml), "--set", "loss.nope=1")
    assert code == 2 and err["field"] == "loss.nope"
    bad = tmp_path / "bad.yaml"
    bad.write_text("data: [unclosed\n")
    code, _, err = run_cli(capsys, "synth", "--run-dir", rd, "--config", str(bad))
    assert code == 2 and err["error"] == "config"


def test_ingest(tmp_path, capsys):
    import numpy as np

    rows = [f"user{u},item{(u * 7 + k) % 130},4" for u in range(30) for k in range(6)]
    (tmp_path / "r.csv").write_text("user,item,rating\n" + "\n".join(rows) + "\n")
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    rng = np.random.default_rng(0)
    keys = sorted({r.split(",")[1] for r in rows})
    for k in keys:
        np.save(imgs / f"{k}.npy", rng.random((3, 16, 16)).astype(np.float32))
    code, out, err = run_cli(capsys, "ingest", "--run-dir", str(tmp_path / "run"), "--interactions",
                             str(tmp_path / "r.csv"), "--images", str(imgs), "--set", "data.image_side=16")
    assert code == 0, err
    code, _, err = run_cli(capsys, "ingest", "--run-dir", str(tmp_path / "run2"))
    assert code == 2 and err["field"] == "data.interactions_path"


def test_run_root_env_and_console_script(tmp_path, tiny_yaml):
    env = {"VARSGUARD_RUN_ROOT": str(tmp_path / "root"), "PATH": "/usr/local/bin:/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "varsguard.cli", "synth", "--config", str(tiny_yaml)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "root" / "default" / "config.snapshot").exists()
    proc = subprocess.run([sys.executable, "-m", "varsguard.cli", "report"], capture_output=True, text=True,
                          env=env)
    assert proc.returncode == 3 and json.loads(proc.stderr)["command"] == "defend-eval"
