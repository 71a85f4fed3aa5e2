import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from mmprotect.cli import build_parser, main, reference_markdown
from mmprotect.data import load_dataset, tree_digest

FAST = {"protection": {"rounds": 1, "top_k": 4}, "attack": {"epochs": 2}}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "fast.json"
    cfg.write_text(json.dumps(FAST))
    assert main(["gen-toy-data", "--out", str(root / "data"), "--n-train", "6", "--n-eval", "4"]) == 0
    return root, cfg


def test_gen_toy_data_deterministic_and_refuses_overwrite(work, tmp_path):
    root, _ = work
    assert main(["gen-toy-data", "--out", str(tmp_path / "d"), "--n-train", "6", "--n-eval", "4"]) == 0
    assert tree_digest(tmp_path / "d") == tree_digest(root / "data")
    assert main(["gen-toy-data", "--out", str(tmp_path / "d"), "--n-train", "6", "--n-eval", "4"]) == 2
    assert main(["gen-toy-data", "--out", str(tmp_path / "d"), "--n-train", "6", "--n-eval", "4", "--force"]) == 0


def test_validation_failures_exit_one(work, tmp_path):
    root, _ = work
    with pytest.raises(SystemExit) as e:
        main(["protect", "--data", str(root / "data" / "train")])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"protection": {"eps_x": 0.5}}))
    assert main(["--config", str(bad), "gen-toy-data", "--out", str(tmp_path / "x")]) == 1
    bad.write_text(json.dumps({"unknown": 1}))
    assert main(["--config", str(bad), "gen-toy-data", "--out", str(tmp_path / "x")]) == 1
    assert main(["gen-toy-data", "--out", str(tmp_path / "x"), "--n-train", "0"]) == 1
    assert main(["--workers", "0", "gen-toy-data", "--out", str(tmp_path / "x")]) == 1


def test_global_flags_before_or_after_command():
    p = build_parser()
    a = p.parse_args(["--seed", "3", "verify"])
    b = p.parse_args(["verify", "--seed", "3"])
    assert a.seed == b.seed == 3


def test_protect_attack_evaluate_diagnose(work, tmp_path):
    root, cfg = work
    train, evals = root / "data" / "train", root / "data" / "eval"
    rel = tmp_path / "rel"
    assert main(["--config", str(cfg), "protect", "--data", str(train), "--out", str(rel)]) == 0
    prot = json.loads((rel / "protection.json").read_text())
    assert prot["total_violations"] == 0 and prot["config"]["rounds"] == 1
    assert len(load_dataset(rel)) == 6

    report = tmp_path / "attack.json"
    ckpt = tmp_path / "model.ckpt"
    assert main(["--config", str(cfg), "attack", "--data", str(rel), "--eval", str(evals), "--clean", str(train),
                 "--mix-ratio", "0.5", "--transforms", "case,blur3", "--out", str(report),
                 "--save-model", str(ckpt)]) == 0
    rep = json.loads(report.read_text())
    assert rep["mix_ratio"] == 0.5 and rep["transforms"] == ["case", "blur3"]
    assert rep["config"]["attack"]["epochs"] == 2 and len(rep["loss_curve"]) == 2

    ev = tmp_path / "eval.json"
    assert main(["evaluate", "--model", str(ckpt), "--eval", str(evals), "--out", str(ev)]) == 0
    assert json.loads(ev.read_text())["accuracy"] == rep["accuracy"]

    diag = tmp_path / "diag.json"
    assert main(["diagnose", "--protected", str(rel), "--clean", str(train), "--out", str(diag),
                 "--csv", str(tmp_path / "csv"), "--attack-report", str(report)]) == 0
    d = json.loads(diag.read_text())
    assert d["stealth"]["summary"]["psnr_db_min"] >= 30.07
    assert (tmp_path / "csv" / "loss_curves.csv").exists()


def test_mixing_without_clean_is_invalid(work, tmp_path):
    root, _ = work
    train, evals = root / "data" / "train", root / "data" / "eval"
    assert main(["attack", "--data", str(train), "--eval", str(evals), "--mix-ratio", "0.5", "--epochs", "0",
                 "--out", str(tmp_path / "r.json")]) == 1


def test_protect_missing_data_is_stage_failure(tmp_path):
    assert main(["protect", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_protect_skips_unreadable_sample(work, tmp_path):
    root, cfg = work
    import shutil
    data = tmp_path / "train"
    shutil.copytree(root / "data" / "train", data)
    next(data.rglob("*.png")).write_bytes(b"not a png")
    assert main(["--config", str(cfg), "protect", "--data", str(data), "--out", str(tmp_path / "rel")]) == 2
    assert len(load_dataset(tmp_path / "rel")) == 5


def test_echoed_config_reproduces_release(work, tmp_path):
    root, cfg = work
    train = root / "data" / "train"
    assert main(["--config", str(cfg), "protect", "--data", str(train), "--out", str(tmp_path / "a")]) == 0
    echoed = json.loads((tmp_path / "a" / "protection.json").read_text())["config"]
    cfg2 = tmp_path / "echo.json"
    cfg2.write_text(json.dumps({"protection": echoed}))
    assert main(["--config", str(cfg2), "protect", "--data", str(train), "--out", str(tmp_path / "b")]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_verify_command(tmp_path):
    out = tmp_path / "v.json"
    assert main(["verify", "--suite", "proposition", "--suite", "pinsker", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["passed"] and len(rep["suites"]) == 2


def test_smoke_end_to_end(tmp_path):
    t0 = time.perf_counter()
    assert main(["end-to-end", "--profile", "smoke", "--out", str(tmp_path / "e2e")]) == 0
    assert time.perf_counter() - t0 <= 120
    summary = json.loads((tmp_path / "e2e" / "summary.json").read_text())
    assert summary["config"]["data"]["n_train"] == 32 and summary["config"]["protection"]["rounds"] == 2
    for name, v in summary["variants"].items():
        assert v["violations"] == 0 and v["feasibility_checks"] > 0
        assert v["stealth"]["psnr_db_min"] >= 30.07
        assert (tmp_path / "e2e" / name / "csv" / "routing.csv").exists()


def test_reference_page_is_current():
    page = reference_markdown()
    for cmd in ("gen-toy-data", "protect", "attack", "evaluate", "diagnose", "verify", "end-to-end"):
        assert f"## {cmd}" in page
    for flag in ("--seed", "--config", "--workers"):
        assert flag in page
    doc = Path(__file__).resolve().parents[1] / "docs" / "cli.md"
    assert doc.read_text() == page + "\n"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mmprotect.cli", "--reference"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("# mmprotect command reference")
