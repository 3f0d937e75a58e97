"""Command line tests.

main() is exercised in-process for speed; one subprocess smoke test covers
the installed console script. Every failure path must exit with its
documented status and a single JSON error object on stderr.
"""
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pgc.cli import build_parser, main
from pgc.data import Manifest, SynthConfig, save_png, synth_dataset

TINY_MODEL = ["--crop-size", "32", "--channels", "2,3,4",
              "--patch-size", "8", "--embed-dim", "8"]


def _err(capsys):
    captured = capsys.readouterr()
    return json.loads(captured.err.strip().splitlines()[-1])["error"], captured.out


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_corpus")
    synth_dataset(SynthConfig(size=32, count_per_class=8, box_size=8,
                              smoothness=4, seed=1), d)
    return d


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, corpus_dir):
    d = tmp_path_factory.mktemp("cli_run")
    rc = main(["train", "--manifest", str(corpus_dir / "manifest.json"),
               "--out", str(d), *TINY_MODEL,
               "--epochs", "1", "--batch-size", "8", "--lr", "1e-3"])
    assert rc == 0
    return d


# ------------------------------------------------------------------ failure ----

def test_no_command_is_usage_error(capsys):
    assert main([]) == 2
    err, _ = _err(capsys)
    assert err["code"] == "USAGE"


def test_unknown_flag_is_usage_error(capsys):
    assert main(["synth", "--bogus"]) == 2
    err, _ = _err(capsys)
    assert err["code"] == "USAGE"


def test_missing_required_flag(capsys):
    assert main(["synth"]) == 2
    err, _ = _err(capsys)
    assert err["code"] == "MISSING_ARG" and "--out" in err["message"]


def test_eval_without_checkpoint(capsys, corpus_dir):
    assert main(["eval", "--manifest", str(corpus_dir / "manifest.json")]) == 2
    err, _ = _err(capsys)
    assert err["code"] == "MISSING_ARG" and "--checkpoint" in err["message"]


def test_eval_with_absent_checkpoint(capsys, corpus_dir, tmp_path):
    rc = main(["eval", "--manifest", str(corpus_dir / "manifest.json"),
               "--checkpoint", str(tmp_path / "nope.pgck")])
    assert rc == 3
    err, _ = _err(capsys)
    assert err["code"] == "MISSING_CHECKPOINT"


def test_robust_with_absent_tree(capsys, run_dir, tmp_path):
    rc = main(["robust", "--checkpoint", str(run_dir / "best.pgck"),
               "--tree", str(tmp_path / "nothing")])
    assert rc == 3
    err, _ = _err(capsys)
    assert err["code"] == "MISSING_TREE"


def test_prep_fake_pair_syntax(capsys, tmp_path):
    (tmp_path / "r").mkdir()
    rc = main(["prep", "--real", str(tmp_path / "r"), "--out", str(tmp_path / "o"),
               "--fake", "no-equals-sign"])
    assert rc == 2
    err, _ = _err(capsys)
    assert "NAME=DIR" in err["message"]


def test_perturb_unknown_family(capsys, corpus_dir, tmp_path):
    rc = main(["perturb", "--manifest", str(corpus_dir / "manifest.json"),
               "--out", str(tmp_path / "o"), "--families", "sharpen"])
    assert rc == 2


# ------------------------------------------------------------------- config ----

def test_config_file_layers_under_flags(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"size": 40, "count_per_class": 2,
                               "smoothness": 4, "box_size": 8}))

    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    run_a = json.loads((tmp_path / "a" / "run_config.json").read_text())
    assert run_a["size"] == 40 and run_a["count_per_class"] == 2

    # explicit flag beats the file
    assert main(["synth", "--config", str(cfg), "--size", "24",
                 "--out", str(tmp_path / "b")]) == 0
    run_b = json.loads((tmp_path / "b" / "run_config.json").read_text())
    assert run_b["size"] == 24 and run_b["count_per_class"] == 2
    capsys.readouterr()


def test_config_env_var(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"size": 36, "count_per_class": 2,
                               "smoothness": 4, "box_size": 8}))
    monkeypatch.setenv("PGC_CONFIG", str(cfg))
    assert main(["synth", "--out", str(tmp_path / "a")]) == 0
    run = json.loads((tmp_path / "a" / "run_config.json").read_text())
    assert run["size"] == 36
    capsys.readouterr()


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus_setting": 1}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err, _ = _err(capsys)
    assert err["code"] == "BAD_CONFIG" and "bogus_setting" in err["message"]


def test_config_not_an_object(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("[1, 2]")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err, _ = _err(capsys)
    assert err["code"] == "BAD_CONFIG"


def test_config_missing_file(tmp_path, capsys):
    assert main(["synth", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "o")]) == 3
    err, _ = _err(capsys)
    assert err["code"] == "MISSING_CONFIG"


# ------------------------------------------------------------------- success ----

def _tree_bytes(d: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(d.rglob("*.png")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_writes_dataset_and_is_repeatable(tmp_path, capsys):
    args = ["synth", "--size", "32", "--count-per-class", "3", "--box-size", "8",
            "--smoothness", "4", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "wrote 6 images" in out
    assert json.loads(out.strip().splitlines()[-1]) == {"fake": 3, "real": 3}
    for name in ("manifest.json", "stats.csv", "run_config.json"):
        assert (tmp_path / "a" / name).exists()

    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
    capsys.readouterr()


def test_prep_end_to_end(tmp_path, capsys):
    rng = np.random.default_rng(0)
    for i in range(3):
        save_png(tmp_path / "real" / f"r{i}.png",
                 rng.integers(0, 256, (12, 12, 3), dtype=np.uint8))
    for i in range(2):
        save_png(tmp_path / "fakes" / f"f{i}.png",
                 rng.integers(0, 256, (12, 12, 3), dtype=np.uint8))
    rc = main(["prep", "--real", str(tmp_path / "real"),
               "--fake", f"gen={tmp_path / 'fakes'}",
               "--out", str(tmp_path / "out"), "--crop-size", "8",
               "--fractions", "0.5,0.0,0.5"])
    assert rc == 0
    man = Manifest.load(tmp_path / "out" / "manifest.json")
    assert man.counts() == {"real": 2, "fake": 2}
    capsys.readouterr()


def test_train_then_eval_then_peaks(run_dir, corpus_dir, tmp_path, capsys):
    assert (run_dir / "best.pgck").exists()
    assert (run_dir / "history.csv").exists()
    assert (run_dir / "run_config.json").exists()

    rc = main(["eval", "--manifest", str(corpus_dir / "manifest.json"),
               "--checkpoint", str(run_dir / "best.pgck"),
               "--out", str(tmp_path / "report")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "source" in out and "synth" in out and "localization" in out
    report = json.loads((tmp_path / "report" / "report.json").read_text())
    assert report["overall"]["n"] == 4
    assert (tmp_path / "report" / "localization.json").exists()

    fake = next(e for e in Manifest.load(corpus_dir / "manifest.json").entries
                if e.label == "fake")
    rc = main(["peaks", "--image", fake.path,
               "--checkpoint", str(run_dir / "best.pgck"), "--k", "2"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out.strip())
    assert set(doc) == {"image", "prob", "label", "streams"}
    assert len(doc["streams"]) == 2
    assert all(len(s["peaks"]) == 2 for s in doc["streams"])


def test_perturb_then_robust(run_dir, corpus_dir, tmp_path, capsys):
    rc = main(["perturb", "--manifest", str(corpus_dir / "manifest.json"),
               "--out", str(tmp_path / "tree"), "--families", "brightness",
               "--levels", "1", "--split", "test"])
    assert rc == 0
    assert (tmp_path / "tree" / "summary.csv").exists()
    assert (tmp_path / "tree" / "clean" / "manifest.json").exists()

    rc = main(["robust", "--checkpoint", str(run_dir / "best.pgck"),
               "--tree", str(tmp_path / "tree"), "--out", str(tmp_path / "r.csv")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "clean" in out and "brightness" in out
    assert (tmp_path / "r.csv").exists()


def test_gradcheck_cli_passes_on_small_model(capsys):
    rc = main(["gradcheck", "--size", "16", "--channels", "2,3,4",
               "--patch-size", "8", "--embed-dim", "8", "--seed", "7"])
    assert rc == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_cli_fails_on_absurd_tolerance(capsys):
    rc = main(["gradcheck", "--size", "16", "--channels", "2,3,4",
               "--patch-size", "8", "--embed-dim", "8", "--seed", "7",
               "--tol", "1e-30"])
    assert rc == 4
    err, _ = _err(capsys)
    assert err["code"] == "GRADCHECK_FAILED"


def test_backend_flag_roundtrip(capsys):
    from pgc.backend import active_backend, set_backend

    before = active_backend()
    try:
        rc = main(["gradcheck", "--size", "16", "--channels", "2,3,4",
                   "--patch-size", "8", "--embed-dim", "8", "--seed", "7",
                   "--backend", "numpy"])
        assert rc == 0
        assert active_backend() == "numpy"
    finally:
        set_backend(before)
    capsys.readouterr()


def test_residual_vis(tmp_path, capsys):
    img = np.random.default_rng(2).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    save_png(tmp_path / "x.png", img)
    rc = main(["residual-vis", "--image", str(tmp_path / "x.png"),
               "--out", str(tmp_path / "res.png")])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out.strip())
    assert doc["max_abs"] <= doc["scale_bound"]
    assert (tmp_path / "res.png").exists()


# -------------------------------------------------------------------- shape ----

def test_every_flag_documents_itself():
    parser = build_parser(False)
    subs = next(a for a in parser._actions
                if isinstance(a, __import__("argparse")._SubParsersAction))
    assert set(subs.choices) == {"synth", "prep", "train", "eval", "perturb",
                                 "robust", "gradcheck", "peaks", "residual-vis"}
    for name, sp in subs.choices.items():
        for action in sp._actions:
            assert action.help, f"{name} option {action.option_strings} lacks help"


def test_help_exits_zero():
    with pytest.raises(SystemExit) as ei:
        main(["--help"])
    assert ei.value.code == 0
    with pytest.raises(SystemExit) as ei:
        main(["train", "--help"])
    assert ei.value.code == 0


def test_console_script_smoke():
    proc = subprocess.run(["pgc", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gradcheck" in proc.stdout
