import json
import subprocess
import sys

import pytest

from conftest import tiny_config
from prunetune.cli import build_parser, main
from prunetune.harness import save_config


@pytest.fixture
def run(tmp_path, capsys):
    """Call ``main`` against a tiny config; return ``(code, stdout, stderr)``."""
    config = tmp_path / "config.json"
    save_config(tiny_config(), config)
    out = tmp_path / "out"

    def call(*argv, config_path=config):
        code = main([*argv, "--config", str(config_path), "--out-dir", str(out)])
        captured = capsys.readouterr()
        return code, captured.out, captured.err

    call.out = out
    return call


def test_parser_lists_every_command():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"gen-data", "train-general", "extract-subnet", "adapt",
                                "baseline", "evaluate", "inspect-masks", "sweep", "report"}


def test_gen_data(run):
    code, out, _ = run("gen-data")
    assert code == 0
    info = json.loads(out)
    assert set(info["corpora"]) == {"general", "rev", "shf"}
    assert (run.out / "data" / "vocab.txt").exists()
    assert (run.out / "data" / "rev.test.tgt").exists()
    assert (run.out / "config.json").exists()


def test_pipeline_commands(run):
    code, out, _ = run("train-general")
    assert code == 0 and json.loads(out)["stage"] == "train_general"

    code, out, _ = run("extract-subnet")
    counts = json.loads(out)["counts"]
    assert code == 0 and counts["general"] > 0 and counts["free"] > 0

    code, out, _ = run("adapt", "--domain", "rev")
    assert code == 0 and out.startswith("strategy=prune-tune")
    assert (run.out / "adapted-rev" / "registry.masks").exists()

    code, out, _ = run("evaluate", "--domain", "rev", "--split", "dev")
    res = json.loads(out)
    assert code == 0 and res["domain"] == "rev" and res["state"].endswith("adapted-rev")

    code, out, _ = run("evaluate", "--domain", "general")
    assert code == 0 and 0 <= json.loads(out)["accuracy"] <= 1

    code, out, _ = run("inspect-masks")
    assert code == 0 and "rev" in out and out.startswith("# ")

    code, out, _ = run("report")
    assert code == 0 and "strategy=prune-tune" in out


def test_adapt_sequential_and_baseline(run):
    code, out, _ = run("adapt", "--sequential")
    assert code == 0 and "shf" in out
    code, out, _ = run("evaluate", "--domain", "shf")
    assert json.loads(out)["state"].endswith("adapted-sequential")
    code, out, _ = run("baseline", "--strategy", "finetune", "--domain", "rev")
    assert code == 0 and out.startswith("strategy=finetune")
    assert (run.out / "baseline-finetune" / "report.json").exists()


@pytest.mark.parametrize("kind,values,csv_name", [
    ("sparsity", ["0.3"], "sparsity.csv"),
    ("fraction", ["1.0"], "lowresource.csv"),
    ("order", [], None),
])
def test_sweeps(run, kind, values, csv_name):
    argv = ["sweep", kind] + (["--values", *values] if values else [])
    code, out, _ = run(*argv)
    assert code == 0 and "strategy=" in out
    if csv_name:
        assert (run.out / f"sweep-{kind}" / csv_name).exists()


def test_seed_override(run):
    code, out, _ = run("train-general", "--seed", "5")
    assert code == 0
    manifest = json.loads((run.out / "manifest.json").read_text())
    assert manifest["stages"]["train_general"]["seed"] == 5


def _error(err):
    payload = json.loads(err.strip().splitlines()[-1])
    assert set(payload) == {"error", "message", "command"}
    return payload


def test_errors_exit_one_with_json(run, tmp_path):
    code, _, err = run("evaluate", "--domain", "rev")
    assert code == 1 and _error(err)["error"] == "ContractError"

    code, _, err = run("evaluate", "--domain", "nope")
    assert code == 1 and "unknown domain" in _error(err)["message"]

    code, _, err = run("report")
    assert code == 1 and _error(err)["command"] == "report"

    code, _, err = run("adapt", "--domain", "missing")
    assert code == 1

    bad = tmp_path / "bad.json"
    bad.write_text("{")
    code, _, err = run("gen-data", config_path=bad)
    assert code == 1 and _error(err)["error"] == "FormatError"

    code, _, err = run("gen-data", config_path=tmp_path / "absent.json")
    assert code == 1 and _error(err)["error"] == "FileNotFoundError"


def test_console_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "prunetune.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "extract-subnet" in proc.stdout
