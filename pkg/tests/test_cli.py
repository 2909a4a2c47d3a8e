import json
import subprocess
import sys

import pytest

from argen import cli
from argen.pipeline import ORDER, STAGES, sha256_file

SMALL = {
    "seed": 0,
    "domain": {"n_identities": 4, "train_non_scarce": 3, "train_scarce": 2, "test_per_class": 2, "M": 4},
    "denoiser": {"epochs": 5, "hidden": [16]},
    "sampler": {"M_score": 2},
    "rl": {"max_iters": 4, "val_every": 2, "patience": 2},
    "classifier": {"epochs": 20},
}


def small_config(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def artifact_hashes(root):
    return {f"{d}/{n}": sha256_file(root / d / n)
            for d, names in STAGES.values() for n in list(names) + ["manifest.json"]}


def run_all_twice(tmp_path):
    cfg = small_config(tmp_path)
    hashes = []
    for name in ("a", "b"):
        assert cli.main(["all", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        hashes.append(artifact_hashes(tmp_path / name))
    return hashes


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    return tmp, run_all_twice(tmp)


def test_all_is_byte_identical(built):
    _, (a, b) = built
    assert a == b and len(a) == sum(len(n) + 1 for _, n in STAGES.values())


def test_outputs_and_manifests(built):
    tmp, _ = built
    root = tmp / "a"
    fvd = json.loads((root / "fvd" / "fvd.json").read_text())
    assert {"learned", "random"} <= set(fvd)
    man = json.loads((root / "generate" / "manifest.json").read_text())
    assert man["command"] == "generate" and "policy/policy.argt" in man["inputs"]
    assert man["inputs"]["policy/policy.argt"] == sha256_file(root / "policy" / "policy.argt")
    assert (root / "recognize" / "report.csv").read_text().startswith("arm,seed")


def test_rerun_single_command_reproduces(built, capsys):
    tmp, (a, _) = built
    cfg = small_config(tmp)
    assert cli.main(["eval-fvd", "--config", str(cfg), "--out", str(tmp / "a")]) == 0
    assert capsys.readouterr().out.startswith("eval-fvd:")
    assert artifact_hashes(tmp / "a") == a


def test_generate_without_policy_names_producer(tmp_path, capsys):
    assert cli.main(["generate", "--out", str(tmp_path)]) == 2
    assert "train-policy" in capsys.readouterr().err


def test_report_detects_tampering(built, capsys):
    tmp, _ = built
    cfg = small_config(tmp)
    target = tmp / "b" / "kb" / "kb.json"
    target.write_text(target.read_text() + " ")
    assert cli.main(["report", "--config", str(cfg), "--out", str(tmp / "b")]) == 1
    assert "build-kb" in capsys.readouterr().err


def test_report_rejects_config_change(built, capsys):
    tmp, _ = built
    cfg = small_config(tmp)
    assert cli.main(["report", "--config", str(cfg), "--seed", "9", "--out", str(tmp / "a")]) == 1
    assert "different config" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"seed": 0, "foo": 1}')
    assert cli.main(["synth-data", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "foo" in capsys.readouterr().err


def test_out_defaults_to_env(tmp_path, monkeypatch):
    monkeypatch.setenv("ARGEN_OUT", str(tmp_path / "envroot"))
    assert cli.build_parser().parse_args(["report"]).out == str(tmp_path / "envroot")
    monkeypatch.delenv("ARGEN_OUT")
    assert cli.build_parser().parse_args(["report"]).out == "argen_out"
    assert cli.COMMANDS == ORDER + ["all"]


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "argen.cli", "select-frames", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 2 and "synth-data" in out.stderr
