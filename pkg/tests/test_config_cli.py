import csv
import json
import shutil
import subprocess
import sys

import pytest

from camp import config as cfg
from camp.cli import main


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run_ok(argv, capsys=None):
    code = main([str(a) for a in argv])
    assert code == 0, capsys.readouterr().err if capsys else code
    return code


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------

def test_load_config_parses_and_rejects(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nepochs = 3\nlearning_rate=0.01  # inline\n\nbackground_region = 1, 2, 16, 16\n"
                 "pooled = yes\n")
    assert cfg.load_config(f) == {"epochs": 3, "learning_rate": 0.01, "background_region": (1, 2, 16, 16),
                                  "pooled": True}
    for body, message in (("bogus = 1\n", "unknown config key"), ("epochs = 1\nepochs = 2\n", "duplicate"),
                          ("epochs\n", "key = value"), ("epochs = many\n", "bad value"),
                          ("loss = l1\n", "bad value")):
        f.write_text(body)
        with pytest.raises(cfg.ConfigError, match=message) as exc:
            cfg.load_config(f)
        assert f"{f}:" in str(exc.value)


def test_resolve_precedence(monkeypatch):
    monkeypatch.delenv("CAMP_SEED", raising=False)
    v = cfg.resolve(("epochs", "seed", "batch_size"), {"epochs": 5, "batch_size": 2}, {"epochs": 9})
    assert v == {"epochs": 9, "seed": 0, "batch_size": 2}
    monkeypatch.setenv("CAMP_SEED", "42")
    assert cfg.resolve(("seed",))["seed"] == 42
    assert cfg.resolve(("seed",), {"seed": 3})["seed"] == 3
    monkeypatch.setenv("CAMP_SEED", "-1")
    with pytest.raises(cfg.ConfigError):
        cfg.resolve(("seed",))


def test_every_key_has_a_parseable_default():
    for key, spec in cfg.KEYS.items():
        if spec.default is not None and not isinstance(spec.default, tuple):
            assert spec.parse(str(spec.default)) == spec.default


def test_train_config_from_values():
    v = cfg.resolve(tuple(k for k in cfg.KEYS if k in ("epochs", "sparsity_p", "beta_max", "dropout_rate")),
                    {"sparsity_p": 0.1, "beta_max": 3.0})
    tc = cfg.train_config(v)
    assert tc.sparsity.p == 0.1 and tc.sparsity.beta_max == 3.0 and tc.dropout_rate == 0.25
    with pytest.raises(cfg.ConfigError):
        cfg.train_config({"sparsity_p": 1.5})


# --------------------------------------------------------------------------
# exit codes
# --------------------------------------------------------------------------

def test_usage_errors_exit_1(tmp_path, capsys):
    assert main([]) == 1
    assert main(["synth", "--out", str(tmp_path), "--frobnicate"]) == 1
    assert main(["synth", "--out", str(tmp_path), "--size", "30"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert main(["synth", "--out", str(tmp_path), "--config", str(bad)]) == 1
    assert "nonsense" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, capsys):
    assert main(["train-ae", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o")]) == 2
    assert "missing.csv" in capsys.readouterr().err
    run_ok(["synth", "--out", tmp_path / "d", "--patients", 2, "--slices", 1, "--size", 16])
    victim = next((tmp_path / "d").rglob("*.pgm"))
    victim.write_bytes(victim.read_bytes()[:-5])
    assert main(["train-ae", "--manifest", str(tmp_path / "d" / "manifest.csv"), "--out", str(tmp_path / "o"),
                 "--epochs", "1"]) == 2
    err = capsys.readouterr().err
    assert str(victim) in err and "byte" in err


def test_numerical_failure_exits_3(tmp_path, capsys, monkeypatch):
    import camp.cli as cli
    from camp.diagnostics import GradResult
    monkeypatch.setattr(cli, "gradient_suite", lambda seed, size: [GradResult("conv2d", 0.5, 1, 0)])
    assert main(["gradcheck"]) == 3
    assert "conv2d" in capsys.readouterr().err


def test_gradcheck_command_passes(tmp_path, capsys):
    run_ok(["gradcheck", "--scale", 16, "--out", tmp_path], capsys)
    rows = (tmp_path / "gradcheck.txt").read_text().splitlines()[1:]
    assert rows and all(r.rstrip().endswith("PASS") for r in rows)


def test_console_script_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "camp.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("camp ")


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

def test_end_to_end_pipeline(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("CAMP_SEED", raising=False)
    d, m = tmp_path / "data", tmp_path / "models"
    run_ok(["synth", "--out", d, "--patients", 4, "--slices", 2, "--size", 16, "--seed", 7], capsys)
    manifest = d / "manifest.csv"
    run_ok(["train-ae", "--manifest", manifest, "--out", m, "--epochs", 2, "--modality", "FLAIR"], capsys)
    assert {"camp1_FLAIR.ckpt", "ae_log_FLAIR.csv", "run_manifest.json"} <= set(tree(m))
    run_ok(["train-clf", "--manifest", manifest, "--camp1", m, "--out", m, "--epochs", 2, "--modality", "FLAIR",
            "--cross-validate", "true", "--folds", 2], capsys)
    assert {"camp2_FLAIR.ckpt", "clf_log_FLAIR.csv", "cv_predictions_FLAIR.csv"} <= set(tree(m))
    p = tmp_path / "pred"
    run_ok(["predict", "--manifest", manifest, "--model", m, "--out", p, "--modality", "FLAIR"], capsys)
    with open(p / "predictions.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["group", "patient_id", "modality", "slice_path", "label", "score"]
    assert len(rows) == 1 + 4 * 2
    with open(p / "patients.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 4
    e = tmp_path / "eval"
    run_ok(["evaluate", "--predictions", p / "predictions.csv", "--out", e], capsys)
    assert {"metrics_FLAIR_slice.csv", "roc_FLAIR_patient.csv", "metrics.txt"} <= set(tree(e))
    a = tmp_path / "act"
    run_ok(["activations", "--model", m / "camp1_FLAIR.ckpt", "--slice", next(d.rglob("FLAIR_000.pgm")),
            "--out", a, "--layers", "conv1,deconv2"], capsys)
    assert len([n for n in tree(a) if n.endswith(".pgm")]) == 64 + 64
    record = json.loads((m / "run_manifest.json").read_text())
    assert record["subcommand"] == "train-clf" and record["seed"] == 0
    assert record["config"]["folds"] == 2 and record["config"]["cross_validate"] is True


def test_evaluate_perfect_predictions(tmp_path, capsys):
    pred = tmp_path / "p.csv"
    pred.write_text("group,patient_id,modality,slice_path,label,score\n"
                    "g,a,FLAIR,x.pgm,1,1.0\ng,b,FLAIR,y.pgm,0,0.0\ng,a,FLAIR,z.pgm,1,0.9\n")
    run_ok(["evaluate", "--predictions", pred, "--out", tmp_path / "e"], capsys)
    with open(tmp_path / "e" / "metrics_g_slice.csv") as fh:
        metrics = dict(list(csv.reader(fh))[1:])
    assert float(metrics["accuracy"]) == 1.0 and float(metrics["auc"]) == 1.0


def test_preprocess_command(tmp_path, capsys):
    d = tmp_path / "d"
    run_ok(["synth", "--out", d, "--patients", 2, "--slices", 2, "--size", 64], capsys)
    o = tmp_path / "o"
    run_ok(["preprocess", "--manifest", d / "manifest.csv", "--out", o, "--target-size", 64], capsys)
    files = tree(o)
    assert len([n for n in files if n.endswith(".pgm")]) == 2 * 2 * 4
    assert files["quality.csv"].startswith(b"patient_id,modality,slice_index,entropy_bits,snr_db,selected\n")


def test_run_manifest_replays_byte_for_byte(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("CAMP_SEED", "11")
    run_ok(["synth", "--out", "d", "--patients", 2, "--slices", 1, "--size", 16], capsys)
    run_ok(["train-ae", "--manifest", "d/manifest.csv", "--out", "m", "--epochs", 1, "--pooled", "true"], capsys)
    record = json.loads((tmp_path / "m" / "run_manifest.json").read_text())
    assert record["seed"] == 11 and "--seed" in record["argv"]
    before = tree(tmp_path / "m")
    inputs_before = tree(tmp_path / "d")
    shutil.rmtree(tmp_path / "m")
    monkeypatch.delenv("CAMP_SEED")
    run_ok(record["argv"], capsys)
    assert tree(tmp_path / "m") == before
    assert tree(tmp_path / "d") == inputs_before  # inputs untouched
