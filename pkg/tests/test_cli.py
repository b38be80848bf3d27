"""End-to-end checks of the command line: exit codes, artifacts, determinism."""

import json
from pathlib import Path

import pytest

from aitpr import cli, training

SMALL_TRAIN = ["--epochs", "4", "--hidden", "8", "--embed", "6", "--att", "4",
               "--batch-size", "4", "--seed", "1"]


def synth(out, scenes=4, seed=3, feat_dim=12, extra=()):
    rc = cli.main(["synth", "--scenes", str(scenes), "--seed", str(seed),
                   "--out", str(out), "--feat-dim", str(feat_dim), *extra])
    assert rc == 0
    return out


def dir_payload(d):
    """Bytes of every file except the manifest (which carries wall-clock times)."""
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir())
            if p.name != "manifest.json"}


# ---- synth ----

def test_synth_writes_expected_files(tmp_path):
    out = synth(tmp_path / "data", scenes=10, seed=1)
    names = {p.name for p in out.iterdir()}
    assert "vocabulary.txt" in names
    assert "manifest.json" in names
    assert sum(n.endswith(".features.json") for n in names) == 10
    assert sum(n.endswith(".captions.txt") for n in names) == 10


def test_synth_deterministic(tmp_path):
    a = synth(tmp_path / "a", scenes=6, seed=11)
    b = synth(tmp_path / "b", scenes=6, seed=11)
    assert dir_payload(a) == dir_payload(b)
    c = synth(tmp_path / "c", scenes=6, seed=12)
    assert dir_payload(a) != dir_payload(c)


def test_synth_zero_scenes_is_usage_error(tmp_path):
    assert cli.main(["synth", "--scenes", "0", "--out", str(tmp_path / "d")]) == 2


def test_synth_unwritable_out_is_io_error(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    rc = cli.main(["synth", "--scenes", "1", "--out", str(blocker / "sub")])
    assert rc == 3


def test_synth_seed_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("AITPR_SEED", "5")
    rc = cli.main(["synth", "--scenes", "3", "--feat-dim", "12",
                   "--out", str(tmp_path / "env")])
    assert rc == 0
    explicit = synth(tmp_path / "flag", scenes=3, seed=5)
    assert dir_payload(tmp_path / "env") == dir_payload(explicit)
    manifest = json.loads((tmp_path / "env" / "manifest.json").read_text())
    assert manifest["seed"] == 5


# ---- train ----

def test_train_writes_checkpoint_trace_and_figure(tmp_path):
    data = synth(tmp_path / "data")
    ckpt = tmp_path / "run" / "model.ckpt"
    rc = cli.main(["train", "--data", str(data), "--out", str(ckpt),
                   *SMALL_TRAIN])
    assert rc == 0
    assert ckpt.is_file()
    assert (tmp_path / "run" / "model_loss.csv").is_file()
    assert (tmp_path / "run" / "model_loss.png").is_file()
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["epochs"] == 4
    lines = (tmp_path / "run" / "model_loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss"
    assert len(lines) == 5


def test_train_missing_data_dir_is_io_error(tmp_path):
    rc = cli.main(["train", "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "m.ckpt"), *SMALL_TRAIN])
    assert rc == 3


def test_train_bad_variant_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--data", "x", "--out", "y", "--variant", "4"])
    assert exc.value.code == 2
    assert "1, 2, 3" in capsys.readouterr().err


def test_train_config_file_with_flag_override(tmp_path):
    data = synth(tmp_path / "data")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 9, "hidden": 8, "embed": 6,
                               "att": 4, "seed": 2}))
    ckpt = tmp_path / "model.ckpt"
    rc = cli.main(["train", "--data", str(data), "--out", str(ckpt),
                   "--config", str(cfg), "--epochs", "2"])
    assert rc == 0
    loaded = training.load_checkpoint(ckpt)
    assert loaded.config["epochs"] == 2          # flag beats file
    assert loaded.config["dims"]["hidden"] == 8  # file beats default


def test_train_unknown_config_key_is_usage_error(tmp_path):
    data = synth(tmp_path / "data")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epoch": 3}))
    rc = cli.main(["train", "--data", str(data),
                   "--out", str(tmp_path / "m.ckpt"), "--config", str(cfg)])
    assert rc == 2


def test_train_resume_reproduces_uninterrupted_run(tmp_path):
    data = synth(tmp_path / "data")
    base = ["--data", str(data), "--hidden", "8", "--embed", "6", "--att", "4",
            "--batch-size", "4", "--seed", "9"]
    full = tmp_path / "full.ckpt"
    assert cli.main(["train", *base, "--out", str(full), "--epochs", "6"]) == 0
    half = tmp_path / "half.ckpt"
    assert cli.main(["train", *base, "--out", str(half), "--epochs", "3"]) == 0
    resumed = tmp_path / "resumed.ckpt"
    assert cli.main(["train", *base, "--out", str(resumed), "--epochs", "6",
                     "--resume", str(half)]) == 0
    assert resumed.read_bytes() == full.read_bytes()


# ---- eval ----

def test_eval_writes_report_captions_figure(tmp_path):
    data = synth(tmp_path / "data")
    ckpt = tmp_path / "model.ckpt"
    assert cli.main(["train", "--data", str(data), "--out", str(ckpt),
                     *SMALL_TRAIN]) == 0
    report = tmp_path / "out" / "report.json"
    rc = cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data),
                   "--report", str(report)])
    assert rc == 0
    payload = json.loads(report.read_text())
    assert set(payload) == {"bleu1", "bleu2", "bleu3", "bleu4",
                            "rouge_l", "cider_d", "per_image"}
    assert len(payload["per_image"]) == 4
    captions = (tmp_path / "out" / "report_captions.txt").read_text().splitlines()
    assert len(captions) == 4
    assert captions[0].startswith("scene_0000\t")
    assert (tmp_path / "out" / "report_metrics.png").is_file()


def test_eval_rerun_identical_report(tmp_path):
    data = synth(tmp_path / "data")
    ckpt = tmp_path / "model.ckpt"
    assert cli.main(["train", "--data", str(data), "--out", str(ckpt),
                     *SMALL_TRAIN]) == 0
    r1, r2 = tmp_path / "r1.json", tmp_path / "r2.json"
    for r in (r1, r2):
        assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data),
                         "--report", str(r)]) == 0
    assert r1.read_bytes() == r2.read_bytes()


def test_eval_vocab_mismatch_is_compat_error(tmp_path):
    data = synth(tmp_path / "data")
    other = synth(tmp_path / "other", extra=("--categories", "5"))
    ckpt = tmp_path / "model.ckpt"
    assert cli.main(["train", "--data", str(data), "--out", str(ckpt),
                     *SMALL_TRAIN]) == 0
    rc = cli.main(["eval", "--ckpt", str(ckpt), "--data", str(other),
                   "--report", str(tmp_path / "r.json")])
    assert rc == 3


def test_eval_empty_dataset_is_usage_error(tmp_path):
    data = synth(tmp_path / "data")
    ckpt = tmp_path / "model.ckpt"
    assert cli.main(["train", "--data", str(data), "--out", str(ckpt),
                     *SMALL_TRAIN]) == 0
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "vocabulary.txt").write_bytes(
        (tmp_path / "data" / "vocabulary.txt").read_bytes())
    rc = cli.main(["eval", "--ckpt", str(ckpt), "--data", str(empty),
                   "--report", str(tmp_path / "r.json")])
    assert rc == 2


def test_eval_missing_checkpoint_is_io_error(tmp_path):
    data = synth(tmp_path / "data")
    rc = cli.main(["eval", "--ckpt", str(tmp_path / "nope.ckpt"),
                   "--data", str(data), "--report", str(tmp_path / "r.json")])
    assert rc == 3


# ---- gradcheck ----

GC_DIMS = "D=8,d=5,e=4,V=9,a=3"


def test_gradcheck_single_combo_passes(tmp_path, capsys):
    rc = cli.main(["gradcheck", "--dims", GC_DIMS, "--variant", "3",
                   "--fusion", "late", "--seed", "0"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    assert "variant 3 late" in out


def test_gradcheck_corrupt_negative_control(capsys):
    rc = cli.main(["gradcheck", "--dims", GC_DIMS, "--variant", "1",
                   "--fusion", "early", "--corrupt", "1.0", "--seed", "0"])
    assert rc == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_oversize_dims_refused(capsys):
    rc = cli.main(["gradcheck", "--dims", "D=128,d=128,e=64,V=64"])
    assert rc == 2
    assert "parameters" in capsys.readouterr().err


def test_gradcheck_bad_dims_string():
    assert cli.main(["gradcheck", "--dims", "D=8,q=5"]) == 2
    assert cli.main(["gradcheck", "--dims", "D=8,d=5,e=4"]) == 2


def test_gradcheck_report_artifacts(tmp_path):
    out = tmp_path / "gc"
    rc = cli.main(["gradcheck", "--dims", GC_DIMS, "--variant", "2",
                   "--fusion", "late", "--seed", "0", "--out", str(out)])
    assert rc == 0
    assert (out / "gradcheck.json").is_file()
    assert (out / "gradcheck.png").is_file()
    data = json.loads((out / "gradcheck.json").read_text())
    assert all(v <= 1e-4 for v in data.values())


# ---- manifest plumbing ----

def test_config_hash_stable_under_key_order():
    a = cli.config_hash({"alpha": 1, "beta": [1, 2]})
    b = cli.config_hash({"beta": [1, 2], "alpha": 1})
    assert a == b
    assert a != cli.config_hash({"alpha": 2, "beta": [1, 2]})


def test_manifest_contents(tmp_path):
    out = synth(tmp_path / "data", scenes=2, seed=4)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 4
    assert manifest["config_hash"] == cli.config_hash(manifest["config"])
    for name in manifest["artifacts"]:
        assert (out / name).is_file()
    assert manifest["started_at"] <= manifest["finished_at"]
