"""Command-line interface: exit codes, artifacts, and reproducibility."""
import json
import os

import numpy as np
import pytest

from posterkit import cli, glyphs, synth, training
from posterkit.params import load_checkpoint


def _run(*argv):
    return cli.main(list(argv))


def test_no_command_exits_2(capsys):
    assert _run() == 2


def test_unknown_command_exits_2():
    assert _run("frobnicate") == 2


def test_gradcheck_passes(capsys):
    assert _run("gradcheck") == 0
    out = capsys.readouterr().out
    assert "passed" in out


def test_synth_data_writes_manifest(tmp_path):
    out = str(tmp_path / "data")
    assert _run("synth-data", "--out", out, "--count", "3", "--seed", "7") == 0
    man = json.load(open(os.path.join(out, "train", "manifest.json")))
    assert man["count"] == 3
    assert len(man["ids"]) == 3
    assert man["config_hash"]
    assert len(synth.load_split(out, "train")) == 3


def test_synth_data_byte_reproducible(tmp_path):
    import hashlib

    def digest(root):
        h = hashlib.sha256()
        for dp, _, fs in sorted(os.walk(root)):
            for f in sorted(fs):
                h.update(f.encode())
                h.update(open(os.path.join(dp, f), "rb").read())
        return h.hexdigest()

    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert _run("synth-data", "--out", a, "--count", "4", "--seed", "1") == 0
    assert _run("synth-data", "--out", b, "--count", "4", "--seed", "1") == 0
    assert digest(a) == digest(b)


def test_build_glyph_dict(tmp_path):
    out = str(tmp_path / "d" / "glyphs.bin")
    assert _run("build-glyph-dict", "--out", out) == 0
    table = glyphs.load_glyph_table(out)
    assert table.features.shape == (16, glyphs.GLYPH_DIM)
    meta = json.load(open(out + ".json"))
    assert meta["alphabet_size"] == 16
    # wrong feature width is a usage error
    assert _run("build-glyph-dict", "--out", out, "--dim", "999") == 2


def test_train_bad_config_exits_2(tmp_path):
    cfgp = tmp_path / "c.json"
    cfgp.write_text(json.dumps({"stage": "9"}))
    assert _run("train", "--config", str(cfgp)) == 2
    assert _run("train", "--config", str(tmp_path / "missing.json")) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory, request):
    """A tiny stage-1 checkpoint plus a small dataset (patched budgets)."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    _run("synth-data", "--out", data, "--count", "4", "--seed", "0")
    _run("synth-data", "--out", data, "--count", "2", "--seed", "0",
         "--split", "test")
    old = training.WARMUP_STEPS, training.SCENE_PRETRAIN_STEPS
    training.WARMUP_STEPS, training.SCENE_PRETRAIN_STEPS = 1, 1
    request.addfinalizer(
        lambda: setattr(training, "WARMUP_STEPS", old[0]) or
        setattr(training, "SCENE_PRETRAIN_STEPS", old[1]))
    cfg = {"stage": "1", "steps": 2, "batch_size": 2, "t_prime": 3,
           "t1": 2, "data_dir": data, "out_dir": str(root / "run"), "seed": 0}
    cfgp = root / "stage1.json"
    cfgp.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(cfgp)]) == 0
    return root, data, os.path.join(str(root / "run"), "stage1.ckpt")


def test_train_writes_artifacts(trained):
    root, data, ckpt = trained
    assert os.path.exists(ckpt)
    assert os.path.exists(os.path.join(str(root / "run"), "config_used.json"))


def test_generate_deterministic(trained, tmp_path):
    root, data, ckpt = trained
    samples = synth.load_split(data, "test")
    spec = os.path.join(data, "test", "000000.json")
    img = os.path.join(data, "test", "000000.png")
    msk = os.path.join(data, "test", "000000.mask.png")
    o1, o2 = str(tmp_path / "a.png"), str(tmp_path / "b.png")
    for o in (o1, o2):
        rc = _run("generate", "--checkpoint", ckpt, "--spec", spec,
                  "--image", img, "--mask", msk, "--out", o,
                  "--steps", "3", "--seed", "5")
        assert rc == 0
    assert open(o1, "rb").read() == open(o2, "rb").read()
    out = synth.load_image(o1)
    assert out.shape == samples[0].image.shape


def test_generate_missing_inputs_exit_2(trained, tmp_path):
    root, data, ckpt = trained
    spec = os.path.join(data, "test", "000000.json")
    assert _run("generate", "--checkpoint", str(tmp_path / "no.ckpt"),
                "--spec", spec, "--out", str(tmp_path / "o.png")) == 2
    assert _run("generate", "--checkpoint", ckpt,
                "--spec", str(tmp_path / "no.json"),
                "--out", str(tmp_path / "o.png")) == 2


def test_evaluate_identity_is_perfect(trained, tmp_path):
    root, data, ckpt = trained
    rep_path = str(tmp_path / "report.json")
    rc = _run("evaluate", "--data", data, "--report", rep_path, "--identity")
    assert rc == 0
    rep = json.load(open(rep_path))
    assert rep["sen_acc"] == 1.0
    assert rep["ned"] == 1.0


def test_evaluate_generated_runs(trained, tmp_path):
    root, data, ckpt = trained
    rep_path = str(tmp_path / "report.json")
    rc = _run("evaluate", "--data", data, "--report", rep_path,
              "--checkpoint", ckpt, "--steps", "3", "--count", "1")
    assert rc == 0
    rep = json.load(open(rep_path))
    assert 0.0 <= rep["sen_acc"] <= 1.0
    assert rep["n_samples"] == 1


def test_config_hash_stable_and_order_free():
    a = cli.config_hash({"x": 1, "y": [2, 3]})
    b = cli.config_hash({"y": [2, 3], "x": 1})
    assert a == b and len(a) == 12
    assert cli.config_hash({"x": 2}) != a
