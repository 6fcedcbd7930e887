import json

import numpy as np
import pytest

from mammoseg import checkpoint as ck
from mammoseg.cli import SUBCOMMANDS, run_command
from mammoseg.config import RunConfig, config_from_dict, load_config
from mammoseg.dataset import read_dataset
from mammoseg.errors import ConfigurationError
from mammoseg.imaging import read_mask

TINY = {
    "seed": 4,
    "phantom": {"size": 64, "counts": [4, 4, 4, 4]},
    "preprocess": {"size": 32},
    "seg": {"input_size": 32, "base_filters": 2, "batch_size": 4, "epochs": 1},
    "shape": {"epochs": 1, "folds": 2, "batch_size": 8},
}


def test_defaults_are_published_values():
    cfg = RunConfig()
    assert (cfg.seg.lambda_dice, cfg.seg.lr, cfg.seg.beta1, cfg.seg.batch_size, cfg.seg.epochs) == (150, 2e-4, 0.5, 8, 150)
    assert (cfg.shape.lr, cfg.shape.momentum, cfg.shape.batch_size, cfg.shape.epochs, cfg.shape.folds) == (1e-3, 0.9, 16, 50, 5)
    assert config_from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize("doc,fragment", [
    ({"sed": 1}, "unknown top-level"),
    ({"seg": {"lamda_dice": 1}}, "unknown key"),
    ({"seg": {"lr": -1}}, "below"),
    ({"seg": {"dropout": 1.0}}, "above"),
    ({"seg": {"batch_size": 2.5}}, "integer"),
    ({"seg": {"reconstruction_loss": "l2"}}, "one of"),
    ({"seg": {"input_size": 96}}, "power of two"),
    ({"shape": {"input_size": 32}}, "1x1"),
    ({"phantom": {"counts": [1, 2, 3]}}, "four"),
    ({"phantom": {"noise": 0.5, "contrast": 0.4}}, "below phantom.contrast"),
    ({"preprocess": {"frame": "wide"}}, "one of"),
    ({"seed": True}, "booleans"),
    ({"seg": []}, "object"),
])
def test_config_rejections(doc, fragment):
    with pytest.raises(ConfigurationError, match=fragment):
        config_from_dict(doc)


def test_training_identity_ignores_epochs():
    a = config_from_dict({"seg": {"epochs": 3}})
    b = config_from_dict({"seg": {"epochs": 9}})
    c = config_from_dict({"seg": {"lr": 1e-3}})
    assert ck.config_hash(a.training_identity("seg")) == ck.config_hash(b.training_identity("seg"))
    assert ck.config_hash(a.training_identity("seg")) != ck.config_hash(c.training_identity("seg"))


def test_load_config_file_and_seed_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3}))
    assert load_config(str(p)).seed == 3
    assert load_config(str(p), seed=8).seed == 8
    p.write_text("{not json")
    with pytest.raises(ConfigurationError, match="invalid JSON"):
        load_config(str(p))
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config(str(tmp_path / "missing.json"))


def test_usage_and_validation_exit_codes(tmp_path, capsys):
    assert run_command(["no-such-command"]) == 1
    assert run_command(["phantom-gen", "--bogus"]) == 1
    assert run_command([]) == 1
    assert run_command(["phantom-gen"]) == 1  # --out missing
    bad = tmp_path / "bad.json"
    bad.write_text('{"seg": {"lr": 0}}')
    assert run_command(["--config", str(bad), "phantom-gen", "--out", str(tmp_path)]) == 1
    assert run_command(["infer-shape", "--shape-ckpt", str(tmp_path / "none.mgck"),
                        "--in", str(tmp_path / "x.pgm")]) == 1
    garbage = tmp_path / "g.mgck"
    garbage.write_bytes(b"MGCK\x07")
    assert run_command(["infer-shape", "--shape-ckpt", str(garbage), "--in", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "error:" in err and "usage:" in err
    for name in SUBCOMMANDS:
        with pytest.raises(SystemExit) as info:
            run_command([name, "--help"])
        assert info.value.code == 0


def test_print_config(capsys):
    assert run_command(["--seed", "11", "--print-config"]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 11


def test_gradcheck_failure_exits_2(monkeypatch, capsys):
    from mammoseg.autodiff import gradcheck
    from mammoseg import seggan, shapecnn

    monkeypatch.setattr(gradcheck, "run_layer_suites",
                        lambda: [gradcheck.GradcheckResult("conv2d", 1.0, 1e-4)])
    monkeypatch.setattr(seggan, "composite_gradcheck", lambda s: 0.0)
    monkeypatch.setattr(shapecnn, "classifier_gradcheck", lambda s: 0.0)
    assert run_command(["gradcheck"]) == 2
    assert "FAIL conv2d" in capsys.readouterr().out


def test_end_to_end_cli(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", str(cfg)]
    raw, pre, seg, shape = (tmp_path / d for d in ("raw", "pre", "seg", "shape"))
    assert run_command(["phantom-gen", *c, "--out", str(raw)]) == 0
    assert len(read_dataset(raw).names) == 16
    assert run_command(["preprocess", *c, "--in", str(raw), "--out", str(pre)]) == 0
    ds = read_dataset(pre)
    assert ds.images[0].shape == (32, 32) and len(ds.masks) == 16

    assert run_command(["train-seg", *c, "--in", str(pre), "--out", str(seg)]) == 0
    assert (seg / "seg.mgck").exists() and (seg / "loss.csv").exists() and (seg / "loss.svg").exists()
    first = (seg / "seg.mgck").read_bytes()
    # resume to a longer schedule: epochs is not part of the checkpoint identity
    longer = dict(TINY, seg=dict(TINY["seg"], epochs=2))
    cfg2 = tmp_path / "cfg2.json"
    cfg2.write_text(json.dumps(longer))
    assert run_command(["train-seg", "--config", str(cfg2), "--in", str(pre), "--out", str(seg),
                        "--seg-ckpt", str(seg / "seg.mgck")]) == 0
    assert ck.load_checkpoint(seg / "seg.mgck")[1]["epoch"] == 2 and (seg / "seg.mgck").read_bytes() != first
    # a different seed changes the identity, so resuming is refused
    assert run_command(["train-seg", *c, "--seed", "99", "--in", str(pre), "--out", str(tmp_path / "x"),
                        "--seg-ckpt", str(seg / "seg.mgck")]) == 2

    assert run_command(["infer-seg", *c, "--seg-ckpt", str(seg / "seg.mgck"), "--in", str(pre),
                        "--out", str(seg)]) == 0
    assert read_mask(seg / "masks" / ds.names[0]).shape == (32, 32)
    assert run_command(["eval-seg", *c, "--seg-ckpt", str(seg / "seg.mgck"), "--in", str(pre),
                        "--out", str(seg / "eval")]) == 0
    assert (seg / "eval" / "per_sample.csv").exists() and (seg / "eval" / "boxplot.svg").exists()

    assert run_command(["train-shape", *c, "--in", str(raw), "--out", str(shape)]) == 0
    for name in ("shape.mgck", "shape_fold0.mgck", "shape_fold1.mgck", "confusion.csv", "roc.svg"):
        assert (shape / name).exists(), name
    assert run_command(["infer-shape", *c, "--shape-ckpt", str(shape / "shape.mgck"), "--in", str(raw),
                        "--out", str(shape / "pred")]) == 0
    assert (shape / "pred" / "predictions.csv").exists()
    assert run_command(["eval-shape", *c, "--shape-ckpt", str(shape / "shape.mgck"), "--in", str(raw),
                        "--out", str(shape / "eval")]) == 0
    capsys.readouterr()

    roi = raw / "images" / ds.names[0]
    assert run_command(["pipeline", *c, "--seg-ckpt", str(seg / "seg.mgck"), "--shape-ckpt",
                        str(shape / "shape.mgck"), "--in", str(roi), "--out", str(tmp_path / "p")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("shape: ")
    mask = read_mask(tmp_path / "p" / f"{roi.stem}_mask.pgm")
    assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0, 1}
    # the same seed gives the same answer
    assert run_command(["pipeline", *c, "--seg-ckpt", str(seg / "seg.mgck"), "--shape-ckpt",
                        str(shape / "shape.mgck"), "--in", str(roi), "--out", str(tmp_path / "p")]) == 0
    assert capsys.readouterr().out == out


def test_parallel_folds_match_sequential(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", str(cfg)]
    assert run_command(["phantom-gen", *c, "--out", str(tmp_path / "raw")]) == 0
    monkeypatch.setenv("MAMMOSEG_THREADS", "bogus")
    assert run_command(["train-shape", *c, "--in", str(tmp_path / "raw"), "--out", str(tmp_path / "x")]) == 1
    outputs = []
    for threads in ("0", "2"):
        monkeypatch.setenv("MAMMOSEG_THREADS", threads)
        out = tmp_path / f"t{threads}"
        assert run_command(["train-shape", *c, "--in", str(tmp_path / "raw"), "--out", str(out)]) == 0
        outputs.append([(out / f"shape_fold{f}.mgck").read_bytes() for f in range(2)])
    assert outputs[0] == outputs[1]
