import csv

import pytest
import torch

from patchattn import cli
from patchattn import diffcore as dc
from patchattn.config import ExperimentConfig, load_config, parse_overrides

TINY = """
synthetic = true
synth_n_per_class = [4, 4, 4, 4, 4, 4, 4]
synth_image_size = 48
patch_size = 16
n_crops = 9
strategy = "ordered"
aggregator = "attention"
attention_placement = ["end"]
backbone_stages = [[4, 2], [8, 2]]
epochs = 2
batch_size = 7
eval_batch_size = 16
seed = 3
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_and_eval(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(tiny), "--out", str(out), "--deterministic"]) == 0
    rows = read_csv(out / "metrics.csv")
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert all(r["split"] == "val" for r in rows)
    assert {"train_loss", "recall_MEL", "mc_sensitivity"} <= set(rows[0])
    assert (out / "checkpoint.bin").exists() and (out / "config.toml").exists()

    assert cli.main(["eval", str(out / "checkpoint.bin")]) == 0
    assert "mc_sensitivity=" in capsys.readouterr().out
    att = read_csv(out / "eval_test" / "metrics.csv")
    assert att[0]["split"] == "test"
    weights = read_csv(out / "eval_test" / "attention.csv")
    assert len(weights) % 9 == 0 and len(weights) > 0
    assert {w["patch_index"] for w in weights} == {str(p) for p in range(9)}


def test_determinism(tiny, tmp_path):
    # same run directory name so the run_id column matches
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(tiny), "--out", str(tmp_path / name / "run"), "--deterministic"]) == 0
    a, b = tmp_path / "a" / "run", tmp_path / "b" / "run"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()


def test_refuses_nonempty_output(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert cli.main(["train", "--config", str(tiny), "--out", str(out)]) == 1
    assert "--overwrite" in capsys.readouterr().err
    assert (out / "keep.txt").exists()


def test_gru_single_crop_rejected(tiny, tmp_path, capsys):
    code = cli.main(["train", "--config", str(tiny), "--out", str(tmp_path / "r"),
                     "--set", "aggregator=gru", "--set", "strategy=single_crop",
                     "--set", "attention_placement=", "--set", "p_d=0"])
    assert code == 2
    err = capsys.readouterr().err
    assert "aggregator='gru'" in err and "single_crop" in err
    assert not (tmp_path / "r").exists()


def test_eval_hash_mismatch(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(tiny), "--out", str(out), "--set", "epochs=1"])
    code = cli.main(["eval", str(out / "checkpoint.bin"), "--set", "attention_placement=initial,end"])
    assert code == 1
    assert "hash" in capsys.readouterr().err


def test_sweep(tiny, tmp_path):
    out = tmp_path / "sweep"
    code = cli.main(["sweep", "--config", str(tiny), "--out", str(out), "--axis", "k",
                     "--values", "1.5", "0.5", "1.0", "--set", "epochs=1", "--set", "balancing=loss_weighting"])
    assert code == 0
    rows = read_csv(out / "sweep.csv")
    assert [r["value"] for r in rows] == ["0.5", "1.0", "1.5"]
    assert all(float(r["mc_sensitivity_spread"]) == 0.0 for r in rows)
    assert len(list((out / "runs").iterdir())) == 3


def test_sweep_errors(tiny, tmp_path, capsys):
    assert cli.main(["sweep", "--config", str(tiny), "--out", str(tmp_path / "a"), "--axis", "k"]) == 1
    assert cli.main(["sweep", "--config", str(tiny), "--out", str(tmp_path / "b"), "--axis", "colour",
                     "--values", "1"]) == 1
    err = capsys.readouterr().err
    assert "at least one value" in err and "unknown sweep axis" in err


def test_gradcheck_all_pass(capsys):
    assert cli.main(["gradcheck", "--n-probe", "8"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6 and all("PASS" in line for line in lines)


def test_gradcheck_catches_wrong_backward(monkeypatch, capsys):
    class BadRelu(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x.clamp(min=0)

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * (x > 0) * 1.1

    monkeypatch.setattr(dc, "relu", BadRelu.apply)
    assert cli.main(["gradcheck", "--components", "backbone", "--n-probe", "10"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_gen_synth(tmp_path, capsys):
    out = tmp_path / "syn"
    code = cli.main(["gen-synth", "--out", str(out), "--n-per-class", "3", "2", "1",
                     "--image-size", "48", "--crop-size", "16", "--class-names", "A", "B", "C"])
    assert code == 0
    text = capsys.readouterr().out
    assert "A        3" in text and "C        1" in text
    assert len(read_csv(out / "manifest.csv")) == 6
    assert len(read_csv(out / "split.csv")) == 6
    assert len(list((out / "images").glob("*.png"))) == 6


class TestConfig:
    def test_overrides(self):
        o = parse_overrides(["k=1.5", "attention_placement=initial,end", "augment=false", "n_crops=16"])
        cfg = load_config(None, o)
        assert cfg.k == 1.5 and cfg.attention_placement == ("initial", "end")
        assert cfg.augment is False and cfg.n_crops == 16

    def test_unknown_key(self):
        with pytest.raises(Exception, match="nope"):
            load_config(None, parse_overrides(["nope=1"]))

    def test_toml_roundtrip(self, tmp_path):
        cfg = load_config(None, parse_overrides(["balancing=diagnosis_weighting", "k=0.75", "epochs=3"]))
        (tmp_path / "c.toml").write_text(cfg.to_toml())
        assert load_config(tmp_path / "c.toml") == cfg

    def test_defaults_valid(self):
        ExperimentConfig(synthetic=True).validate()
        with pytest.raises(Exception, match="manifest"):
            ExperimentConfig().validate()
