import csv

import numpy as np
import pytest

from ornet import cli
from ornet.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ornet.data import encode_image, synthetic_image
from ornet.model import ModelConfig, ORNet

TINY = """\
# tiny network so the CLI tests stay fast
stem_channels = 3
branch_channels = 3,3,2
feu_counts = 1,1,1
feu_stages = 1
feu_growth = 2
head_channels = 3
attention_reduction = 2
basis_kernels = 2
scale = 2
batch_size = 2
crop = 8
max_epochs = 1
"""


@pytest.fixture
def toy(tmp_path):
    data_dir = tmp_path / "toy"
    assert cli.main(["make-toy", "--out", str(data_dir), "--set", "toy_count=4", "--set", "toy_size=16",
                     "--set", "scale=2"]) == 0
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(TINY + f"manifest = {data_dir / 'manifest.tsv'}\n")
    return cfg


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_parse_config_text():
    assert cli.parse_config_text("a = 1\n# c\n\nb=x y # tail\n") == {"a": "1", "b": "x y"}
    with pytest.raises(cli.ConfigError):
        cli.parse_config_text("just words")


def test_unknown_key_is_usage_error(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path / "o"), "--set", "lerning_rate=1"]) == 2
    assert "lerning_rate" in capsys.readouterr().err


def test_missing_manifest_exit_code(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "m.tsv"
    assert cli.main(["train", "--out", str(tmp_path / "o"), "--manifest", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_value_and_missing_config(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path / "o"), "--set", "max_epochs=two"]) == 2
    assert cli.main(["train", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "none.cfg")]) == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_train_writes_checkpoints_and_is_reproducible(toy, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["train", "--config", str(toy), "--set", "max_epochs=2", "--seed", "1",
                         "--out", str(out)]) == 0
    assert sorted(p.name for p in (a / "checkpoints").iterdir()) == ["epoch_0000.ornt", "epoch_0001.ornt"]
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    effective = (a / "effective.cfg").read_text()
    assert "max_epochs = 2" in effective and "seed = 1" in effective and "branch_channels = 3,3,2" in effective
    written = {p.relative_to(tmp_path).parts[0] for p in tmp_path.rglob("*") if p.is_file()}
    assert written <= {"a", "b", "toy", "toy.cfg"}


def test_effective_config_round_trips(toy, tmp_path):
    out = tmp_path / "o"
    assert cli.main(["make-toy", "--config", str(toy), "--set", "toy_count=1", "--out", str(out)]) == 0
    again = cli.RunConfig.from_pairs(cli.parse_config_text((out / "effective.cfg").read_text()))
    assert again.model == cli.RunConfig.from_pairs(cli.parse_config_text(toy.read_text())).model


def test_eval_zero_checkpoint_matches_bicubic(toy, tmp_path):
    cfg = cli.RunConfig.from_pairs(cli.parse_config_text(toy.read_text())).model
    net = ORNet(cfg)
    zero = {k: np.zeros_like(v) for k, v in net.state_dict().items()}
    ckpt_path = tmp_path / "zero.ornt"
    save_checkpoint(Checkpoint(model_config=cfg.to_dict(), params=zero), ckpt_path)
    out = tmp_path / "ev"
    assert cli.main(["eval", "--config", str(toy), "--checkpoint", str(ckpt_path), "--out", str(out)]) == 0
    table = rows(out / "eval.csv")
    assert list(table[0]) == list(cli.EVAL_COLUMNS)
    assert len(table) == 5 and table[-1]["image"] == "mean"
    for r in table:
        assert r["psnr_model"] == r["psnr_bicubic"] and r["ssim_model"] == r["ssim_bicubic"]


def test_eval_hash_mismatch_is_reported(toy, tmp_path, capsys):
    net = ORNet(ModelConfig(**{**cli.RunConfig.from_pairs(cli.parse_config_text(toy.read_text())).model.to_dict()}))
    ckpt_path = tmp_path / "c.ornt"
    ckpt = Checkpoint(model_config=net.cfg.to_dict(), params=net.state_dict())
    ckpt.config_hash = "f" * 64
    save_checkpoint(ckpt, ckpt_path)
    assert cli.main(["eval", "--config", str(toy), "--checkpoint", str(ckpt_path), "--out", str(tmp_path / "e")]) == 1
    assert "hash" in capsys.readouterr().err


def test_analyze_degradation_bicubic_level_one_dominates(tmp_path):
    img = tmp_path / "scene.png"
    encode_image(synthetic_image(np.random.default_rng(0), 64), img)
    out = tmp_path / "an"
    assert cli.main(["analyze", "--mode", "degradation", "--set", "scale=2", "--out", str(out), str(img)]) == 0
    table = rows(out / "degradation_profiles.csv")
    assert len(table) == 13
    top = max(table, key=lambda r: float(r["energy_share"]))
    assert top["level"] == "1"


def test_feature_bands_untrained_and_decompose_dump(toy, tmp_path):
    out = tmp_path / "fb"
    assert cli.main(["analyze", "--mode", "feature-bands", "--config", str(toy), "--set", "levels=2",
                     "--out", str(out)]) == 0
    table = rows(out / "feature_profiles.csv")
    assert {r["tag"].split(":")[1] for r in table} == {"f_l", "f_m", "f_h"}
    for cmd in (["analyze", "--mode", "decompose-dump"], ["decompose"]):
        dump = tmp_path / cmd[0]
        assert cli.main(cmd + ["--config", str(toy), "--out", str(dump)]) == 0
        pgms = sorted(p.name for p in dump.glob("*.pgm"))
        assert len(pgms) == 12
        assert [p for p in pgms if p.startswith("000_")] == ["000_hr_000_f_h.pgm", "000_hr_000_f_l.pgm",
                                                             "000_hr_000_f_m.pgm"]


def test_ablate_rows(toy, tmp_path):
    out = tmp_path / "ab"
    assert cli.main(["ablate", "--config", str(toy), "--set", "crop=16", "--set", "batch_size=4",
                     "--out", str(out)]) == 0
    table = rows(out / "ablation.csv")
    assert list(table[0]) == list(cli.ABLATION_COLUMNS)
    assert [r["row"] for r in table] == ["bran.=1", "bran.=2", "bran.=3", "bran.=4", "RFA+FEU", "FEU only",
                                         "RFA only", "neither", "SA+FEU"]
    assert [r["branch_count"] for r in table[:4]] == ["1", "2", "3", "4"]
    by = {r["row"]: r for r in table}
    assert by["bran.=3"]["reference_psnr"] == "32.59"
    assert by["bran.=3"]["psnr"] == by["RFA+FEU"]["psnr"]


def test_ablation_sa_row_equals_single_basis_dynamic(toy, tmp_path):
    rc = cli.RunConfig.from_pairs({**cli.parse_config_text(toy.read_text()), "crop": "16", "batch_size": "4"})
    dataset = cli._dataset(rc)
    from ornet.train import evaluate, train_loop
    sa = evaluate(train_loop(rc.train, rc.with_model(rfa_mode="plain_spatial_attention"), dataset).model, dataset)
    m1 = evaluate(train_loop(rc.train, rc.with_model(rfa_mode="dynamic", basis_kernels=1), dataset).model, dataset)
    assert sa == m1
