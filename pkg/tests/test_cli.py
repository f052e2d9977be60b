import numpy as np
import pytest

from orformer import checkpoint as ckpt_io
from orformer.cli import main
from orformer.heatmaps import EdgeMapping, read_annotations, read_pgm, read_raw_f32

TINY_CONFIG = """\
d = 16
N = 32
L = 1
n_heads = 2
batch = 4
epochs = 1
epochs_stage2 = 1
n_train = 8
n_train_stage2 = 8
n_eval = 4
"""


@pytest.fixture()
def config(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CONFIG)
    return str(p)


def test_gen_data_and_heatmaps(tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["gen-data", "--n", "3", "--seed", "2", "--out", str(out)]) == 0
    images = read_raw_f32(out / "images.f32")
    assert images.shape == (3, 64, 64, 3)
    occluded = read_raw_f32(out / "occluded.f32")
    rows = read_annotations(out / "annotations.txt", 27)
    assert [r[0] for r in rows] == ["img_00000", "img_00001", "img_00002"]
    for k, (name, _) in enumerate(rows):
        mask = read_pgm(out / "masks" / f"{name}.pgm") > 0.5
        assert mask.any()
        assert np.array_equal(occluded[k][~mask], images[k][~mask])
    assert EdgeMapping.load(out / "mapping.txt", 27).edges == EdgeMapping.bundled("synthetic").edges

    heat = tmp_path / "heat"
    assert main(["gen-heatmaps", str(out / "annotations.txt"), "--mapping", str(out / "mapping.txt"),
                 "--out", str(heat)]) == 0
    h0 = read_raw_f32(heat / "img_00000.f32")
    assert h0.shape == (64, 64, 8) and h0.max() == 1.0
    assert len(list(heat.glob("img_00001_edge*.pgm"))) == 8


def test_dump_mapping(capsys, tmp_path):
    assert main(["dump-mapping", "300w"]) == 0
    assert capsys.readouterr().out == EdgeMapping.bundled("300w").format()
    assert main(["dump-mapping", "cofw", "--out", str(tmp_path / "c.txt")]) == 0
    assert (tmp_path / "c.txt").read_text() == EdgeMapping.bundled("cofw").format()


def test_validation_errors_exit_1(tmp_path, config, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("m = 7\n")
    assert main(["train-stage1", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert main(["train-stage2", "--config", config, "--out", str(tmp_path / "y")]) == 1
    assert main(["eval", str(tmp_path / "missing.ckpt")]) == 1
    assert main(["gen-heatmaps", "nowhere.txt", "--out", str(tmp_path)]) == 1
    (tmp_path / "junk.ckpt").write_bytes(b"NOPE\n")
    assert main(["eval", str(tmp_path / "junk.ckpt")]) == 1
    with pytest.raises(SystemExit) as info:
        main(["train-stage2", "--mode", "sideways"])
    assert info.value.code == 1
    assert "error" in capsys.readouterr().err


def test_train_eval_pipeline(tmp_path, config, capsys):
    s1, s2 = tmp_path / "s1.ckpt", tmp_path / "s2.ckpt"
    assert main(["train-stage1", "--config", config, "--seed", "3", "--out", str(s1)]) == 0
    assert ckpt_io.load(s1).stage == "stage1"
    assert main(["train-stage2", "--config", config, "--seed", "3", "--stage1", str(s1),
                 "--mode", "occ_aware", "--out", str(s2)]) == 0
    # a stage-2 checkpoint is not a valid stage-1 input
    assert main(["train-stage2", "--config", config, "--stage1", str(s2), "--out", str(tmp_path / "z")]) == 1
    capsys.readouterr()
    csv = tmp_path / "m.csv"
    assert main(["eval", str(s2), "--out", str(csv), "--dump-alpha", str(tmp_path / "alpha"),
                 "--dump-heatmaps", str(tmp_path / "hrec")]) == 0
    lines = csv.read_text().splitlines()
    assert lines[0] == "mode,seed,heatmap_l2,code_acc_i,code_acc_m,alpha_auc"
    assert lines[1].startswith("occ_aware,3,")
    assert capsys.readouterr().out == csv.read_text()
    assert len(list((tmp_path / "alpha").glob("*.pgm"))) == 4
    assert len(list((tmp_path / "hrec").glob("*.pgm"))) == 4 * 8


def test_cli_training_is_deterministic(tmp_path, config):
    for name in ("a", "b"):
        assert main(["train-stage1", "--config", config, "--out", str(tmp_path / f"{name}.ckpt")]) == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_numerical_failure_exit_2(tmp_path, config, monkeypatch):
    from orformer import autodiff as ad
    from orformer.generator import Generator
    real = Generator.loss
    monkeypatch.setattr(Generator, "loss", lambda self, *a, **kw: ad.scale(real(self, *a, **kw), np.inf))
    out = tmp_path / "s1.ckpt"
    assert main(["train-stage1", "--config", config, "--out", str(out)]) == 2
