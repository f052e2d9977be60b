import dataclasses

import numpy as np
import pytest

from orformer import autodiff as ad
from orformer import checkpoint as ckpt_io
from orformer.checkpoint import CheckpointError
from orformer.generator import Generator, encode
from orformer.synth import Dataset, make_dataset
from orformer.train import (METRICS_HEADER, EvalSet, TrainConfig, TrainingAborted, build_generator,
                            decrease_fraction, evaluate, heatmap_l2, make_eval_set, metrics_csv, model_from,
                            smoothed, stage1_epoch0_loss, stage2_fixed_loss, train_stage1, train_stage2)

from oracles import nearest_brute

SMALL = dict(d=16, N=32, L=1, n_heads=2, batch=8, epochs=2, epochs_stage2=1, n_eval=8)


def empty_dataset():
    return Dataset(np.zeros((0, 64, 64, 3)), np.zeros((0, 27, 2)), np.zeros((0, 64, 64, 8)))


@pytest.fixture(scope="module")
def data():
    return make_dataset(16, 5)


@pytest.fixture(scope="module")
def cfg():
    return TrainConfig(**SMALL)


@pytest.fixture(scope="module")
def stage1(data, cfg):
    return train_stage1(data, cfg)


# --------------------------------------------------------------------------
# config


def test_config_parse_and_round_trip():
    text = "# desk config\nm = 4\nn = 4\nd = 32   # width\nlr = 3e-4\nscale_attn = false\nmode = +cross\n"
    cfg = TrainConfig.parse(text)
    assert (cfg.m, cfg.d, cfg.lr, cfg.scale_attn, cfg.mode) == (4, 32, 3e-4, False, "cross")
    assert TrainConfig.parse(cfg.format()) == cfg


def test_config_defaults_are_the_desk_scale_ones():
    cfg = TrainConfig()
    assert (cfg.h, cfg.m, cfg.d, cfg.N, cfg.L, cfg.batch, cfg.epochs) == (64, 8, 64, 256, 3, 32, 30)
    assert (cfg.beta, cfg.lambda_latent, cfg.lambda_img) == (0.25, 100.0, 50.0)
    assert (cfg.restart_period, cfg.restart_mult) == (5, 2)


@pytest.mark.parametrize("text, match", [
    ("m = 7", "divisible"),
    ("n_heads = 3", "divisible"),
    ("lr = -1", "positive"),
    ("beta = 0", "positive"),
    ("foo = 1", "unknown"),
    ("m: 4", "key = value"),
    ("d = abc", "cannot read"),
    ("mode = sideways", "mode"),
    ("diag_mode = weird", "diag"),
])
def test_config_validation(text, match):
    with pytest.raises(ValueError, match=match):
        TrainConfig.parse(text)


# --------------------------------------------------------------------------
# loss curves


def test_smoothed_is_a_trailing_mean():
    hist = [100.0, 8, 6, 7, 3, 2, 1, 4]
    s = smoothed(hist, 3)
    want = [np.mean(hist[1:][max(0, i - 2):i + 1]) for i in range(7)]
    np.testing.assert_allclose(s, want)
    steps = np.diff(want) < 0
    assert decrease_fraction(hist, 3) == pytest.approx(steps.mean())


# --------------------------------------------------------------------------
# stage 1


def test_epoch0_loss_with_zero_decoder(data, cfg):
    gen = build_generator(cfg)
    for t in gen.dec.tensors().values():
        t.data = np.zeros_like(t.data)
    got = stage1_epoch0_loss(gen, data, cfg)
    with ad.no_grad():
        z = encode(data.images, gen.enc, cfg.geometry).data.astype(np.float64)
    codes = gen.book.codes.data.astype(np.float64)
    idx = nearest_brute(z, codes).reshape(z.shape[:2])
    latent0 = (1 + cfg.beta) * np.mean((z - codes[idx]) ** 2)
    want = np.mean(data.heatmaps.astype(np.float64) ** 2) + cfg.lambda_latent * latent0
    assert got == pytest.approx(want, rel=1e-5)


def test_stage1_history_and_tag(stage1, cfg):
    assert len(stage1.history) == cfg.epochs + 1
    assert stage1.checkpoint.stage == "stage1"
    assert stage1.history[-1] < stage1.history[0]


def test_stage1_is_deterministic(stage1, data, cfg):
    again = train_stage1(data, cfg)
    assert ckpt_io.to_bytes(again.checkpoint) == ckpt_io.to_bytes(stage1.checkpoint)
    other = train_stage1(data, dataclasses.replace(cfg, seed=1))
    assert ckpt_io.to_bytes(other.checkpoint) != ckpt_io.to_bytes(stage1.checkpoint)


def test_empty_dataset_rejected(cfg):
    with pytest.raises(ValueError, match="empty"):
        train_stage1(empty_dataset(), cfg)


def test_non_finite_loss_aborts_with_last_good(data, cfg, monkeypatch):
    one_epoch = train_stage1(data, dataclasses.replace(cfg, epochs=1))
    calls = {"n": 0}
    real = Generator.loss

    def poisoned(self, *a, **kw):
        calls["n"] += 1
        loss = real(self, *a, **kw)
        # 1 epoch-0 pass (2 batches) + 2 batches of epoch 1 are clean; epoch 2 blows up
        return ad.scale(loss, np.inf) if calls["n"] > 4 else loss

    monkeypatch.setattr(Generator, "loss", poisoned)
    with pytest.raises(TrainingAborted) as info:
        train_stage1(data, cfg)
    good = info.value.checkpoint
    assert good.tensors.keys() == one_epoch.checkpoint.tensors.keys()
    for k, v in one_epoch.checkpoint.tensors.items():
        assert good.tensors[k].tobytes() == v.tobytes(), k
    assert len(info.value.history) == 2


# --------------------------------------------------------------------------
# stage 2


@pytest.fixture(scope="module")
def stage2(stage1, data, cfg):
    return train_stage2(stage1.checkpoint, data, cfg, "occ_aware")


def test_stage2_keeps_prior_bitwise(stage1, stage2):
    s1, s2 = stage1.checkpoint.tensors, stage2.checkpoint.tensors
    for name in s1:
        if name.startswith(("dec.", "codebook.")):
            assert s2[name].tobytes() == s1[name].tobytes(), name
        if name.startswith("enc."):
            assert s2["prior." + name[4:]].tobytes() == s1[name].tobytes(), name
    # the fine-tuned encoder did move
    assert any(s2[n].tobytes() != s1[n].tobytes() for n in s1 if n.startswith("enc."))


def test_stage2_loss_decreases_after_one_epoch(stage1, stage2, data, cfg):
    init = train_stage2(stage1.checkpoint, data, dataclasses.replace(cfg, epochs_stage2=0), "occ_aware")
    before = stage2_fixed_loss(model_from(init.checkpoint), data)
    after = stage2_fixed_loss(model_from(stage2.checkpoint), data)
    assert before == pytest.approx(stage2.history[0])
    assert after < before


def test_stage2_rejects_wrong_stage(stage2, data, cfg):
    with pytest.raises(CheckpointError):
        train_stage2(stage2.checkpoint, data, cfg)


def test_stage2_reload_reproduces_forward(stage2, data):
    ck = ckpt_io.from_bytes(ckpt_io.to_bytes(stage2.checkpoint))
    a, b = model_from(stage2.checkpoint), model_from(ck)
    with ad.no_grad():
        ha, oa, _ = a.predict(data.images[:4])
        hb, ob, _ = b.predict(data.images[:4])
    assert ha.data.tobytes() == hb.data.tobytes()
    assert oa.alpha.data.tobytes() == ob.alpha.data.tobytes()


def test_vq_only_trains_nothing(stage1, data, cfg):
    res = train_stage2(stage1.checkpoint, data, cfg, "vq_only")
    assert res.history == []
    model = model_from(res.checkpoint)
    assert model.mode == "vq_only" and model.trainable() == {}


# --------------------------------------------------------------------------
# evaluation


def test_heatmap_l2_oracles():
    gt = np.random.default_rng(0).uniform(size=(3, 64, 64, 8))
    assert heatmap_l2(gt, gt) == 0.0
    per_sample = [sum(float(v) ** 2 for v in g.ravel()) / g.size for g in gt]
    assert heatmap_l2(np.zeros_like(gt), gt) == pytest.approx(np.mean(per_sample) * 4096, rel=1e-12)
    with pytest.raises(ValueError):
        heatmap_l2(gt[:2], gt)


def test_unoccluded_vq_only_reproduces_target_codes(stage1, data, cfg):
    model = model_from(train_stage2(stage1.checkpoint, data, cfg, "vq_only").checkpoint)
    clean = EvalSet(data, data.images, np.zeros(data.images.shape[:3], dtype=bool))
    m = evaluate(model, clean)
    assert m.code_acc_i == 1.0
    assert np.isnan(m.code_acc_m) and np.isnan(m.alpha_auc)


def test_evaluate_is_deterministic_and_csv_schema(stage2, data, cfg):
    ev = make_eval_set(data, 3)
    rows = [evaluate(model_from(stage2.checkpoint), ev) for _ in range(2)]
    assert rows[0] == rows[1]
    text = metrics_csv(rows)
    lines = text.splitlines()
    assert lines[0] == ",".join(METRICS_HEADER) == "mode,seed,heatmap_l2,code_acc_i,code_acc_m,alpha_auc"
    assert len(lines) == 3 and lines[1].startswith("occ_aware,0,")
    assert 0 <= rows[0].code_acc_i <= 1 and 0 <= rows[0].alpha_auc <= 1


def test_evaluate_dumps(stage2, data, tmp_path):
    ev = make_eval_set(data.subset(slice(0, 2)), 3)
    evaluate(model_from(stage2.checkpoint), ev, dump_alpha=tmp_path / "a", dump_heatmaps=tmp_path / "h")
    assert len(list((tmp_path / "a").glob("*.pgm"))) == 2
    assert len(list((tmp_path / "h").glob("*.pgm"))) == 2 * 8


def test_evaluate_empty(stage2):
    empty = empty_dataset()
    with pytest.raises(ValueError, match="empty"):
        evaluate(model_from(stage2.checkpoint), EvalSet(empty, empty.images, np.zeros((0, 64, 64), bool)))
