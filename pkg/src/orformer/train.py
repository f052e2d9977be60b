"""Two-stage training, evaluation metrics and the text config format."""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .autodiff import NonFiniteError, Tensor
from .checkpoint import Checkpoint
from .generator import DecoderParams, EncoderParams, Generator, Geometry, decode, encode
from .heatmaps import write_pgm
from .model import ORFormerConfig, ORFormerParams, canonical_mode, forward, recovered_latent, stage2_loss
from .optim import Adam, cosine_restart_multiplier
from .synth import Dataset, make_dataset, occlude_batch, occlusion_roc
from .vq import Codebook, CodeSequence, quantize

METRICS_HEADER = ("mode", "seed", "heatmap_l2", "code_acc_i", "code_acc_m", "alpha_auc")
# heatmap_l2 is a per-sample pixel mean rescaled to a 64x64 sum
L2_SCALE = 4096.0


class TrainingAborted(RuntimeError):
    """Non-finite loss; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: Checkpoint | None, history: list):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


@dataclass
class TrainConfig:
    m: int = 8
    n: int = 8
    d: int = 64
    N: int = 256
    N_E: int = 8
    L: int = 3
    n_heads: int = 4
    h: int = 64
    w: int = 64
    beta: float = 0.25
    lambda_latent: float = 100.0
    lambda_img: float = 50.0
    lr: float = 5e-4
    batch: int = 32
    epochs: int = 30
    seed: int = 0
    diag_mode: str = "mask"
    mask_mode: str = "literal"
    restart_period: int = 5
    restart_mult: int = 2
    # stage 2 and data
    lr_stage2: float = 1e-2
    epochs_stage2: int = 30
    mode: str = "occ_aware"
    scale_attn: bool = True
    n_train: int = 2000
    n_train_stage2: int = 2000
    n_eval: int = 256
    data_seed: int = 0
    eval_seed: int = 1
    occ_area_min: float = 0.10
    occ_area_max: float = 0.40

    def __post_init__(self) -> None:
        self.mode = canonical_mode(self.mode)
        if self.h % self.m or self.w % self.n:
            raise ValueError(f"h={self.h}, w={self.w} not divisible by m={self.m}, n={self.n}")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in ("seed", "data_seed", "eval_seed", "occ_area_min", "epochs_stage2"):
                if isinstance(v, (int, float)) and v < 0:
                    raise ValueError(f"{f.name} must be non-negative")
                continue
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if not 0 <= self.occ_area_min <= self.occ_area_max <= 1:
            raise ValueError("occlusion area range must be ordered inside [0, 1]")
        # ORFormerConfig validates the attention modes
        self.orformer()

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.h, self.w, self.m, self.n, 3)

    @property
    def occ_area(self) -> tuple:
        return (self.occ_area_min, self.occ_area_max)

    def orformer(self, mode: str | None = None) -> ORFormerConfig:
        return ORFormerConfig(self.d, self.N, self.m * self.n, self.L, self.n_heads, self.scale_attn,
                              self.diag_mode, self.mask_mode, mode or self.mode)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config key {unknown[0]!r}")
        return cls(**values)

    @classmethod
    def parse(cls, text: str) -> "TrainConfig":
        """``key = value`` lines; ``#`` starts a comment."""
        hints = typing.get_type_hints(cls)
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (s.strip() for s in line.partition("="))
            if not sep or not key:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            if key not in hints:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _coerce(hints[key], val, key)
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.parse(Path(path).read_text())

    def format(self) -> str:
        return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n"
                       for k, v in self.to_dict().items())


def _coerce(kind, text: str, key: str):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return low in ("true", "1")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot read {text!r} as {kind.__name__}") from None
    return text


# --------------------------------------------------------------------------
# model assembly from checkpoints


def build_generator(cfg: TrainConfig, seed: int | None = None) -> Generator:
    return Generator.init(cfg.geometry, cfg.d, cfg.N, cfg.N_E, cfg.seed if seed is None else seed)


def generator_from(ck: Checkpoint, cfg: TrainConfig, enc_prefix: str = "enc") -> Generator:
    g = build_generator(cfg)
    arrays = dict(ck.tensors)
    if enc_prefix != "enc":
        arrays.update({"enc." + k[len(enc_prefix) + 1:]: v for k, v in ck.select(enc_prefix + ".").items()})
    ckpt_io.assign(g.tensors(), arrays)
    return g


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _finite(loss: Tensor, stage: str, epoch: int) -> float:
    v = loss.item()
    if not math.isfinite(v):
        raise NonFiniteError(f"{stage} loss became non-finite at epoch {epoch}")
    return v


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list  # history[0] is the loss at initialization, history[e] the mean over epoch e


def smoothed(history, window: int = 5) -> np.ndarray:
    """Trailing moving average over the trained epochs (``history[1:]``)."""
    h = np.asarray(history[1:], dtype=np.float64)
    if len(h) == 0:
        return h
    c = np.concatenate([[0.0], np.cumsum(h)])
    idx = np.arange(1, len(h) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def decrease_fraction(history, window: int = 5) -> float:
    """Fraction of epoch-to-epoch steps where the smoothed loss went down."""
    s = smoothed(history, window)
    if len(s) < 2:
        return 1.0
    return float(np.mean(np.diff(s) < 0))


# --------------------------------------------------------------------------
# stage 1


def stage1_epoch0_loss(gen: Generator, data: Dataset, cfg: TrainConfig) -> float:
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(data), cfg.batch):
            sl = slice(i, i + cfg.batch)
            loss = gen.loss(data.images[sl], data.heatmaps[sl], cfg.beta, cfg.lambda_latent)
            total += loss.item() * len(data.images[sl])
    return total / len(data)


def train_stage1(data: Dataset, cfg: TrainConfig, log=None) -> TrainResult:
    """Fit encoder, codebook and decoder on clean images."""
    if len(data) == 0:
        raise ValueError("train_stage1: empty dataset")
    gen = build_generator(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(gen.tensors(), cfg.lr)
    history = [stage1_epoch0_loss(gen, data, cfg)]
    good = _stage1_ckpt(gen, cfg, rng)
    if log:
        log(f"stage1 epoch 0 loss {history[0]:.6f}")
    for epoch in range(1, cfg.epochs + 1):
        lr_mult = cosine_restart_multiplier(epoch - 1, cfg.restart_period, cfg.restart_mult)
        total = 0.0
        try:
            for idx in _batches(len(data), cfg.batch, rng):
                loss = gen.loss(data.images[idx], data.heatmaps[idx], cfg.beta, cfg.lambda_latent)
                total += _finite(loss, "stage1", epoch) * len(idx)
                ad.backward(loss)
                opt.step(lr_mult)
            _check_params(gen.tensors(), "stage1", epoch)
        except NonFiniteError as exc:
            raise TrainingAborted(str(exc), good, history) from exc
        history.append(total / len(data))
        good = _stage1_ckpt(gen, cfg, rng)
        if log:
            log(f"stage1 epoch {epoch} loss {history[-1]:.6f}")
    return TrainResult(good, history)


def _check_params(tensors: dict, stage: str, epoch: int) -> None:
    for name, t in tensors.items():
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{stage}: parameter {name} non-finite at epoch {epoch}")


def _stage1_ckpt(gen: Generator, cfg: TrainConfig, rng) -> Checkpoint:
    return Checkpoint("stage1", {k: t.data for k, t in gen.tensors().items()},
                      cfg.to_dict(), _rng_state(rng))


# --------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2Model:
    """Frozen prior (stage-1 encoder, codebook, decoder) plus the trained encoder and ORFormer."""

    prior: EncoderParams
    enc: EncoderParams
    dec: DecoderParams
    book: Codebook
    orf: ORFormerParams | None
    cfg: TrainConfig

    @property
    def mode(self) -> str:
        return self.orf.cfg.mode if self.orf is not None else "vq_only"

    def tensors(self) -> dict:
        out = {"prior." + k[len("enc."):]: t for k, t in self.prior.tensors().items()}
        out.update(self.enc.tensors())
        out.update(self.dec.tensors())
        out.update(self.book.tensors())
        if self.orf is not None:
            out.update(self.orf.tensors())
        return out

    def frozen(self) -> dict:
        return {k: t for k, t in self.tensors().items()
                if k.startswith(("prior.", "dec.", "codebook."))}

    def trainable(self) -> dict:
        if self.orf is None:
            return {}
        return {**self.enc.tensors(), **self.orf.trainable()}

    def target_codes(self, clean) -> CodeSequence:
        with ad.no_grad():
            _, s = quantize(encode(clean, self.prior, self.cfg.geometry), self.book)
        return s

    def predict(self, images):
        """Returns (heatmap, ORFormer output or None, S_I)."""
        geom = self.cfg.geometry
        if self.orf is None:
            z_st, s = quantize(encode(images, self.enc, geom), self.book)
            return decode(z_st, self.dec, geom), None, s
        out = forward(encode(images, self.enc, geom), self.orf)
        return decode(recovered_latent(out, self.book, self.orf.cfg), self.dec, geom), out, out.s_i


def stage2_model(stage1: Checkpoint, cfg: TrainConfig, mode: str | None = None) -> Stage2Model:
    stage1.require_stage("stage1")
    mode = canonical_mode(mode or cfg.mode)
    g1 = generator_from(stage1, cfg)
    g2 = generator_from(stage1, cfg)
    for part in (g1.enc, g1.dec):
        part.freeze()
    g1.book.freeze()
    orf = None
    if mode != "vq_only":
        orf = ORFormerParams.init(cfg.orformer(mode), cfg.seed + 1)
    else:
        g2.enc.freeze()
    return Stage2Model(g1.enc, g2.enc, g1.dec, g1.book, orf, cfg)


def model_from(ck: Checkpoint, cfg: TrainConfig | None = None) -> Stage2Model:
    ck.require_stage("stage2")
    cfg = cfg or TrainConfig.from_dict(ck.config)
    mode = ck.config.get("mode", cfg.mode)
    stub = Checkpoint("stage1", {k: v for k, v in ck.tensors.items()
                                 if k.startswith(("enc.", "dec.", "codebook."))}, ck.config)
    model = stage2_model(stub, cfg, mode)
    ckpt_io.assign(model.tensors(), ck.tensors)
    return model


def _stage2_ckpt(model: Stage2Model, rng) -> Checkpoint:
    config = dict(model.cfg.to_dict(), mode=model.mode)
    return Checkpoint("stage2", {k: t.data for k, t in model.tensors().items()}, config, _rng_state(rng))


def train_stage2(stage1: Checkpoint, data: Dataset, cfg: TrainConfig, mode: str | None = None,
                 log=None) -> TrainResult:
    """Fine-tune the encoder and train ORFormer on occluded images against clean-image codes."""
    if len(data) == 0:
        raise ValueError("train_stage2: empty dataset")
    model = stage2_model(stage1, cfg, mode)
    rng = np.random.default_rng([cfg.seed, 2])
    if model.orf is None:
        return TrainResult(_stage2_ckpt(model, rng), [])
    snapshot = {k: t.data.copy() for k, t in model.frozen().items()}
    targets = _targets(model, data)
    opt = Adam(model.trainable(), cfg.lr_stage2)

    def step_loss(idx, occ_images):
        h_rec, out, _ = model.predict(occ_images)
        return stage2_loss(out, CodeSequence(targets[idx]), h_rec, data.heatmaps[idx], cfg.lambda_img)

    history = [stage2_fixed_loss(model, data, targets)]
    good = _stage2_ckpt(model, rng)
    if log:
        log(f"stage2[{model.mode}] epoch 0 loss {history[0]:.6f}")
    for epoch in range(1, cfg.epochs_stage2 + 1):
        lr_mult = cosine_restart_multiplier(epoch - 1, cfg.restart_period, cfg.restart_mult)
        total = 0.0
        try:
            for idx in _batches(len(data), cfg.batch, rng):
                occ, _ = occlude_batch(data.images[idx], rng, cfg.occ_area)
                loss = step_loss(idx, occ)
                total += _finite(loss, "stage2", epoch) * len(idx)
                ad.backward(loss)
                opt.step(lr_mult)
            _check_params(model.trainable(), "stage2", epoch)
        except NonFiniteError as exc:
            raise TrainingAborted(str(exc), good, history) from exc
        assert_frozen(model, snapshot)
        history.append(total / len(data))
        good = _stage2_ckpt(model, rng)
        if log:
            log(f"stage2[{model.mode}] epoch {epoch} loss {history[-1]:.6f}")
    return TrainResult(good, history)


def _targets(model: Stage2Model, data: Dataset) -> np.ndarray:
    return np.concatenate([model.target_codes(data.images[i:i + 256]).indices
                           for i in range(0, len(data), 256)])


def stage2_fixed_loss(model: Stage2Model, data: Dataset, targets: np.ndarray | None = None) -> float:
    """Stage-2 loss over ``data`` with one fixed occluder draw (seeded by ``cfg.seed``)."""
    cfg = model.cfg
    if targets is None:
        targets = _targets(model, data)
    rng = np.random.default_rng([cfg.seed, 3])
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(data), cfg.batch):
            idx = np.arange(i, min(i + cfg.batch, len(data)))
            occ, _ = occlude_batch(data.images[idx], rng, cfg.occ_area)
            h_rec, out, _ = model.predict(occ)
            loss = stage2_loss(out, CodeSequence(targets[idx]), h_rec, data.heatmaps[idx], cfg.lambda_img)
            total += loss.item() * len(idx)
    return total / len(data)


def assert_frozen(model: Stage2Model, snapshot: dict) -> None:
    for name, t in model.frozen().items():
        if t.data.tobytes() != snapshot[name].tobytes():
            raise AssertionError(f"frozen tensor {name} changed during stage 2")


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalSet:
    """Held-out clean data with a fixed occluder per image."""

    data: Dataset
    occluded: np.ndarray
    masks: np.ndarray


def make_eval_set(data: Dataset, seed: int, area=(0.10, 0.40), p: float = 1.0) -> EvalSet:
    occ, masks = occlude_batch(data.images, np.random.default_rng([seed, 4]), area, p)
    return EvalSet(data, occ, masks)


def heldout_set(cfg: TrainConfig) -> EvalSet:
    """The evaluation split named by ``cfg``: disjoint from training data, every image occluded."""
    return make_eval_set(make_dataset(cfg.n_eval, cfg.eval_seed), cfg.eval_seed, cfg.occ_area)


def training_set(cfg: TrainConfig, n: int | None = None) -> Dataset:
    return make_dataset(cfg.n_train if n is None else n, cfg.data_seed)


@dataclass
class Metrics:
    mode: str
    seed: int
    heatmap_l2: float
    code_acc_i: float
    code_acc_m: float
    alpha_auc: float

    def row(self) -> str:
        vals = [self.mode, str(self.seed)] + [_fmt(getattr(self, k)) for k in METRICS_HEADER[2:]]
        return ",".join(vals)


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else repr(float(v))


def heatmap_l2(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean over samples of the per-sample pixel MSE, times 4096."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"heatmap_l2: shapes {pred.shape} and {gt.shape}")
    per = ((pred - gt) ** 2).reshape(len(pred), -1).mean(axis=1)
    return float(per.mean() * L2_SCALE)


def evaluate(model: Stage2Model, ev: EvalSet, batch: int = 64, dump_alpha: str | Path | None = None,
             dump_heatmaps: str | Path | None = None) -> Metrics:
    n = len(ev.data)
    if n == 0:
        raise ValueError("evaluate: empty dataset")
    geom = model.cfg.geometry
    preds, s_i, s_m, alphas = [], [], [], []
    with ad.no_grad():
        target = np.concatenate([model.target_codes(ev.data.images[i:i + batch]).indices
                                 for i in range(0, n, batch)])
        for i in range(0, n, batch):
            h, out, s = model.predict(ev.occluded[i:i + batch])
            preds.append(h.data)
            s_i.append(s.indices)
            if out is not None and out.s_m is not None:
                s_m.append(out.s_m.indices)
            if out is not None and out.alpha is not None:
                alphas.append(out.alpha.data.reshape(-1, geom.m, geom.n))
    pred = np.concatenate(preds)
    acc_i = float(np.mean(np.concatenate(s_i) == target))
    acc_m = float(np.mean(np.concatenate(s_m) == target)) if s_m else float("nan")
    auc = float("nan")
    if alphas:
        alpha = np.concatenate(alphas)
        auc = occlusion_roc(alpha, ev.masks, geom.patch)
        if dump_alpha:
            _dump_maps(dump_alpha, "alpha", alpha)
    if dump_heatmaps:
        _dump_maps(dump_heatmaps, "hrec", np.moveaxis(pred, -1, 1))
    return Metrics(model.mode, model.cfg.seed, heatmap_l2(pred, ev.data.heatmaps), acc_i, acc_m, auc)


def _dump_maps(directory, stem: str, maps: np.ndarray) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, item in enumerate(maps):
        if item.ndim == 2:
            write_pgm(directory / f"{stem}_{k:04d}.pgm", np.clip(item, 0, 1))
        else:
            for j, ch in enumerate(item):
                write_pgm(directory / f"{stem}_{k:04d}_edge{j:02d}.pgm", np.clip(ch, 0, 1))


def metrics_csv(rows) -> str:
    return ",".join(METRICS_HEADER) + "\n" + "".join(r.row() + "\n" for r in rows)


# --------------------------------------------------------------------------
# gradient check on a tiny end-to-end model

TINY = dict(m=2, n=2, h=8, w=8, d=8, N=7, L=2, N_E=2, n_heads=2, batch=2)


def gradcheck_tiny(seed: int = 0, h: float = 3e-5, tol: float = 1e-3) -> dict:
    """Check both training losses on a 2x2-patch, d=8, N=7, L=2, N_E=2 model.

    Returns ``{"stage1": report, "stage2": report}``.
    """
    cfg = TrainConfig(**TINY, seed=seed, mode="occ_aware")
    rng = np.random.default_rng([seed, 5])
    clean = rng.uniform(size=(2, cfg.h, cfg.w, 3))
    occluded, _ = occlude_batch(clean, rng, (0.2, 0.4))
    gt = rng.uniform(size=(2, cfg.h, cfg.w, cfg.N_E))

    gen = build_generator(cfg)
    rep1 = ad.gradcheck(lambda: gen.loss(clean, gt, cfg.beta, cfg.lambda_latent), gen.tensors(), h=h, tol=tol)

    stage1 = _stage1_ckpt(gen, cfg, rng)
    model = stage2_model(stage1, cfg)
    # move the occlusion head off its symmetric start so alpha varies per patch
    for lp in model.orf.layers:
        lp.occ_w.data = rng.normal(0, 0.5, size=lp.occ_w.shape).astype(lp.occ_w.data.dtype)
    s_gt = model.target_codes(clean)

    def loss2():
        h_rec, out, _ = model.predict(occluded)
        return stage2_loss(out, s_gt, h_rec, gt, cfg.lambda_img)

    rep2 = ad.gradcheck(loss2, model.trainable(), h=h, tol=tol)
    return {"stage1": rep1, "stage2": rep2}
