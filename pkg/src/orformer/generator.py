"""Quantized heatmap generator: patch encoder -> codebook -> patch decoder.

Latent grids are stored token-major as (batch, m*n, d), row-major over the
(i, j) patch grid.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vq import Codebook, CodeSequence, latent_loss, lookup, quantize

INIT_STD = 0.02


class ParamGroup:
    """Dataclass mixin: every ``Tensor`` field is a named parameter under ``prefix``."""

    prefix = ""

    def tensors(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Tensor):
                out[f"{self.prefix}.{f.name}"] = v
        return out

    def freeze(self) -> None:
        for t in self.tensors().values():
            t.requires_grad = False
            t.grad = np.zeros_like(t.data)

    def unfreeze(self) -> None:
        for t in self.tensors().values():
            t.requires_grad = True
            t.grad = np.zeros_like(t.data)


def _param(rng, shape, name, std=INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def _zeros(shape, name) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _ones(shape, name) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(ad.gelu(linear(x, w1, b1)), w2, b2)


def token_mix(x: Tensor, mix: Tensor) -> Tensor:
    """(B, T, d) tokens -> (B, T, d) with output token t = sum_s mix[s, t] * x[:, s]."""
    return ad.transpose2d(ad.matmul(ad.transpose2d(x), mix))


@dataclass
class Geometry:
    h: int = 64
    w: int = 64
    m: int = 8
    n: int = 8
    channels: int = 3

    def __post_init__(self) -> None:
        if self.h % self.m or self.w % self.n:
            raise ValueError(f"image {self.h}x{self.w} not divisible by grid {self.m}x{self.n}")
        if self.h // self.m != self.w // self.n:
            raise ValueError("patches must be square")

    @property
    def patch(self) -> int:
        return self.h // self.m

    @property
    def tokens(self) -> int:
        return self.m * self.n


def patchify(images: np.ndarray, geom: Geometry) -> np.ndarray:
    """(B, h, w, c) -> (B, m*n, p*p*c); patch vectors flattened as (row, col, channel)."""
    b, h, w, c = images.shape
    if (h, w) != (geom.h, geom.w):
        raise ValueError(f"patchify: image {h}x{w} does not match configured {geom.h}x{geom.w}")
    p = geom.patch
    x = images.reshape(b, geom.m, p, geom.n, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, geom.tokens, p * p * c)


def unpatchify(tokens: np.ndarray, geom: Geometry) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    b, t, pc = tokens.shape
    p = geom.patch
    c = pc // (p * p)
    x = tokens.reshape(b, geom.m, geom.n, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, geom.h, geom.w, c)


@dataclass
class EncoderParams(ParamGroup):
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    norm_g: Tensor
    norm_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    prefix = "enc"

    @classmethod
    def init(cls, geom: Geometry, d: int, rng: np.random.Generator) -> "EncoderParams":
        pin = geom.patch * geom.patch * geom.channels
        return cls(
            _param(rng, (pin, d), "enc.patch_w"), _zeros((d,), "enc.patch_b"),
            _param(rng, (geom.tokens, d), "enc.pos"),
            _ones((d,), "enc.norm_g"), _zeros((d,), "enc.norm_b"),
            _param(rng, (d, d), "enc.mlp_w1"), _zeros((d,), "enc.mlp_b1"),
            _param(rng, (d, d), "enc.mlp_w2"), _zeros((d,), "enc.mlp_b2"),
        )


@dataclass
class DecoderParams(ParamGroup):
    pos: Tensor
    mix_ln_g: Tensor
    mix_ln_b: Tensor
    mix: Tensor
    norm_g: Tensor
    norm_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    out_w: Tensor
    out_b: Tensor
    prefix = "dec"

    @classmethod
    def init(cls, geom: Geometry, d: int, n_edges: int, rng: np.random.Generator) -> "DecoderParams":
        pout = geom.patch * geom.patch * n_edges
        return cls(
            _param(rng, (geom.tokens, d), "dec.pos"),
            _ones((d,), "dec.mix_ln_g"), _zeros((d,), "dec.mix_ln_b"),
            _param(rng, (geom.tokens, geom.tokens), "dec.mix"),
            _ones((d,), "dec.norm_g"), _zeros((d,), "dec.norm_b"),
            _param(rng, (d, d), "dec.mlp_w1"), _zeros((d,), "dec.mlp_b1"),
            _param(rng, (d, d), "dec.mlp_w2"), _zeros((d,), "dec.mlp_b2"),
            _param(rng, (d, pout), "dec.out_w"), _zeros((pout,), "dec.out_b"),
        )


def encode(images, enc: EncoderParams, geom: Geometry) -> Tensor:
    """Images (B, h, w, c) -> latent tokens (B, m*n, d)."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim != 4 or arr.shape[-1] != geom.channels:
        raise ValueError(f"encode: expected (B, {geom.h}, {geom.w}, {geom.channels}), got {arr.shape}")
    x = Tensor(patchify(arr, geom))
    emb = ad.add(linear(x, enc.patch_w, enc.patch_b), enc.pos)
    u = ad.layernorm_lastdim(emb, enc.norm_g, enc.norm_b)
    return ad.add(u, mlp(u, enc.mlp_w1, enc.mlp_b1, enc.mlp_w2, enc.mlp_b2))


def decode(z_q: Tensor, dec: DecoderParams, geom: Geometry) -> Tensor:
    """Quantized tokens (B, m*n, d) -> edge heatmaps (B, h, w, N_E)."""
    if z_q.ndim != 3 or z_q.shape[1] != geom.tokens or z_q.shape[2] != dec.mlp_w1.shape[0]:
        raise ad.ShapeError(
            f"decode: expected (B, {geom.tokens}, {dec.mlp_w1.shape[0]}), got {z_q.shape}")
    # codes describe single patches while heatmaps are distance fields over the whole face,
    # so tokens get their position and then exchange information across the grid
    v = ad.add(z_q, dec.pos)
    v = ad.add(v, token_mix(ad.layernorm_lastdim(v, dec.mix_ln_g, dec.mix_ln_b), dec.mix))
    u = ad.add(v, mlp(ad.layernorm_lastdim(v, dec.norm_g, dec.norm_b),
                      dec.mlp_w1, dec.mlp_b1, dec.mlp_w2, dec.mlp_b2))
    y = linear(u, dec.out_w, dec.out_b)
    p = geom.patch
    b = y.shape[0]
    n_edges = y.shape[2] // (p * p)
    return ad.rearrange(
        y,
        lambda a: unpatchify(a, geom),
        lambda g: patchify(g, dataclasses.replace(geom, channels=n_edges)).reshape(b, geom.tokens, -1),
        op="unpatchify",
    )


def image_loss(pred: Tensor, gt) -> Tensor:
    gt = gt if isinstance(gt, Tensor) else Tensor(gt)
    if pred.shape != gt.shape:
        raise ad.ShapeError(f"image_loss: shapes {pred.shape} and {gt.shape}")
    return ad.mean_all(ad.square(ad.sub(pred, gt)))


def stage1_loss(pred: Tensor, gt, z: Tensor, z_q: Tensor, beta: float = 0.25,
                lambda_latent: float = 100.0) -> Tensor:
    """Heatmap MSE + lambda_latent * VQ latent loss."""
    return ad.add(image_loss(pred, gt), ad.scale(latent_loss(z, z_q, beta), lambda_latent))


class Generator:
    """Encoder, codebook and decoder trained together in stage 1."""

    def __init__(self, enc: EncoderParams, dec: DecoderParams, book: Codebook, geom: Geometry):
        self.enc, self.dec, self.book, self.geom = enc, dec, book, geom

    @classmethod
    def init(cls, geom: Geometry, d: int, n_codes: int, n_edges: int, seed: int) -> "Generator":
        rng = np.random.default_rng(seed)
        enc = EncoderParams.init(geom, d, rng)
        dec = DecoderParams.init(geom, d, n_edges, rng)
        book = Codebook.init(n_codes, d, rng)
        return cls(enc, dec, book, geom)

    def tensors(self) -> dict:
        return {**self.enc.tensors(), **self.dec.tensors(), **self.book.tensors()}

    def forward(self, images):
        """Returns (heatmap, z, codes-with-grad, indices)."""
        z = encode(images, self.enc, self.geom)
        z_st, s = quantize(z, self.book)
        heat = decode(z_st, self.dec, self.geom)
        return heat, z, lookup(s, self.book), s

    def loss(self, images, gt, beta: float = 0.25, lambda_latent: float = 100.0) -> Tensor:
        heat, z, z_codes, _ = self.forward(images)
        return stage1_loss(heat, gt, z, z_codes, beta, lambda_latent)

    def target_codes(self, images) -> CodeSequence:
        with ad.no_grad():
            z = encode(images, self.enc, self.geom)
            _, s = quantize(z, self.book)
        return s
