"""ORFormer: patch self-attention plus messenger cross-attention with occlusion detection.

Token tensors are (B, T, d) with T = m*n. Occlusion maps are (B, T, 1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_VALUE, Tensor
from .generator import ParamGroup, _ones, _param, _zeros, image_loss, linear, mlp
from .vq import Codebook, CodeSequence, lookup

ABLATION_MODES = ("vq_only", "self_attn_only", "cross", "occ_head", "occ_aware")
_MODE_ALIASES = {"+cross": "cross", "+occ_head": "occ_head", "+occ_aware": "occ_aware",
                 "full": "occ_aware", "vq": "vq_only", "self_attn": "self_attn_only"}

LOG_SUPPRESS_EPS = 1e-6
# recovery weight when messengers exist but no occlusion head does: without an occlusion
# estimate the patch's own prediction is kept, and messengers only shape training
UNINFORMED_ALPHA = 0.0


def canonical_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; choose from {ABLATION_MODES}")
    return mode


@dataclass
class ORFormerConfig:
    d: int = 64
    n_codes: int = 256
    tokens: int = 64
    n_layers: int = 3
    n_heads: int = 4
    scale_attn: bool = True
    diag_mode: str = "mask"  # "mask" | "literal"
    mask_mode: str = "literal"  # "literal" | "log_suppress"
    mode: str = "occ_aware"

    def __post_init__(self) -> None:
        self.mode = canonical_mode(self.mode)
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.diag_mode not in ("mask", "literal"):
            raise ValueError(f"diag_mode must be 'mask' or 'literal', got {self.diag_mode!r}")
        if self.mask_mode not in ("literal", "log_suppress"):
            raise ValueError(f"mask_mode must be 'literal' or 'log_suppress', got {self.mask_mode!r}")

    @property
    def use_messengers(self) -> bool:
        return self.mode in ("cross", "occ_head", "occ_aware")

    @property
    def use_occ_head(self) -> bool:
        return self.mode in ("occ_head", "occ_aware")

    @property
    def occ_aware(self) -> bool:
        return self.mode == "occ_aware"

    @property
    def attn_scale(self) -> float:
        return 1.0 / math.sqrt(self.d // self.n_heads) if self.scale_attn else 1.0


@dataclass
class LayerParams(ParamGroup):
    ln_x_g: Tensor
    ln_x_b: Tensor
    wq_x: Tensor
    wk_x: Tensor
    wv_x: Tensor
    ffn_x_ln_g: Tensor
    ffn_x_ln_b: Tensor
    ffn_x_w1: Tensor
    ffn_x_b1: Tensor
    ffn_x_w2: Tensor
    ffn_x_b2: Tensor
    ln_m_g: Tensor
    ln_m_b: Tensor
    wq_m: Tensor
    ffn_m_ln_g: Tensor
    ffn_m_ln_b: Tensor
    ffn_m_w1: Tensor
    ffn_m_b1: Tensor
    ffn_m_w2: Tensor
    ffn_m_b2: Tensor
    occ_w: Tensor
    occ_b: Tensor
    prefix: str = "orf.layer1"

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, prefix: str) -> "LayerParams":
        def p(shape, n):
            return _param(rng, shape, f"{prefix}.{n}")

        def z(shape, n):
            return _zeros(shape, f"{prefix}.{n}")

        def o(shape, n):
            return _ones(shape, f"{prefix}.{n}")

        return cls(
            o((d,), "ln_x_g"), z((d,), "ln_x_b"),
            p((d, d), "wq_x"), p((d, d), "wk_x"), p((d, d), "wv_x"),
            o((d,), "ffn_x_ln_g"), z((d,), "ffn_x_ln_b"),
            p((d, 4 * d), "ffn_x_w1"), z((4 * d,), "ffn_x_b1"),
            p((4 * d, d), "ffn_x_w2"), z((d,), "ffn_x_b2"),
            o((d,), "ln_m_g"), z((d,), "ln_m_b"),
            p((d, d), "wq_m"),
            o((d,), "ffn_m_ln_g"), z((d,), "ffn_m_ln_b"),
            p((d, 4 * d), "ffn_m_w1"), z((4 * d,), "ffn_m_b1"),
            p((4 * d, d), "ffn_m_w2"), z((d,), "ffn_m_b2"),
            z((d, 1), "occ_w"), z((1,), "occ_b"),
            prefix=prefix,
        )


@dataclass
class SharedParams(ParamGroup):
    msg_init: Tensor
    pos_x: Tensor
    pos_m: Tensor
    code_w: Tensor
    code_b: Tensor
    prefix = "orf"

    def tensors(self) -> dict:
        return {
            "orf.msg_init": self.msg_init,
            "orf.pos_x": self.pos_x,
            "orf.pos_m": self.pos_m,
            "orf.code_head.w": self.code_w,
            "orf.code_head.b": self.code_b,
        }


@dataclass
class ORFormerParams:
    layers: list
    shared: SharedParams
    cfg: ORFormerConfig

    @classmethod
    def init(cls, cfg: ORFormerConfig, seed: int) -> "ORFormerParams":
        rng = np.random.default_rng(seed)
        d, t = cfg.d, cfg.tokens
        layers = [LayerParams.init(d, rng, f"orf.layer{l + 1}") for l in range(cfg.n_layers)]
        shared = SharedParams(
            _param(rng, (t, d), "orf.msg_init"),
            _param(rng, (t, d), "orf.pos_x"),
            _param(rng, (t, d), "orf.pos_m"),
            _param(rng, (d, cfg.n_codes), "orf.code_head.w"),
            _zeros((cfg.n_codes,), "orf.code_head.b"),
        )
        return cls(layers, shared, cfg)

    def tensors(self) -> dict:
        out = {}
        for lp in self.layers:
            out.update(lp.tensors())
        out.update(self.shared.tensors())
        return out

    def trainable(self) -> dict:
        """Tensors that receive gradient under the configured ablation mode."""
        skip = set()
        if not self.cfg.use_messengers:
            skip |= {"ln_m_g", "ln_m_b", "wq_m", "ffn_m_ln_g", "ffn_m_ln_b",
                     "ffn_m_w1", "ffn_m_b1", "ffn_m_w2", "ffn_m_b2"}
        if not self.cfg.use_occ_head:
            skip |= {"occ_w", "occ_b"}
        out = {}
        for name, t in self.tensors().items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in skip or (not self.cfg.use_messengers and name in ("orf.msg_init", "orf.pos_m")):
                continue
            out[name] = t
        return out


@dataclass
class ORFormerOutput:
    s_i: CodeSequence
    s_m: CodeSequence | None
    alpha: Tensor | None
    logits_i: Tensor
    logits_m: Tensor | None
    x_final: Tensor
    m_final: Tensor | None
    alphas: list = field(default_factory=list)


# --------------------------------------------------------------------------
# building blocks


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.permute(ad.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.permute(x, (0, 2, 1, 3)), (b, t, h * dh))


def _ffn_block(u: Tensor, g, b, w1, b1, w2, b2) -> Tensor:
    return ad.add(u, mlp(ad.layernorm_lastdim(u, g, b), w1, b1, w2, b2))


def _check_tokens(op: str, *xs: Tensor) -> None:
    shape = xs[0].shape
    if len(shape) != 3:
        raise ad.ShapeError(f"{op}: expected (B, T, d) tokens, got {shape}")
    for x in xs[1:]:
        if x.shape != shape:
            raise ad.ShapeError(f"{op}: token shapes {shape} and {x.shape}")


def self_attention_layer(x: Tensor, lp: LayerParams, cfg: ORFormerConfig):
    """Returns (x_next, keys, values); keys/values are head-split (B, H, T, dh) for reuse."""
    _check_tokens("self_attention_layer", x)
    hx = ad.layernorm_lastdim(x, lp.ln_x_g, lp.ln_x_b)
    q = _split_heads(ad.matmul(hx, lp.wq_x), cfg.n_heads)
    k = _split_heads(ad.matmul(hx, lp.wk_x), cfg.n_heads)
    v = _split_heads(ad.matmul(hx, lp.wv_x), cfg.n_heads)
    logits = ad.scale(ad.matmul(q, ad.transpose2d(k)), cfg.attn_scale)
    attn = _merge_heads(ad.matmul(ad.softmax_lastdim(logits), v))
    y = ad.add(attn, x)
    out = _ffn_block(y, lp.ffn_x_ln_g, lp.ffn_x_ln_b, lp.ffn_x_w1, lp.ffn_x_b1,
                     lp.ffn_x_w2, lp.ffn_x_b2)
    return out, k, v


def cross_attention_logits(q_m: Tensor, k_x: Tensor, alpha_prev: Tensor | None,
                           cfg: ORFormerConfig) -> Tensor:
    """Messenger-to-patch logits (B, H, T, T) with occlusion suppression and diagonal exclusion."""
    logits = ad.scale(ad.matmul(q_m, ad.transpose2d(k_x)), cfg.attn_scale)
    if alpha_prev is not None:
        a = alpha_prev.data
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("messenger_cross_attention: alpha outside [0, 1]")
        b, t, _ = alpha_prev.shape
        cols = ad.reshape(alpha_prev, (b, 1, 1, t))
        if cfg.mask_mode == "literal":
            logits = ad.mul(logits, ad.sub(1.0, cols))
        else:
            logits = ad.add(logits, ad.log(ad.add(ad.sub(1.0, cols), LOG_SUPPRESS_EPS)))
    t = logits.shape[-1]
    eye = np.eye(t, dtype=bool)
    if cfg.diag_mode == "mask":
        return ad.masked_fill(logits, eye, MASK_VALUE)
    return ad.masked_fill(logits, eye, 0.0)


def messenger_cross_attention(m_tok: Tensor, k_x: Tensor, v_x: Tensor,
                              alpha_prev: Tensor | None, lp: LayerParams,
                              cfg: ORFormerConfig) -> Tensor:
    """Messengers attend to every patch but their own; no residual from ``m_tok``."""
    _check_tokens("messenger_cross_attention", m_tok)
    if k_x.shape[2] != m_tok.shape[1]:
        raise ad.ShapeError(f"messenger_cross_attention: {m_tok.shape[1]} messengers vs {k_x.shape[2]} patches")
    hm = ad.layernorm_lastdim(m_tok, lp.ln_m_g, lp.ln_m_b)
    q = _split_heads(ad.matmul(hm, lp.wq_m), cfg.n_heads)
    weights = ad.softmax_lastdim(cross_attention_logits(q, k_x, alpha_prev, cfg))
    agg = _merge_heads(ad.matmul(weights, v_x))
    return _ffn_block(agg, lp.ffn_m_ln_g, lp.ffn_m_ln_b, lp.ffn_m_w1, lp.ffn_m_b1,
                      lp.ffn_m_w2, lp.ffn_m_b2)


def occlusion_head(x_emb: Tensor, m_emb: Tensor, lp: LayerParams) -> Tensor:
    """alpha_k = sigmoid(w . (x_k - m_k)^2 + b), shape (B, T, 1)."""
    _check_tokens("occlusion_head", x_emb, m_emb)
    dist = ad.square(ad.sub(x_emb, m_emb))
    return ad.sigmoid(linear(dist, lp.occ_w, lp.occ_b))


def _argmax_codes(logits: Tensor) -> CodeSequence:
    return CodeSequence(ad.pin_constant(np.argmax(logits.data, axis=-1)))


def forward(p: Tensor, params: ORFormerParams) -> ORFormerOutput:
    """Run all layers on encoder patches ``p`` (B, T, d)."""
    cfg = params.cfg
    sh = params.shared
    _check_tokens("forward", p)
    if p.shape[1:] != (cfg.tokens, cfg.d):
        raise ad.ShapeError(f"forward: expected (B, {cfg.tokens}, {cfg.d}), got {p.shape}")
    b = p.shape[0]
    x = ad.add(p, sh.pos_x)
    m = None
    if cfg.use_messengers:
        m = ad.add(ad.mul(Tensor(np.ones((b, 1, 1))), sh.msg_init), sh.pos_m)
    alpha = None
    alphas = []
    for lp in params.layers:
        x_next, k, v = self_attention_layer(x, lp, cfg)
        if cfg.use_messengers:
            gate = alpha if cfg.occ_aware else None
            m = messenger_cross_attention(m, k, v, gate, lp, cfg)
            if cfg.use_occ_head:
                alpha = occlusion_head(x_next, m, lp)
                alphas.append(alpha)
        x = x_next
    logits_i = linear(x, sh.code_w, sh.code_b)
    logits_m = linear(m, sh.code_w, sh.code_b) if m is not None else None
    return ORFormerOutput(
        s_i=_argmax_codes(logits_i),
        s_m=_argmax_codes(logits_m) if logits_m is not None else None,
        alpha=alpha,
        logits_i=logits_i,
        logits_m=logits_m,
        x_final=x,
        m_final=m,
        alphas=alphas,
    )


def recover(z_i: Tensor, z_m: Tensor, alpha) -> Tensor:
    """(1 - alpha) * z_i + alpha * z_m, alpha broadcast over the feature dim."""
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
    if z_i.shape != z_m.shape:
        raise ad.ShapeError(f"recover: shapes {z_i.shape} and {z_m.shape}")
    if alpha.shape != z_i.shape[:-1] + (1,):
        raise ad.ShapeError(f"recover: alpha shape {alpha.shape} vs features {z_i.shape}")
    return ad.add(ad.mul(ad.sub(1.0, alpha), z_i), ad.mul(alpha, z_m))


def recovered_latent(out: ORFormerOutput, book: Codebook, cfg: ORFormerConfig) -> Tensor:
    """Z_rec for the configured ablation mode."""
    z_i = lookup(out.s_i, book)
    if not cfg.use_messengers:
        return z_i
    z_m = lookup(out.s_m, book)
    if cfg.use_occ_head:
        return recover(z_i, z_m, out.alpha)
    return recover(z_i, z_m, np.full(z_i.shape[:-1] + (1,), UNINFORMED_ALPHA))


def stage2_loss(out: ORFormerOutput, s_gt: CodeSequence, h_rec: Tensor, h_gt,
                lambda_img: float = 50.0) -> Tensor:
    """CE(S_I) + CE(S_M) + lambda_img * heatmap MSE; the S_M term is absent without messengers."""
    target = s_gt.indices
    loss = ad.cross_entropy_logits(out.logits_i, target)
    if out.logits_m is not None:
        loss = ad.add(loss, ad.cross_entropy_logits(out.logits_m, target))
    return ad.add(loss, ad.scale(image_loss(h_rec, h_gt), lambda_img))
