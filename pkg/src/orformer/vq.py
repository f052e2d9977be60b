"""Learnable codebook, nearest-code quantization and the VQ latent loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Codebook:
    """N x d code vectors. A frozen codebook never takes gradient."""

    def __init__(self, codes: Tensor, frozen: bool = False):
        if codes.ndim != 2:
            raise ValueError(f"codebook must be 2-D, got shape {codes.shape}")
        if codes.shape[0] < 2:
            raise ValueError("codebook needs at least 2 codes")
        if not np.all(np.isfinite(codes.data)):
            raise ValueError("codebook contains non-finite values")
        self.codes = codes
        self.frozen = False
        if frozen:
            self.freeze()

    @classmethod
    def init(cls, n_codes: int, dim: int, rng: np.random.Generator) -> "Codebook":
        bound = 1.0 / n_codes
        codes = rng.uniform(-bound, bound, size=(n_codes, dim))
        return cls(Tensor(codes, requires_grad=True, name="codebook.codes"))

    @property
    def n_codes(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def freeze(self) -> None:
        self.frozen = True
        self.codes.requires_grad = False
        self.codes.grad = np.zeros_like(self.codes.data)

    def tensors(self) -> dict:
        return {"codebook.codes": self.codes}


@dataclass
class CodeSequence:
    indices: np.ndarray  # (..., m, n) int64

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def validate(self, n_codes: int) -> "CodeSequence":
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n_codes):
            raise IndexError(f"code index out of range [0, {n_codes})")
        return self

    @property
    def shape(self) -> tuple:
        return self.indices.shape


def nearest_codes(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the nearest code for every row of ``z`` (…, d); ties go to the lowest index."""
    flat = z.reshape(-1, z.shape[-1]).astype(np.float64)
    c = codes.astype(np.float64)
    zz = (flat * flat).sum(1)
    cc = (c * c).sum(1)
    d2 = zz[:, None] - 2.0 * flat @ c.T + cc[None, :]
    best = np.argmin(d2, axis=1)
    # the expanded form can misorder near-ties; settle those with exact differences
    slack = 1e-9 * (zz[:, None] + cc[None, :] + 1.0)
    close = d2 <= d2[np.arange(len(best)), best][:, None] + slack
    for r in np.flatnonzero(close.sum(1) > 1):
        cand = np.flatnonzero(close[r])
        exact = ((flat[r] - c[cand]) ** 2).sum(1)
        best[r] = cand[np.argmin(exact)]
    return best.reshape(z.shape[:-1])


def quantize(z: Tensor, book: Codebook) -> tuple[Tensor, CodeSequence]:
    """Replace each latent vector with its nearest code.

    Returns the straight-through quantized tensor (forward value equals the codes,
    gradient copied to ``z``) and the code indices.
    """
    if book.n_codes == 0:
        raise ValueError("quantize: empty codebook")
    if z.shape[-1] != book.dim:
        raise ad.ShapeError(f"quantize: latent dim {z.shape[-1]} != codebook dim {book.dim}")
    idx = ad.pin_constant(nearest_codes(z.data, book.codes.data))
    z_q = ad.straight_through(z, book.codes.data[idx])
    return z_q, CodeSequence(idx)


def lookup(s: CodeSequence, book: Codebook) -> Tensor:
    """Code vectors for every index in ``s``; differentiable in the codes unless frozen."""
    s.validate(book.n_codes)
    if book.frozen:
        return Tensor(book.codes.data[s.indices])
    return ad.gather_rows(book.codes, s.indices)


def latent_loss(z: Tensor, z_q: Tensor, beta: float = 0.25) -> Tensor:
    """mean((sg(z) - z_q)^2) + beta * mean((z - sg(z_q))^2).

    ``z_q`` should carry the codebook gradient (a :func:`lookup` result); the first
    term pulls codes to the encoder output, the second commits the encoder.
    """
    if z.shape != z_q.shape:
        raise ad.ShapeError(f"latent_loss: shapes {z.shape} and {z_q.shape}")
    codebook_term = ad.mean_all(ad.square(ad.sub(ad.stop_gradient(z), z_q)))
    commitment = ad.mean_all(ad.square(ad.sub(z, ad.stop_gradient(z_q))))
    return ad.add(codebook_term, ad.scale(commitment, beta))
