"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable op appends a node to the calling thread's tape. ``backward``
walks that tape in reverse append order exactly once; a consumed tape cannot be
replayed. Data is float32 by default; matmul and reductions accumulate in
float64. ``float64_mode`` switches op outputs to float64 (used by ``gradcheck``).
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

MASK_VALUE = -1e30
MAX_RANK = 4


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass




@dataclass
class Node:
    op: str
    parents: tuple
    backward: Callable
    tape: "Tape"
    index: int


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    consumed: bool = False


class _State(threading.local):
    def __init__(self) -> None:
        self.tape: Tape = Tape()
        self.grad_enabled = True
        self.dtype = np.float32
        self.pins: _PinBuffer | None = None


_state = _State()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_state.dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# context managers


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    prev = _state.dtype
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


def current_tape() -> Tape:
    return _state.tape


def grad_enabled() -> bool:
    return _state.grad_enabled


class _PinBuffer:
    """Records non-differentiable constants on one pass and replays them on later ones.

    Stop-gradient values, straight-through offsets and argmin/argmax indices are
    constants of the function autodiff differentiates; pinning them lets finite
    differences probe that same function.
    """

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.mode = "record"
        self.cursor = 0

    def take(self, value: np.ndarray) -> np.ndarray:
        if self.mode == "record":
            self.values.append(np.array(value, copy=True))
            return value
        if self.cursor >= len(self.values):
            raise AutodiffError("pinned replay ran past the recorded constants")
        pinned = self.values[self.cursor]
        self.cursor += 1
        if pinned.shape != np.shape(value):
            raise AutodiffError(
                f"pinned constant shape {pinned.shape} != replayed {np.shape(value)}"
            )
        return pinned

    def rewind(self) -> None:
        self.mode = "replay"
        self.cursor = 0


def pin_constant(value: np.ndarray) -> np.ndarray:
    """Route a non-differentiable intermediate through the active pin buffer, if any."""
    if _state.pins is None:
        return value
    return _state.pins.take(value)


@contextlib.contextmanager
def _pinning(buf: _PinBuffer) -> Iterator[_PinBuffer]:
    prev = _state.pins
    _state.pins = buf
    try:
        yield buf
    finally:
        _state.pins = prev


# --------------------------------------------------------------------------
# graph recording


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    data = np.asarray(data, dtype=_state.dtype)
    _check_finite(op, data)
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        tape = _state.tape
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward, tape, len(tape.nodes))
        tape.nodes.append(out._node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    node = loss._node
    if node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise AutodiffError("backward: loss is not on a recorded graph")
    tape = node.tape
    if tape.consumed:
        raise AutodiffError("backward: graph already consumed; run the forward pass again")

    grads: dict[int, np.ndarray] = {node.index: np.ones_like(loss.data)}
    for n in reversed(tape.nodes[: node.index + 1]):
        g = grads.pop(n.index, None)
        if g is None:
            continue
        parent_grads = n.backward(g)
        for p, pg in zip(n.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype).reshape(p.shape)
            if p._node is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                k = p._node.index
                grads[k] = pg if k not in grads else grads[k] + pg

    tape.consumed = True
    tape.nodes = []
    if _state.tape is tape:
        _state.tape = Tape()


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NonFiniteError("log: non-positive input")
    return _result("log", np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data.astype(np.float64)
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    y = 0.5 * xd * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result("gelu", y, (x,), bwd)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} vs {x.shape}") from None
    full = np.broadcast_to(mask, x.shape)
    return _result("masked_fill", np.where(full, value, x.data), (x,),
                   lambda g: (np.where(full, 0.0, g),))


def stop_gradient(x: Tensor) -> Tensor:
    """Value-equal copy detached from the graph."""
    return Tensor(pin_constant(x.data.copy()))


def straight_through(z: Tensor, target: np.ndarray) -> Tensor:
    """Forward value ``target``; gradient copied to ``z`` unchanged."""
    target = np.asarray(target)
    if target.shape != z.shape:
        raise ShapeError(f"straight_through: shapes {z.shape} and {target.shape}")
    offset = pin_constant(target.astype(np.float64) - z.data)
    if _state.pins is not None and _state.pins.mode == "replay":
        value = z.data + offset
    else:
        value = target
    return _result("straight_through", value, (z,), lambda g: (g,))


# --------------------------------------------------------------------------
# linear algebra and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over leading dims; ``b`` may be a shared 2-D matrix."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and b.shape[:-2] != a.shape[:-2]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _result("matmul", np.matmul(ad, bd), (a, b), bwd)


def transpose2d(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose2d: need rank >= 2, got {x.shape}")
    return _result("transpose2d", np.swapaxes(x.data, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _result("permute", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def rearrange(x: Tensor, forward: Callable[[np.ndarray], np.ndarray],
              adjoint: Callable[[np.ndarray], np.ndarray], op: str = "rearrange") -> Tensor:
    """Pure index shuffle given by ``forward``; ``adjoint`` must be its inverse layout map."""
    return _result(op, forward(x.data), (x,), lambda g: (adjoint(g),))


def gather_rows(table: Tensor, indices) -> Tensor:
    """``out[...] = table[indices[...]]``; table is (N, d)."""
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range [0, {table.shape[0]})")
    n, d = table.shape

    def bwd(g):
        gt = np.zeros((n, d), dtype=np.float64)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _result("gather_rows", table.data[idx], (table,), bwd)


def concat_last(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    lead = xs[0].shape[:-1]
    for t in xs[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_last: leading shapes {lead} and {t.shape[:-1]}")
    splits = np.cumsum([t.shape[-1] for t in xs])[:-1]
    return _result("concat_last", np.concatenate([t.data for t in xs], axis=-1), tuple(xs),
                   lambda g: tuple(np.split(g, splits, axis=-1)))


# --------------------------------------------------------------------------
# reductions and normalisations


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("sum_all", np.sum(x.data, dtype=np.float64), (x,),
                   lambda g: (np.broadcast_to(g, shape),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result("mean_all", np.mean(x.data, dtype=np.float64), (x,),
                   lambda g: (np.broadcast_to(g / n, shape),))


def softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(xd.dtype)

    def bwd(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True, dtype=np.float64)),)

    return _result("softmax_lastdim", y, (x,), bwd)


def layernorm_lastdim(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm_lastdim: affine shapes {gamma.shape}, {beta.shape} vs dim {d}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.astype(np.float64)
    out = xhat * gd + beta.data

    def bwd(g):
        g64 = g.astype(np.float64)
        lead = tuple(range(g.ndim - 1))
        dgamma = np.sum(g64 * xhat, axis=lead)
        dbeta = np.sum(g64, axis=lead)
        gx = g64 * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _result("layernorm_lastdim", out, (x, gamma, beta), bwd)


def cross_entropy_logits(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of integer ``target`` under softmax(logits)."""
    t = np.asarray(target)
    if t.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy_logits: target shape {t.shape} vs logits {logits.shape}")
    n_cls = logits.shape[-1]
    if t.size and (t.min() < 0 or t.max() >= n_cls):
        raise IndexError(f"cross_entropy_logits: target index out of range [0, {n_cls})")
    z = logits.data.astype(np.float64).reshape(-1, n_cls)
    tf = t.reshape(-1)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    count = len(tf)
    loss = np.mean(lse - z[np.arange(count), tf])
    shape = logits.shape

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(count), tf] -= 1.0
        return ((g / count) * p.reshape(shape),)

    return _result("cross_entropy_logits", loss, (logits,), bwd)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    max_rel_error: dict
    tol: float
    h: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error.values())

    def failures(self) -> list:
        return [k for k, e in self.max_rel_error.items() if not e < self.tol]

    def __str__(self) -> str:
        lines = [f"gradcheck h={self.h:g} tol={self.tol:g}: {'PASS' if self.passed else 'FAIL'}"]
        for k, e in self.max_rel_error.items():
            lines.append(f"  {k:40s} {e:.3e}")
        return "\n".join(lines)


def gradcheck(model_forward: Callable[[], Tensor], params: Sequence[Tensor] | dict,
              h: float = 1e-4, tol: float = 1e-3, floor: float = 1e-6) -> GradcheckReport:
    """Compare autodiff gradients with central finite differences.

    Runs in float64. Stop-gradient values, straight-through offsets and pinned
    indices are recorded on the analytic pass and held fixed while perturbing, so
    both routes differentiate the same function. The per-element relative error
    is ``|a - n| / max(|a|, |n|, floor)``; the report keeps the max per tensor.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"gradcheck: h must lie in (0, 1e-2], got {h}")
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]

    originals = [p.data for _, p in named]
    saved_grads = [p.grad for _, p in named]
    try:
        with float64_mode():
            for _, p in named:
                p.data = p.data.astype(np.float64)
                p.grad = None
            pins = _PinBuffer()
            with _pinning(pins):
                loss = model_forward()
            base = loss.item()
            with no_grad():
                again = model_forward().item()
            if again != base:
                raise AutodiffError(
                    f"gradcheck: closure is not deterministic ({base!r} vs {again!r})")
            if loss.requires_grad:
                backward(loss)
            else:
                current_tape().nodes.clear()

            def f() -> float:
                pins.rewind()
                with no_grad(), _pinning(pins):
                    return model_forward().item()

            errors = {}
            for name, p in named:
                analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
                flat = p.data.reshape(-1)
                numeric = np.empty(flat.size)
                for i in range(flat.size):
                    keep = flat[i]
                    flat[i] = keep + h
                    fp = f()
                    flat[i] = keep - h
                    fm = f()
                    flat[i] = keep
                    numeric[i] = (fp - fm) / (2.0 * h)
                a = analytic.reshape(-1)
                denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
                errors[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    finally:
        for (_, p), orig, g in zip(named, originals, saved_grads):
            p.data = orig
            p.grad = g
    return GradcheckReport(errors, tol, h)
