"""Small dense tensor engine with tape-based reverse-mode differentiation.

Forward values live in numpy arrays (float32 by default). Operations record
themselves on the active :class:`Tape` when any input requires gradients;
:func:`backward` replays the tape in reverse.

Broadcasting is limited to a smaller operand whose shape is a trailing
suffix of the larger one (bias add, scalar weights).
"""

from __future__ import annotations

import contextlib
import math
import threading
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

_local = threading.local()


def _dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (e.g. float64 for gradient checks)."""
    previous = _dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations; use as a context manager."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        if getattr(_local, "tape", None) is not None:
            raise RuntimeError("a tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = None

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, record: _Record) -> None:
        self.records.append(record)
        self._outputs.add(id(record.output))

    def backward(self, loss: Tensor, wrt: Mapping[str, Tensor] | Sequence[Tensor] = ()) -> dict:
        return backward(self, loss, wrt)


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    previous = getattr(_local, "tape", None)
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = previous


def backward(tape: Tape, loss: Tensor, wrt: Mapping[str, Tensor] | Sequence[Tensor] = ()) -> dict:
    """Reverse pass from scalar ``loss``.

    Returns a dict of gradients keyed like ``wrt`` (names for a mapping,
    positions for a sequence). Tensors that did not take part in computing
    the loss get zeros. Each tensor's ``.grad`` is set as well.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if id(loss) not in tape._outputs:
        raise ValueError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    items = wrt.items() if isinstance(wrt, Mapping) else enumerate(wrt)
    result = {}
    for key, t in items:
        g = grads.get(id(t))
        g = np.zeros_like(t.data) if g is None else g.astype(t.data.dtype, copy=False)
        t.grad = g
        result[key] = g
    return result


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    tape = getattr(_local, "tape", None)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._append(_Record(op, inputs, out, bwd))
    return out


def _suffix_compatible(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small) :] == small


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


def _broadcast_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if not (_suffix_compatible(a.shape, b.shape) or _suffix_compatible(b.shape, a.shape)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair("add", a, b)

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair("mul", a, b)

    def bwd(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for (..., m, k) by (k, n) or matching batched (..., k, n)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul: batched right operand needs a batched left operand, got {a.shape}")

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), bwd)


def transpose_last(a: Tensor) -> Tensor:
    return _emit("transpose", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _emit("permute", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / a.data.dtype.type(n), a.shape).copy(),)

    return _emit("mean", a.data.mean(axis=axis), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    return _emit("concat", data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embedding", table.data[ids], (table,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    out = half * x * (1 + t)

    def bwd(g):
        dinner = c * (1 + 3 * k * x * x)
        return (g * (half * (1 + t) + half * x * (1 - t * t) * dinner),)

    return _emit("gelu", out, (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_to(g * xhat, gamma.shape), _reduce_to(g, beta.shape)

    return _emit("layer_norm", out, (x, gamma, beta), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", p, (a,), bwd)


MASK_VALUE = -1e9


def attention_scores(q: Tensor, k: Tensor, causal: bool = False, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product scores ``q k^T / sqrt(d)`` with masked entries set to a large negative value.

    q, k: (B, H, S, dh). ``key_mask`` (B, S) marks valid key positions.
    """
    if q.shape != k.shape:
        raise ShapeError(f"attention_scores: q {q.shape} and k {k.shape} differ")
    s = q.shape[-2]
    c = q.data.dtype.type(1.0 / math.sqrt(q.shape[-1]))
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * c
    masked = np.zeros(scores.shape[-2:], dtype=bool)
    if causal:
        masked = np.triu(np.ones((s, s), dtype=bool), k=1)
    if key_mask is not None:
        masked = masked | ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
    masked = np.broadcast_to(masked, scores.shape)
    scores = np.where(masked, scores.dtype.type(MASK_VALUE), scores)
    keep = (~masked).astype(scores.dtype)

    def bwd(g):
        gs = g * keep * c
        gq = gs @ k.data if q.requires_grad else None
        gk = np.swapaxes(gs, -1, -2) @ q.data if k.requires_grad else None
        return gq, gk

    return _emit("attention_scores", scores, (q, k), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; the identity when ``train`` is False or ``p`` is 0."""
    if not train or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / a.data.dtype.type(1.0 - p)
    return _emit("dropout", a.data * keep, (a,), lambda g: (g * keep,))


def take_rows(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``a[rows, cols]`` for a 3-D tensor, giving (len(rows), D)."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _emit("take_rows", a.data[rows, cols], (a,), bwd)


def put_rows(base: Tensor, values: Tensor, positions: np.ndarray) -> Tensor:
    """Copy of ``base`` (B, S, D) with row ``positions[b]`` of batch ``b`` replaced by ``values[b]``."""
    positions = np.asarray(positions, dtype=np.int64)
    batch = np.arange(base.shape[0])
    if values.shape != (base.shape[0], base.shape[2]):
        raise ShapeError(f"put_rows: values {values.shape} do not fit base {base.shape}")
    out = base.data.copy()
    out[batch, positions] = values.data

    def bwd(g):
        gb = g.copy()
        gb[batch, positions] = 0
        return gb, g[batch, positions]

    return _emit("put_rows", out, (base, values), bwd)


def _padded_gather(h: np.ndarray, index: np.ndarray) -> np.ndarray:
    padded = np.concatenate([h, np.zeros((1, h.shape[1]), dtype=h.dtype)], axis=0)
    return padded[np.where(index < 0, h.shape[0], index)]


def _gather_grad(g_rows: np.ndarray, index: np.ndarray, n: int, like: np.ndarray) -> np.ndarray:
    gh = np.zeros_like(like)
    valid = index >= 0
    target = index[valid]
    src = np.broadcast_to(g_rows[:, None, :], index.shape + (g_rows.shape[-1],))[valid]
    np.add.at(gh, target, src)
    return gh


def gather_sum(h: Tensor, index: np.ndarray) -> Tensor:
    """Row ``i`` of the output is the sum of ``h[index[i, j]]`` over ``j`` with ``index >= 0``.

    Values are sorted per column before summation, so the result is bitwise
    independent of the order of indices within a row.
    """
    index = np.asarray(index, dtype=np.int64)
    gathered = _padded_gather(h.data, index)
    out = np.sort(gathered, axis=1).sum(axis=1)
    return _emit("gather_sum", out, (h,), lambda g: (_gather_grad(g, index, h.shape[0], h.data),))


def gather_mean(h: Tensor, index: np.ndarray) -> Tensor:
    """Like :func:`gather_sum` but divided by the number of valid indices per row."""
    index = np.asarray(index, dtype=np.int64)
    counts = (index >= 0).sum(axis=1, keepdims=True).astype(h.data.dtype)
    if (counts == 0).any():
        raise ShapeError("gather_mean: a row has no valid indices")
    gathered = _padded_gather(h.data, index)
    out = np.sort(gathered, axis=1).sum(axis=1) / counts
    return _emit("gather_mean", out, (h,), lambda g: (_gather_grad(g / counts, index, h.shape[0], h.data),))


def token_nll(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Sum over positions of ``-weights * log softmax(logits)[target]``, accumulated in float64.

    logits (..., V); targets and weights match the leading dims.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if logits.shape[:-1] != targets.shape or targets.shape != weights.shape:
        raise ShapeError(f"token_nll: logits {logits.shape}, targets {targets.shape}, weights {weights.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    loss = float(((lse - picked) * weights).sum())

    def bwd(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return ((p * weights[..., None] * float(g)).astype(logits.data.dtype),)

    return _emit("token_nll", np.asarray(loss, dtype=np.float64), (logits,), bwd)


# ---------------------------------------------------------------------------
# helpers


def stream_key(*parts: str | int) -> list[int]:
    """Entropy words for a named random stream; stable across platforms."""
    words = []
    for p in parts:
        words.append(p if isinstance(p, int) else zlib.crc32(str(p).encode()))
    return words


def rng_for(seed: int, *names: str | int) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream identified by ``seed`` and ``names``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(stream_key(seed, *names))))


def finite_diff_grad(
    f: Callable[[], float], p: Tensor, eps: float = 1e-3, coords: Iterable[tuple[int, ...]] | None = None
) -> np.ndarray:
    """Central-difference gradient of ``f`` with respect to ``p``.

    ``f`` takes no arguments and reads ``p`` by reference. With ``coords``
    only those flat-shape coordinates are perturbed; the rest stay zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grad = np.zeros(p.shape, dtype=np.float64)
    targets = np.ndindex(*p.shape) if coords is None else coords
    for idx in targets:
        orig = p.data[idx].copy()
        p.data[idx] = orig + eps
        hi = float(p.data[idx])
        up = f()
        p.data[idx] = orig - eps
        lo = float(p.data[idx])
        down = f()
        p.data[idx] = orig
        # divide by the step actually stored, which differs from 2*eps in float32
        grad[idx] = (up - down) / (hi - lo)
    return grad
