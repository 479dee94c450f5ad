"""Dense 2-D float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every operation executed while it is active on the
current thread. ``Tape.backward(root)`` walks the records in reverse and
returns the gradient of the scalar ``root`` with respect to every leaf
tensor that the backward sweep reaches. Tensors produced while no tape is
active are constants: feeding them into a taped computation contributes no
gradient (this is the stop-gradient used for the frozen teacher branch).

Only 2-D shapes are supported; scalars are 1x1 tensors. The op set is
deliberately small: what a small pre-norm transformer plus its losses need,
nothing more.
"""

from __future__ import annotations

import math
import struct
import threading
from typing import BinaryIO, Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GraphError",
    "record",
    "matmul",
    "add",
    "mul",
    "scale",
    "transpose",
    "concat_rows",
    "slice_rows",
    "gather_rows",
    "row_softmax",
    "layer_norm",
    "gelu",
    "mean_over",
    "max_over",
    "attention",
    "cosine_rows",
    "write_tensor",
    "read_tensor",
]

LAYER_NORM_EPS = 1e-5
COSINE_EPS = 1e-8


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class GraphError(ValueError):
    """The tape was used outside its contract (e.g. non-scalar backward root)."""


class Tensor:
    """Immutable-by-convention 2-D float64 array.

    The public constructor validates shape and finiteness; internal code
    uses :meth:`_wrap` to skip the checks on freshly computed arrays.
    Only tensors flagged ``requires_grad`` receive entries in the gradient
    map returned by backward; everything else is treated as data.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor values must be finite")
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        obj = object.__new__(cls)
        obj.data = arr
        obj.requires_grad = False
        return obj

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() requires a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def copy(self) -> "Tensor":
        out = Tensor._wrap(self.data.copy())
        out.requires_grad = self.requires_grad
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


# A record is (output, inputs, vjp). vjp maps the gradient at the output to
# one gradient (or None) per input, in order.
_Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Execution trace of one forward pass, confined to a single thread."""

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], _Vjp]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise GraphError("a Tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.tape = None

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradient of the scalar ``root`` w.r.t. every leaf it depends on.

        Leaves are tensors that appear as op inputs but were not produced by
        this tape; tensors on detached branches never enter the map.
        """
        if root.data.shape != (1, 1):
            raise GraphError(f"backward root must be a 1x1 scalar, got {root.shape}")
        produced = {id(rec[0]) for rec in self._records}
        if id(root) not in produced:
            raise GraphError("backward root was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
        holders: dict[int, Tensor] = {}
        for out, inputs, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for tensor, gi in zip(inputs, vjp(g)):
                if gi is None:
                    continue
                key = id(tensor)
                if key not in produced and not tensor.requires_grad:
                    continue
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    holders[key] = tensor
        return {holders[k]: g for k, g in grads.items() if k not in produced}


def record(output: Tensor, inputs: Sequence[Tensor], vjp: _Vjp) -> Tensor:
    """Append an op to the active tape, if any.

    This is the extension point for fused ops defined outside this module
    (losses register their analytic gradients through it).
    """
    tape = _active_tape()
    if tape is not None:
        tape._records.append((output, tuple(inputs), vjp))
    return output


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.data @ b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return record(out, (a, b), vjp)


def _broadcast_pair(a: Tensor, b: Tensor, opname: str):
    """Validate equal shape or a (1, m) row against an (n, m) matrix."""
    if a.shape == b.shape:
        return None
    if a.cols == b.cols and b.rows == 1:
        return "b"
    if a.cols == b.cols and a.rows == 1:
        return "a"
    raise ShapeError(f"{opname}: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    reduced = _broadcast_pair(a, b, "add")
    out = Tensor._wrap(a.data + b.data)

    def vjp(g):
        ga = g.sum(axis=0, keepdims=True) if reduced == "a" else g
        gb = g.sum(axis=0, keepdims=True) if reduced == "b" else g
        return ga, gb

    return record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    reduced = _broadcast_pair(a, b, "mul")
    out = Tensor._wrap(a.data * b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g * bd
        gb = g * ad
        if reduced == "a":
            ga = ga.sum(axis=0, keepdims=True)
        if reduced == "b":
            gb = gb.sum(axis=0, keepdims=True)
        return ga, gb

    return record(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._wrap(a.data * c)

    def vjp(g):
        return (g * c,)

    return record(out, (a,), vjp)


def transpose(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.ascontiguousarray(a.data.T))

    def vjp(g):
        return (g.T,)

    return record(out, (a,), vjp)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.cols:
        raise ShapeError(f"concat_rows: {a.shape} vs {b.shape}")
    out = Tensor._wrap(np.concatenate([a.data, b.data], axis=0))
    na = a.rows

    def vjp(g):
        return g[:na], g[na:]

    return record(out, (a, b), vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.rows):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    out = Tensor._wrap(a.data[start:stop].copy())
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape)
        z[start:stop] = g
        return (z,)

    return record(out, (a,), vjp)


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows: indices must be a non-empty 1-D sequence")
    if idx.min() < 0 or idx.max() >= a.rows:
        raise IndexError(f"gather_rows: index out of range for {a.rows} rows")
    out = Tensor._wrap(a.data[idx])
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return record(out, (a,), vjp)


def row_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor._wrap(y)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return record(out, (a,), vjp)


def layer_norm(a: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row normalization to zero mean / unit variance (no affine)."""
    mean = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mean) * inv_std
    out = Tensor._wrap(xhat)

    def vjp(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        return (inv_std * (g - gm - xhat * gx),)

    return record(out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = Tensor._wrap(x * cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return record(out, (a,), vjp)


def mean_over(a: Tensor) -> Tensor:
    """Column-wise mean over all rows, yielding a 1 x cols tensor."""
    n = a.rows
    out = Tensor._wrap(a.data.mean(axis=0, keepdims=True))
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return record(out, (a,), vjp)


def max_over(a: Tensor, segments: Sequence[tuple[int, int]] | None = None) -> Tensor:
    """Column-wise max over row segments.

    ``segments`` is a list of ``(start, stop)`` row ranges, one output row
    per segment; ``None`` means one segment spanning all rows. Ties route
    the gradient to the first maximal row.
    """
    segs = [(0, a.rows)] if segments is None else [(int(s), int(e)) for s, e in segments]
    for s, e in segs:
        if not (0 <= s < e <= a.rows):
            raise ShapeError(f"max_over: segment [{s}:{e}] out of range for {a.shape}")
    m = a.cols
    out_data = np.empty((len(segs), m))
    arg = np.empty((len(segs), m), dtype=np.intp)
    for r, (s, e) in enumerate(segs):
        block = a.data[s:e]
        idx = block.argmax(axis=0)
        arg[r] = idx + s
        out_data[r] = block[idx, np.arange(m)]
    out = Tensor._wrap(out_data)
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape)
        cols = np.tile(np.arange(m), len(segs))
        np.add.at(z, (arg.ravel(), cols), g.ravel())
        return (z,)

    return record(out, (a,), vjp)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over one token sequence.

    q, k, v are (n, d) with d divisible by n_heads; output is (n, d) with
    heads concatenated back in column order.
    """
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"attention: mismatched shapes {q.shape}, {k.shape}, {v.shape}")
    n, d = q.shape
    if d % n_heads != 0:
        raise ShapeError(f"attention: d={d} not divisible by n_heads={n_heads}")
    dh = d // n_heads
    inv = 1.0 / math.sqrt(dh)

    def split(x):
        return np.ascontiguousarray(x.reshape(n, n_heads, dh).transpose(1, 0, 2))

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    s = np.matmul(qh, kh.transpose(0, 2, 1)) * inv
    s -= s.max(axis=2, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=2, keepdims=True)
    oh = np.matmul(p, vh)
    out = Tensor._wrap(np.ascontiguousarray(oh.transpose(1, 0, 2).reshape(n, d)))

    def vjp(g):
        gh = np.ascontiguousarray(g.reshape(n, n_heads, dh).transpose(1, 0, 2))
        dp = np.matmul(gh, vh.transpose(0, 2, 1))
        dvh = np.matmul(p.transpose(0, 2, 1), gh)
        ds = p * (dp - (dp * p).sum(axis=2, keepdims=True))
        dqh = np.matmul(ds, kh) * inv
        dkh = np.matmul(ds.transpose(0, 2, 1), qh) * inv

        def join(x):
            return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(n, d))

        return join(dqh), join(dkh), join(dvh)

    return record(out, (q, k, v), vjp)


def cosine_rows(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity between every row of ``a`` and every row of ``b``.

    Row norms are clamped to ``eps`` so near-zero rows stay finite; the
    clamped branch contributes no norm gradient.
    """
    if a.cols != b.cols:
        raise ShapeError(f"cosine_rows: {a.shape} vs {b.shape}")
    an = np.linalg.norm(a.data, axis=1)
    bn = np.linalg.norm(b.data, axis=1)
    a_live = an > eps
    b_live = bn > eps
    anc = np.maximum(an, eps)
    bnc = np.maximum(bn, eps)
    c = (a.data @ b.data.T) / (anc[:, None] * bnc[None, :])
    out = Tensor._wrap(c)
    ad, bd = a.data, b.data

    def vjp(g):
        w = g / (anc[:, None] * bnc[None, :])
        ga = w @ bd
        ga -= np.where(a_live, (g * c).sum(axis=1) / anc**2, 0.0)[:, None] * ad
        gb = w.T @ ad
        gb -= np.where(b_live, (g * c).sum(axis=0) / bnc**2, 0.0)[:, None] * bd
        return ga, gb

    return record(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# serialization: two little-endian u64 counts, then row-major little-endian f8


def write_tensor(fh: BinaryIO, t: Tensor) -> None:
    fh.write(struct.pack("<QQ", t.rows, t.cols))
    fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    header = fh.read(16)
    if len(header) != 16:
        raise ValueError("truncated tensor header")
    rows, cols = struct.unpack("<QQ", header)
    n = rows * cols * 8
    payload = fh.read(n)
    if len(payload) != n:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
    return Tensor._wrap(arr)
