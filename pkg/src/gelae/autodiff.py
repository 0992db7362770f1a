"""Small reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient. ``Tape.backward`` replays the records in
reverse and accumulates into ``Tensor.grad``. Matrix ops act on the last
two axes; the model uses one or two leading batch axes (samples, heads).
"""

from __future__ import annotations

import json
import struct
import threading
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        return hadamard(self, other) if isinstance(other, Tensor) else scale(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records (output, inputs, backward rule) in execution order."""

    _local = threading.local()

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._local.stack.pop()

    @staticmethod
    def active() -> "Tape | None":
        stack = getattr(Tape._local, "stack", None)
        return stack[-1] if stack else None

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        """Populate ``.grad`` on every grad-requiring tensor reached from ``loss``.

        ``params`` are reset to zero first, so parameters the loss does not
        touch end with zero gradients rather than stale ones.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        for out, inputs, _ in self.records:
            for t in inputs:
                t.grad = None
            out.grad = None
        # grads first stored by reference; copy-on-second-write keeps rules
        # that hand the same array to several inputs from aliasing
        owned: set[int] = set()
        for p in params:
            p.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, inputs, rule in reversed(self.records):
            if out.grad is None:
                continue
            grads = rule(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = g
                elif id(t) in owned:
                    t.grad += g
                else:
                    t.grad = t.grad + g
                    owned.add(id(t))
        seen: set[int] = set()
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            elif p.grad.shape != p.data.shape or p.grad.dtype != np.float64:
                p.grad = np.asarray(p.grad, dtype=np.float64).reshape(p.data.shape)
            elif id(p) not in owned and (id(p.grad) in seen or p.grad.base is not None):
                # borrowed from a rule; never hand out a view or a shared array
                p.grad = p.grad.copy()
            seen.add(id(p.grad))


def _record(out_data, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    needs = False
    for t in inputs:
        if t.requires_grad:
            needs = True
            break
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape = Tape.active()
        if tape is not None:
            tape.records.append((out, inputs, rule))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` over the last two axes; leading (batch) axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    A, B = a.data, b.data
    flat = B.ndim == 2 and A.ndim > 2
    try:
        # one 2-D product instead of a loop of small batched ones
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(*A.shape[:-1], B.shape[-1]) if flat else A @ B
    except ValueError:
        raise ValueError(f"matmul: batch mismatch {a.shape} x {b.shape}") from None

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ B.T).reshape(A.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        if b.requires_grad:
            if B.ndim == 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _record(out, (a, b), rule)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` for a 2-D ``w`` and 1-D ``b``; leading axes of ``x`` are batch."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 2 or b.shape != (w.shape[1],) or x.shape[-1] != w.shape[0]:
        raise ValueError(f"affine: shape mismatch {x.shape} x {w.shape} + {b.shape}")
    X, W = x.data, w.data
    X2 = X.reshape(-1, X.shape[-1])
    out = X2 @ W
    out += b.data

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ W.T).reshape(X.shape) if x.requires_grad else None
        gw = X2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _record(out.reshape(*X.shape[:-1], W.shape[1]), (x, w, b), rule)


def pick(a: Tensor, index) -> Tensor:
    """``a[i, index[i]]`` for a 2-D ``a``: one entry per row."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise ValueError(f"pick: need a 2-D tensor and one index per row, got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])

    def rule(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _record(a.data[rows, index], (a,), rule)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Entries ``start:stop`` along ``axis``."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def rule(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(a.data[index], (a,), rule)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a 2-D tensor."""
    return narrow(a, 0, start, stop)


def masked_fill(a: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """``a`` where ``keep`` is 1, ``value`` elsewhere; gradient flows only through kept entries."""
    keep = np.asarray(keep, dtype=np.float64)
    try:
        fits = np.broadcast_shapes(keep.shape, a.shape) == a.shape
    except ValueError:
        fits = False
    if not fits:
        raise ValueError(f"masked_fill: mask {keep.shape} does not broadcast to {a.shape}")
    return _record(np.where(keep == 1, a.data, value), (a,), lambda g: (g * keep,))


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    """Sum with numpy broadcasting (bias rows, score outer sums)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "hadamard")
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B if a.requires_grad else None,
                                             g * A if b.requires_grad else None))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def absolute(a: Tensor) -> Tensor:
    """|x| with subgradient 0 at 0."""
    s = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * s,))


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; no gradient flows where the floor binds."""
    x = a.data
    live = x > floor
    safe = np.maximum(x, floor)  # NaN passes through
    with np.errstate(divide="ignore"):
        out = np.log(safe)
        return _record(out, (a,), lambda g: (np.where(live, g / np.where(live, safe, 1.0), 0.0),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    ax = axis % out.ndim
    lead = (slice(None),) * ax
    bounds, start = [], 0
    for t in tensors:
        bounds.append(lead + (slice(start, start + t.shape[ax]),))
        start += t.shape[ax]

    def rule(g):
        return tuple(g[b] for b in bounds)

    return _record(out, tuple(tensors), rule)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis (rows must agree)."""
    tensors = [as_tensor(t) for t in tensors]
    if len({t.shape[:-1] for t in tensors}) != 1:
        raise ValueError(f"concat_cols: row shapes differ {[t.shape for t in tensors]}")
    return concat(tensors, axis=-1)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) != 1:
        raise ValueError(f"stack: shapes differ {[t.shape for t in tensors]}")
    return _record(np.stack([t.data for t in tensors]), tuple(tensors), lambda g: tuple(g))


def elementwise(kind: str, *args, **kwargs) -> Tensor:
    ops = {"add": add, "hadamard": hadamard, "relu": relu, "tanh": tanh,
           "sigmoid": sigmoid, "scale": scale, "concat_cols": lambda *t: concat_cols(t)}
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return ops[kind](*args, **kwargs)


# --- reductions and normalizations -----------------------------------------

def sum_all(a: Tensor) -> Tensor:
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def softmax_rows(s: Tensor) -> Tensor:
    """Softmax over the last axis with row-max subtraction."""
    x = s.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (s,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis (population variance), then ``* gain + bias``."""
    X = x.data
    r = X.shape[-1]
    xhat = X - X.sum(axis=-1, keepdims=True) / r
    inv = 1.0 / np.sqrt(np.einsum("...i,...i->...", xhat, xhat)[..., None] / r + eps)
    xhat *= inv
    G = gain.data
    out = xhat * G
    out += bias.data

    def rule(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, r).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, r).sum(axis=0)
        if x.requires_grad:
            dxhat = g * G
            proj = np.einsum("...i,...i->...", dxhat, xhat)[..., None] / r
            gx = dxhat - dxhat.sum(axis=-1, keepdims=True) / r
            gx -= xhat * proj
            gx *= inv
        return gx, gg, gb

    return _record(out, (x, gain, bias), rule)


# --- checking ---------------------------------------------------------------

def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                   max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar from the current contents of ``params``. The
    relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    ``max_coords`` samples that many coordinates per tensor instead of all.
    """
    with Tape() as tape:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise ValueError("gradient_check: non-finite objective")
        tape.backward(loss, params)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + step
            up = f().item()
            flat[k] = orig - step
            down = f().item()
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("gradient_check: non-finite objective")
            num = (up - down) / (2 * step)
            a = ga.reshape(-1)[k]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


# --- checkpoint format ------------------------------------------------------

CKPT_MAGIC = b"GELAECKPT\n"


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a JSON manifest (name, shape, byte offset) then raw ``<f8`` payloads."""
    entries = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"format": 1, "meta": meta or {}, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    start = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[start:start + 8])
    header = json.loads(raw[start + 8:start + 8 + hlen].decode("utf-8"))
    base = start + 8 + hlen
    out = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=base + e["offset"])
        out[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    return out, header.get("meta", {})
