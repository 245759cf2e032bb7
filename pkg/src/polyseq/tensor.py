"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only leading-batch expansion is supported for binary elementwise ops: the
smaller operand's shape must equal the trailing dimensions of the larger one.
Anything else needs an explicit reshape/repeat.

Usage::

    with Tape() as tape:
        loss = mean(mul(x, x))
    backward(tape, loss)
    x.grad
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

_active_tapes: list["Tape"] = []


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, index):
        return getitem(self, index)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications (topological by construction)."""

    nodes: list[Node] = field(default_factory=list)
    visit_count: int = 0

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _record(op: str, inputs: tuple[Tensor, ...], out: Tensor, bwd) -> Tensor:
    if _active_tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tapes[-1].nodes.append(Node(op, inputs, out, bwd))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Returns the leaf gradients keyed by ``id(tensor)``.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    owners: dict[int, Tensor] = {id(loss): loss}
    produced = set()
    for node in reversed(tape.nodes):
        tape.visit_count += 1
        key = id(node.output)
        produced.add(key)
        g = grads.pop(key, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
                owners[k] = t
    leaves = {}
    for k, g in grads.items():
        if k in produced:
            continue
        t = owners[k]
        t.grad = g.copy() if t.grad is None else t.grad + g
        leaves[k] = t.grad
    return leaves


# -- shape helpers ----------------------------------------------------------

def _suffix_expand(op: str, a: Tensor, b: Tensor) -> int:
    """Return how many leading axes the smaller operand is expanded over."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return 0
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return len(sa) - len(sb)
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return -(len(sb) - len(sa))
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_leading(g: np.ndarray, n: int) -> np.ndarray:
    return g.sum(axis=tuple(range(n))) if n else g


# -- primitives -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    n = _suffix_expand("add", a, b)
    out = Tensor(a.values + b.values)

    def bwd(g):
        if n >= 0:
            return g, _reduce_leading(g, n)
        return _reduce_leading(g, -n), g

    return _record("add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    n = _suffix_expand("mul", a, b)
    av, bv = a.values, b.values
    out = Tensor(av * bv)

    def bwd(g):
        ga, gb = g * bv, g * av
        if n > 0:
            gb = _reduce_leading(gb, n)
        elif n < 0:
            ga = _reduce_leading(ga, -n)
        return ga, gb

    return _record("mul", (a, b), out, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.values * c)
    return _record("scale", (a,), out, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    if bv.ndim == 2:
        # fold leading dims so BLAS sees one large product
        a2 = av.reshape(-1, av.shape[-1])
        out = Tensor((a2 @ bv).reshape(av.shape[:-1] + (bv.shape[1],)))

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bv.T).reshape(av.shape), a2.T @ g2
    else:
        out = Tensor(av @ bv)

        def bwd(g):
            return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _record("matmul", (a, b), out, bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = Tensor(a.values.reshape(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return _record("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.values, axes))
    return _record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    try:
        vals = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = Tensor(vals)
    return _record("concat", tensors, out, lambda g: tuple(np.split(g, sizes, axis=axis)))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a: Tensor, index) -> Tensor:
    src = a.shape
    out = Tensor(a.values[index])
    basic = _is_basic_index(index)

    def bwd(g):
        gz = np.zeros(src)
        if basic:
            gz[index] = g
        else:
            np.add.at(gz, index, g)
        return (gz,)

    return _record("slice", (a,), out, bwd)


def repeat(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and tile ``n`` copies along it."""
    vals = np.expand_dims(a.values, axis)
    shape = list(vals.shape)
    shape[axis] = n
    out = Tensor(np.broadcast_to(vals, shape).copy())
    return _record("repeat", (a,), out, lambda g: (g.sum(axis=axis),))


def softmax(a: Tensor) -> Tensor:
    x = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), Tensor(y), bwd)


def _log_softmax_values(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(a: Tensor) -> Tensor:
    y = _log_softmax_values(a.values)

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (a,), Tensor(y), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    x = a.values
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {a.shape} with gain {gain.shape}, bias {bias.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.values + bias.values)

    def bwd(g):
        lead = tuple(range(x.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * gain.values
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _record("layer_norm", (a, gain, bias), out, bwd)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation."""
    x = a.values
    # in-place arithmetic: temporaries dominate the cost at training sizes
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    out = Tensor(y)

    def bwd(g):
        # 0.5 (1 + t) + 0.5 x (1 - t^2) du/dx
        d = x * x
        d *= 3 * 0.044715
        d += 1.0
        d *= _GELU_C
        d *= x
        s = t * t
        np.subtract(1.0, s, out=s)
        d *= s
        d += t
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _record("gelu", (a,), out, bwd)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: indices must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")
    out = Tensor(table.values[ids])

    def bwd(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", (table,), out, bwd)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    src = a.shape
    out = Tensor(a.values.sum(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _record("sum", (a,), out, bwd)


def mean(a: Tensor, axis=None) -> Tensor:
    src = a.shape
    n = a.values.size if axis is None else src[axis]
    out = Tensor(a.values.mean(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.full(src, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), src) / n,)

    return _record("mean", (a,), out, bwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    return _record("exp", (a,), Tensor(y), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.values
    return _record("log", (a,), Tensor(np.log(x)), lambda g: (g / x,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    x = a.values
    keep = x >= lo
    return _record("clamp_min", (a,), Tensor(np.where(keep, x, lo)), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over all positions."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    flat = logits.values.reshape(-1, v)
    t = targets.reshape(-1)
    ls = _log_softmax_values(flat)
    rows = np.arange(t.size)
    n = t.size
    out = Tensor(-ls[rows, t].mean())

    def bwd(g):
        gx = np.exp(ls)
        gx[rows, t] -= 1.0
        return ((gx * (float(g) / n)).reshape(logits.shape),)

    return _record("cross_entropy", (logits,), out, bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamW:
    """Adam with decoupled (multiplicative) weight decay."""

    params: dict[str, Tensor]
    learning_rate: float = 4e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.first_moment.setdefault(name, np.zeros(p.shape))
            self.second_moment.setdefault(name, np.zeros(p.shape))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """Apply one update. Raises NonFiniteGradientError without touching any parameter."""
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in {name}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        lr = self.learning_rate
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            m = self.first_moment[name]
            v = self.second_moment[name]
            if self.weight_decay:
                p.values *= 1.0 - lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.values -= lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


# -- checkpoint file ---------------------------------------------------------
# layout: 8-byte little-endian header length, UTF-8 JSON header, float64 LE payload

_MAGIC = b"PSQCKPT1"


def save_checkpoint(path, params: dict[str, Tensor], optimizer: AdamW | None = None,
                    meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    tables = [("param", {k: v.values for k, v in params.items()})]
    if optimizer is not None:
        tables.append(("adam_m", optimizer.first_moment))
        tables.append(("adam_v", optimizer.second_moment))
    for kind, table in tables:
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f8")
            entries.append({"kind": kind, "name": name, "shape": list(arr.shape),
                            "offset": offset, "count": int(arr.size)})
            blobs.append(arr.tobytes())
            offset += arr.size
    header = {"entries": entries, "meta": meta or {}}
    if optimizer is not None:
        header["optimizer"] = {
            "step_count": optimizer.step_count, "learning_rate": optimizer.learning_rate,
            "weight_decay": optimizer.weight_decay, "beta1": optimizer.beta1,
            "beta2": optimizer.beta2, "epsilon": optimizer.epsilon,
        }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tables, header)``; tables maps ``kind`` to ``{name: array}``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode("utf-8"))
    payload = np.frombuffer(data, dtype="<f8", offset=16 + n)
    tables: dict[str, dict[str, np.ndarray]] = {}
    for e in header["entries"]:
        arr = payload[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
        tables.setdefault(e["kind"], {})[e["name"]] = arr
    return tables, header
