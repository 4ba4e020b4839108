"""Dense float64 tensors with a dynamic reverse-mode tape, Adam, and the
CAMF checkpoint format.

Every operation builds a node holding its parents and a closure that maps
the output adjoint to parent adjoints. ``backward`` sweeps the nodes in
reverse topological order and accumulates into ``.grad`` of every leaf
with ``requires_grad``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ParseError, ShapeError

__all__ = [
    "Tensor", "tensor", "constant", "as_tensor",
    "add", "sub", "mul", "div", "neg", "matmul", "concat", "reshape",
    "transpose", "tensor_sum", "mean", "exp", "tanh", "sigmoid", "square",
    "sqrt", "sin", "cos", "gather_rows", "scatter_add_rows", "conv3d",
    "backward", "zero_grad", "grad_check", "AdamState", "adam_step", "Adam",
    "glorot_uniform", "save_checkpoint", "load_checkpoint",
    "checkpoint_bytes", "checkpoint_from_bytes",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return _slice(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value)
    return Tensor(value, True, tuple(parents), backward_fn)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise binary ops ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# structural ops ------------------------------------------------------------

def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def _slice(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tensor_sum(a, axis, keepdims), 1.0 / n)


# elementwise unary ops -----------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # numerically stable in both tails
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


# indexing ------------------------------------------------------------------

def gather_rows(a, idx) -> Tensor:
    """``a[idx]`` along the first axis; repeated indices accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw)


def scatter_add_rows(a, idx, num_rows: int) -> Tensor:
    """Sum rows of ``a`` into ``num_rows`` buckets given by ``idx`` (adjoint of gather)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:1]:
        raise ShapeError(f"scatter_add_rows: index shape {idx.shape} vs rows {a.shape[:1]}")
    out = np.zeros((num_rows,) + a.shape[1:])
    np.add.at(out, idx, a.data)
    return _node(out, (a,), lambda g: (g[idx],))


_OFFSETS = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


def conv3d(x, w, b=None) -> Tensor:
    """Same-padded 3x3x3 convolution over a channels-last grid.

    Args:
        x: (R1, R2, R3, Cin) grid.
        w: (27, Cin, Cout) kernel, offsets ordered as nested (dx, dy, dz) in 0..2.
        b: optional (Cout,) bias.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 3 or w.shape[0] != 27 or w.shape[1] != x.shape[3]:
        raise ShapeError(f"conv3d: grid {x.shape} and kernel {w.shape} are incompatible")
    R1, R2, R3, C = x.shape
    xp = np.pad(x.data, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((R1 * R2 * R3, w.shape[2]))
    for k, (i, j, l) in enumerate(_OFFSETS):
        out += xp[i:i + R1, j:j + R2, l:l + R3].reshape(-1, C) @ w.data[k]
    out = out.reshape(R1, R2, R3, -1)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for k, (i, j, l) in enumerate(_OFFSETS):
            gxp[i:i + R1, j:j + R2, l:l + R3] += (g2 @ w.data[k].T).reshape(R1, R2, R3, C)
            gw[k] = xp[i:i + R1, j:j + R2, l:l + R3].reshape(-1, C).T @ g2
        grads = [gxp[1:-1, 1:-1, 1:-1], gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, bw)


# tape ----------------------------------------------------------------------

def _topo_order(root, reverse_parents=False):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        parents = node._parents[::-1] if reverse_parents else node._parents
        for p in parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, wrt=None, *, reverse_parents=False):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Args:
        loss: scalar Tensor.
        wrt: optional iterable of tensors; their gradients are returned as a
            list, zeros for tensors the loss does not depend on.
        reverse_parents: visit parents in reverse order when building the
            topological sort (only useful for testing order independence).
    """
    if loss.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        adj = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topo_order(loss, reverse_parents)):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if not p.requires_grad or pg is None:
                    continue
                if id(p) in adj:
                    adj[id(p)] = adj[id(p)] + pg
                else:
                    adj[id(p)] = pg
    if wrt is None:
        return None
    out = []
    for t in wrt:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        out.append(t.grad)
    return out


def zero_grad(params):
    for p in params:
        p.grad = None


def grad_check(f, x, eps: float = 1e-5, *, max_coords: int | None = None, seed: int = 0) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Args:
        f: if ``x`` is an array, a function of one Tensor; if ``x`` is a
            sequence of leaf Tensors, a function of no arguments reading them.
        x: evaluation point (array) or parameter tensors (perturbed in place
            and restored).
        eps: central-difference step.
        max_coords: check at most this many randomly chosen coordinates per
            tensor.

    Returns:
        max over coordinates of |a - n| / max(1, |a|, |n|).
    """
    if isinstance(x, Tensor) or not isinstance(x, (list, tuple)):
        leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
        leaves = [leaf]
        fn = lambda: f(leaf)
    else:
        leaves = list(x)
        fn = f
    zero_grad(leaves)
    for t in leaves:
        t.requires_grad = True
    loss = as_tensor(fn())
    if loss.size != 1:
        raise InvalidInputError("grad_check needs a scalar-valued function")
    analytic = [g.copy() for g in backward(loss, wrt=leaves)]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(leaves, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(as_tensor(fn()).data)
            flat[i] = orig - eps
            fm = float(as_tensor(fn()).data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = float(a.reshape(-1)[i])
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    zero_grad(leaves)
    return worst


# optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update of ``params`` (arrays, updated in place).

    Returns:
        ``(params, state)``.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state are not aligned")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    """Adam over Tensor parameters; one state per parameter group."""

    def __init__(self, groups, **kw):
        if isinstance(groups, dict) or (groups and isinstance(groups[0], Tensor)):
            groups = [{"params": groups}]
        self.groups = []
        for g in groups:
            params = list(g["params"].values()) if isinstance(g["params"], dict) else list(g["params"])
            opts = {**kw, **{k: v for k, v in g.items() if k != "params"}}
            self.groups.append((params, AdamState(**opts)))

    def step(self):
        for params, state in self.groups:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adam_step([p.data for p in params], grads, state)

    def zero_grad(self):
        for params, _ in self.groups:
            zero_grad(params)


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# checkpoints ---------------------------------------------------------------

_MAGIC = b"CAMF"
_VERSION = 1


def checkpoint_bytes(tensors) -> bytes:
    """Serialize an ordered name -> array mapping."""
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"cannot serialize tensor {name!r}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes, path=None) -> dict:
    def need(pos, n):
        if pos + n > len(buf):
            raise ParseError(f"truncated checkpoint (need {n} bytes)", offset=pos, path=path)

    need(0, 12)
    if buf[:4] != _MAGIC:
        raise ParseError("bad magic, expected CAMF", offset=0, path=path)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4, path=path)
    pos = 12
    out = {}
    for _ in range(count):
        need(pos, 2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, nlen + 1)
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("tensor name is not UTF-8", offset=pos, path=path) from None
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(pos, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        nbytes = 8 * math.prod(dims)  # python ints: no overflow on hostile dims
        need(pos, nbytes)
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(np.float64)
        pos += nbytes
    if pos != len(buf):
        raise ParseError("trailing bytes after last tensor", offset=pos, path=path)
    return out


def save_checkpoint(path, tensors):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(tensors))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), path=path)
