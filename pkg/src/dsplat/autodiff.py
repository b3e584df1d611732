"""A small reverse-mode autodiff engine over numpy arrays, plus the MLP,
positional encoding, Adam and learning-rate pieces used by the deformation
networks.

Broadcasting is supported for elementwise ops in the numpy sense; gradients
are summed back onto the broadcast operand.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalAbort, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mul(tsum(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def add(a, b):
    a, b = _lift(a), _lift(b)
    return Tensor(a.data + b.data, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    return Tensor(-a.data, parents=(a,), backward=lambda g: (-g,))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    return Tensor(a.data * b.data, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g * b.data, a.shape),
                                      _unbroadcast(g * a.data, b.shape)))


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return Tensor(a.data @ b.data, parents=(a, b),
                  backward=lambda g: (g @ b.data.T, a.data.T @ g))


def exp(a):
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), backward=lambda g: (g * out,))


def sin(a):
    return Tensor(np.sin(a.data), parents=(a,), backward=lambda g: (g * np.cos(a.data),))


def cos(a):
    return Tensor(np.cos(a.data), parents=(a,), backward=lambda g: (-g * np.sin(a.data),))


def relu(a):
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), parents=(a,), backward=lambda g: (g * mask,))


def tsum(a, axis=None):
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return Tensor(a.data.sum(axis=axis), parents=(a,), backward=back)


def reshape(a, shape):
    return Tensor(a.data.reshape(shape), parents=(a,), backward=lambda g: (g.reshape(a.shape),))


def transpose(a):
    return Tensor(a.data.T, parents=(a,), backward=lambda g: (g.T,))


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([t.data for t in tensors], axis=ax), parents=tuple(tensors),
                  backward=lambda g: tuple(np.split(g, cuts, axis=ax)))


def softmax(a):
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return Tensor(y, parents=(a,),
                  backward=lambda g: (y * (g - np.sum(g * y, axis=-1, keepdims=True)),))


def take_rows(a, index):
    """Rows ``a[index]`` of a 2-D tensor; backward scatter-adds."""
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, index, g)
        return (out,)
    return Tensor(a.data[index], parents=(a,), backward=back)


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if not np.all(np.isfinite(g)):
                raise NumericalAbort(f"non-finite gradient for tensor {node.name or node.shape}")
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad(loss, params):
    """Gradients of ``loss`` w.r.t. ``params``; unreachable ones are zero."""
    for p in params:
        p.grad = None
    backward(loss)
    return [np.zeros(p.shape) if p.grad is None else p.grad for p in params]


def leaf(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# positional encoding and MLPs
# ---------------------------------------------------------------------------

def positional_encoding(x, num_freqs):
    """``[sin(2^j pi x), cos(2^j pi x)]`` for j = 0..L-1, along the last axis."""
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    if isinstance(x, Tensor):
        parts = []
        for j in range(num_freqs):
            s = mul(x, (2.0 ** j) * np.pi)
            parts += [sin(s), cos(s)]
        return concat(parts, axis=-1)
    x = np.asarray(x, dtype=np.float64)
    parts = []
    for j in range(num_freqs):
        s = (2.0 ** j) * np.pi * x
        parts += [np.sin(s), np.cos(s)]
    return np.concatenate(parts, axis=-1)


@dataclass
class MlpParams:
    weights: list
    biases: list
    activation: str = "relu"

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def hidden_width(self):
        return self.weights[0].shape[1] if len(self.weights) > 1 else 0

    def __post_init__(self):
        for w, nxt in zip(self.weights[:-1], self.weights[1:]):
            if w.shape[1] != nxt.shape[0]:
                raise ShapeError("consecutive MLP layer dimensions do not chain")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ShapeError("bias length does not match layer width")

    def arrays(self, prefix):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    @classmethod
    def from_arrays(cls, arrays, prefix):
        ws, bs, i = [], [], 0
        while f"{prefix}.w{i}" in arrays:
            ws.append(np.asarray(arrays[f"{prefix}.w{i}"], dtype=np.float64))
            bs.append(np.asarray(arrays[f"{prefix}.b{i}"], dtype=np.float64))
            i += 1
        return cls(ws, bs)

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.activation)


def init_mlp(sizes, rng, zero_last=True):
    """Glorot-uniform layers; the final layer starts at zero when ``zero_last``."""
    ws, bs = [], []
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero_last and i == len(sizes) - 2:
            ws.append(np.zeros((fi, fo)))
        else:
            lim = np.sqrt(6.0 / (fi + fo))
            ws.append(rng.uniform(-lim, lim, size=(fi, fo)))
        bs.append(np.zeros(fo))
    return MlpParams(ws, bs)


def mlp_forward(params, x, weights=None):
    """Linear -> ReLU chain with a linear output layer.

    ``weights`` optionally supplies leaf tensors (w0, b0, w1, b1, ...) to
    differentiate against; otherwise the parameters enter as constants.
    """
    x = _lift(x)
    if x.data.ndim == 1:
        x = reshape(x, (1, -1))
    if x.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(f"MLP expects input width {params.weights[0].shape[0]}, got {x.shape[1]}")
    if weights is None:
        weights = []
        for w, b in zip(params.weights, params.biases):
            weights += [Tensor(w), Tensor(b)]
    h = x
    last = params.n_layers - 1
    for i in range(params.n_layers):
        h = matmul(h, weights[2 * i]) + weights[2 * i + 1]
        if i < last:
            h = relu(h)
    return h


def mlp_leaves(params, prefix):
    out = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out += [leaf(w, f"{prefix}.w{i}"), leaf(b, f"{prefix}.b{i}")]
    return out


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update of every array in ``params`` that has a gradient.

    ``lr`` is a float or a dict keyed like ``params``.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        elif m.shape != p.shape:
            raise ShapeError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        v = state.v[name]
        state.t[name] += 1
        t = state.t[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        step = lr[name] if isinstance(lr, dict) else lr
        p -= step * mhat / (np.sqrt(vhat) + eps)
    return params, state


def lr_schedule(step, total_steps, lr_init=8e-4, lr_final=1.6e-6):
    """Exponential interpolation from ``lr_init`` (step 0) to ``lr_final`` (step total)."""
    if total_steps <= 0:
        return lr_final
    frac = min(max(step / total_steps, 0.0), 1.0)
    return float(np.exp((1 - frac) * np.log(lr_init) + frac * np.log(lr_final)))


# ---------------------------------------------------------------------------
# checkpoint blob
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"DSCKPT1\n"


def save_tensors(path, tensors, meta=None):
    """Write named arrays with shape headers; written to a temp file then renamed."""
    entries, offset, blobs = [], 0, []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        kind = "i8" if arr.dtype.kind in "iub" else "f8"
        raw = arr.astype("<" + kind).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": kind,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": 1, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(np.array([len(header)], dtype="<u8").tobytes())
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_tensors(path):
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint")
    off = len(CKPT_MAGIC)
    (hlen,) = np.frombuffer(data, dtype="<u8", count=1, offset=off)
    off += 8
    header = json.loads(data[off:off + int(hlen)].decode("utf-8"))
    base = off + int(hlen)
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype="<" + e["dtype"], count=count, offset=base + e["offset"])
        tensors[e["name"]] = arr.reshape(tuple(e["shape"])).copy()
    return tensors, header["meta"]
