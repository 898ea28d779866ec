"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of primitives the flows, encoder and losses need are
provided.  A :class:`Tensor` created without a tape is a constant; any
operation touching a taped tensor is recorded on that tape, and
:func:`backward` replays the records in reverse.
"""

from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "Mlp",
    "Adam",
    "backward",
    "concat",
    "mlp_forward",
    "adam_step",
    "save_params",
    "load_params",
    "mlp_call_count",
    "count_mlp_calls",
]

FORMAT_VERSION = 1
_MAGIC = b"FCNUM\x00"


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        leaf = self.leaves.get(name)
        if leaf is None:
            leaf = Tensor(value, tape=self, name=name)
            self.leaves[name] = leaf
        return leaf

    def record(self, out, inputs, vjp):
        self.nodes.append((out, inputs, vjp))

    def clear(self):
        self.nodes = []
        self.leaves = {}

    def __len__(self):
        return len(self.nodes)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _tape_of(*tensors):
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _make(value, inputs, vjp) -> Tensor:
    tape = _tape_of(*inputs)
    out = Tensor(value, tape=tape)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


class Tensor:
    __slots__ = ("value", "tape", "name")
    __array_priority__ = 100

    def __init__(self, value, tape: Tape | None = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self.shape, other.shape
        return _make(
            self.value + other.value,
            (self, other),
            lambda g, need: (
                _unbroadcast(g, a) if need[0] else None,
                _unbroadcast(g, b) if need[1] else None,
            ),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self.shape, other.shape
        return _make(
            self.value - other.value,
            (self, other),
            lambda g, need: (
                _unbroadcast(g, a) if need[0] else None,
                _unbroadcast(-g, b) if need[1] else None,
            ),
        )

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        x, y = self.value, other.value
        return _make(
            x * y,
            (self, other),
            lambda g, need: (
                _unbroadcast(g * y, x.shape) if need[0] else None,
                _unbroadcast(g * x, y.shape) if need[1] else None,
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        x, y = self.value, other.value
        return _make(
            x / y,
            (self, other),
            lambda g, need: (
                _unbroadcast(g / y, x.shape) if need[0] else None,
                _unbroadcast(-g * x / (y * y), y.shape) if need[1] else None,
            ),
        )

    def __neg__(self):
        return _make(-self.value, (self,), lambda g, need: (-g,))

    def __matmul__(self, other):
        """``(..., k) @ (k, m)``; the right operand must be a matrix."""
        other = _as_tensor(other)
        x, w = self.value, other.value
        if w.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")

        def vjp(g, need):
            gx = g @ w.T if need[0] else None
            gw = None
            if need[1]:
                gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return gx, gw

        return _make(x @ w, (self, other), vjp)

    def __getitem__(self, index):
        x = self.value
        out = x[index]

        def vjp(g, need):
            full = np.zeros_like(x)
            full[index] += g
            return (full,)

        return _make(out, (self,), vjp)

    # elementwise ------------------------------------------------------------

    def exp(self):
        y = np.exp(self.value)
        return _make(y, (self,), lambda g, need: (g * y,))

    def log(self):
        x = self.value
        return _make(np.log(x), (self,), lambda g, need: (g / x,))

    def tanh(self):
        y = np.tanh(self.value)
        return _make(y, (self,), lambda g, need: (g * (1.0 - y * y),))

    def sigmoid(self):
        y = 0.5 * (np.tanh(0.5 * self.value) + 1.0)
        return _make(y, (self,), lambda g, need: (g * y * (1.0 - y),))

    def square(self):
        x = self.value
        return _make(x * x, (self,), lambda g, need: (2.0 * g * x,))

    # reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        x = self.value
        out = x.sum(axis=axis, keepdims=keepdims)

        def vjp(g, need):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return _make(out, (self,), vjp)

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        x = self.value
        return _make(x.reshape(*shape), (self,), lambda g, need: (g.reshape(x.shape),))


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; size-1 leading dims are broadcast first."""
    tensors = [_as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    lead = np.broadcast_shapes(*[t.shape[:ax] for t in tensors])
    values = [np.broadcast_to(t.value, lead + t.shape[ax:]) for t in tensors]
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, need):
        out = []
        for i, t in enumerate(tensors):
            if not need[i]:
                out.append(None)
                continue
            piece = np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            out.append(_unbroadcast(piece, t.shape))
        return out

    return _make(np.concatenate(values, axis=ax), tuple(tensors), vjp)


def backward(tape: Tape, output: Tensor, output_adjoint=None) -> dict:
    """Propagate adjoints from ``output`` back to the tape's parameters.

    Returns a dict mapping parameter name to gradient array.  Parameters
    that the output does not depend on get zero gradients.  The tape is
    cleared afterwards.
    """
    if not tape.nodes:
        raise TapeError("backward called on an empty tape")
    if output.tape is not tape:
        raise TapeError("output was not recorded on this tape")
    if output_adjoint is None:
        if output.value.size != 1:
            raise ShapeError("a non-scalar output needs an explicit adjoint")
        seed = np.ones_like(output.value)
    else:
        seed = np.asarray(output_adjoint, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"adjoint shape {seed.shape} != output shape {output.shape}")

    adj = {id(output): seed}
    for out, inputs, vjp in reversed(tape.nodes):
        g = adj.pop(id(out), None)
        if g is None:
            continue
        need = [t.tape is tape for t in inputs]
        grads = vjp(g, need)
        for t, gi, n in zip(inputs, grads, need):
            if not n or gi is None:
                continue
            key = id(t)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi

    result = {}
    for name, leaf in tape.leaves.items():
        g = adj.get(id(leaf))
        result[name] = np.zeros_like(leaf.value) if g is None else np.array(g)
    tape.clear()
    return result


# ---------------------------------------------------------------------------
# MLPs

_MLP_CALLS = [0]


def mlp_call_count() -> int:
    return _MLP_CALLS[0]


@contextmanager
def count_mlp_calls():
    """Yield a callable returning MLP evaluations made inside the block."""
    start = _MLP_CALLS[0]
    yield lambda: _MLP_CALLS[0] - start


class Mlp:
    """Weights of a tanh MLP living in a shared parameter dict.

    Parameter arrays are stored under ``f"{prefix}.w{i}"`` and
    ``f"{prefix}.b{i}"`` so that the owner can hand the whole dict to the
    optimizer or the serializer.
    """

    def __init__(self, params: dict, prefix: str, sizes, rng=None, zero_last=True):
        self.params = params
        self.prefix = prefix
        self.sizes = list(sizes)
        if rng is not None:
            for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
                last = i == len(self.sizes) - 2
                if last and zero_last:
                    w = np.zeros((fan_in, fan_out))
                else:
                    bound = math.sqrt(6.0 / (fan_in + fan_out))
                    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                params[f"{prefix}.w{i}"] = w
                params[f"{prefix}.b{i}"] = np.zeros(fan_out)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def keys(self):
        for i in range(self.n_layers):
            yield f"{self.prefix}.w{i}"
            yield f"{self.prefix}.b{i}"

    def __call__(self, x: Tensor, tape: Tape | None = None) -> Tensor:
        return mlp_forward(self, x, tape)


def _fetch(params, name, tape):
    if tape is None:
        return Tensor(params[name])
    return tape.param(name, params[name])


def mlp_forward(mlp: Mlp, x: Tensor, tape: Tape | None = None) -> Tensor:
    """Evaluate ``mlp`` on the last axis of ``x``.

    Parameters are fetched through ``tape`` when given (so they collect
    gradients) and as constants otherwise.  The input may itself be taped
    either way.
    """
    x = _as_tensor(x)
    _MLP_CALLS[0] += 1
    h = x
    for i in range(mlp.n_layers):
        w = _fetch(mlp.params, f"{mlp.prefix}.w{i}", tape)
        b = _fetch(mlp.params, f"{mlp.prefix}.b{i}", tape)
        if h.shape[-1] != w.shape[0]:
            raise ShapeError(
                f"{mlp.prefix} layer {i}: expected input width {w.shape[0]}, got {h.shape[-1]}"
            )
        h = h @ w + b
        if i < mlp.n_layers - 1:
            h = h.tanh()
    return h


# ---------------------------------------------------------------------------
# Adam


class Adam:
    """Bias-corrected Adam over a name -> array parameter dict."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        updated = dict(params)
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            updated[name] = params[name] - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return updated


def adam_step(state: Adam, params: dict, grads: dict) -> dict:
    return state.step(params, grads)


# ---------------------------------------------------------------------------
# serialization: magic, u64 header length, JSON header, raw little-endian f64


def save_params(path, params: dict, meta: dict | None = None) -> None:
    entries = []
    offset = 0
    chunks = []
    for name in sorted(params):
        arr = np.array(params[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"version": FORMAT_VERSION, "nbytes": offset, "params": entries}
    if meta:
        header["meta"] = meta
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_params(path) -> tuple[dict, dict]:
    """Return ``(params, meta)`` from a file written by :func:`save_params`."""
    data = Path(path).read_bytes()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a parameter container")
    pos = len(_MAGIC)
    if len(data) < pos + 8:
        raise ValueError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt header") from exc
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported container version {header.get('version')}")
    body = data[pos + hlen :]
    if len(body) != header["nbytes"]:
        raise ValueError(f"{path}: expected {header['nbytes']} data bytes, found {len(body)}")
    params = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"])
        params[e["name"]] = arr.reshape(tuple(e["shape"])).astype(np.float64)
    return params, header.get("meta", {})
