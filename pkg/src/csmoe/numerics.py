"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is 64-bit and row-major. The operation graph built during a
forward pass doubles as the differentiation tape: each op links its output
to its parents together with a backward closure, and ``backward`` replays
the closures in reverse topological order, visiting every node exactly
once. A graph is confined to the thread that built it; independent graphs
may run concurrently.

Every op reports a deterministic operation count to the innermost active
``FlopCounter`` (2 ops per multiply-accumulate, 5 per softmax/norm element,
10 per GELU element, 1 per plain elementwise op, 0 for data movement).
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import DimensionError, EvaluationError, FormatError, ParameterError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------

_flop_ctx = threading.local()


class FlopCounter:
    """Accumulates the cost of every tensor op executed inside the context."""

    def __init__(self):
        self.total = 0

    def __enter__(self):
        stack = getattr(_flop_ctx, "stack", None)
        if stack is None:
            stack = _flop_ctx.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _flop_ctx.stack.pop()
        return False


def _count(n: int):
    stack = getattr(_flop_ctx, "stack", None)
    if stack:
        for counter in stack:
            counter.total += n


# Cost formulas, shared with the analytic profiler so both sides can never
# disagree on conventions.
def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def elementwise_flops(n: int) -> int:
    return n


def softmax_flops(n: int) -> int:
    return 5 * n


def layer_norm_flops(n: int) -> int:
    return 5 * n


def gelu_flops(n: int) -> int:
    return 10 * n


def reduction_flops(n: int) -> int:
    return n


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A float64 array plus an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _attach(out: Tensor, parents, backward_fn):
    """Record the op on the tape iff some parent wants gradients."""
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar; gradients land on leaf tensors."""
    if loss.data.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    # iterative topological sort over recorded parents
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def zero_grads(params):
    """Drop gradient buffers; accepts any iterable of tensors or a name map."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# Arithmetic ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    _count(elementwise_flops(out.size))

    def back():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad, b.shape))

    return _attach(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    _count(elementwise_flops(out.size))

    def back():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-out.grad, b.shape))

    return _attach(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    _count(elementwise_flops(out.size))

    def back():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    return _attach(out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)
    _count(elementwise_flops(out.size))

    def back():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return _attach(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    _count(elementwise_flops(out.size))

    def back():
        _accumulate(a, -out.grad)

    return _attach(out, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    _count(matmul_flops(a.shape[0], a.shape[1], b.shape[1]))

    def back():
        if a.requires_grad:
            _accumulate(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ out.grad)

    return _attach(out, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)

    def back():
        _accumulate(a, out.grad.T)

    return _attach(out, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def back():
        _accumulate(a, out.grad.reshape(a.shape))

    return _attach(out, (a,), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    _count(reduction_flops(a.size))

    def back():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _attach(out, (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    _count(reduction_flops(a.size) + 1)

    def back():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / n)

    return _attach(out, (a,), back)


def texp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    _count(elementwise_flops(out.size))

    def back():
        _accumulate(a, out.grad * out.data)

    return _attach(out, (a,), back)


def tlog(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    _count(elementwise_flops(out.size))

    def back():
        _accumulate(a, out.grad / a.data)

    return _attach(out, (a,), back)


def tsqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    _count(elementwise_flops(out.size))

    def back():
        _accumulate(a, out.grad * 0.5 / out.data)

    return _attach(out, (a,), back)


def gelu(a: Tensor) -> Tensor:
    """Exact erf form: 0.5 x (1 + erf(x / sqrt 2))."""
    x = a.data
    e = erf(x * _INV_SQRT2)
    out = Tensor(0.5 * x * (1.0 + e))
    _count(gelu_flops(out.size))

    def back():
        d = 0.5 * (1.0 + e) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accumulate(a, out.grad * d)

    return _attach(out, (a,), back)


def xlog_shifted(a: Tensor, shift: float) -> Tensor:
    """Elementwise x * log(x + shift), defined as 0 where x == 0.

    The x == 0 convention makes entropy-style sums well defined even in the
    shift -> 0 limit.
    """
    x = a.data
    nz = x != 0.0
    vals = np.zeros_like(x)
    vals[nz] = x[nz] * np.log(x[nz] + shift)
    out = Tensor(vals)
    _count(2 * out.size)

    def back():
        d = np.zeros_like(x)
        d[nz] = np.log(x[nz] + shift) + x[nz] / (x[nz] + shift)
        _accumulate(a, out.grad * d)

    return _attach(out, (a,), back)


def softmax(x: Tensor, axis: int, temperature: float = 1.0) -> Tensor:
    """exp((x - max)/t) normalized along ``axis``; rows sum to 1."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    scaled = x.data / temperature
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    _count(softmax_flops(out.size))

    def back():
        g = out.grad
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - dot) / temperature)

    return _attach(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize along the last axis to zero mean and unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    gain, bias = _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    _count(layer_norm_flops(out.size))

    def back():
        g = out.grad
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            u = g * gain.data
            du = u.mean(axis=-1, keepdims=True)
            duh = (u * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, (u - du - xhat * duh) * inv)

    return _attach(out, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# Structural ops (data movement, zero cost)
# ---------------------------------------------------------------------------


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def back():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _accumulate(a, g)

    return _attach(out, (a,), back)


def concat_rows(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def back():
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, out.grad[s:e])

    return _attach(out, tuple(parts), back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[:, start:stop])

    def back():
        g = np.zeros_like(a.data)
        g[:, start:stop] = out.grad
        _accumulate(a, g)

    return _attach(out, (a,), back)


def concat_cols(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def back():
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, out.grad[:, s:e])

    return _attach(out, tuple(parts), back)


def scatter_rows(rows: Tensor, idx, fill: Tensor, total: int) -> Tensor:
    """Place ``rows`` at positions ``idx`` of a [total, d] output; every other
    row is a copy of ``fill`` (a [d] or [1, d] tensor)."""
    idx = np.asarray(idx, dtype=np.int64)
    if rows.shape[0] != idx.size:
        raise DimensionError(f"scatter_rows: {rows.shape[0]} rows vs {idx.size} indices")
    d = rows.shape[1]
    filled = np.broadcast_to(fill.data.reshape(1, d), (total, d)).copy()
    filled[idx] = rows.data
    out = Tensor(filled)
    hole = np.ones(total, dtype=bool)
    hole[idx] = False

    def back():
        if rows.requires_grad:
            _accumulate(rows, out.grad[idx])
        if fill.requires_grad:
            _accumulate(fill, out.grad[hole].sum(axis=0).reshape(fill.shape))

    return _attach(out, (rows, fill), back)


# ---------------------------------------------------------------------------
# Composites
# ---------------------------------------------------------------------------


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Rows scaled to unit Euclidean length. Zero rows produce NaN; callers
    that must reject them check beforehand."""
    sq = tsum(mul(x, x), axis=-1, keepdims=True)
    return div(x, tsqrt(sq))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Result of comparing tape gradients against central differences."""

    max_relative_error: float
    per_parameter_errors: dict = field(default_factory=dict)
    step_size: float = 1e-5
    checked_elements: int = 0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error <= tolerance


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-12)


def check_gradients(
    loss_fn,
    params: dict,
    step: float = 1e-5,
    max_checked: int = 10_000,
    sample_seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn(params)`` against central
    differences.

    Every element is checked unless the parameter set exceeds 10^4 elements
    (or ``max_checked``), in which case a seeded uniform sample of elements
    is checked instead. ``loss_fn`` must be deterministic in ``params``.
    """
    zero_grads(params)
    loss = loss_fn(params)
    value = loss.item()
    if not np.isfinite(value):
        raise EvaluationError(f"loss is not finite: {value}")
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    names = list(params.keys())
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    limit = min(max_checked, 10_000)
    if total > limit:
        rng = np.random.default_rng(sample_seed)
        flat = np.sort(rng.choice(total, size=limit, replace=False))
    else:
        flat = np.arange(total)
    bounds = np.cumsum(sizes)

    per_param = {name: 0.0 for name in names}
    for gidx in flat:
        pi = int(np.searchsorted(bounds, gidx, side="right"))
        local = int(gidx - (bounds[pi - 1] if pi > 0 else 0))
        p = params[names[pi]]
        center = p.data.flat[local]
        p.data.flat[local] = center + step
        up = loss_fn(params).item()
        p.data.flat[local] = center - step
        down = loss_fn(params).item()
        p.data.flat[local] = center
        if not (np.isfinite(up) and np.isfinite(down)):
            raise EvaluationError("perturbed loss is not finite")
        numeric = (up - down) / (2.0 * step)
        err = _rel_err(float(analytic[names[pi]].flat[local]), numeric)
        if err > per_param[names[pi]]:
            per_param[names[pi]] = err

    return GradCheckReport(
        max_relative_error=max(per_param.values()) if per_param else 0.0,
        per_parameter_errors=per_param,
        step_size=step,
        checked_elements=int(flat.size),
    )


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with resampling outside +-2 std."""
    x = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(x) > 2.0 * std
        if not bad.any():
            return x
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))


# ---------------------------------------------------------------------------
# TNSR1 binary tensor files
# ---------------------------------------------------------------------------

_TNSR_MAGIC = b"TNSR"
_TNSR_VERSION = 1


def write_tnsr(fh, array: np.ndarray):
    """magic 'TNSR', version u8, rank u8, rank x u32 LE dims, f64 LE payload."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    if arr.ndim > 255:
        raise FormatError(f"TNSR1 rank limit is 255, got {arr.ndim}")
    fh.write(_TNSR_MAGIC)
    fh.write(struct.pack("<BB", _TNSR_VERSION, arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.astype("<f8").tobytes())


def read_tnsr(fh) -> np.ndarray:
    head = fh.read(6)
    if len(head) < 6 or head[:4] != _TNSR_MAGIC:
        raise FormatError("not a TNSR1 block (bad magic)")
    version, rank = head[4], head[5]
    if version != _TNSR_VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    raw = fh.read(4 * rank)
    if len(raw) < 4 * rank:
        raise FormatError("truncated TNSR1 header")
    dims = struct.unpack(f"<{rank}I", raw) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = fh.read(8 * count)
    if len(payload) < 8 * count:
        raise FormatError("truncated TNSR1 payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def save_tnsr(path, array: np.ndarray):
    with open(path, "wb") as fh:
        write_tnsr(fh, array)


def load_tnsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tnsr(fh)
