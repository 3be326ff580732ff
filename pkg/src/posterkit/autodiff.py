"""Tiny reverse-mode automatic differentiation over dense numpy arrays.

The op set is deliberately closed: exactly the primitives the generative
model, the glyph encoder and the detector need. Arrays are row-major
contiguous, float32 by default (float64 for gradient checking). Every
primitive validates that its output is finite.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf as _erf

DEFAULT_DTYPE = np.float32

# squashed below this, layernorm of a constant vector is exactly zero
LAYERNORM_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A node in the computation graph: value, gradient accumulator, backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(DEFAULT_DTYPE)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def accumulate_grad(self, g, owned=False):
        """Add `g` to the gradient. With owned=True the caller guarantees `g`
        is a freshly allocated array of the right dtype that may be kept."""
        if self.grad is None:
            self.grad = g if owned else np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data, dtype=None):
    return Tensor(np.asarray(data, dtype=dtype or DEFAULT_DTYPE))


def _check_finite(data):
    # a float64 sum cannot overflow on float32 inputs and propagates nan/inf
    if not np.isfinite(data.sum(dtype=np.float64)):
        raise NonFiniteError("primitive produced a non-finite value")


def _node(data, parents, backward):
    _check_finite(data)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def affine(x, scale, shift=0.0):
    """scale * x + shift with python scalars."""
    x = as_tensor(x)
    data = x.data * scale + shift

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad * scale)

    return _node(data, (x,), backward)


def neg(x):
    return affine(x, -1.0)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x):
    x = as_tensor(x)
    data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad * data * (1.0 - data))

    return _node(data, (x,), backward)


def silu(x):
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * s

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad * (s + x.data * s * (1.0 - s)))

    return _node(data, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    inner = xd * xd
    inner *= xd
    inner *= 0.044715
    inner += xd
    inner *= _GELU_C
    th = np.tanh(inner, out=inner)
    data = th + 1.0
    data *= xd
    data *= 0.5

    def backward(out):
        if x.requires_grad:
            # d/dx = 0.5 * ((1 + th) + x * (1 - th^2) * d(inner)/dx)
            dinner = xd * xd
            dinner *= 3 * 0.044715
            dinner += 1.0
            dinner *= _GELU_C
            g = th * th
            np.subtract(1.0, g, out=g)
            g *= dinner
            g *= xd
            g += th
            g += 1.0
            g *= 0.5
            g *= out.grad
            x.accumulate_grad(g, owned=True)

    return _node(data, (x,), backward)


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad * data)

    return _node(data, (x,), backward)


def log(x):
    x = as_tensor(x)
    data = np.log(x.data)

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad / x.data)

    return _node(data, (x,), backward)


def softplus(x):
    """log(1 + exp(x)), computed stably."""
    x = as_tensor(x)
    data = np.logaddexp(0.0, x.data)

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad / (1.0 + np.exp(-x.data)))

    return _node(data, (x,), backward)


def clamp(x, lo, hi):
    x = as_tensor(x)
    data = np.clip(x.data, lo, hi)

    def backward(out):
        if x.requires_grad:
            inside = (x.data >= lo) & (x.data <= hi)
            x.accumulate_grad(out.grad * inside)

    return _node(data, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    # the common (batched x, 2-D weight) case flattens to a single GEMM
    flat = b.data.ndim == 2 and a.data.ndim > 2
    if flat:
        k, n = b.data.shape
        data = (a.data.reshape(-1, k) @ b.data).reshape(a.data.shape[:-1] + (n,))
    else:
        data = np.matmul(a.data, b.data)

    def backward(out):
        g = out.grad
        if flat:
            k, n = b.data.shape
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                a.accumulate_grad((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b.accumulate_grad(a.data.reshape(-1, k).T @ g2)
            return
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _node(data, (a, b), backward)


def linear(x, w, b):
    """x @ w + b in a single node; `w` is 2-D, `b` is 1-D."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    k, n = w.data.shape
    flat = x.data.reshape(-1, k)
    data = flat @ w.data
    data += b.data
    data = data.reshape(x.data.shape[:-1] + (n,))

    def backward(out):
        g2 = out.grad.reshape(-1, n)
        if x.requires_grad:
            x.accumulate_grad((g2 @ w.data.T).reshape(x.shape), owned=True)
        if w.requires_grad:
            w.accumulate_grad(flat.T @ g2, owned=True)
        if b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0), owned=True)

    return _node(data, (x, w, b), backward)


def addcmul(x, gate, h):
    """x + gate * h in a single node; `gate` broadcasts against `h`."""
    x, gate, h = as_tensor(x), as_tensor(gate), as_tensor(h)
    data = gate.data * h.data
    data += x.data

    def backward(out):
        g = out.grad
        if x.requires_grad:
            x.accumulate_grad(_unbroadcast(g, x.shape))
        if gate.requires_grad:
            gate.accumulate_grad(_unbroadcast(g * h.data, gate.shape))
        if h.requires_grad:
            h.accumulate_grad(_unbroadcast(g * gate.data, h.shape))

    return _node(data, (x, gate, h), backward)


def attention(q, k, v, heads, bias=None):
    """Multi-head softmax(q kT / sqrt(d) + bias) v as one node.

    q, k, v and the result are (B, S, W); the head split/merge happens
    inside. `bias` is an additive constant array broadcastable to
    (B, heads, S, S), e.g. a key padding mask.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    b, s, w = q.data.shape
    if w % heads:
        raise ShapeError(f"width {w} not divisible by {heads} heads")
    d = w // heads
    scale = 1.0 / math.sqrt(d)

    def to_heads(t):
        return np.ascontiguousarray(t.reshape(b, s, heads, d).transpose(0, 2, 1, 3))

    qh, kh, vh = to_heads(q.data), to_heads(k.data), to_heads(v.data)
    probs = np.matmul(qh, kh.transpose(0, 1, 3, 2))
    probs *= scale
    if bias is not None:
        probs += bias
    probs -= probs.max(axis=-1, keepdims=True)
    np.exp(probs, out=probs)
    probs /= probs.sum(axis=-1, keepdims=True)
    data = np.matmul(probs, vh).transpose(0, 2, 1, 3).reshape(b, s, w)

    def from_heads(t):
        return np.ascontiguousarray(t.transpose(0, 2, 1, 3)).reshape(b, s, w)

    def backward(out):
        g = to_heads(out.grad)
        if v.requires_grad:
            v.accumulate_grad(from_heads(np.matmul(probs.transpose(0, 1, 3, 2), g)),
                              owned=True)
        ds = np.matmul(g, vh.transpose(0, 1, 3, 2))
        ds *= probs
        dot = ds.sum(axis=-1, keepdims=True)
        ds -= probs * dot
        ds *= scale
        if q.requires_grad:
            q.accumulate_grad(from_heads(np.matmul(ds, kh)), owned=True)
        if k.requires_grad:
            k.accumulate_grad(from_heads(np.matmul(ds.transpose(0, 1, 3, 2), qh)),
                              owned=True)

    return _node(data, (q, k, v), backward)


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad.reshape(x.shape))

    return _node(data, (x,), backward)


def transpose(x, axes):
    x = as_tensor(x)
    data = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = np.argsort(axes)

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(np.transpose(out.grad, inv))

    return _node(data, (x,), backward)


def concat(xs, axis):
    xs = [as_tensor(x) for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.data.shape[axis] for x in xs]

    def backward(out):
        offs = np.cumsum([0] + sizes)
        for x, s, e in zip(xs, offs[:-1], offs[1:]):
            if x.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(s, e)
                x.accumulate_grad(out.grad[tuple(idx)])

    return _node(data, tuple(xs), backward)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = np.ascontiguousarray(x.data[idx])

    def backward(out):
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[idx] = out.grad
            x.accumulate_grad(g)

    return _node(data, (x,), backward)


def split(x, sections, axis):
    """Split into equal (or given-size) chunks along axis."""
    x = as_tensor(x)
    n = x.data.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise ShapeError(f"cannot split axis of size {n} into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise ShapeError("split sizes do not cover the axis")
    outs, start = [], 0
    for s in sizes:
        outs.append(narrow(x, axis, start, s))
        start += s
    return outs


def pad(x, pad_width):
    """Zero padding; pad_width as for np.pad."""
    x = as_tensor(x)
    data = np.pad(x.data, pad_width)
    idx = tuple(slice(b, b + n) for (b, _), n in zip(pad_width, x.data.shape))

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad[idx])

    return _node(data, (x,), backward)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(out):
        if x.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x.accumulate_grad(np.broadcast_to(g, x.shape).copy())

    return _node(data, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    return affine(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x, bias=None):
    """Softmax over the last axis; `bias` is an additive constant array (e.g. a key mask)."""
    x = as_tensor(x)
    z = x.data if bias is None else x.data + bias
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(out):
        if x.requires_grad:
            g = out.grad
            dot = (g * data).sum(axis=-1, keepdims=True)
            x.accumulate_grad(data * (g - dot))

    return _node(data, (x,), backward)


def layernorm(x, eps=LAYERNORM_EPS):
    """Normalize over the last axis. A constant vector maps to the zero vector."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = xc * inv

    def backward(out):
        if x.requires_grad:
            g = out.grad
            n = x.data.shape[-1]
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * data).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (g - gm - data * gym))

    return _node(data, (x,), backward)


def upsample2(x):
    """Nearest-neighbor 2x upsampling of (B, C, H, W)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("upsample2 expects (B, C, H, W)")
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(out):
        if x.requires_grad:
            b, c, h, w = x.shape
            g = out.grad.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))
            x.accumulate_grad(g, owned=True)

    return _node(data, (x,), backward)


def mod_layernorm(x, scale, shift, eps=LAYERNORM_EPS):
    """layernorm(x) * (1 + scale) + shift as one node (adaptive modulation)."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    mu = x.data.mean(axis=-1, keepdims=True)
    y = x.data - mu
    var = (y * y).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y *= inv
    data = y * scale.data
    data += y
    data += shift.data

    def backward(out):
        g = out.grad
        if shift.requires_grad:
            shift.accumulate_grad(_unbroadcast(g, shift.shape))
        if scale.requires_grad:
            scale.accumulate_grad(_unbroadcast(g * y, scale.shape))
        if x.requires_grad:
            gy = g * scale.data
            gy += g
            gm = gy.mean(axis=-1, keepdims=True)
            gym = (gy * y).mean(axis=-1, keepdims=True)
            gy -= gm
            gy -= y * gym
            gy *= inv
            x.accumulate_grad(gy, owned=True)

    return _node(data, (x, scale, shift), backward)


def embedding(table, ids):
    """Row lookup: table (V, D), ids an int array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError("embedding id out of range")
    data = table.data[ids]

    def backward(out):
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.data.shape[1]))
            table.accumulate_grad(g)

    return _node(data, (table,), backward)


def mse(pred, target, weight=None):
    """Mean squared error; optional per-element weight (constant array).

    With a weight map the reduction is sum(w * d^2) / sum(w), so masked-out
    elements contribute exactly zero loss and zero gradient.
    """
    pred = as_tensor(pred)
    target = as_tensor(target)
    d = sub(pred, target)
    sq = mul(d, d)
    if weight is None:
        return mean(sq)
    w = np.broadcast_to(np.asarray(weight, dtype=pred.data.dtype), sq.shape)
    denom = float(w.sum())
    if denom == 0.0:
        raise ShapeError("mse weight mask is all zero")
    return affine(sum_(mul(sq, Tensor(w.copy()))), 1.0 / denom)


# ---------------------------------------------------------------------------
# 2-D convolution (NCHW), via im2col


def _im2col(x, kh, kw, stride, padding):
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    return np.ascontiguousarray(cols.reshape(b, c * kh * kw, oh * ow)), oh, ow


def conv2d(x, w, bias=None, stride=1, padding=0):
    """x: (B, Cin, H, W), w: (Cout, Cin, kh, kw), bias: (Cout,)."""
    x, w = as_tensor(x), as_tensor(w)
    if bias is not None:
        bias = as_tensor(bias)
    co, ci, kh, kw = w.shape
    if x.data.shape[1] != ci:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(co, ci * kh * kw)
    out_data = np.matmul(wmat, cols).reshape(x.data.shape[0], co, oh, ow)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, co, 1, 1)

    def backward(out):
        g = out.grad.reshape(out.grad.shape[0], co, oh * ow)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2)))
        if w.requires_grad:
            gw = np.einsum("bop,bkp->ok", g, cols, optimize=True)
            w.accumulate_grad(gw.reshape(w.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g)  # (B, ci*kh*kw, oh*ow)
            b_, c_, h_, w_ = x.data.shape
            hp, wp = h_ + 2 * padding, w_ + 2 * padding
            gx = np.zeros((b_, c_, hp, wp), dtype=x.data.dtype)
            gcols = gcols.reshape(b_, c_, kh, kw, oh, ow)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += gcols[:, :, i, j]
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            x.accumulate_grad(gx)

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out_data, parents, backward)


# ---------------------------------------------------------------------------
# graph traversal


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss.

    Visits nodes in reverse topological order exactly once; gradients along
    shared subexpressions sum over all paths.
    """
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss")
    topo = []
    state = {}  # id -> 0 visiting, 1 done
    stack = [(loss, iter(loss._parents))]
    state[id(loss)] = 0
    while stack:
        node, it = stack[-1]
        child = next(it, None)
        if child is None:
            stack.pop()
            state[id(node)] = 1
            topo.append(node)
            continue
        st = state.get(id(child))
        if st == 0:
            raise ValueError("cycle detected in computation graph")
        if st is None and child.requires_grad:
            state[id(child)] = 0
            stack.append((child, iter(child._parents)))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def finite_difference_check(fn, inputs, h=1e-5, rel_tol=1e-3, max_probes=12, seed=0):
    """Compare analytic gradients of scalar fn(*inputs) against central differences.

    Inputs must be float64 tensors with requires_grad=True. A random subset of
    coordinates per input is probed. Returns the worst relative error.
    """
    loss = fn(*inputs)
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        flat = x.data.reshape(-1)
        grad = (np.zeros_like(flat) if x.grad is None else x.grad.reshape(-1))
        n = flat.size
        probes = rng.choice(n, size=min(max_probes, n), replace=False)
        for i in probes:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(fn(*inputs).data)
            flat[i] = orig - h
            with no_grad():
                fm = float(fn(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            denom = max(abs(num), abs(grad[i]), 1e-8)
            rel = abs(num - grad[i]) / denom
            worst = max(worst, rel)
            if rel >= rel_tol:
                raise AssertionError(
                    f"gradient check failed at coordinate {i}: analytic {grad[i]:.6g} vs numeric {num:.6g} (rel {rel:.3g})"
                )
    return worst
