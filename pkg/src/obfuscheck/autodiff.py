"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Supports exactly the primitives the small classifiers need: matrix multiply,
bias add, stride-1 zero-padded 2-D convolution, ReLU, 2x2 average pooling,
flatten, elementwise add/scale, noise injection, and softmax cross-entropy.
The sign function and box projection used by attacks are deliberately NOT
primitives here; they are applied outside the tape.

Forward/training arithmetic is float32.  Gradient checking runs the same
graph in float64 (callers build float64 leaves) so a 1e-4 relative tolerance
against central differences is meaningful.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError, StateError

# When True, every primitive asserts its output is finite.  Cheap insurance
# for tests; off by default in hot loops.
CHECK_FINITE = False


class Tensor:
    """A dense n-d array plus the graph bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None,
                 op="leaf", dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"


def _make(data, parents, backward_fn, op):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output of {op!r}")
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req,
                  parents=parents if req else (),
                  backward_fn=backward_fn if req else None, op=op)


def _topo_order(root):
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Fill ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively across fan-out.  ``loss`` must be scalar.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise StateError("backward called on a tensor with no recorded graph")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node.backward_fn is None:
            # leaf
            node.grad = g if node.grad is None else node.grad + g
            continue
        if node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise ShapeError(
                    f"backward of {node.op!r} produced grad shape {pg.shape} "
                    f"for parent shape {p.data.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bw, "matmul")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias: b broadcasts over the batch axis, and over
    spatial axes for [B,C,H,W] inputs (b has shape [C])."""
    if x.data.ndim == 2:
        if b.data.shape != (x.data.shape[1],):
            raise ShapeError(f"bias_add: bias {b.data.shape} vs features {x.data.shape}")
        out = x.data + b.data

        def bw(g):
            return g, g.sum(axis=0)
    elif x.data.ndim == 4:
        if b.data.shape != (x.data.shape[1],):
            raise ShapeError(f"bias_add: bias {b.data.shape} vs channels {x.data.shape}")
        out = x.data + b.data[None, :, None, None]

        def bw(g):
            return g, g.sum(axis=(0, 2, 3))
    else:
        raise ShapeError(f"bias_add: unsupported input rank {x.data.ndim}")
    return _make(out, (x, b), bw, "bias_add")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (same shapes)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    return _make(a.data * b.data, (a, b),
                 lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = x.data.dtype.type(s)
    return _make(x.data * s, (x,), lambda g: (g * s,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def flatten(x: Tensor) -> Tensor:
    shape = x.data.shape
    out = x.data.reshape(shape[0], -1)
    return _make(out, (x,), lambda g: (g.reshape(shape),), "flatten")


def avg_pool2(x: Tensor) -> Tensor:
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        q = g.dtype.type(0.25)
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (up * q,)

    return _make(out, (x,), bw, "avg_pool2")


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding.

    x: [B, C, H, W], w: [O, C, kh, kw] -> [B, O, H+2p-kh+1, W+2p-kw+1].
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.data.shape} and {w.data.shape}")
    kh, kw = w.data.shape[2], w.data.shape[3]
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho = xp.shape[2] - kh + 1
    wo = xp.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # [B,C,Ho,Wo,kh,kw] x [O,C,kh,kw] contracted over (C,kh,kw)
    out = np.tensordot(win, w.data, axes=((1, 4, 5), (1, 2, 3)))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)).astype(x.data.dtype, copy=False)

    def bw(g):
        grad_w = np.tensordot(g, win, axes=((0, 2, 3), (0, 2, 3)))
        grad_w = grad_w.astype(w.data.dtype, copy=False)
        grad_xp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                grad_xp[:, :, u:u + ho, v:v + wo] += np.tensordot(
                    g, w.data[:, :, u, v], axes=((1,), (0,))).transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, p:p + x.data.shape[2], p:p + x.data.shape[3]] if p else grad_xp
        return grad_x, grad_w

    return _make(out, (x, w), bw, "conv2d")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch, log-sum-exp stabilized."""
    y = np.asarray(labels)
    if y.ndim == 0:
        y = y[None]
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes], got {z.shape}")
    n, k = z.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} vs batch {n}")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"label out of range [0, {k})")
    m = z.max(axis=1, keepdims=True)
    s = z - m
    lse = np.log(np.exp(s).sum(axis=1)) + m[:, 0]
    losses = lse - z[np.arange(n), y]
    out = losses.mean().astype(z.dtype)

    def bw(g):
        p = np.exp(s)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1
        return (p * (g / z.dtype.type(n)), )

    return _make(out, (logits,), bw, "cross_entropy")


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements (scalar)."""
    return _make(x.data.sum(), (x,), lambda g: (np.full_like(x.data, g),), "sum")


# ---------------------------------------------------------------------------
# gradient checking

def numeric_gradient(f, arrays, index, eps=1e-5):
    """Central-difference gradient of scalar f(*arrays) w.r.t. arrays[index]."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + eps
        fp = float(f(*arrays))
        target[idx] = orig - eps
        fm = float(f(*arrays))
        target[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
        it.iternext()
    return grad


def check_gradients(build_loss, arrays, tol=1e-4, eps=1e-5):
    """Compare analytic vs central-difference gradients in float64.

    ``build_loss(*tensors)`` must return a scalar Tensor given float64 leaf
    Tensors.  Returns a dict: name index -> max relative error, plus 'ok'.
    """
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = build_loss(*leaves)
    backward(loss)

    def f(*arrs):
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        return build_loss(*ts).data

    errors = []
    for i, leaf in enumerate(leaves):
        num = numeric_gradient(f, arrays, i, eps=eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(num)
        denom = np.maximum(1.0, np.abs(num))
        errors.append(float(np.max(np.abs(ana - num) / denom)) if num.size else 0.0)
    return {"max_rel_errors": errors, "ok": all(e < tol for e in errors), "tol": tol}
