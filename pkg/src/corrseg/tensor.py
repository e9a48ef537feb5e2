"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything is float64 and tape-style: each op appends a node (the returned
Tensor) whose id is larger than the ids of its inputs, so insertion order is
already a topological order and `backward` is a single reverse sweep.
The graph is rebuilt from scratch every training step.
"""

from __future__ import annotations

import itertools
import numbers

import numpy as np

_node_counter = itertools.count()

# When False, ops produce detached constants (no parents, no backward closures).
_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (inference / teacher passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(arr, op):
    # a non-finite entry makes the sum non-finite; one reduction beats isfinite(all)
    if not np.isfinite(arr.sum()):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A float64 array plus an optional position in the current computation graph."""

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_node_counter)
        self._parents = ()
        self._backward = None  # fn(upstream grad) -> tuple of parent grads (or None)

    # internal constructor for op results
    @classmethod
    def _from_op(cls, data, parents, backward, op_name):
        # contiguity keeps downstream reshapes and pads from paying for views
        data = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(data, op_name)
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # ---- graph traversal ----

    def backward(self):
        """Reverse sweep from a scalar loss, accumulating grads on requires_grad leaves."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss tensor")
        # collect reachable subgraph
        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t.node_id in nodes:
                continue
            nodes[t.node_id] = t
            stack.extend(t._parents)
        grads = {self.node_id: np.ones_like(self.data)}
        # insertion order is topological, so reversed id order is safe
        for node_id in sorted(nodes, reverse=True):
            t = nodes[node_id]
            g = grads.pop(node_id, None)
            if g is None:
                continue
            if t._backward is not None:
                for parent, pg in zip(t._parents, t._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if parent.node_id in grads:
                        grads[parent.node_id] = grads[parent.node_id] + pg
                    else:
                        grads[parent.node_id] = pg
            elif t.requires_grad:
                # leaf: accumulate (+=) into persistent grad
                if t.grad is None:
                    t.grad = g.copy()
                else:
                    t.grad = t.grad + g

    # ---- operator sugar ----

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, numbers.Number):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---- elementwise ops ----

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return Tensor._from_op(a.data * b.data, (a, b),
                           lambda g: (g * b.data, g * a.data), "mul")


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    return Tensor._from_op(a.data * s, (a,), lambda g: (g * s,), "scale")


def square(a):
    a = as_tensor(a)
    return Tensor._from_op(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,), "square")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: non-positive input")
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return Tensor._from_op(out_data, (a,), lambda g: (g * out_data,), "exp")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tsum(a):
    a = as_tensor(a)
    return Tensor._from_op(np.sum(a.data), (a,),
                           lambda g: (np.full_like(a.data, np.asarray(g).item()),),
                           "sum")


def tmean(a):
    a = as_tensor(a)
    n = a.data.size
    return Tensor._from_op(np.mean(a.data), (a,),
                           lambda g: (np.full_like(a.data, np.asarray(g).item() / n),), "mean")


def frobenius_sq(a):
    """Sum of squared entries (entry-wise squared L2 norm)."""
    a = as_tensor(a)
    return Tensor._from_op(np.sum(a.data ** 2), (a,),
                           lambda g: (2.0 * np.asarray(g).item() * a.data,), "frobenius_sq")


# ---- shape ops ----

def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return Tensor._from_op(a.data.reshape(shape), (a,),
                           lambda g: (g.reshape(old),), "reshape")


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-d tensor")
    return Tensor._from_op(a.data.T, (a,), lambda g: (g.T,), "transpose")


def concat_rows(tensors):
    """Stack 2-d tensors along rows; backward splits the upstream grad."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[0] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=0))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=0),
                           tuple(tensors), backward, "concat_rows")


def take_rows(a, idx):
    """Gather rows of a 2-d tensor; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    n_rows = a.data.shape[0]

    def backward(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return Tensor._from_op(a.data[idx], (a,), backward, "take_rows")


# ---- linear algebra ----

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def softmax_rows(a):
    """Row-wise softmax of an N x C tensor, stabilized by row-max subtraction."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = np.sum(g * s, axis=1, keepdims=True)
        return ((g - dot) * s,)

    return Tensor._from_op(s, (a,), backward, "softmax_rows")


def log_softmax_rows(a):
    """Row-wise log-softmax; avoids log(0) for extreme logits."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return Tensor._from_op(out, (a,), backward, "log_softmax_rows")


_NORM_EPS = 1e-12


def l2_normalize_rows(a):
    """Divide each row by max(its L2 norm, 1e-12)."""
    a = as_tensor(a)
    raw = np.linalg.norm(a.data, axis=1, keepdims=True)
    n = np.maximum(raw, _NORM_EPS)
    clamped = raw < _NORM_EPS
    y = a.data / n

    def backward(g):
        dot = np.sum(g * a.data, axis=1, keepdims=True)
        da = g / n - a.data * dot / n ** 3
        if np.any(clamped):
            # below the clamp the norm is constant, only the direct term survives
            da = np.where(clamped, g / n, da)
        return (da,)

    return Tensor._from_op(y, (a,), backward, "l2_normalize_rows")


def normalize_rows_sum(a):
    """Divide each row by max(its sum, 1e-12); used to renormalize warped probabilities."""
    a = as_tensor(a)
    s = np.maximum(a.data.sum(axis=1, keepdims=True), _NORM_EPS)
    y = a.data / s

    def backward(g):
        dot = np.sum(g * a.data, axis=1, keepdims=True)
        return (g / s - dot / s ** 2,)

    return Tensor._from_op(y, (a,), backward, "normalize_rows_sum")


def permute(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return Tensor._from_op(a.data.transpose(axes), (a,),
                           lambda g: (g.transpose(inv),), "permute")


def select(a, index):
    """Index along the first axis; backward scatters into zeros."""
    a = as_tensor(a)

    def backward(g):
        da = np.zeros_like(a.data)
        da[index] = g
        return (da,)

    return Tensor._from_op(a.data[index], (a,), backward, "select")


# ---- convolution ----

def _im2col(data, k):
    """(B,C,H,W) -> (B*H*W, C*k*k) patches with 'same' zero padding."""
    b, c, h, w = data.shape
    p = k // 2
    padded = np.pad(data, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    # windows: (B, C, H, W, k, k) -> (B*H*W, C*k*k)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * k * k)


def conv2d(img, weight, bias):
    """'Same'-padded 2-d convolution (cross-correlation), stride 1, odd kernel.

    img: (C,H,W) or batched (B,C,H,W); weight: (O,C,k,k), bias: (O,).
    """
    img, weight, bias = as_tensor(img), as_tensor(weight), as_tensor(bias)
    batched = img.data.ndim == 4
    data = img.data if batched else img.data[None]
    b, c, h, w = data.shape
    o, ci, k, k2 = weight.data.shape
    if ci != c or k != k2 or k % 2 != 1:
        raise ValueError(f"conv2d: bad weight shape {weight.data.shape} "
                         f"for input {img.data.shape}")
    cols = _im2col(data, k)
    out = (cols @ weight.data.reshape(o, -1).T + bias.data) \
        .reshape(b, h, w, o).transpose(0, 3, 1, 2)
    need_dimg = img.requires_grad

    def backward(g):
        g4 = g if batched else g[None]
        g_flat = g4.transpose(0, 2, 3, 1).reshape(b * h * w, o)
        dw = (g_flat.T @ cols).reshape(o, c, k, k)
        db = g_flat.sum(axis=0)
        if not need_dimg:
            return (None, dw, db)
        # input grad: same-conv of upstream grad with the 180-degree-rotated,
        # channel-swapped kernel
        w_rot = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        dimg = (_im2col(np.ascontiguousarray(g4), k) @ w_rot.T) \
            .reshape(b, h, w, c).transpose(0, 3, 1, 2)
        return (dimg if batched else dimg[0], dw, db)

    return Tensor._from_op(out if batched else out[0], (img, weight, bias),
                           backward, "conv2d")
