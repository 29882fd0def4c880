"""Minimal reverse-mode differentiation over numpy arrays.

Each op computes its output eagerly and, when gradients are enabled, stores a
closure mapping the output gradient to gradients of its inputs. Only the ops
needed by the U-Net and the CNN baseline are provided; several are fused
(conv + bias, group norm, attention) so their backward passes run as single
kernels.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

_state = {"grad": True, "check_finite": False}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def detect_anomaly():
    """Raise as soon as any op produces a non-finite value."""
    prev = _state["check_finite"]
    _state["check_finite"] = True
    try:
        yield
    finally:
        _state["check_finite"] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.data.shape})"

    def backward(self, grad=None):
        """Accumulate ``d self / d leaf`` into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=requires_grad, name=name)


def _make(out, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _state["check_finite"] and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite output from {op}")
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    t = Tensor(out, requires_grad=needs, name=op)
    if needs:
        t._parents = tuple(parents)
        t._backward = backward
    return t


# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def silu(x: Tensor) -> Tensor:
    y, s = kernels.silu_forward(x.data)
    xd = x.data
    return _make(y, (x,), lambda g: (kernels.silu_backward(g, xd, s),), "silu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def add_channel(x: Tensor, v: Tensor) -> Tensor:
    """``(B, C, L) + (B, C)`` broadcast along the temporal axis."""
    return _make(
        x.data + v.data[:, :, None], (x, v), lambda g: (g, g.sum(axis=2)), "add_channel"
    )


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis."""
    ca = a.data.shape[1]
    return _make(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
        "concat",
    )


def upsample_nearest(x: Tensor) -> Tensor:
    """Repeat every sample twice along the temporal axis."""
    B, C, L = x.data.shape

    def back(g):
        return (g.reshape(B, C, L, 2).sum(axis=3),)

    return _make(np.repeat(x.data, 2, axis=2), (x,), back, "upsample")


def pad_circular(x: Tensor, p: int) -> Tensor:
    """Wrap ``p`` samples from each end of the temporal axis onto the other."""
    L = x.data.shape[2]
    if not 0 < p <= L:
        raise ValueError(f"circular pad {p} invalid for length {L}")

    def back(g):
        d = g[:, :, p : p + L].copy()
        d[:, :, L - p :] += g[:, :, :p]
        d[:, :, :p] += g[:, :, p + L :]
        return (d,)

    data = np.concatenate([x.data[:, :, L - p :], x.data, x.data[:, :, :p]], axis=2)
    return _make(data, (x,), back, "pad_circular")


def global_avg_pool(x: Tensor) -> Tensor:
    B, C, L = x.data.shape
    return _make(
        x.data.mean(axis=2),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None] / L, (B, C, L)).copy(),),
        "gap",
    )


# parameterized ops


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped ``(out, in)``."""
    xd, wd = x.data, w.data

    def back(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make(xd @ wd.T + b.data, (x, w, b), back, "linear")


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    x_shape = x.data.shape
    y, cols = kernels.conv1d_forward(x.data, w.data, b.data, stride, pad)
    wd = w.data

    def back(g):
        return kernels.conv1d_backward(g, cols, x_shape, wd, stride, pad)

    return _make(y, (x, w, b), back, "conv1d")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    y, xhat, rstd = kernels.group_norm_forward(x.data, gamma.data, beta.data, groups, eps)
    gd = gamma.data

    def back(g):
        return kernels.group_norm_backward(g, xhat, rstd, gd, groups)

    return _make(y, (x, gamma, beta), back, "group_norm")


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic ``(B, L_q, L_k)`` softmax of scaled dot products."""
    scale = 1.0 / math.sqrt(q.shape[1])
    s = np.matmul(q.transpose(0, 2, 1), k) * scale
    s -= s.max(axis=2, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=2, keepdims=True)
    return s


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head self-attention over time; inputs and output are ``(B, C, L)``."""
    qd, kd, vd = q.data, k.data, v.data
    a = attention_weights(qd, kd)
    out = np.matmul(vd, a.transpose(0, 2, 1))
    scale = 1.0 / math.sqrt(qd.shape[1])

    def back(g):
        dv = np.matmul(g, a)
        da = np.matmul(g.transpose(0, 2, 1), vd)
        ds = a * (da - (da * a).sum(axis=2, keepdims=True))
        ds *= scale
        dq = np.matmul(kd, ds.transpose(0, 2, 1))
        dk = np.matmul(qd, ds)
        return dq, dk, dv

    return _make(out, (q, k, v), back, "attention")


# losses (reduced in float64)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred.data.astype(np.float64) - target
    n = diff.size
    loss = np.array(np.mean(diff * diff))

    def back(g):
        return ((2.0 * float(g) / n) * diff).astype(pred.data.dtype)

    return _make(loss, (pred,), lambda g: (back(g),), "mse")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = np.array(-logp[np.arange(n), labels].mean())

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((float(g) / n) * p).astype(logits.data.dtype)

    return _make(loss, (logits,), lambda g: (back(g),), "cross_entropy")
