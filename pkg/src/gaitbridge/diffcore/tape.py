"""Minimal reverse-mode autodiff over dense array ops.

A GradientTape records every operation in evaluation order. backward() replays
the list in reverse, so the replay order is always a valid topological order of
the graph without an explicit sort. Only the ops the training losses need are
provided; everything runs in float64 regardless of how parameters are stored.

Values flowing through ops are Var nodes. Plain numpy arrays and python floats
are accepted anywhere a Var is, and are treated as constants (no gradient).
"""

from __future__ import annotations

import numpy as np


class NonFiniteGradientError(RuntimeError):
    """Raised when a backward pass produces NaN or infinite gradients."""


class Var:
    """One node in the recorded graph: a float64 value and its adjoint."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name=None):
        self.value = value
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)


def _val(x):
    return x.value if isinstance(x, Var) else x


def _accumulate(var, grad):
    if var.grad is None:
        var.grad = grad.copy() if isinstance(grad, np.ndarray) else np.asarray(grad, dtype=np.float64)
    else:
        var.grad = var.grad + grad


def _unbroadcast(grad, shape):
    # Reduce a broadcast gradient back onto the operand's shape.
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def sigmoid(z):
    # tanh form is stable for large |z|.
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


class GradientTape:
    """Records ops in evaluation order and accumulates per-parameter gradients."""

    def __init__(self):
        self._ops = []
        self._watched = {}

    def watch(self, name, value):
        """Register a named parameter array (float64) as a leaf node."""
        if name in self._watched:
            raise ValueError(f"parameter {name!r} watched twice on one tape")
        var = Var(np.asarray(value, dtype=np.float64), name=name)
        self._watched[name] = var
        return var

    def _emit(self, backward_fn):
        self._ops.append(backward_fn)

    # ---- ops ------------------------------------------------------------

    def add(self, a, b):
        av, bv = _val(a), _val(b)
        out = Var(av + bv)

        def bw():
            if out.grad is None:
                return
            if isinstance(a, Var):
                _accumulate(a, _unbroadcast(out.grad, np.shape(av)))
            if isinstance(b, Var):
                _accumulate(b, _unbroadcast(out.grad, np.shape(bv)))

        self._emit(bw)
        return out

    def sub(self, a, b):
        av, bv = _val(a), _val(b)
        out = Var(av - bv)

        def bw():
            if out.grad is None:
                return
            if isinstance(a, Var):
                _accumulate(a, _unbroadcast(out.grad, np.shape(av)))
            if isinstance(b, Var):
                _accumulate(b, _unbroadcast(-out.grad, np.shape(bv)))

        self._emit(bw)
        return out

    def mul(self, a, b):
        av, bv = _val(a), _val(b)
        out = Var(av * bv)

        def bw():
            if out.grad is None:
                return
            if isinstance(a, Var):
                _accumulate(a, _unbroadcast(out.grad * bv, np.shape(av)))
            if isinstance(b, Var):
                _accumulate(b, _unbroadcast(out.grad * av, np.shape(bv)))

        self._emit(bw)
        return out

    def neg(self, a):
        av = _val(a)
        out = Var(-av)

        def bw():
            if out.grad is None:
                return
            if isinstance(a, Var):
                _accumulate(a, -out.grad)

        self._emit(bw)
        return out

    def matmul(self, a, b):
        av, bv = _val(a), _val(b)
        out = Var(av @ bv)

        def bw():
            if out.grad is None:
                return
            if isinstance(a, Var):
                _accumulate(a, out.grad @ bv.T)
            if isinstance(b, Var):
                _accumulate(b, av.T @ out.grad)

        self._emit(bw)
        return out

    def tanh(self, a):
        tv = np.tanh(_val(a))
        out = Var(tv)

        def bw():
            if out.grad is None:
                return
            if isinstance(a, Var):
                _accumulate(a, out.grad * (1.0 - tv * tv))

        self._emit(bw)
        return out

    def exp(self, a):
        ev = np.exp(_val(a))
        out = Var(ev)

        def bw():
            if out.grad is None:
                return
            if isinstance(a, Var):
                _accumulate(a, out.grad * ev)

        self._emit(bw)
        return out

    def softplus(self, a):
        av = _val(a)
        out = Var(np.logaddexp(0.0, av))

        def bw():
            if out.grad is None:
                return
            if isinstance(a, Var):
                _accumulate(a, out.grad * sigmoid(av))

        self._emit(bw)
        return out

    def minimum(self, a, b):
        av, bv = _val(a), _val(b)
        mask = av <= bv
        out = Var(np.where(mask, av, bv))

        def bw():
            if out.grad is None:
                return
            if isinstance(a, Var):
                _accumulate(a, _unbroadcast(out.grad * mask, np.shape(av)))
            if isinstance(b, Var):
                _accumulate(b, _unbroadcast(out.grad * (~mask), np.shape(bv)))

        self._emit(bw)
        return out

    def clip(self, a, lo, hi):
        av = _val(a)
        mask = (av > lo) & (av < hi)
        out = Var(np.clip(av, lo, hi))

        def bw():
            if out.grad is None:
                return
            if isinstance(a, Var):
                _accumulate(a, out.grad * mask)

        self._emit(bw)
        return out

    def sum(self, a, axis=None, keepdims=False):
        av = _val(a)
        out = Var(np.sum(av, axis=axis, keepdims=keepdims))

        def bw():
            if out.grad is None:
                return
            if isinstance(a, Var):
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                _accumulate(a, np.broadcast_to(g, np.shape(av)).astype(np.float64))

        self._emit(bw)
        return out

    def mean(self, a, axis=None):
        av = _val(a)
        n = av.size if axis is None else av.shape[axis]
        return self.mul(self.sum(a, axis=axis), 1.0 / n)

    # ---- reverse pass ----------------------------------------------------

    def backward(self, loss):
        """Seed the scalar loss with gradient 1 and replay ops in reverse."""
        if np.shape(loss.value) != ():
            raise ValueError("backward expects a scalar loss")
        loss.grad = np.float64(1.0)
        for op in reversed(self._ops):
            op()

    def gradients(self, params):
        """Per-name gradients for a {name: array} dict of parameters.

        Parameters the loss never touched get exact zeros. Raises
        NonFiniteGradientError if any touched gradient is NaN/inf, so a
        poisoned update never reaches the optimizer.
        """
        grads = {}
        for name, arr in params.items():
            var = self._watched.get(name)
            if var is None or var.grad is None:
                grads[name] = np.zeros(np.shape(arr), dtype=np.float64)
                continue
            g = np.asarray(var.grad, dtype=np.float64)
            if not np.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        return grads
