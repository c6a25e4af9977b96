"""Minimal reverse-mode differentiation over numpy arrays.

Each op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. :func:`backward` walks the
graph in reverse topological order. Everything runs in float64.

Only the ops the victim networks need are provided: ``conv1d``, ``dense``,
``relu``, ``maxpool1d``, ``flatten``, ``batchnorm`` and
``softmax_cross_entropy`` plus a couple of scalar helpers used in tests.
"""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError, StateError

__all__ = [
    "Tensor",
    "Graph",
    "GradientSet",
    "backward",
    "conv1d",
    "dense",
    "relu",
    "maxpool1d",
    "flatten",
    "batchnorm",
    "softmax_cross_entropy",
    "tsum",
    "scale",
    "conv1d_length",
]


class Tensor:
    """A float64 array that may take part in a differentiable computation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def backward(self):
        return backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite values in forward output")
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        _parents=tuple(parents) if needs else (),
        _backward=backward_fn if needs else None,
        op=op,
    )


class Graph:
    """Topologically ordered op records reachable from a scalar loss."""

    def __init__(self, loss):
        if not isinstance(loss, Tensor):
            raise StateError("backward needs the Tensor produced by a forward pass")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss.is_leaf:
            raise StateError(
                "backward called before any differentiable forward pass produced this loss"
            )
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.loss = loss
        self.nodes = order

    def __len__(self):
        return len(self.nodes)


class GradientSet(Mapping):
    """Gradients keyed by the tensor they belong to (identity, not value)."""

    def __init__(self):
        self._grads = {}
        self._tensors = {}

    def _add(self, tensor, grad):
        key = id(tensor)
        if key in self._grads:
            self._grads[key] = self._grads[key] + grad
        else:
            self._grads[key] = grad
            self._tensors[key] = tensor

    def __getitem__(self, tensor):
        try:
            return self._grads[id(tensor)]
        except KeyError:
            raise KeyError(f"no gradient recorded for {tensor!r}") from None

    def __contains__(self, tensor):
        return id(tensor) in self._grads

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self):
        return len(self._grads)


def backward(loss):
    """Backpropagate from scalar ``loss``; fills ``.grad`` on every leaf that requires it."""
    graph = Graph(loss)
    grads = GradientSet()
    grads._add(loss, np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        if node.is_leaf:
            if node.requires_grad:
                node.grad = grads[node]
            continue
        parent_grads = node._backward(grads[node])
        for parent, g in zip(node._parents, parent_grads):
            if g is not None and parent.requires_grad:
                grads._add(parent, g)
    return grads


def conv1d_length(length, kernel, stride=1, padding=0):
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (B, C, L) with ``weight`` (F, C, K)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-d input and kernel, got {x.shape} and {weight.shape}")
    B, C, L = x.shape
    F, Cw, K = weight.shape
    if C != Cw:
        raise ShapeError(f"conv1d: input has {C} channels but kernel expects {Cw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv1d: invalid stride {stride} / padding {padding}")
    if L + 2 * padding < K:
        raise ShapeError(f"conv1d: kernel {K} longer than padded input {L + 2 * padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
    Lout = cols.shape[2]
    out = np.tensordot(cols, weight.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (F,):
            raise ShapeError(f"conv1d: bias shape {bias.shape} does not match {F} filters")
        out = out + bias.data[None, :, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def _backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
        if x.requires_grad:
            dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (B, Lout, C, K)
            dxp = np.zeros(xp.shape)
            span = stride * (Lout - 1) + 1
            for k in range(K):
                dxp[:, :, k:k + span:stride] += dcols[:, :, :, k].transpose(0, 2, 1)
            gx = dxp[:, :, padding:padding + L] if padding else dxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _result(out, parents, _backward, "conv1d")


def dense(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data
        parents.append(bias)

    def _backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    return _result(out, parents, _backward, "dense")


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), [x], lambda g: (g * mask,), "relu")


def maxpool1d(x, width, stride=None):
    x = _as_tensor(x)
    stride = width if stride is None else stride
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool1d: expected (B, C, L) input, got {x.shape}")
    L = x.shape[2]
    if width < 1 or stride < 1 or width > L:
        raise ShapeError(f"maxpool1d: window {width} invalid for input length {L}")
    cols = sliding_window_view(x.data, width, axis=2)[:, :, ::stride, :]
    idx = cols.argmax(axis=-1)
    out = np.take_along_axis(cols, idx[..., None], axis=-1)[..., 0]
    Lout = out.shape[2]

    def _backward(g):
        gx = np.zeros(x.shape)
        span = stride * (Lout - 1) + 1
        for k in range(width):
            gx[:, :, k:k + span:stride] += np.where(idx == k, g, 0.0)
        return (gx,)

    return _result(out, [x], _backward, "maxpool1d")


def flatten(x):
    x = _as_tensor(x)
    shape = x.shape
    return _result(x.data.reshape(shape[0], -1), [x], lambda g: (g.reshape(shape),), "flatten")


def _unbroadcast(grad, shape):
    axes = tuple(i for i, (a, b) in enumerate(zip(grad.shape, shape)) if b == 1 and a != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape) if axes else grad.reshape(shape)


def batchnorm(x, gamma, beta, eps=1e-5, axes=None, mean=None, var=None):
    """Standardize ``x`` over ``axes`` then apply ``gamma * x_hat + beta``.

    ``axes`` defaults to every axis except the channel axis 1. With ``mean``
    and ``var`` left as None the batch statistics are used and differentiated
    through; passing stored statistics turns the op into a fixed affine map.
    ``gamma``/``beta`` must broadcast against ``x`` with singleton reduced axes.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if axes is None:
        axes = (0,) + tuple(range(2, x.data.ndim))
    axes = tuple(axes)
    stat_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    for name, t in (("gamma", gamma), ("beta", beta)):
        try:
            np.broadcast_shapes(t.shape, stat_shape)
        except ValueError:
            raise ShapeError(f"batchnorm: {name} shape {t.shape} incompatible with {stat_shape}") from None
        if len(t.shape) != len(stat_shape):
            raise ShapeError(f"batchnorm: {name} must have {len(stat_shape)} dims, got {t.shape}")
    batch_mode = mean is None
    if batch_mode:
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        v = (centered * centered).mean(axis=axes, keepdims=True)
    else:
        mu = np.asarray(mean, dtype=np.float64).reshape(stat_shape)
        v = np.asarray(var, dtype=np.float64).reshape(stat_shape)
        centered = x.data - mu
    inv = 1.0 / np.sqrt(v + eps)
    xhat = centered * inv
    out = gamma.data * xhat + beta.data
    n = int(np.prod([x.shape[a] for a in axes]))

    def _backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            if batch_mode:
                gx = (inv / n) * (
                    n * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, [x, gamma, beta], _backward, "batchnorm")


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}"
        )
    B, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ShapeError(f"softmax_cross_entropy: labels must lie in [0, {C - 1}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def _backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return _result(np.asarray(loss), [logits], _backward, "softmax_cross_entropy")


def tsum(x, weights=None):
    """Sum of all entries, optionally weighted elementwise by a constant array."""
    x = _as_tensor(x)
    shape = x.shape
    if weights is None:
        return _result(np.asarray(x.data.sum()), [x], lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != shape:
        raise ShapeError(f"sum: weights {w.shape} do not match input {shape}")
    return _result(np.asarray(np.sum(x.data * w)), [x], lambda g: (g * w,), "sum")


def scale(x, c):
    x = _as_tensor(x)
    c = float(c)
    return _result(x.data * c, [x], lambda g: (g * c,), "scale")
