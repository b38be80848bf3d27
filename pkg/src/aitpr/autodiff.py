"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything downstream (the decoder, the training loop) is built on this
module.  The design is deliberately small: immutable row-major float64
arrays, a per-pass tape (:class:`Graph`) recording ops in creation order,
and a reverse sweep that accumulates gradients.  Only the operations the
decoder equations actually need are provided; there is no broadcasting
beyond vector/matrix products.

Tapes are thread-local: separate passes may run concurrently as long as
each stays on its own thread.  Tensors themselves are safe to share
read-only.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericError

_tls = threading.local()


def _active_graph():
    return getattr(_tls, "graph", None)


class Tensor:
    """A shaped block of float64 values, treated as immutable once built.

    ``grad`` is populated by :meth:`Graph.backward` for every tensor that
    required gradients during the recorded pass.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data):
    """Wrap data as a constant (non-differentiable) tensor."""
    return Tensor(data, requires_grad=False)


def parameter(data):
    """Wrap data as a learnable leaf tensor."""
    return Tensor(data, requires_grad=True)


class _Node:
    __slots__ = ("nid", "op", "out", "bwd")

    def __init__(self, nid, op, out, bwd):
        self.nid = nid
        self.op = op
        self.out = out
        self.bwd = bwd


class Graph:
    """Tape of op records, in creation order (hence topological).

    Use as a context manager around a forward pass; then call
    :meth:`backward` on the scalar result.
    """

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        self._prev = _active_graph()
        _tls.graph = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.graph = self._prev
        return False

    def _record(self, op, out, bwd):
        nid = len(self.nodes)
        if not np.isfinite(out.data).all():
            raise NumericError(f"non-finite values produced by node {nid} ({op})")
        self.nodes.append(_Node(nid, op, out, bwd))

    def backward(self, loss, params=()):
        """Reverse sweep from ``loss``; fills ``.grad`` on reached tensors.

        Any tensor in ``params`` that never entered the graph gets a zero
        gradient of its own shape, so callers can rely on ``p.grad`` being
        present for every parameter after the call.
        """
        if loss.data.shape != ():
            raise DimensionError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        for p in params:
            p.grad = None
        grads = {loss: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out, None)
            if g is None:
                continue
            node.out.grad = g
            node.bwd(g, grads)
        # What remains are leaf tensors (never an op output).
        for t, g in grads.items():
            if t.requires_grad:
                t.grad = g
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _accumulate(grads, t, g):
    # Gradients are keyed by tensor identity; fan-out sums here.
    if not t.requires_grad:
        return
    if t in grads:
        grads[t] = grads[t] + g
    else:
        grads[t] = g


def _make(op, data, parents, bwd):
    graph = _active_graph()
    requires = graph is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        graph._record(op, out, bwd)
    return out


@contextmanager
def no_grad():
    """Disable recording; ops compute values only."""
    prev = _active_graph()
    _tls.graph = None
    try:
        yield
    finally:
        _tls.graph = prev


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product for 1-D and 2-D operands (numpy contraction rules)."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 1-D/2-D only, got {ad.shape} vs {bd.shape}")
    if ad.shape[-1] != (bd.shape[0] if bd.ndim >= 1 else None):
        raise DimensionError(f"matmul inner dims disagree: {ad.shape} vs {bd.shape}")
    out_data = ad @ bd

    def bwd(g, grads):
        if a.requires_grad:
            if ad.ndim == 2 and bd.ndim == 2:
                ga = g @ bd.T
            elif ad.ndim == 1 and bd.ndim == 2:
                ga = g @ bd.T
            elif ad.ndim == 2 and bd.ndim == 1:
                ga = np.outer(g, bd)
            else:
                ga = g * bd
            _accumulate(grads, a, ga)
        if b.requires_grad:
            if ad.ndim == 2 and bd.ndim == 2:
                gb = ad.T @ g
            elif ad.ndim == 1 and bd.ndim == 2:
                gb = np.outer(ad, g)
            elif ad.ndim == 2 and bd.ndim == 1:
                gb = g @ ad
            else:
                gb = g * ad
            _accumulate(grads, b, gb)

    return _make("matmul", out_data, (a, b), bwd)


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op} needs equal shapes: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def bwd(g, grads):
        _accumulate(grads, a, g)
        _accumulate(grads, b, g)

    return _make("add", a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; realizes the decoder's elementwise gating."""
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bwd(g, grads):
        _accumulate(grads, a, g * bd)
        _accumulate(grads, b, g * ad)

    return _make("mul", ad * bd, (a, b), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g, grads):
        _accumulate(grads, a, g * (1.0 - out_data * out_data))

    return _make("tanh", out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out_data = expit(a.data)

    def bwd(g, grads):
        _accumulate(grads, a, g * out_data * (1.0 - out_data))

    return _make("sigmoid", out_data, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Stable softmax over a 1-D tensor (max-subtracted)."""
    if a.data.ndim != 1 or a.data.size == 0:
        raise DimensionError(f"softmax needs a nonempty 1-D tensor, got shape {a.data.shape}")
    shifted = a.data - a.data.max()
    e = np.exp(shifted)
    out_data = e / e.sum()

    def bwd(g, grads):
        _accumulate(grads, a, out_data * (g - float(g @ out_data)))

    return _make("softmax", out_data, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.data.size == 0:
        raise DimensionError(f"log_softmax needs a nonempty 1-D tensor, got shape {a.data.shape}")
    shifted = a.data - a.data.max()
    lse = np.log(np.exp(shifted).sum())
    out_data = shifted - lse
    sm = np.exp(out_data)

    def bwd(g, grads):
        _accumulate(grads, a, g - sm * g.sum())

    return _make("log_softmax", out_data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g, grads):
        _accumulate(grads, a, np.full(a.data.shape, float(g)))

    return _make("sum", np.asarray(a.data.sum()), (a,), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g, grads):
        _accumulate(grads, a, g * c)

    return _make("scale", a.data * c, (a,), bwd)


def pick(a: Tensor, i: int) -> Tensor:
    """Select entry ``i`` of a 1-D tensor as a scalar."""
    if a.data.ndim != 1:
        raise DimensionError(f"pick needs a 1-D tensor, got shape {a.data.shape}")

    def bwd(g, grads):
        ga = np.zeros_like(a.data)
        ga[i] = float(g)
        _accumulate(grads, a, ga)

    return _make("pick", np.asarray(a.data[i]), (a,), bwd)


def row(a: Tensor, i: int) -> Tensor:
    """Select row ``i`` of a matrix; the embedding-table lookup."""
    if a.data.ndim != 2:
        raise DimensionError(f"row needs a 2-D tensor, got shape {a.data.shape}")

    def bwd(g, grads):
        ga = np.zeros_like(a.data)
        ga[i] = g
        _accumulate(grads, a, ga)

    return _make("row", a.data[i].copy(), (a,), bwd)


_ELEMENTWISE = {"add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch to a pointwise op by name; binary ops need equal shapes."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "mul"):
        if b is None:
            raise ValueError(f"elementwise {op!r} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"elementwise {op!r} is unary")
    return fn(a)


def grad_check(f, params, eps=1e-5, _corrupt=0.0):
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a deterministic zero-argument callable returning a scalar
    Tensor built from ``params``.  The relative error per entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.

    ``_corrupt`` offsets every analytic gradient entry; it exists solely
    so negative-control tests can prove the check would catch a wrong
    backward pass.

    Parameter data is perturbed in place during the sweep and restored
    afterwards; nothing else may touch the params concurrently.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    with Graph() as g:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NumericError("loss is non-finite before backward")
        g.backward(loss, params=params)
    analytic = [p.grad.copy() + _corrupt for p in params]
    worst = 0.0
    with no_grad():
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = an.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                f_plus = float(f().data)
                flat[i] = saved - eps
                f_minus = float(f().data)
                flat[i] = saved
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError(
                        f"non-finite loss while perturbing parameter entry {i}"
                    )
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = aflat[i]
                rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                if rel > worst:
                    worst = rel
    return worst
