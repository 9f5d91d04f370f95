"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
:func:`backward` replays the records in reverse. Outside a tape nothing is
recorded, which is what evaluation and finite differencing want.

Only the handful of primitives the GIN predictor needs are provided. Batched
graph inputs are padded stacks ``[M, N, d]`` with a float vertex mask
``[M, N]``.
"""

from __future__ import annotations

import threading
from functools import lru_cache
from dataclasses import dataclass

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class DegenerateBatch(ValueError):
    pass


class BadRate(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_owns_grad")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._owns_grad = False

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self._owns_grad:
            self.grad[...] = 0.0
        else:
            self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g
        elif self._owns_grad:
            self.grad += g
        else:
            self.grad = self.grad + g

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # sugar for loss arithmetic
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed primitives.

    Usable as a context manager; while active, primitives that touch a tensor
    with ``requires_grad`` append ``(output, backward_fn)`` records.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[tuple[Tensor, callable]] = []

    def __enter__(self):
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._local.stack.pop()

    def __len__(self):
        return len(self.records)

    @staticmethod
    def current():
        stack = getattr(Tape._local, "stack", None)
        return stack[-1] if stack else None


def record(out: Tensor, inputs, backward_fn) -> Tensor:
    """Append ``out`` to the active tape if any input needs a gradient.

    ``backward_fn(g)`` receives d(loss)/d(out) and must accumulate into the
    inputs. Used by every primitive here and by fused primitives elsewhere.
    """
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.records):
        if out.grad is not None:
            fn(out.grad)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- primitives ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return record(out, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return record(out, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return record(out, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return record(out, (a,), lambda g: a._accumulate(g * c))


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    return record(out, (a,), lambda g: a._accumulate(2.0 * g * a.data))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return record(out, (a,), lambda g: a._accumulate(np.broadcast_to(g, a.shape).copy()))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    return record(out, (a,), lambda g: a._accumulate(np.full(a.shape, g / n)))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return record(out, (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D ``a``, or a batched ``a[..., m, k]`` against 2-D ``b``."""
    if a.data.ndim < 2 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    out = Tensor(a.data @ b.data)

    def fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            k = a.shape[-1]
            b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))

    return record(out, (a, b), fn)


def linear(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """``x @ w + bias`` as a single tape record."""
    if x.shape[-1] != w.shape[0] or bias.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear {x.shape} x {w.shape} + {bias.shape}")
    out = Tensor(x.data @ w.data + bias.data)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.reshape(-1, w.shape[0]).T @ g2)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return record(out, (x, w, bias), fn)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, 0.0))
    return record(out, (x,), lambda g: x._accumulate(g * pos))


def gin_aggregate(h: Tensor, adjacency: np.ndarray, eps: float = 0.0) -> Tensor:
    """``(1 + eps) * h_j + sum_{i: A[i, j] = 1} h_i`` for every vertex ``j``.

    ``adjacency`` is a constant ``[N, N]`` or padded ``[M, N, N]`` array.
    """
    at = np.swapaxes(adjacency, -1, -2)
    if at.shape[-1] != h.shape[-2]:
        raise ShapeMismatch(f"adjacency {adjacency.shape} vs features {h.shape}")
    out = Tensor(at @ h.data + (1.0 + eps) * h.data)
    return record(out, (h,), lambda g: h._accumulate(adjacency @ g + (1.0 + eps) * g))


def row_mean(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over the vertex axis: ``[N, d] -> [d]`` or masked ``[M, N, d] -> [M, d]``."""
    if mask is None:
        n = x.shape[-2] if x.data.ndim >= 2 else 0
        if n == 0:
            raise EmptyInput("row_mean needs at least one row")
        out = Tensor(x.data.mean(axis=-2))
        return record(
            out, (x,),
            lambda g: x._accumulate(np.broadcast_to(np.expand_dims(g, -2) / n, x.shape).copy()),
        )
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise EmptyInput("row_mean over a graph with no vertices")
    w = mask / counts[:, None]
    out = Tensor(np.einsum("mn,mnd->md", w, x.data))
    return record(out, (x,), lambda g: x._accumulate(w[:, :, None] * g[:, None, :]))


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, dim: int, gamma: Tensor | None = None, beta: Tensor | None = None):
        return cls(
            gamma if gamma is not None else Tensor(np.ones(dim), requires_grad=True),
            beta if beta is not None else Tensor(np.zeros(dim), requires_grad=True),
            np.zeros(dim),
            np.ones(dim),
        )


def batch_norm(x: Tensor, state: BatchNormState, train: bool,
               mask: np.ndarray | None = None, update_stats: bool = True) -> Tensor:
    """Batch norm over the rows of ``[B, d]``, or over the real vertices of a
    padded ``[M, N, d]`` stack (``mask`` marks real vertices).

    In the padded case all real vertices of all graphs form one batch, and
    padded rows of the output are zero.
    """
    gamma, beta = state.gamma, state.beta
    if not train:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv
        out = Tensor(gamma.data * xhat + beta.data)

        def fn_eval(g):
            if x.requires_grad:
                x._accumulate(g * gamma.data * inv)
            red = tuple(range(g.ndim - 1))
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=red))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=red))

        return record(out, (x, gamma, beta), fn_eval)

    if mask is None:
        if x.data.ndim != 2:
            raise ShapeMismatch("unmasked batch_norm expects [B, d]")
        grouped = x.data[None]
        gmask = np.ones((1, x.shape[0]))
    else:
        d = x.shape[-1]
        grouped = np.ascontiguousarray(x.data).reshape(1, -1, d)
        gmask = mask.reshape(1, -1)
    if gmask.sum() < 2:
        raise DegenerateBatch("batch_norm in train mode needs at least 2 rows")

    xhat, mean, var, inv_std = kernels.group_bn_forward(grouped, gmask, state.eps)
    y = ((gamma.data * xhat + beta.data) * gmask[:, :, None]).reshape(x.shape)
    xhat = xhat.reshape(x.shape)

    if update_stats:
        update_running_stats(state, mean, var, gmask.sum(axis=1))

    out = Tensor(y)

    def fn(g):
        d = g.shape[-1]
        g1 = g.reshape(1, -1, d) * gmask[:, :, None]
        xhat1 = xhat.reshape(1, -1, d)
        if gamma.requires_grad:
            gamma._accumulate((g1 * xhat1).sum(axis=(0, 1)))
        if beta.requires_grad:
            beta._accumulate(g1.sum(axis=(0, 1)))
        if x.requires_grad:
            dx = kernels.group_bn_backward(g1 * gamma.data, xhat1, inv_std, gmask)
            x._accumulate(dx.reshape(x.shape))

    return record(out, (x, gamma, beta), fn)


def update_running_stats(state: BatchNormState, mean: np.ndarray, var: np.ndarray,
                         counts: np.ndarray) -> None:
    """Apply one momentum update per row of ``mean``/``var`` (biased), in order."""
    m = state.momentum
    if len(counts) == 1:
        n = float(counts[0])
        state.running_mean = (1.0 - m) * state.running_mean + m * mean[0]
        state.running_var = (1.0 - m) * state.running_var + (m * n / max(n - 1.0, 1.0)) * var[0]
        return
    n = np.asarray(counts, dtype=np.float64)[:, None]
    unbiased = var * (n / np.maximum(n - 1.0, 1.0))
    weights, decay = _momentum_weights(mean.shape[0], m)
    state.running_mean = decay * state.running_mean + weights @ mean
    state.running_var = decay * state.running_var + weights @ unbiased


@lru_cache(maxsize=256)
def _momentum_weights(k: int, m: float):
    return m * (1.0 - m) ** np.arange(k - 1, -1, -1), (1.0 - m) ** k


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise BadRate(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * keep)
    return record(out, (x,), lambda g: x._accumulate(g * keep))


def pairwise_sqdist(h: Tensor) -> Tensor:
    """``D[i, j] = ||h_i - h_j||^2`` for the rows of ``h[M, d]``."""
    hd = np.ascontiguousarray(h.data)
    out = Tensor(kernels.pairwise_sqdist(hd))

    def fn(g):
        gs = g + g.T
        h._accumulate(2.0 * (gs.sum(axis=1)[:, None] * hd - gs @ hd))

    return record(out, (h,), fn)


def mse(p: Tensor, y) -> Tensor:
    """Mean squared error against a constant or tensor target."""
    y_data = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if p.shape != y_data.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs target {y_data.shape}")
    if p.data.size == 0:
        raise EmptyInput("mse of empty arrays")
    r = p.data - y_data
    out = Tensor(np.mean(r * r))
    n = r.size

    def fn(g):
        if p.requires_grad:
            p._accumulate(2.0 * g * r / n)
        if isinstance(y, Tensor) and y.requires_grad:
            y._accumulate(-2.0 * g * r / n)

    inputs = (p, y) if isinstance(y, Tensor) else (p,)
    return record(out, inputs, fn)


# -- verification -------------------------------------------------------------

def grad_check(f, inputs, eps: float = 1e-6, atol: float | None = None) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` maps the input tensors to a scalar tensor. Entry ``i`` is scored as
    ``|a_i - n_i| / max(|a_i|, |n_i|, atol)``; by default ``atol`` is 1e-6
    times the largest analytic gradient magnitude so that entries that are
    zero up to rounding do not dominate.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    with Tape() as tape:
        loss = f(*inputs)
    backward(loss, tape)
    analytic = [np.zeros(t.shape) if t.grad is None else np.array(t.grad) for t in inputs]

    numeric = []
    for t in inputs:
        est = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(*inputs).data)
            flat[i] = orig - eps
            down = float(f(*inputs).data)
            flat[i] = orig
            est.reshape(-1)[i] = (up - down) / (2.0 * eps)
        numeric.append(est)

    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    if atol is None:
        atol = 1e-6 * max(float(np.abs(a).max(initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))
