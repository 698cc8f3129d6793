"""Dense float tensors with reverse-mode autodiff on a flat gradient tape.

Everything downstream (attention, selective state spaces, fused hybrid
blocks, the training harness) runs on this module. The design goals are
desk-scale clarity and exact reproducibility, not throughput:

* arrays are plain numpy, in a single process, at a switchable working
  precision (``single`` or ``double``; default double);
* every operation that touches a gradient-tracking tensor appends one
  node to a flat tape in execution order, which is already a valid
  topological order, so ``backward`` is a single reverse sweep that
  touches each reachable node exactly once;
* any op whose output contains a non-finite value raises immediately
  (``NonFiniteError``) instead of letting NaNs propagate silently;
* randomness comes only from counter-based generators keyed by an
  explicit 64-bit seed plus a stream name, so identical seeds give
  bit-identical results across runs and platforms.

The op set is deliberately small: broadcasting arithmetic, batched
matmul, reductions, cumsum, shape surgery, the handful of activations
the models need, and fused softmax / masked-softmax / cross-entropy
kernels with analytic backward rules. Gradients for broadcast operands
are reduced back to the operand shape.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np


class DimensionError(ValueError):
    """Shapes or axes that cannot be reconciled."""


class ContractError(ValueError):
    """A caller broke an API precondition (not a shape mismatch)."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity."""


_DTYPES = {"single": np.float32, "double": np.float64}
_default_dtype = np.float64

# Fault-injection hook for the self-test of the verification harness.
# "flip-sign" negates every matmul output, which must make the property
# suites fail loudly; None is normal operation.
_chaos_mode: str | None = None


def set_default_dtype(kind: str) -> None:
    global _default_dtype
    if kind not in _DTYPES:
        raise ContractError(f"unknown precision {kind!r}; expected 'single' or 'double'")
    _default_dtype = _DTYPES[kind]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextmanager
def working_precision(kind: str):
    """Temporarily switch the default dtype for new tensors."""
    global _default_dtype
    old = _default_dtype
    set_default_dtype(kind)
    try:
        yield
    finally:
        _default_dtype = old


def set_chaos(mode: str | None) -> None:
    global _chaos_mode
    if mode not in (None, "flip-sign"):
        raise ContractError(f"unknown chaos mode {mode!r}")
    _chaos_mode = mode


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Counter-based generator for stream `name` under a 64-bit seed.

    Philox is keyed by a digest of (seed, name), so streams are stable
    across runs and independent of each other and of call order.
    """
    digest = hashlib.blake2b(
        name.encode("utf-8"), digest_size=16, key=int(seed).to_bytes(8, "little", signed=False)
    ).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class TapeNode:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op                # str, for diagnostics
        self.inputs = inputs        # tuple[Tensor, ...]
        self.out = out              # Tensor
        self.backward = backward    # grad_out -> tuple of grads (or None) per input


class GradTape:
    """Flat record of executed ops, in execution (= topological) order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.enabled = True

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()


_tape = GradTape()


def default_tape() -> GradTape:
    return _tape


def reset_tape() -> None:
    _tape.reset()


@contextmanager
def no_grad():
    """Disable tape recording (inference / decode paths)."""
    old = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = old


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_default_dtype)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    # -- introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar (definitions below) ----------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"op {op!r} produced non-finite values")


def _make(op: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap an op result: finiteness guard, grad flag, tape node."""
    _finite_or_raise(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.node = None
    out.requires_grad = _tape.enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        node = TapeNode(op, inputs, out, backward_fn)
        out.node = node
        _tape.record(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# broadcasting arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        "div", out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluate on the safe side of each branch to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make("silu", a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # log1p(exp(-|x|)) + max(x, 0) is exact and never overflows
    out = np.log1p(np.exp(-np.abs(a.data))) + np.maximum(a.data, 0.0)
    return _make("softplus", out, (a,), lambda g: (g * _sigmoid(a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# matmul, reductions, cumsum
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    if _chaos_mode == "flip-sign":
        out = -out

    def bwd(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), bwd)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bwd(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    out = a.data.mean(axis=ax, keepdims=keepdims)
    count = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))

    def bwd(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make("mean", np.asarray(out), (a,), bwd)


def cumsum(a, axis: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    out = np.cumsum(a.data, axis=ax)

    def bwd(g):
        rev = np.flip(g, axis=ax)
        return (np.flip(np.cumsum(rev, axis=ax), axis=ax),)

    return _make("cumsum", out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape surgery
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    src = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out = a.data.swapaxes(ax1, ax2)
    return _make("swapaxes", out, (a,), lambda g: (g.swapaxes(ax1, ax2),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    src_shape = a.shape

    def bwd(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        full[index] += g
        return (full,)

    return _make("getitem", np.ascontiguousarray(out), (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    ax = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=ax))

    return _make("concat", out, tensors, bwd)


def pad_front(a, count: int, axis: int) -> Tensor:
    """Zero-pad `count` entries at the start of `axis` (causal conv helper)."""
    a = as_tensor(a)
    if count < 0:
        raise ContractError("pad_front needs count >= 0")
    if count == 0:
        return a
    ax = axis % a.ndim
    width = [(0, 0)] * a.ndim
    width[ax] = (count, 0)
    out = np.pad(a.data, width)
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(count, None)
    sl = tuple(sl)
    return _make("pad_front", out, (a,), lambda g: (np.ascontiguousarray(g[sl]),))


# ---------------------------------------------------------------------------
# fused softmax / cross-entropy kernels
# ---------------------------------------------------------------------------


def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError("softmax needs a non-empty last dimension")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), bwd)


def masked_softmax_lastdim(a, mask: np.ndarray) -> Tensor:
    """Softmax over the visible entries of the last dim.

    `mask` is a boolean numpy array broadcastable to `a`; False lanes get
    exactly-zero weight (they receive an additive -inf on the internal
    scratch buffer, never on a tensor value). Every row must keep at
    least one visible entry.
    """
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError("softmax needs a non-empty last dimension")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=-1).all():
        raise ContractError("masked softmax row with no visible entries")
    scratch = np.where(mask, a.data, -np.inf)
    shifted = scratch - scratch.max(axis=-1, keepdims=True)
    e = np.exp(shifted)            # exp(-inf) underflows to exactly 0
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make("masked_softmax", out, (a,), bwd)


def cross_entropy_logits(logits, targets: np.ndarray, position_mask: np.ndarray | None = None) -> Tensor:
    """Mean token NLL of integer `targets` under `logits` (..., vocab).

    `position_mask` (broadcastable to targets, boolean) restricts which
    positions count; the mean is over counted positions.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} vs logits {logits.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise ContractError("targets must be integer token ids")
    vocab = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise ContractError("target id outside vocab")
    if position_mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(position_mask, dtype=bool), targets.shape)
    count = int(mask.sum())
    if count == 0:
        raise ContractError("cross entropy over zero positions")

    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(x - m).sum(axis=-1))
    picked = np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]
    nll = (lse - picked) * mask
    out = np.asarray(nll.sum() / count)

    def bwd(g):
        p = np.exp(x - lse[..., None])
        np.subtract.at(p, (*np.indices(targets.shape), targets), 1.0)
        return (p * (mask[..., None] * (float(g) / count)),)

    return _make("cross_entropy", out, (logits,), bwd)


def embedding_lookup(weight, ids: np.ndarray) -> Tensor:
    """Row gather: weight (vocab, dim), ids integer array (...)."""
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("token ids must be integers")
    if weight.ndim != 2:
        raise DimensionError("embedding weight must be 2-d")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError("token id outside vocab")
    out = weight.data[ids]

    def bwd(g):
        full = np.zeros(weight.shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make("embedding", out, (weight,), bwd)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dT into `.grad` of every reachable tensor.

    `loss` must be scalar. One reverse sweep over the tape; each node
    reachable from the loss is applied exactly once.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return

    reachable: set[int] = set()
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if id(node) in reachable:
            continue
        reachable.add(id(node))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in reachable:
                stack.append(t.node)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_tape.nodes):
        if id(node) not in reachable:
            continue
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        if node.out.requires_grad:
            node.out.grad = g_out if node.out.grad is None else node.out.grad + g_out
        input_grads = node.backward(g_out)
        for t, g in zip(node.inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad = g if t.grad is None else t.grad + g
            else:
                key = id(t)
                grads[key] = g if key not in grads else grads[key] + g
