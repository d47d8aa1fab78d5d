"""Reverse-mode automatic differentiation over dense float64 arrays.

Everything here is deliberately small: a Tensor wraps a numpy array, every
operation that touches a tensor with ``requires_grad`` appends one node to the
active :class:`Tape`, and ``backward``/``grad`` walk the tape in reverse.

Backward rules for the ops marked ``differentiable_twice`` are themselves
written in terms of tape ops, so gradients of gradients (needed for the
discriminator's gradient penalty) come out of the same machinery.  The ops on
that list are exactly the ones the discriminator forward uses:

    add, sub, mul, div, exp, log, sqrt, sigmoid, elu, matmul, transpose,
    reshape, concat, narrow, sum, gather_rows, scatter_rows, softmax

``cross_entropy`` and the fused causal attention (see attention.py) are
first-order only; ``grad(..., create_graph=True)`` refuses to walk through
them rather than returning silently wrong second derivatives.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class TensorError(Exception):
    """Base class for engine errors."""


class ShapeError(TensorError):
    """Operand shapes incompatible with the operation."""


class DomainError(TensorError):
    """Input outside an operation's mathematical domain (log(<=0), x/0, ...)."""


class ContractError(TensorError):
    """API misuse: non-scalar backward, consumed tape, missing grad, ..."""


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

class TapeNode:
    __slots__ = ("op", "inputs", "output", "tape", "idx")

    def __init__(self, op, inputs, output, tape, idx):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.tape = tape
        self.idx = idx


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False

    def record(self, op, inputs, output):
        node = TapeNode(op, inputs, output, self, len(self.nodes))
        self.nodes.append(node)
        return node

    def __len__(self):
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []
_GRAD_ENABLED = [True]

# NaN/Inf after a forward op is an error condition, checked eagerly.
CHECK_FINITE = True


@contextmanager
def tape():
    """Open a fresh tape; ops recorded inside can be differentiated."""
    t = Tape()
    _TAPE_STACK.append(t)
    try:
        yield t
    finally:
        _TAPE_STACK.pop()


@contextmanager
def no_grad():
    old = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = old


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # np.ndarray of identical shape, lazily allocated
        self.node = None  # TapeNode that produced this tensor, if recorded

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
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -----------------------------------------------------

    def _coerce(self, other):
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, ax1=-2, ax2=-1):
        return transpose(self, ax1, ax2)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data, rng=None, scale=None) -> Tensor:
    """Leaf tensor with requires_grad set; `data` may be a shape tuple."""
    if isinstance(data, tuple):
        if rng is None:
            raise ContractError("shape-based parameter() needs an rng")
        if scale is None:
            fan_in = data[0] if len(data) > 1 else 1
            fan_out = data[-1]
            scale = math.sqrt(2.0 / (fan_in + fan_out))
        data = rng.normal(0.0, scale, size=data)
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# Op base and application
# ---------------------------------------------------------------------------

class Op:
    """One differentiable operation.

    Subclasses are instantiated per application so ``forward`` may stash
    whatever context ``backward`` needs.  ``backward`` receives and returns
    Tensors; rules for ``differentiable_twice`` ops must only call ops that
    are themselves on that list.
    """

    name = "op"
    differentiable_twice = False

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor, inputs, output: Tensor):
        raise NotImplementedError


def apply_op(op: Op, *tensors: Tensor) -> Tensor:
    data = op.forward(*[t.data for t in tensors])
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise DomainError(f"non-finite values produced by '{op.name}'")
    requires = _GRAD_ENABLED[0] and any(t.requires_grad for t in tensors)
    out = Tensor(data, requires_grad=requires)
    if requires:
        t = active_tape()
        if t is not None:
            out.node = t.record(op, tuple(tensors), out)
    return out


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------

def _check_broadcast(sa, sb, opname):
    # Right-aligned expansion: each trailing dim pair equal, or one side is 1
    # (or absent).  This is also what numpy enforces; we just fail with our
    # own error type and message.
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{opname}: cannot broadcast {sa} with {sb}")


def _reduce_like(g: Tensor, shape) -> Tensor:
    """Sum a broadcast gradient back down to `shape` (tape-op composition)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)), keepdims=False)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, tuple(shape))
    return g


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

class _Add(Op):
    name = "add"
    differentiable_twice = True

    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape, self.name)
        return a + b

    def backward(self, grad, inputs, output):
        a, b = inputs
        return _reduce_like(grad, a.shape), _reduce_like(grad, b.shape)


class _Sub(Op):
    name = "sub"
    differentiable_twice = True

    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape, self.name)
        return a - b

    def backward(self, grad, inputs, output):
        a, b = inputs
        return _reduce_like(grad, a.shape), _reduce_like(-grad, b.shape)


class _Mul(Op):
    name = "mul"
    differentiable_twice = True

    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape, self.name)
        return a * b

    def backward(self, grad, inputs, output):
        a, b = inputs
        ga = _reduce_like(mul(grad, b), a.shape) if a.requires_grad else None
        gb = _reduce_like(mul(grad, a), b.shape) if b.requires_grad else None
        return ga, gb


class _Div(Op):
    name = "div"
    differentiable_twice = True

    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape, self.name)
        if np.any(b == 0.0):
            raise DomainError("div: zero divisor")
        return a / b

    def backward(self, grad, inputs, output):
        a, b = inputs
        ga = _reduce_like(div(grad, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _reduce_like(-div(mul(grad, output), b), b.shape)
        return ga, gb


class _Exp(Op):
    name = "exp"
    differentiable_twice = True

    def forward(self, a):
        return np.exp(a)

    def backward(self, grad, inputs, output):
        return (mul(grad, output),)


class _Log(Op):
    name = "log"
    differentiable_twice = True

    def forward(self, a):
        if np.any(a <= 0.0):
            raise DomainError("log: non-positive input")
        return np.log(a)

    def backward(self, grad, inputs, output):
        return (div(grad, inputs[0]),)


class _Sqrt(Op):
    name = "sqrt"
    differentiable_twice = True

    def forward(self, a):
        if np.any(a < 0.0):
            raise DomainError("sqrt: negative input")
        return np.sqrt(a)

    def backward(self, grad, inputs, output):
        return (div(mul(grad, Tensor(0.5)), output),)


class _Sigmoid(Op):
    name = "sigmoid"
    differentiable_twice = True

    def forward(self, a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ez = np.exp(a[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out

    def backward(self, grad, inputs, output):
        return (mul(grad, mul(output, sub(Tensor(1.0), output))),)


class _Elu(Op):
    """elu(x) = x for x > 0, exp(x) - 1 otherwise (alpha = 1)."""

    name = "elu"
    differentiable_twice = True

    def forward(self, a):
        self.pos_mask = (a > 0).astype(np.float64)
        return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))

    def backward(self, grad, inputs, output):
        # d elu/dx = 1 for x > 0, exp(x) = elu(x) + 1 otherwise
        mask = Tensor(self.pos_mask)
        neg = mul(sub(Tensor(1.0), mask), add(output, Tensor(1.0)))
        return (mul(grad, add(mask, neg)),)


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

class _Matmul(Op):
    name = "matmul"
    differentiable_twice = True

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul: operands must have ndim >= 2")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(
                f"matmul: inner dims disagree ({a.shape} @ {b.shape})")
        _check_broadcast(a.shape[:-2], b.shape[:-2], self.name)
        return np.matmul(a, b)

    def backward(self, grad, inputs, output):
        a, b = inputs
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_like(matmul(grad, transpose(b)), a.shape)
        if b.requires_grad:
            gb = _reduce_like(matmul(transpose(a), grad), b.shape)
        return ga, gb


class _Transpose(Op):
    name = "transpose"
    differentiable_twice = True

    def __init__(self, ax1=-2, ax2=-1):
        self.ax1, self.ax2 = ax1, ax2

    def forward(self, a):
        return np.swapaxes(a, self.ax1, self.ax2)

    def backward(self, grad, inputs, output):
        return (transpose(grad, self.ax1, self.ax2),)


class _Reshape(Op):
    name = "reshape"
    differentiable_twice = True

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        return np.reshape(a, self.shape)

    def backward(self, grad, inputs, output):
        return (reshape(grad, inputs[0].shape),)


class _Concat(Op):
    name = "concat"
    differentiable_twice = True

    def __init__(self, axis):
        self.axis = axis

    def forward(self, *arrays):
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad, inputs, output):
        grads = []
        start = 0
        for t in inputs:
            length = t.shape[self.axis]
            grads.append(narrow(grad, self.axis, start, length))
            start += length
        return tuple(grads)


class _Narrow(Op):
    """Contiguous slice of `length` entries along `axis` starting at `start`."""

    name = "narrow"
    differentiable_twice = True

    def __init__(self, axis, start, length):
        self.axis, self.start, self.length = axis, start, length

    def forward(self, a):
        axis = self.axis % a.ndim
        if self.start < 0 or self.start + self.length > a.shape[axis]:
            raise ShapeError(
                f"narrow: [{self.start}:{self.start + self.length}] outside "
                f"axis {axis} of shape {a.shape}")
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(self.start, self.start + self.length)
        return a[tuple(sl)].copy()

    def backward(self, grad, inputs, output):
        a = inputs[0]
        axis = self.axis % a.ndim
        pieces = []
        before = self.start
        after = a.shape[axis] - self.start - self.length
        if before:
            shp = list(a.shape)
            shp[axis] = before
            pieces.append(Tensor(np.zeros(shp)))
        pieces.append(grad)
        if after:
            shp = list(a.shape)
            shp[axis] = after
            pieces.append(Tensor(np.zeros(shp)))
        if len(pieces) == 1:
            return (grad,)
        return (concat(pieces, axis=axis),)


class _GatherRows(Op):
    """Select rows of a 2-D array by integer index (embedding lookup)."""

    name = "gather_rows"
    differentiable_twice = True

    def __init__(self, idx):
        self.idx = np.asarray(idx, dtype=np.int64)

    def forward(self, a):
        if a.ndim != 2:
            raise ShapeError("gather_rows: expected a 2-D table")
        if self.idx.size and (self.idx.min() < 0 or self.idx.max() >= a.shape[0]):
            raise IndexError("gather_rows: index out of range")
        return a[self.idx]

    def backward(self, grad, inputs, output):
        return (scatter_rows(grad, self.idx, inputs[0].shape[0]),)


class _ScatterRows(Op):
    """Adjoint of gather_rows: scatter-add rows into a zero table."""

    name = "scatter_rows"
    differentiable_twice = True

    def __init__(self, idx, n_rows):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.n_rows = n_rows

    def forward(self, a):
        out = np.zeros((self.n_rows,) + a.shape[1:])
        np.add.at(out, self.idx, a)
        return out

    def backward(self, grad, inputs, output):
        return (gather_rows(grad, self.idx),)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

class _Sum(Op):
    name = "sum"
    differentiable_twice = True

    def __init__(self, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, grad, inputs, output):
        a = inputs[0]
        if self.axis is not None and not self.keepdims:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            shp = list(a.shape)
            for ax in axes:
                shp[ax % a.ndim] = 1
            grad = reshape(grad, tuple(shp))
        return (mul(grad, Tensor(np.ones(a.shape))),)


class _Softmax(Op):
    """Max-stabilized softmax along one axis."""

    name = "softmax"
    differentiable_twice = True

    def __init__(self, axis=-1):
        self.axis = axis

    def forward(self, a):
        shifted = a - np.max(a, axis=self.axis, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=self.axis, keepdims=True)

    def backward(self, grad, inputs, output):
        gy = mul(grad, output)
        return (sub(gy, mul(output, tsum(gy, axis=self.axis, keepdims=True))),)


class _CrossEntropy(Op):
    """Mean of -log softmax(logits)[target] over rows; fused for stability.

    First-order only: the backward treats softmax(logits) as a constant
    Jacobian, which is exact for the gradient but not differentiable again.
    """

    name = "cross_entropy"
    differentiable_twice = False

    def __init__(self, targets):
        self.targets = np.asarray(targets, dtype=np.int64)

    def forward(self, logits):
        if logits.ndim != 2:
            raise ShapeError("cross_entropy: logits must be (N, V)")
        n, v = logits.shape
        if self.targets.shape != (n,):
            raise ShapeError("cross_entropy: need one target per row")
        if self.targets.size and (self.targets.min() < 0 or self.targets.max() >= v):
            raise IndexError("cross_entropy: target index out of range")
        shifted = logits - np.max(logits, axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=1))
        picked = shifted[np.arange(n), self.targets]
        self.softmax = np.exp(shifted - lse[:, None])
        return np.asarray(np.mean(lse - picked))

    def backward(self, grad, inputs, output):
        n = self.softmax.shape[0]
        jac = self.softmax.copy()
        jac[np.arange(n), self.targets] -= 1.0
        return (mul(grad, Tensor(jac / n)),)


# ---------------------------------------------------------------------------
# Public functional surface
# ---------------------------------------------------------------------------

def add(a, b):
    return apply_op(_Add(), a, b)


def sub(a, b):
    return apply_op(_Sub(), a, b)


def mul(a, b):
    return apply_op(_Mul(), a, b)


def div(a, b):
    return apply_op(_Div(), a, b)


def exp(a):
    return apply_op(_Exp(), a)


def log(a):
    return apply_op(_Log(), a)


def sqrt(a):
    return apply_op(_Sqrt(), a)


def sigmoid(a):
    return apply_op(_Sigmoid(), a)


def elu(a):
    return apply_op(_Elu(), a)


def matmul(a, b):
    return apply_op(_Matmul(), a, b)


def transpose(a, ax1=-2, ax2=-1):
    return apply_op(_Transpose(ax1, ax2), a)


def reshape(a, shape):
    return apply_op(_Reshape(shape), a)


def concat(tensors, axis=0):
    return apply_op(_Concat(axis), *tensors)


def narrow(a, axis, start, length):
    return apply_op(_Narrow(axis, start, length), a)


def gather_rows(a, idx):
    return apply_op(_GatherRows(idx), a)


def scatter_rows(a, idx, n_rows):
    return apply_op(_ScatterRows(idx, n_rows), a)


def tsum(a, axis=None, keepdims=False):
    return apply_op(_Sum(axis, keepdims), a)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def softmax(a, axis=-1):
    return apply_op(_Softmax(axis), a)


def cross_entropy(logits, targets):
    return apply_op(_CrossEntropy(targets), logits)


def layer_norm_stats(x, axis=-1, eps=1e-5):
    """Normalize along `axis`; returns (normalized, mean, population var).

    Built by composition, so the backward (and double backward) falls out of
    the primitive rules; validated against finite differences in the tests.
    """
    m = tmean(x, axis=axis, keepdims=True)
    centered = sub(x, m)
    var = tmean(mul(centered, centered), axis=axis, keepdims=True)
    normalized = div(centered, sqrt(add(var, Tensor(eps))))
    return normalized, m, var


# ---------------------------------------------------------------------------
# Backward passes
# ---------------------------------------------------------------------------

def _accumulate(store, tensors_by_id, t, g):
    key = id(t)
    tensors_by_id[key] = t
    prev = store.get(key)
    store[key] = g if prev is None else add(prev, g)


def backward(loss: Tensor):
    """Accumulate dLoss/dT into `.grad` of every reachable requires_grad leaf.

    Consumes the tape: a second backward on the same tape raises, per the
    one-pass contract; open a new tape (or call `grad`) for another pass.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            seed = np.ones(loss.shape)
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    t = loss.node.tape
    if t.consumed:
        raise ContractError("backward: tape already consumed; reset required")
    t.consumed = True

    grads: dict[int, Tensor] = {}
    tensors: dict[int, Tensor] = {}
    _accumulate(grads, tensors, loss, Tensor(np.ones(loss.shape)))
    with no_grad():
        for node in reversed(t.nodes[: loss.node.idx + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.op.backward(g, node.inputs, node.output)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                _accumulate(grads, tensors, inp, ig)
    for key, g in grads.items():
        leaf = tensors[key]
        if leaf.node is None and leaf.requires_grad:
            if leaf.grad is None:
                leaf.grad = g.data.copy()
            else:
                leaf.grad = leaf.grad + g.data


def grad(output: Tensor, wrt, create_graph: bool = False):
    """Functional gradients of a scalar `output` w.r.t. the tensors in `wrt`.

    Does not touch `.grad` buffers and does not consume the tape.  With
    ``create_graph=True`` the returned tensors are themselves recorded, so
    they can be differentiated again; walking through an op that is not
    ``differentiable_twice`` then raises instead of silently dropping terms.
    """
    if output.data.size != 1:
        raise ContractError("grad: output must be scalar")
    wrt = list(wrt)
    if output.node is None:
        return [Tensor(np.zeros(w.shape)) for w in wrt]
    t = output.node.tape

    # Restrict the walk to nodes on a path from some wrt tensor to `output`.
    needed_ids = {id(w) for w in wrt}
    node_needed = [False] * (output.node.idx + 1)
    for node in t.nodes[: output.node.idx + 1]:
        if any(id(i) in needed_ids for i in node.inputs):
            needed_ids.add(id(node.output))
            node_needed[node.idx] = True

    grads: dict[int, Tensor] = {}
    tensors: dict[int, Tensor] = {}
    _accumulate(grads, tensors, output, Tensor(np.ones(output.shape)))

    ctx = _nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(t.nodes[: output.node.idx + 1]):
            if not node_needed[node.idx]:
                continue
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            if create_graph and not node.op.differentiable_twice:
                raise ContractError(
                    f"grad(create_graph=True) through first-order op "
                    f"'{node.op.name}'")
            in_grads = node.op.backward(g, node.inputs, node.output)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or id(inp) not in needed_ids:
                    continue
                _accumulate(grads, tensors, inp, ig)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros(w.shape)))
    return out


@contextmanager
def _nullcontext():
    yield


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; one (m, v) pair per registered parameter."""

    def __init__(self, params: dict[str, Tensor], lr=1e-4,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self):
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"optimizer step with missing grads: {missing[:3]}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        return {
            "step_count": self.step_count,
            "m": dict(self.m),
            "v": dict(self.v),
        }

    def load_state(self, state):
        self.step_count = int(state["step_count"])
        for k in self.params:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


def zero_grads(params):
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def finite_difference_grad(f, tensors, index, h=1e-5):
    """Central-difference dF/d(tensors[index]) for scalar-valued f.

    Evaluations run with autodiff available (no ambient tape, so nothing is
    recorded) because f may itself need an inner `grad` call.
    """
    base = tensors[index].data
    out = np.zeros(base.shape)
    flat = base.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(*tensors).item()
        flat[i] = orig - h
        down = f(*tensors).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return out


def gradcheck(f, tensors, h=1e-5, tol=1e-4):
    """Compare analytic and central-difference grads.

    Returns (ok, max_rel_err) where the error is the max absolute deviation
    scaled by the gradient magnitude (floored at 1 to keep near-zero
    gradients from inflating the ratio).
    """
    with tape():
        out = f(*tensors)
        analytic = grad(out, tensors)
    worst = 0.0
    for i, t in enumerate(tensors):
        numeric = finite_difference_grad(f, tensors, i, h=h)
        a = analytic[i].data
        denom = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(numeric))))
        err = float(np.max(np.abs(a - numeric))) / denom
        worst = max(worst, err)
    return worst < tol, worst
