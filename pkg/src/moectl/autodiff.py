"""Minimal reverse-mode autodiff on dense float64 tensors.

Tensors wrap row-major numpy arrays and record a tape of parent links plus
a backward closure per operation. Gradients accumulate (+=) into Parameter
objects so a multi-term loss can be backpropagated term by term.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError, NumericError, OracleError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / FD probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Immutable dense float64 array participating in the gradient tape."""

    __slots__ = ("data", "parents", "backward_fn")

    def __init__(self, data, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        if _grad_enabled:
            self.parents = parents
            self.backward_fn = backward_fn
        else:
            self.parents = ()
            self.backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar shape {self.shape}")
        return float(self.data.reshape(()))

    def check_finite(self, context: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {context}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    """Named trainable tensor with a persistent accumulated gradient."""

    __slots__ = ("name", "grad", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        # Parameters are graph leaves regardless of grad mode.
        self.data = np.array(value, dtype=np.float64)
        self.parents = ()
        self.backward_fn = None
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0.0


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a broadcasted gradient back to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return Tensor(a.data * s, (a,), lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul requires 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out_data, (a, b), bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose requires 2-D input, got {a.shape}")
    return Tensor(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return Tensor(a.data * mask, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along one axis."""
    a = _as_tensor(a)
    if a.data.size == 0:
        raise DimensionError("softmax on empty tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, (a,), bwd)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g):
        return (np.full(shape, float(g)),)

    return Tensor(a.data.sum(), (a,), bwd)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    shape = a.shape

    def bwd(g):
        return (np.full(shape, float(g) / n),)

    return Tensor(a.data.mean(), (a,), bwd)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bwd(g):
        d = (2.0 * float(g) / n) * diff
        return d, -d

    return Tensor((diff * diff).mean(), (a, b), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, tuple(tensors), bwd)


def gather_rows(table, ids) -> Tensor:
    """Row lookup (embedding); gradient scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor(out_data, (table,), bwd)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C,H,W) -> (C*k*k, H*W) patches for 'same' padding, stride 1."""
    c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    cols = np.empty((c, k * k, h * w))
    for i in range(k):
        for j in range(k):
            cols[:, i * k + j, :] = xp[:, i:i + h, j:j + w].reshape(c, -1)
    return cols.reshape(c * k * k, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    p = k // 2
    xp = np.zeros((c, h + 2 * p, w + 2 * p))
    cols = cols.reshape(c, k * k, h * w)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + h, j:j + w] += cols[:, i * k + j, :].reshape(c, h, w)
    return xp[:, p:p + h, p:p + w]


def conv2d(x, weight, bias, k: int = 3) -> Tensor:
    """Same-padding stride-1 convolution: (Cin,H,W) -> (Cout,H,W)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d expects (C,H,W), got {x.shape}")
    cout, cin, kh, kw = weight.shape
    if kh != k or kw != k or cin != x.shape[0]:
        raise DimensionError(
            f"conv2d weight {weight.shape} incompatible with input {x.shape}")
    c, h, w = x.shape
    cols = _im2col(x.data, k)
    wmat = weight.data.reshape(cout, cin * k * k)
    out_data = (wmat @ cols + bias.data[:, None]).reshape(cout, h, w)

    def bwd(g):
        gflat = g.reshape(cout, h * w)
        gw = (gflat @ cols.T).reshape(weight.shape)
        gb = gflat.sum(axis=1)
        gcols = wmat.T @ gflat
        gx = _col2im(gcols, c, h, w, k)
        return gx, gw, gb

    return Tensor(out_data, (x, weight, bias), bwd)


def backward(loss: Tensor, params=None):
    """Backpropagate d(loss)/d(leaf) into every reachable Parameter.grad.

    `params` is accepted for interface clarity but gradients flow to all
    Parameters on the tape; unreachable ones are simply left untouched.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g.reshape(node.grad.shape)
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = np.array(pg, dtype=np.float64, copy=True)
            else:
                acc += pg


def zero_grads(params):
    for p in params:
        p.zero_grad()


def finite_difference_check(loss_fn, params, step: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is
    |analytic - fd| / (|analytic| + |fd| + 1e-12).
    """
    if step <= 0:
        raise ContractError(f"finite-difference step must be > 0, got {step}")
    params = list(params)

    with no_grad():
        base1 = _as_tensor(loss_fn()).item()
        base2 = _as_tensor(loss_fn()).item()
    if base1 != base2:
        raise OracleError("loss_fn is not deterministic across probe calls")

    zero_grads(params)
    loss = loss_fn()
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                lp = _as_tensor(loss_fn()).item()
                flat[i] = orig - step
                lm = _as_tensor(loss_fn()).item()
                flat[i] = orig
                fd = (lp - lm) / (2.0 * step)
                err = abs(aflat[i] - fd) / (abs(aflat[i]) + abs(fd) + 1e-12)
                worst = max(worst, err)
    return worst
