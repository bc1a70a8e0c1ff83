"""Dense float64 tensors with a reverse-mode gradient tape and Adam.

Every differentiable op lives in the ``OPS`` registry and builds its own
backward closure; ``backward()`` on a scalar walks the tape and fills
``.grad`` on every tracked leaf it can reach. All buffers are 64-bit,
row-major numpy arrays.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import ContractError, ShapeError

# log() clamps its argument here so cross-entropy stays finite on
# saturated softmax outputs.
LOG_FLOOR = 1e-12

OPS: dict[str, Callable] = {}


def _register(name):
    def deco(fn):
        OPS[name] = fn
        return fn

    return deco


class Tensor:
    """A float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "tracked", "_parents", "_backward")

    def __init__(self, data, tracked: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.tracked = bool(tracked)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Untracked copy sharing no tape history."""
        return Tensor(self.data.copy(), tracked=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    # operator sugar over the registered ops
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return smul(self, float(other))

    def __rmul__(self, other):
        return smul(self, float(other))

    def __neg__(self):
        return smul(self, -1.0)


def tensor(values, tracked: bool = False) -> Tensor:
    return Tensor(values, tracked=tracked)


def param(values) -> Tensor:
    return Tensor(values, tracked=True)


def constant(values) -> Tensor:
    return Tensor(values, tracked=False)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data, tracked=any(p.tracked for p in parents))
    if out.tracked:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.tracked:
        return
    if t.grad is None:
        # copy: g may alias a buffer the caller still owns
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def backward(loss: Tensor) -> None:
    """Populate .grad on every tracked tensor reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.tracked:
        raise ContractError("backward requires a tracked loss tensor")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.tracked and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# op vocabulary
# ---------------------------------------------------------------------------


@_register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(out_data, (a, b), bwd)


@_register("transpose")
def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def bwd(g):
        _accum(a, g.T)

    return _result(a.data.T.copy(), (a,), bwd)


@_register("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bwd)


@_register("subtract")
def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("subtract", a, b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bwd)


@_register("smul")
def smul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        _accum(a, c * g)

    return _result(c * a.data, (a,), bwd)


@_register("hadamard")
def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("hadamard", a, b)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bwd)


@_register("relu")
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), bwd)


@_register("step")
def step(a: Tensor) -> Tensor:
    """ReLU gate (1 where positive): piecewise constant, zero gradient."""

    def bwd(g):
        pass

    return _result((a.data > 0).astype(np.float64), (a,), bwd)


@_register("log")
def log(a: Tensor) -> Tensor:
    clamped = np.maximum(a.data, LOG_FLOOR)
    active = a.data >= LOG_FLOOR

    def bwd(g):
        _accum(a, g * active / clamped)

    return _result(np.log(clamped), (a,), bwd)


@_register("exp")
def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _result(out_data, (a,), bwd)


@_register("softmax_rows")
def softmax_rows(a: Tensor, mask=None) -> Tensor:
    """Row softmax; entries where `mask` is falsy are excluded (exactly 0).

    A fully masked row has no valid normalization and is a contract
    violation: callers are expected to guarantee at least a self-loop.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got shape {a.shape}")
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != a.shape:
            raise ShapeError(
                f"softmax_rows: mask shape {keep.shape} does not match {a.shape}"
            )
        if not keep.any(axis=1).all():
            row = int(np.flatnonzero(~keep.any(axis=1))[0])
            raise ContractError(f"softmax_rows: row {row} is fully masked")
        scores = np.where(keep, a.data, -np.inf)
    else:
        keep = None
        scores = a.data
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    if keep is not None:
        e = np.where(keep, e, 0.0)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        _accum(a, s * (g - inner))

    return _result(s, (a,), bwd)


@_register("trace")
def trace(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"trace: expected a square matrix, got shape {a.shape}")
    n = a.shape[0]

    def bwd(g):
        _accum(a, g[0] * np.eye(n))

    return _result(np.array([np.trace(a.data)]), (a,), bwd)


@_register("frobenius_sq")
def frobenius_sq(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, 2.0 * g[0] * a.data)

    return _result(np.array([float(np.sum(a.data * a.data))]), (a,), bwd)


@_register("mean")
def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Mean over all entries (axis=None, scalar), columns (0) or rows (1)."""
    if axis not in (None, 0, 1):
        raise ShapeError(f"mean: axis must be None, 0 or 1, got {axis!r}")
    if axis is None:
        out_data = np.array([a.data.mean()])
        count = a.data.size
    else:
        if a.data.ndim != 2:
            raise ShapeError(f"mean: axis={axis} requires a matrix, got {a.shape}")
        out_data = a.data.mean(axis=axis, keepdims=True)
        count = a.shape[axis]

    def bwd(g):
        _accum(a, np.broadcast_to(g / count, a.shape).copy() if axis is not None
               else np.full(a.shape, g[0] / count))

    return _result(out_data, (a,), bwd)


@_register("row_norm")
def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of each row, shape (n, 1)."""
    if a.data.ndim != 2:
        raise ShapeError(f"row_norm: expected a matrix, got shape {a.shape}")
    out_data = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))

    def bwd(g):
        safe = np.where(out_data > 0, out_data, 1.0)
        _accum(a, g * a.data / safe * (out_data > 0))

    return _result(out_data, (a,), bwd)


@_register("concat_cols")
def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: incompatible shapes {a.shape} and {b.shape}")
    na = a.shape[1]

    def bwd(g):
        _accum(a, g[:, :na])
        _accum(b, g[:, na:])

    return _result(np.hstack([a.data, b.data]), (a, b), bwd)


@_register("slice_cols")
def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= j0 < j1 <= a.shape[1]):
        raise ShapeError(f"slice_cols: bad slice [{j0}:{j1}] for shape {a.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        _accum(a, full)

    return _result(a.data[:, j0:j1].copy(), (a,), bwd)


class BatchNormState:
    """Running per-feature statistics (eval mode) plus the update momentum."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-8):
        self.running_mean = np.zeros((1, dim))
        self.running_var = np.ones((1, dim))
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> "BatchNormState":
        other = BatchNormState(self.running_mean.shape[1], self.momentum, self.eps)
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        return other


@_register("batch_norm")
def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool = True) -> Tensor:
    """Per-feature normalization over rows with learnable scale and shift.

    Train mode normalizes by batch statistics and updates the running
    buffers in place; eval mode normalizes by the running buffers.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm: expected a matrix, got shape {x.shape}")
    d = x.shape[1]
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(
            f"batch_norm: scale/shift shapes {gamma.shape}/{beta.shape} "
            f"do not match feature dim {d}"
        )
    n = x.shape[0]
    if training:
        mu = x.data.mean(axis=0, keepdims=True)
        var = x.data.var(axis=0, keepdims=True)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu) * inv
        m = state.momentum
        state.running_mean *= 1.0 - m
        state.running_mean += m * mu
        state.running_var *= 1.0 - m
        state.running_var += m * var

        def bwd(g):
            dxhat = g * gamma.data
            _accum(beta, g.sum(axis=0, keepdims=True))
            _accum(gamma, (g * xhat).sum(axis=0, keepdims=True))
            s1 = dxhat.sum(axis=0, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=0, keepdims=True)
            _accum(x, inv / n * (n * dxhat - s1 - xhat * s2))

    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv

        def bwd(g):
            _accum(beta, g.sum(axis=0, keepdims=True))
            _accum(gamma, (g * xhat).sum(axis=0, keepdims=True))
            _accum(x, g * gamma.data * inv)

    return _result(gamma.data * xhat + beta.data, (x, gamma, beta), bwd)


@_register("dropout")
def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Inverted-scaling dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bwd(g):
        _accum(x, g * scale)

    return _result(x.data * scale, (x,), bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; a negative learning rate ascends."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"adam: parameter '{name}' has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
