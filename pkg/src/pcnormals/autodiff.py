"""Minimal dense-tensor reverse-mode automatic differentiation.

Tensors wrap double-precision numpy arrays (1-D or 2-D, row-major) and build
a graph of closures while ops execute. `backward` on a scalar accumulates
d(loss)/d(leaf) into each reachable leaf's `grad`; the graph is consumed in
the process. Broadcasting is deliberately limited to the row-wise patterns
the model needs: (m, n) op (n,) and (m, n) op (m, 1).

Ops with non-differentiable branch points (relu, leaky_relu, minimum, the
max pools, the normalize guard) record their branch decisions when a kink
trace is active; `grad_check` compares traces of the two one-sided
evaluations and excludes coordinates whose perturbation crossed a kink.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import DegenerateInputError, PcnormalsError, ShapeError

NORMALIZE_GUARD = 1e-12

_trace_stack: list[list] = []


def record_branch(values) -> None:
    """Register a data-dependent discrete choice with the active kink trace.

    Model code calls this for selections made outside the graph (neighbor
    grouping, subset picks) so gradient checks can skip perturbations that
    flip them.
    """
    if _trace_stack:
        _trace_stack[-1].append(np.asarray(values).copy())


@contextmanager
def kink_trace():
    """Collect branch decisions of every op executed inside the block."""
    trace: list = []
    _trace_stack.append(trace)
    try:
        yield trace
    finally:
        _trace_stack.pop()


def _traces_equal(a: list, b: list) -> bool:
    if len(a) != len(b):
        return False
    return all(np.array_equal(x, y) for x, y in zip(a, b))


class Tensor:
    """Dense double-precision array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=float)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad.fill(0.0)

    def _accumulate(self, g: np.ndarray) -> None:
        # first contribution is copied (g may be a view into a child's grad)
        if self.grad is None:
            self.grad = np.array(g, dtype=float)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # convenience operators (thin wrappers over the module-level ops)
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values, parents, backward_fn) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` back down to `shape` (row-wise broadcast patterns only)."""
    if g.shape == shape:
        return g
    if len(shape) == 1:
        return g.sum(axis=0)
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    if shape[1] == 1:
        return g.sum(axis=1, keepdims=True)
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out_values = a.values + b.values

    def backward_fn(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(out_values, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out_values = a.values - b.values

    def backward_fn(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(-_unbroadcast(g, b.shape))

    return _node(out_values, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out_values = a.values * b.values

    def backward_fn(g):
        a._accumulate(_unbroadcast(g * b.values, a.shape))
        b._accumulate(_unbroadcast(g * a.values, b.shape))

    return _node(out_values, (a, b), backward_fn)


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward_fn(g):
        a._accumulate(c * g)

    return _node(a.values * c, (a,), backward_fn)


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient follows the smaller branch (ties go to `a`)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes differ {a.shape} vs {b.shape}")
    take_a = a.values <= b.values
    record_branch(take_a)

    def backward_fn(g):
        a._accumulate(np.where(take_a, g, 0.0))
        b._accumulate(np.where(take_a, 0.0, g))

    return _node(np.where(take_a, a.values, b.values), (a, b), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    record_branch(mask)

    def backward_fn(g):
        a._accumulate(g * mask)

    return _node(np.maximum(a.values, 0.0), (a,), backward_fn)


def leaky_relu(a, alpha: float = 0.01) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    record_branch(mask)
    slope = np.where(mask, 1.0, alpha)

    def backward_fn(g):
        a._accumulate(g * slope)

    return _node(a.values * slope, (a,), backward_fn)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_values = 1.0 / (1.0 + np.exp(-a.values))

    def backward_fn(g):
        a._accumulate(g * out_values * (1.0 - out_values))

    return _node(out_values, (a,), backward_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_values = np.exp(a.values)

    def backward_fn(g):
        a._accumulate(g * out_values)

    return _node(out_values, (a,), backward_fn)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.values < 0).any():
        raise DegenerateInputError("sqrt of negative value")
    out_values = np.sqrt(a.values)

    def backward_fn(g):
        a._accumulate(g * 0.5 / np.maximum(out_values, 1e-300))

    return _node(out_values, (a,), backward_fn)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        a._accumulate(g * 2.0 * a.values)

    return _node(a.values * a.values, (a,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_values = a.values @ b.values
    need_a = a.requires_grad or bool(a._parents)
    need_b = b.requires_grad or bool(b._parents)

    def backward_fn(g):
        if need_a:
            a._accumulate(g @ b.values.T)
        if need_b:
            b._accumulate(a.values.T @ g)

    return _node(out_values, (a, b), backward_fn)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

    def backward_fn(g):
        a._accumulate(g.T)

    return _node(a.values.T.copy(), (a,), backward_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")

    def backward_fn(g):
        a._accumulate(g.reshape(a.shape))

    return _node(a.values.reshape(shape).copy(), (a,), backward_fn)


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: incompatible shapes {a.shape} and {b.shape}")
    split = a.shape[1]

    def backward_fn(g):
        a._accumulate(g[:, :split])
        b._accumulate(g[:, split:])

    return _node(np.concatenate([a.values, b.values], axis=1), (a, b), backward_fn)


def gather_rows(a, indices) -> Tensor:
    """Select rows by (fixed) integer indices; repeated rows sum gradients."""
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got shape {a.shape}")
    idx = np.asarray(indices, dtype=int)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows index out of range")

    def backward_fn(g):
        acc = np.zeros_like(a.values)
        np.add.at(acc, idx, g)
        a._accumulate(acc)

    return _node(a.values[idx].copy(), (a,), backward_fn)


def repeat_row(v, m: int) -> Tensor:
    """Tile a vector into `m` identical rows."""
    v = as_tensor(v)
    if v.values.ndim != 1:
        raise ShapeError(f"repeat_row expects a vector, got shape {v.shape}")

    def backward_fn(g):
        v._accumulate(g.sum(axis=0))

    return _node(np.tile(v.values, (m, 1)), (v,), backward_fn)


# ---------------------------------------------------------------------------
# reductions and pooling


def reduce_sum(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        a._accumulate(np.full_like(a.values, float(g)))

    return _node(a.values.sum(), (a,), backward_fn)


def reduce_mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size

    def backward_fn(g):
        a._accumulate(np.full_like(a.values, float(g) / n))

    return _node(a.values.mean(), (a,), backward_fn)


def max_pool_rows(a) -> Tensor:
    """Column-wise max over all rows: (m, n) -> (n,). Exact subgradient via argmax."""
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(f"max_pool_rows expects a matrix, got shape {a.shape}")
    winners = a.values.argmax(axis=0)
    record_branch(winners)
    cols = np.arange(a.shape[1])

    def backward_fn(g):
        acc = np.zeros_like(a.values)
        acc[winners, cols] = g
        a._accumulate(acc)

    return _node(a.values[winners, cols].copy(), (a,), backward_fn)


def group_max_pool(a, n_groups: int) -> Tensor:
    """Max over contiguous row blocks: (n_groups * g, n) -> (n_groups, n)."""
    a = as_tensor(a)
    if a.values.ndim != 2 or a.shape[0] % n_groups != 0:
        raise ShapeError(f"group_max_pool: cannot split {a.shape} into {n_groups} groups")
    gsize = a.shape[0] // n_groups
    blocks = a.values.reshape(n_groups, gsize, a.shape[1])
    winners = blocks.argmax(axis=1)  # (n_groups, n)
    record_branch(winners)
    rows = np.arange(n_groups)[:, None]
    cols = np.arange(a.shape[1])[None, :]

    def backward_fn(g):
        acc = np.zeros_like(blocks)
        acc[rows, winners, cols] = g
        a._accumulate(acc.reshape(a.shape))

    return _node(blocks[rows, winners, cols].copy(), (a,), backward_fn)


# ---------------------------------------------------------------------------
# row-wise geometry


def _rows(a: Tensor, op: str, width: int | None = None) -> None:
    if a.values.ndim != 2:
        raise ShapeError(f"{op} expects a matrix, got shape {a.shape}")
    if width is not None and a.shape[1] != width:
        raise ShapeError(f"{op} expects width-{width} rows, got shape {a.shape}")


def l2norm_rows(a) -> Tensor:
    a = as_tensor(a)
    _rows(a, "l2norm_rows")
    norms = np.linalg.norm(a.values, axis=1)
    safe = np.maximum(norms, NORMALIZE_GUARD)

    def backward_fn(g):
        a._accumulate((g / safe)[:, None] * a.values)

    return _node(norms, (a,), backward_fn)


def normalize_rows(a) -> Tensor:
    """Scale each row to unit norm; rows below the guard pass through with
    zero gradient contribution."""
    a = as_tensor(a)
    _rows(a, "normalize_rows")
    norms = np.linalg.norm(a.values, axis=1)
    ok = norms >= NORMALIZE_GUARD
    record_branch(ok)
    safe = np.where(ok, norms, 1.0)
    out_values = np.where(ok[:, None], a.values / safe[:, None], a.values)
    unit = out_values

    def backward_fn(g):
        coeff = (g * unit).sum(axis=1)
        ga = (g - unit * coeff[:, None]) / safe[:, None]
        a._accumulate(np.where(ok[:, None], ga, 0.0))

    return _node(out_values, (a,), backward_fn)


def cross3(a, b) -> Tensor:
    """Row-wise cross product of (m, 3) arrays."""
    a, b = as_tensor(a), as_tensor(b)
    _rows(a, "cross3", 3)
    _rows(b, "cross3", 3)
    if a.shape != b.shape:
        raise ShapeError(f"cross3: shapes differ {a.shape} vs {b.shape}")
    out_values = np.cross(a.values, b.values)

    def backward_fn(g):
        a._accumulate(np.cross(b.values, g))
        b._accumulate(np.cross(g, a.values))

    return _node(out_values, (a, b), backward_fn)


def dot_rows(a, b) -> Tensor:
    """Row-wise inner product: (m, k), (m, k) -> (m,)."""
    a, b = as_tensor(a), as_tensor(b)
    _rows(a, "dot_rows")
    if a.shape != b.shape:
        raise ShapeError(f"dot_rows: shapes differ {a.shape} vs {b.shape}")

    def backward_fn(g):
        a._accumulate(g[:, None] * b.values)
        b._accumulate(g[:, None] * a.values)

    return _node((a.values * b.values).sum(axis=1), (a, b), backward_fn)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    _rows(a, "softmax_rows")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_values = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        inner = (g * out_values).sum(axis=1, keepdims=True)
        a._accumulate(out_values * (g - inner))

    return _node(out_values, (a,), backward_fn)


def quat_to_rot(q) -> Tensor:
    """Rotation matrix of a quaternion (w, x, y, z), normalized internally."""
    q = as_tensor(q)
    if q.shape != (4,):
        raise ShapeError(f"quat_to_rot expects a 4-vector, got shape {q.shape}")
    norm = float(np.linalg.norm(q.values))
    if norm < 1e-12:
        raise DegenerateInputError("zero quaternion has no rotation")
    qh = q.values / norm
    w, x, y, z = qh
    rot = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    # dR/d(qh), one 3x3 slab per quaternion component
    jac = 2.0 * np.array(
        [
            [[0, -z, y], [z, 0, -x], [-y, x, 0]],
            [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
            [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
            [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
        ]
    )

    def backward_fn(g):
        g_qh = (jac * g[None, :, :]).sum(axis=(1, 2))
        g_q = (g_qh - qh * float(qh @ g_qh)) / norm
        q._accumulate(g_q)

    return _node(rot, (q,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's grad.

    The graph is consumed: intermediate closures are released and a second
    backward through the same nodes raises.
    """
    if not isinstance(loss, Tensor):
        raise ShapeError("backward expects a Tensor")
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise PcnormalsError("graph already consumed by a previous backward")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss._accumulate(np.ones_like(loss.values))
    for node in reversed(topo):
        if node._backward is not None:
            if node._consumed:
                raise PcnormalsError("graph already consumed by a previous backward")
            node._backward(node.grad)
        node._consumed = True
        node._backward = None
        node._parents = ()
        if not node.requires_grad:
            node.grad = None
    loss._consumed = True


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map a Tensor to a scalar Tensor and build a fresh graph per
    call. Coordinates whose +/-eps evaluations disagree on any recorded
    branch decision sit within eps of a kink and are excluded.
    """
    base = Tensor(x.values.copy(), requires_grad=True)
    y = f(base)
    if not isinstance(y, Tensor) or y.size != 1:
        raise ShapeError("grad_check expects a scalar-valued function")
    backward(y)
    analytic = base.grad.reshape(-1).copy()

    flat = x.values.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        with kink_trace() as trace_plus:
            y_plus = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - eps
        with kink_trace() as trace_minus:
            y_minus = f(Tensor(bumped.reshape(x.shape))).item()
        if not _traces_equal(trace_plus, trace_minus):
            continue
        central = (y_plus - y_minus) / (2.0 * eps)
        err = abs(analytic[i] - central) / max(1e-8, abs(central))
        worst = max(worst, err)
    return worst
