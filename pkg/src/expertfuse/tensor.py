"""Dense float64 tensors with reverse-mode differentiation.

Every operation that touches a gradient-requiring tensor records its
parents and a backward closure on the result, so the graph is rebuilt on
each forward pass and discarded after ``backward`` walks it once in
reverse topological order.  Tensor values are immutable after
construction; a graph belongs to a single step and is never shared
between threads.

Shapes are validated eagerly and failures name both operands, so a bad
wiring surfaces at the faulty call rather than deep inside a later one.
"""

import numpy as np

from .exceptions import EmptySequence, ShapeMismatch

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "matmul",
    "transpose",
    "add",
    "add_bias",
    "add_scalar",
    "sub",
    "sub_colvec",
    "hadamard",
    "mul_const",
    "scale",
    "scale_rows",
    "scale_cols",
    "div",
    "sigmoid",
    "relu",
    "softmax",
    "l2_normalize",
    "sum_all",
    "colsum",
    "mean_rows",
    "concat_cols",
    "stack_rows",
    "col",
    "diag_part",
    "reshape",
    "backward",
    "gradients",
]


class Tensor:
    """A float64 array plus its place in the current graph.

    Values are immutable by convention: no operation writes to an input
    array, and parameter updates replace tensors rather than mutating
    them.  ``grad`` is populated by ``backward``; it is ``None`` for
    tensors the last backward pass never reached.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = "param" if self.requires_grad and not self._parents else "tensor"
        return f"<{tag} shape={self.data.shape}>"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return hadamard(self, other)


def tensor(data) -> Tensor:
    """Wraps an array as a constant (non-differentiable) tensor."""
    return Tensor(data)


def parameter(data) -> Tensor:
    """Wraps an array as a gradient-requiring leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, bwd):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _bwd=bwd)
    return Tensor(data)


def _accum(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _need_ndim(name, t, ndim):
    if t.data.ndim != ndim:
        raise ShapeMismatch(f"{name}: expected {ndim}-d operand, got shape {t.data.shape}")


def _need_same_shape(name, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{name}: shapes {a.data.shape} and {b.data.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    _need_ndim("matmul", a, 2)
    _need_ndim("matmul", b, 2)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: inner extents of {a.data.shape} and {b.data.shape} differ")
    out = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    _need_ndim("transpose", a, 2)

    def bwd(g):
        _accum(a, np.ascontiguousarray(g.T))

    return _make(np.ascontiguousarray(a.data.T), (a,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("add", a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def add_bias(mat: Tensor, vec: Tensor) -> Tensor:
    """Adds a length-d bias row to every row of a (B, d) matrix."""
    _need_ndim("add_bias", mat, 2)
    _need_ndim("add_bias", vec, 1)
    if mat.data.shape[1] != vec.data.shape[0]:
        raise ShapeMismatch(f"add_bias: shapes {mat.data.shape} and {vec.data.shape} differ")

    def bwd(g):
        _accum(mat, g)
        _accum(vec, g.sum(axis=0))

    return _make(mat.data + vec.data, (mat, vec), bwd)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        _accum(a, g)

    return _make(a.data + c, (a,), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("sub", a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bwd)


def sub_colvec(mat: Tensor, vec: Tensor) -> Tensor:
    """Subtracts vec[i] from every entry of row i."""
    _need_ndim("sub_colvec", mat, 2)
    _need_ndim("sub_colvec", vec, 1)
    if mat.data.shape[0] != vec.data.shape[0]:
        raise ShapeMismatch(f"sub_colvec: shapes {mat.data.shape} and {vec.data.shape} differ")

    def bwd(g):
        _accum(mat, g)
        _accum(vec, -g.sum(axis=1))

    return _make(mat.data - vec.data[:, None], (mat, vec), bwd)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _need_same_shape("hadamard", a, b)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def mul_const(a: Tensor, arr) -> Tensor:
    """Elementwise product with a constant mask/array (no gradient into it)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != a.data.shape and arr.shape != (a.data.shape[0], 1):
        raise ShapeMismatch(f"mul_const: shapes {a.data.shape} and {arr.shape} differ")

    def bwd(g):
        _accum(a, g * arr)

    return _make(a.data * arr, (a,), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bwd)


def scale_rows(mat: Tensor, vec: Tensor) -> Tensor:
    """Scales row i of a (R, C) matrix by vec[i]."""
    _need_ndim("scale_rows", mat, 2)
    _need_ndim("scale_rows", vec, 1)
    if mat.data.shape[0] != vec.data.shape[0]:
        raise ShapeMismatch(f"scale_rows: shapes {mat.data.shape} and {vec.data.shape} differ")

    def bwd(g):
        _accum(mat, g * vec.data[:, None])
        _accum(vec, (g * mat.data).sum(axis=1))

    return _make(mat.data * vec.data[:, None], (mat, vec), bwd)


def scale_cols(mat: Tensor, vec: Tensor) -> Tensor:
    """Scales column j of a (R, C) matrix by vec[j]."""
    _need_ndim("scale_cols", mat, 2)
    _need_ndim("scale_cols", vec, 1)
    if mat.data.shape[1] != vec.data.shape[0]:
        raise ShapeMismatch(f"scale_cols: shapes {mat.data.shape} and {vec.data.shape} differ")

    def bwd(g):
        _accum(mat, g * vec.data[None, :])
        _accum(vec, (g * mat.data).sum(axis=0))

    return _make(mat.data * vec.data[None, :], (mat, vec), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient of same-shape tensors."""
    _need_same_shape("div", a, b)
    out = a.data / b.data

    def bwd(g):
        _accum(a, g / b.data)
        _accum(b, -g * out / b.data)

    return _make(out, (a, b), bwd)


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise logistic function, overflow-safe on both tails."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at the kink is zero.

    np.maximum (not a mask select) so non-finite inputs propagate instead
    of being silently zeroed; divergence checks depend on that.
    """
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _make(np.maximum(a.data, 0.0), (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Row softmax (1-d input treated as a single row), shift-stabilized."""
    if a.data.ndim not in (1, 2):
        raise ShapeMismatch(f"softmax: expected 1-d or 2-d operand, got shape {a.data.shape}")
    x = a.data if a.data.ndim == 2 else a.data[None, :]
    shifted = x - x.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    out2 = ex / ex.sum(axis=1, keepdims=True)
    out = out2 if a.data.ndim == 2 else out2[0]

    def bwd(g):
        g2 = g if g.ndim == 2 else g[None, :]
        inner = (out2 * g2).sum(axis=1, keepdims=True)
        ga = out2 * (g2 - inner)
        _accum(a, ga if a.data.ndim == 2 else ga[0])

    return _make(out, (a,), bwd)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """x / max(|x|_2, eps), applied per row for 2-d input.

    The guard makes the map total: inputs below the guard are scaled by
    1/eps instead of blowing up, and their Jacobian is exactly I/eps.
    """
    if a.data.ndim == 1:
        norm = float(np.sqrt((a.data * a.data).sum()))
        denom = max(norm, eps)
        out = a.data / denom

        def bwd(g):
            if norm >= eps:
                _accum(a, (g - out * float(out @ g)) / norm)
            else:
                _accum(a, g / eps)

        return _make(out, (a,), bwd)
    if a.data.ndim == 2:
        norms = np.sqrt((a.data * a.data).sum(axis=1))
        denom = np.maximum(norms, eps)[:, None]
        out = a.data / denom

        def bwd(g):
            inner = (out * g).sum(axis=1, keepdims=True)
            _accum(a, np.where(norms[:, None] >= eps, g - out * inner, g) / denom)

        return _make(out, (a,), bwd)
    raise ShapeMismatch(f"l2_normalize: expected 1-d or 2-d operand, got shape {a.data.shape}")


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar (shape ()) tensor."""

    def bwd(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), bwd)


def colsum(a: Tensor) -> Tensor:
    """Column sums of a (T, d) matrix."""
    _need_ndim("colsum", a, 2)

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(a.data.sum(axis=0), (a,), bwd)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the rows of a (T, d) matrix, T >= 1."""
    _need_ndim("mean_rows", a, 2)
    rows = a.data.shape[0]
    if rows == 0:
        raise EmptySequence("mean_rows: zero-row input")

    def bwd(g):
        _accum(a, np.broadcast_to(g / rows, a.data.shape).copy())

    return _make(a.data.mean(axis=0), (a,), bwd)


def concat_cols(parts) -> Tensor:
    """Concatenates (B, d_i) blocks along columns."""
    parts = list(parts)
    if not parts:
        raise ShapeMismatch("concat_cols: no operands")
    rows = parts[0].data.shape[0]
    for p in parts:
        _need_ndim("concat_cols", p, 2)
        if p.data.shape[0] != rows:
            raise ShapeMismatch(
                f"concat_cols: row extents differ ({rows} vs {p.data.shape[0]})"
            )
    widths = [p.data.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=1)):
            _accum(p, piece)

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def stack_rows(rows) -> Tensor:
    """Stacks length-d vectors into a (B, d) matrix."""
    rows = list(rows)
    if not rows:
        raise ShapeMismatch("stack_rows: no operands")
    width = rows[0].data.shape
    for r in rows:
        _need_ndim("stack_rows", r, 1)
        if r.data.shape != width:
            raise ShapeMismatch(f"stack_rows: row shapes differ ({width} vs {r.data.shape})")

    def bwd(g):
        for i, r in enumerate(rows):
            _accum(r, g[i])

    return _make(np.stack([r.data for r in rows]), tuple(rows), bwd)


def col(a: Tensor, j: int) -> Tensor:
    """Column j of a matrix as a vector."""
    _need_ndim("col", a, 2)
    if not 0 <= j < a.data.shape[1]:
        raise ShapeMismatch(f"col: index {j} out of range for shape {a.data.shape}")

    def bwd(g):
        full = np.zeros(a.data.shape)
        full[:, j] = g
        _accum(a, full)

    return _make(a.data[:, j].copy(), (a,), bwd)


def diag_part(a: Tensor) -> Tensor:
    """Main diagonal of a square matrix."""
    _need_ndim("diag_part", a, 2)
    n, m = a.data.shape
    if n != m:
        raise ShapeMismatch(f"diag_part: matrix is not square {a.data.shape}")

    def bwd(g):
        _accum(a, np.diag(g))

    return _make(np.diag(a.data).copy(), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeMismatch(f"reshape: cannot view {a.data.shape} as {shape}")

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def _topo_order(root):
    """Iterative postorder: every node appears after all of its parents."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagates d(loss)/d(node) through the recorded graph.

    The loss must be scalar.  Each reachable gradient-requiring tensor has
    its ``grad`` replaced with the freshly accumulated array; every node's
    backward closure runs exactly once.
    """
    if loss.data.shape != ():
        raise ShapeMismatch(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)


def value_and_gradients(loss_fn, params):
    """Runs ``loss_fn(params)`` once, returning (loss value, gradient map).

    Parameters the forward pass never touched get exact zeros.  Raises if
    the loss is not scalar.
    """
    for _, t in params.items():
        t.grad = None
    loss = loss_fn(params)
    backward(loss)
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
    return float(loss.data), grads


def gradients(loss_fn, params) -> dict:
    """Gradient map of ``loss_fn`` when the loss value itself is not needed."""
    return value_and_gradients(loss_fn, params)[1]
