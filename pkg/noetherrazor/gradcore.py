"""
This module contains the dense float64 algebra and the differentiation tape.

Every value is a numpy ``float64`` array wrapped in a :class:`Node`. Nodes
that depend on a variable record their parents together with one
vector-Jacobian product per parent. The vector-Jacobian products are
themselves written with :class:`Node` operations, so a gradient produced with
``create_graph=True`` (see :func:`grad`) is an ordinary node that can be
differentiated again.

Diagram
^^^^^^^

.. code-block:: none

    f = F(x; theta)            forward pass, recorded
    g = grad(f, x)             reverse pass, recorded (create_graph=True)
    loss = L(g; theta)         forward pass on top of g
    backward(loss, [theta])    reverse pass over both recordings

Only nodes with ``requires_grad`` are recorded; operations whose inputs are
all constants return constants and keep no parents.
"""
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np  # type: ignore

from .errors import DomainError, NumericalError, PreconditionError, ShapeError

Dense = np.ndarray
Operand = Union["Node", np.ndarray, float, int]
VJP = Callable[..., "Node"]

# scaled norm bound and truncation tolerance of the exponential series
_EXPM_THETA = 0.5
_EXPM_TOL = 1e-16


class Node:
    """Immutable value plus the record of how it was computed.

    Parameters
    ----------
    value :
        Array-like value, stored as a read-only ``float64`` array.

    parents :
        Nodes this value was computed from.

    vjps :
        One vector-Jacobian product per parent. Each is called as
        ``vjp(g, *parents)`` and returns the contribution to that parent's
        adjoint as a :class:`Node`.

    requires_grad :
        Whether gradients should flow to this node.
    """

    __slots__ = ("value", "parents", "vjps", "requires_grad", "__weakref__")

    # make ``ndarray <op> Node`` defer to the reflected Node operator
    __array_ufunc__ = None

    def __init__(
        self,
        value: Any,
        parents: Tuple["Node", ...] = (),
        vjps: Tuple[VJP, ...] = (),
        requires_grad: bool = False,
    ) -> None:
        """Initialize the node."""
        arr = np.asarray(value, dtype=np.float64).view()
        arr.flags.writeable = False
        self.value = arr
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad

    def __repr__(self) -> str:
        """Return a short description of the node."""
        kind = "variable" if self.requires_grad and not self.parents else "node"
        if not self.requires_grad:
            kind = "constant"
        return f"Node({kind}, shape={self.shape})"

    @property
    def shape(self) -> Tuple[int, ...]:
        """Return the shape of the value."""
        return self.value.shape

    @property
    def ndim(self) -> int:
        """Return the number of dimensions of the value."""
        return self.value.ndim

    @property
    def size(self) -> int:
        """Return the number of entries of the value."""
        return int(self.value.size)

    @property
    def T(self) -> "Node":  # pylint: disable=invalid-name
        """Swap the last two axes."""
        return transpose(self)

    def item(self) -> float:
        """Return the value of a single-entry node as a float."""
        if self.size != 1:
            raise ShapeError(f"item() requires a single entry, got {self.shape}")
        return float(self.value.reshape(()))

    def numpy(self) -> Dense:
        """Return the (read-only) value."""
        return self.value

    def __add__(self, other: Operand) -> "Node":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Node":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Node":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Node":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Node":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Node":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Node":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Node":
        return div(other, self)

    def __neg__(self) -> "Node":
        return neg(self)

    def __pow__(self, exponent: float) -> "Node":
        return power(self, exponent)

    def __matmul__(self, other: Operand) -> "Node":
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> "Node":
        return matmul(other, self)

    def __getitem__(self, index: Any) -> "Node":
        return getitem(self, index)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Node":
        """Sum over ``axis``."""
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Node":
        """Average over ``axis``."""
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Node":
        """Reshape the node."""
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def variable(value: Any) -> Node:
    """Create a leaf node that gradients flow to."""
    return Node(value, requires_grad=True)


def constant(value: Any) -> Node:
    """Create a leaf node that gradients do not flow to."""
    return Node(value)


def as_node(value: Operand) -> Node:
    """Return ``value`` if it is a node, else wrap it as a constant."""
    if isinstance(value, Node):
        return value
    return Node(value)


def _record(value: Dense, parents: Sequence[Node], vjps: Sequence[VJP]) -> Node:
    if any(parent.requires_grad for parent in parents):
        return Node(value, tuple(parents), tuple(vjps), requires_grad=True)
    return Node(value)


def _sum_to_value(value: Dense, shape: Tuple[int, ...]) -> Dense:
    if value.shape == shape:
        return value
    lead = value.ndim - len(shape)
    if lead > 0:
        value = value.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    return value.reshape(shape)


# ---------------------------------------------------------------------------
# broadcasting
# ---------------------------------------------------------------------------


def sum_to(a: Operand, shape: Tuple[int, ...]) -> Node:
    """Sum a broadcast node back down to ``shape``."""
    a = as_node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _record(
        _sum_to_value(a.value, shape),
        (a,),
        (lambda g, x: broadcast_to(g, x.shape),),
    )


def broadcast_to(a: Operand, shape: Tuple[int, ...]) -> Node:
    """Broadcast a node to ``shape``."""
    a = as_node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _record(
        np.broadcast_to(a.value, shape),
        (a,),
        (lambda g, x: sum_to(g, x.shape),),
    )


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Operand, b: Operand) -> Node:
    """Elementwise ``a + b`` with broadcasting."""
    a, b = as_node(a), as_node(b)
    return _record(
        a.value + b.value,
        (a, b),
        (
            lambda g, x, y: sum_to(g, x.shape),
            lambda g, x, y: sum_to(g, y.shape),
        ),
    )


def sub(a: Operand, b: Operand) -> Node:
    """Elementwise ``a - b`` with broadcasting."""
    a, b = as_node(a), as_node(b)
    return _record(
        a.value - b.value,
        (a, b),
        (
            lambda g, x, y: sum_to(g, x.shape),
            lambda g, x, y: sum_to(neg(g), y.shape),
        ),
    )


def mul(a: Operand, b: Operand) -> Node:
    """Elementwise ``a * b`` with broadcasting."""
    a, b = as_node(a), as_node(b)
    return _record(
        a.value * b.value,
        (a, b),
        (
            lambda g, x, y: sum_to(mul(g, y), x.shape),
            lambda g, x, y: sum_to(mul(g, x), y.shape),
        ),
    )


def div(a: Operand, b: Operand) -> Node:
    """Elementwise ``a / b`` with broadcasting."""
    a, b = as_node(a), as_node(b)
    return _record(
        a.value / b.value,
        (a, b),
        (
            lambda g, x, y: sum_to(div(g, y), x.shape),
            lambda g, x, y: sum_to(neg(div(mul(g, x), mul(y, y))), y.shape),
        ),
    )


def neg(a: Operand) -> Node:
    """Elementwise negation."""
    a = as_node(a)
    return _record(-a.value, (a,), (lambda g, x: neg(g),))


def exp(a: Operand) -> Node:
    """Elementwise exponential."""
    a = as_node(a)
    return _record(np.exp(a.value), (a,), (lambda g, x: mul(g, exp(x)),))


def log(a: Operand) -> Node:
    """Elementwise natural logarithm."""
    a = as_node(a)
    if np.any(a.value <= 0):
        raise DomainError("log of a non-positive entry")
    return _record(np.log(a.value), (a,), (lambda g, x: div(g, x),))


def sqrt(a: Operand) -> Node:
    """Elementwise square root."""
    a = as_node(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt of a negative entry")
    return _record(
        np.sqrt(a.value), (a,), (lambda g, x: div(mul(g, 0.5), sqrt(x)),)
    )


def power(a: Operand, exponent: float) -> Node:
    """Elementwise ``a ** exponent`` for a constant exponent."""
    a = as_node(a)
    exponent = float(exponent)
    if exponent == 1.0:
        return a
    return _record(
        a.value**exponent,
        (a,),
        (lambda g, x: mul(g, mul(power(x, exponent - 1.0), exponent)),),
    )


def elu(a: Operand, alpha: float = 1.0) -> Node:
    """Exponential linear unit, ``a`` if positive else ``alpha (exp(a) - 1)``.

    Built from recorded primitives so that it is twice differentiable through
    the tape. The branch mask is a constant of the current value.
    """
    a = as_node(a)
    mask = (a.value > 0).astype(np.float64)
    negative = mul(a, 1.0 - mask)
    return add(mul(a, mask), mul(sub(exp(negative), 1.0), alpha * (1.0 - mask)))


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------


def reshape(a: Operand, shape: Tuple[int, ...]) -> Node:
    """Reshape ``a`` to ``shape``."""
    a = as_node(a)
    return _record(
        a.value.reshape(shape), (a,), (lambda g, x: reshape(g, x.shape),)
    )


def transpose(a: Operand) -> Node:
    """Swap the last two axes of ``a``."""
    a = as_node(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose requires at least 2 axes, got {a.shape}")
    return _record(np.swapaxes(a.value, -1, -2), (a,), (lambda g, x: transpose(g),))


def getitem(a: Operand, index: Any) -> Node:
    """Index or slice ``a``."""
    a = as_node(a)
    return _record(
        a.value[index], (a,), (lambda g, x: scatter(g, index, x.shape),)
    )


def scatter(a: Operand, index: Any, shape: Tuple[int, ...]) -> Node:
    """Place ``a`` at ``index`` of a zero array of ``shape`` (adding repeats)."""
    a = as_node(a)
    out = np.zeros(shape)
    if _is_basic_index(index):
        out[index] += a.value
    else:
        np.add.at(out, index, a.value)
    return _record(out, (a,), (lambda g, x: getitem(g, index),))


def _is_basic_index(index: Any) -> bool:
    # slices, ints and Ellipsis never select an entry twice
    parts = index if isinstance(index, tuple) else (index,)
    return all(
        part is Ellipsis or part is None or isinstance(part, (slice, int, np.integer))
        for part in parts
    )


def concatenate(nodes: Sequence[Operand], axis: int = 0) -> Node:
    """Concatenate nodes along ``axis``."""
    parts = [as_node(node) for node in nodes]
    value = np.concatenate([part.value for part in parts], axis=axis)
    bounds = np.cumsum([0] + [part.shape[axis] for part in parts])

    def _slice_vjp(start: int, stop: int) -> VJP:
        def _vjp(g: Node, *_: Node) -> Node:
            index: List[Any] = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            return getitem(g, tuple(index))

        return _vjp

    vjps = [_slice_vjp(int(bounds[i]), int(bounds[i + 1])) for i in range(len(parts))]
    return _record(value, parts, vjps)


# ---------------------------------------------------------------------------
# reductions and products
# ---------------------------------------------------------------------------


def reduce_sum(
    a: Operand,
    axis: Optional[Union[int, Tuple[int, ...]]] = None,
    keepdims: bool = False,
) -> Node:
    """Sum ``a`` over ``axis`` (all axes if None)."""
    a = as_node(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)
    kept_shape = np.sum(a.value, axis=axis, keepdims=True).shape

    def _vjp(g: Node, x: Node) -> Node:
        return broadcast_to(reshape(g, kept_shape), x.shape)

    return _record(value, (a,), (_vjp,))


def mean(
    a: Operand,
    axis: Optional[Union[int, Tuple[int, ...]]] = None,
    keepdims: bool = False,
) -> Node:
    """Average ``a`` over ``axis`` (all axes if None)."""
    a = as_node(a)
    total = reduce_sum(a, axis=axis, keepdims=keepdims)
    count = a.size / max(total.size, 1)
    return mul(total, 1.0 / count)


def matmul(a: Operand, b: Operand) -> Node:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires at least 2 axes on both sides, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _record(
        np.matmul(a.value, b.value),
        (a, b),
        (
            lambda g, x, y: sum_to(matmul(g, transpose(y)), x.shape),
            lambda g, x, y: sum_to(matmul(transpose(x), g), y.shape),
        ),
    )


def eye_like(n: int, batch: Tuple[int, ...] = ()) -> Node:
    """Return a constant identity, broadcast over ``batch``."""
    return constant(np.broadcast_to(np.eye(n), tuple(batch) + (n, n)))


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def _toposort(root: Node, stop: Dict[int, Node]) -> List[Node]:
    order: List[Node] = []
    seen = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if id(node) in stop:
            continue
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradients(
    f: Node, wrt: Sequence[Node], create_graph: bool = False
) -> List[Node]:
    """Reverse-mode gradients of the scalar ``f`` with respect to ``wrt``.

    Parameters
    ----------
    f :
        Single-entry node.

    wrt :
        Nodes to differentiate with respect to. They may be intermediate
        nodes, in which case the traversal stops at them; none of them may be
        an ancestor of another.

    create_graph :
        Record the reverse pass so the returned gradients are themselves
        differentiable.

    Returns
    -------
    list of Node
        One gradient per entry of ``wrt``, zero if ``f`` does not depend on it.
    """
    if f.size != 1:
        raise ShapeError(f"gradients require a scalar output, got shape {f.shape}")
    if not all(node.requires_grad for node in wrt):
        raise PreconditionError("gradients can only be taken with respect to variables")
    stop = {id(node): node for node in wrt}
    if not f.requires_grad:
        return [constant(np.zeros(node.shape)) for node in wrt]
    order = _toposort(f, stop)
    # nodes with a path to one of ``wrt``; parents come first in ``order``
    reaches = set()
    for node in order:
        if id(node) in stop or any(id(parent) in reaches for parent in node.parents):
            reaches.add(id(node))
    adjoints: Dict[int, Node] = {id(f): constant(np.ones(f.shape))}
    for node in reversed(order):
        g = adjoints.get(id(node))
        if g is None or id(node) in stop or not node.parents:
            continue
        if create_graph:
            inputs: Sequence[Node] = node.parents
        else:
            inputs = [constant(parent.value) for parent in node.parents]
        for parent, vjp in zip(node.parents, node.vjps):
            if id(parent) not in reaches:
                continue
            contribution = vjp(g, *inputs)
            previous = adjoints.get(id(parent))
            adjoints[id(parent)] = (
                contribution if previous is None else add(previous, contribution)
            )
    result = []
    for node in wrt:
        g = adjoints.get(id(node))
        result.append(g if g is not None else constant(np.zeros(node.shape)))
    return result


def grad(f: Node, x: Node) -> Node:
    """Return the gradient of the scalar ``f`` with respect to ``x`` as a node.

    The returned node is recorded on the tape, so scalar functionals of it can
    be differentiated again with respect to other leaves.
    """
    return gradients(f, [x], create_graph=True)[0]


def backward(f: Node, wrt: Sequence[Node]) -> List[Dense]:
    """Return the gradient values of the scalar ``f`` for every node in ``wrt``."""
    return [g.value for g in gradients(f, wrt, create_graph=False)]


# ---------------------------------------------------------------------------
# matrix functions
# ---------------------------------------------------------------------------


def _taylor_order(theta: float) -> int:
    # smallest q with theta**q / q! below the tolerance
    order = 1
    term = theta
    while term > _EXPM_TOL and order < 30:
        order += 1
        term *= theta / order
    return order


def matexp(m: Operand) -> Node:
    """Matrix exponential by scaling and squaring a truncated Taylor series.

    Every step is a recorded operation, so gradients with respect to the
    entries of ``m`` flow through. Leading axes are treated as a batch and
    share one scaling exponent.

    Parameters
    ----------
    m :
        Square matrix or batch of square matrices ``(..., n, n)``.

    Returns
    -------
    Node
        ``exp(m)`` with the same shape as ``m``.
    """
    m = as_node(m)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ShapeError(f"matexp requires square matrices, got shape {m.shape}")
    if not np.all(np.isfinite(m.value)):
        raise DomainError("matexp input contains non-finite entries")
    n = m.shape[-1]
    ident = eye_like(n, m.shape[:-2])
    norm = float(np.max(np.abs(m.value).sum(axis=-2))) if m.size else 0.0
    if norm == 0.0:
        return add(ident, mul(m, 0.0))
    squarings = max(0, int(math.ceil(math.log2(norm / _EXPM_THETA))))
    scaled = mul(m, 0.5**squarings)
    order = _taylor_order(norm * 0.5**squarings)
    # Horner: I + A (I + A/2 (I + A/3 (...)))
    result = ident
    for k in range(order, 0, -1):
        result = add(ident, mul(matmul(scaled, result), 1.0 / k))
    for _ in range(squarings):
        result = matmul(result, result)
    return result


def svd(m: Operand) -> Tuple[Dense, Dense, Dense]:
    """Thin singular value decomposition ``m = U diag(sigma) V^T``.

    Not differentiable; values are read from ``m`` when it is a node.

    Returns
    -------
    U : numpy.ndarray
        Orthonormal columns, shape ``(rows, k)``.
    sigma : numpy.ndarray
        Singular values in descending order, shape ``(k,)``.
    V : numpy.ndarray
        Orthonormal columns, shape ``(cols, k)``.
    """
    value = m.value if isinstance(m, Node) else np.asarray(m, dtype=np.float64)
    if value.ndim != 2:
        raise ShapeError(f"svd requires a matrix, got shape {value.shape}")
    if not np.all(np.isfinite(value)):
        raise DomainError("svd input contains non-finite entries")
    try:
        u_mat, sigma, vt_mat = np.linalg.svd(value, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"svd did not converge for a {value.shape} matrix with "
            f"Frobenius norm {np.linalg.norm(value):.6g}: {exc}"
        ) from exc
    return u_mat, sigma, vt_mat.T
