"""Float64 tensors with reverse-mode automatic differentiation.

Every operation evaluates eagerly and records, on the resulting node, how
to build adjoint expressions for its operands.  Adjoints are assembled out
of the same primitive operations, so the output of :func:`gradient` is an
ordinary node that can be differentiated again.  That closure property is
what allows a whole optimizer update to sit inside a larger differentiated
expression.

Two backward modes share one set of adjoint rules:

* graph mode (:func:`gradient`, :func:`vjp`) returns nodes and keeps the
  result differentiable;
* value mode (:func:`gradient_values`, :func:`vjp_values`) runs the same
  numerical operations on bare arrays, for callers that only need numbers.

Both modes execute identical float operations in identical order, so their
results agree bitwise.
"""

from __future__ import annotations

import itertools

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform; the message names both shapes."""


class GraphError(ValueError):
    """A graph-level contract was violated (e.g. non-scalar gradient root)."""


class NonFiniteError(ArithmeticError):
    """A value that must be finite contains NaN or Inf."""


_ids = itertools.count()


class Tensor:
    """Immutable dense float64 array recorded on a computation graph.

    ``data`` is read-only once the node exists.  ``parents`` are the operand
    nodes; leaves have none.  Node ids increase with creation order, which is
    a topological order of the graph.
    """

    __slots__ = ("data", "op", "parents", "_vjp", "_id", "_finite")

    def __init__(self, data, op="const"):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.op = op
        self.parents = ()
        self._vjp = None
        self._id = next(_ids)
        self._finite = None

    @classmethod
    def _make(cls, data, op, parents, vjp):
        # internal: trusts `data` to be a fresh float64 array
        t = cls.__new__(cls)
        if data.dtype != np.float64:
            data = data.astype(np.float64)
        if data.flags.writeable:
            data.flags.writeable = False
        t.data = data
        t.op = op
        t.parents = parents
        t._vjp = vjp
        t._id = next(_ids)
        t._finite = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def all_finite(self):
        """Whether every entry is finite.  Cached; never raises."""
        if self._finite is None:
            self._finite = bool(np.isfinite(self.data).all())
        return self._finite

    def require_finite(self, context=""):
        if not self.all_finite():
            where = f" in {context}" if context else ""
            raise NonFiniteError(f"non-finite values{where} (op={self.op!r}, shape={self.shape})")
        return self

    # -- operator sugar ----------------------------------------------------
    __array_ufunc__ = None  # keep numpy from hijacking mixed expressions

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"


def constant(value, op="const"):
    """Wrap an array or scalar as a leaf node (data is copied)."""
    return Tensor(value, op=op)


def leaf(value, name="leaf"):
    """A named leaf, typically something gradients will be taken against."""
    return Tensor(value, op=name)


def zeros(shape):
    return Tensor(np.zeros(shape), op="zeros")


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), op="const")


def _binary_shape(a, b, opname):
    """Equal shapes, or one side a scalar.  Anything else is an error."""
    if a.shape == b.shape:
        return a.shape
    if a.shape == ():
        return b.shape
    if b.shape == ():
        return a.shape
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not conform")


# ---------------------------------------------------------------------------
# Backends: the same adjoint rules drive node construction or bare arrays.
# ---------------------------------------------------------------------------

class _GraphBackend:
    """Adjoint arithmetic that builds graph nodes (differentiable results)."""

    @staticmethod
    def lift(node):
        return node

    @staticmethod
    def add(a, b):
        return add(a, b)

    @staticmethod
    def mul(a, b):
        return mul(a, b)

    @staticmethod
    def div(a, b):
        return div(a, b)

    @staticmethod
    def neg(a):
        return neg(a)

    @staticmethod
    def matmul(a, b):
        return matmul(a, b)

    @staticmethod
    def transpose(a):
        return transpose(a)

    @staticmethod
    def reshape(a, shape):
        return reshape(a, shape)

    @staticmethod
    def sum(a, axis=None):
        return tensor_sum(a, axis)

    @staticmethod
    def expand_scalar(a, shape):
        return expand_scalar(a, shape)

    @staticmethod
    def broadcast_row(a, nrows):
        return broadcast_row(a, nrows)

    @staticmethod
    def broadcast_col(a, ncols):
        return broadcast_col(a, ncols)

    @staticmethod
    def take_rows(a, idx):
        return take_rows(a, idx)

    @staticmethod
    def scatter_rows(a, idx, nrows):
        return scatter_rows(a, idx, nrows)

    @staticmethod
    def const(arr):
        return Tensor(arr, op="const")


class _ValueBackend:
    """The same adjoint arithmetic on bare float64 arrays."""

    @staticmethod
    def lift(node):
        return node.data

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def div(a, b):
        return a / b

    @staticmethod
    def neg(a):
        return -a

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def transpose(a):
        return a.T

    @staticmethod
    def reshape(a, shape):
        return a.reshape(shape)

    @staticmethod
    def sum(a, axis=None):
        return np.sum(a, axis=axis)

    @staticmethod
    def expand_scalar(a, shape):
        return np.full(shape, float(a))

    @staticmethod
    def broadcast_row(a, nrows):
        return np.tile(a, (nrows, 1))

    @staticmethod
    def broadcast_col(a, ncols):
        return np.tile(a.reshape(-1, 1), (1, ncols))

    @staticmethod
    def take_rows(a, idx):
        return a[idx]

    @staticmethod
    def scatter_rows(a, idx, nrows):
        out = np.zeros((nrows,) + a.shape[1:])
        np.add.at(out, idx, a)
        return out

    @staticmethod
    def const(arr):
        return arr


_GRAPH = _GraphBackend()
_VALUES = _ValueBackend()


def _unbroadcast(B, g, shape):
    # reduce an adjoint back to a scalar operand's shape
    if shape == ():
        return B.sum(g)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    _binary_shape(a, b, "add")

    def vjp_rule(B, g):
        return _unbroadcast(B, g, a.shape), _unbroadcast(B, g, b.shape)

    return Tensor._make(a.data + b.data, "add", (a, b), vjp_rule)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _binary_shape(a, b, "sub")

    def vjp_rule(B, g):
        return _unbroadcast(B, g, a.shape), _unbroadcast(B, B.neg(g), b.shape)

    return Tensor._make(a.data - b.data, "sub", (a, b), vjp_rule)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _binary_shape(a, b, "mul")

    def vjp_rule(B, g):
        return (
            _unbroadcast(B, B.mul(g, B.lift(b)), a.shape),
            _unbroadcast(B, B.mul(g, B.lift(a)), b.shape),
        )

    return Tensor._make(a.data * b.data, "mul", (a, b), vjp_rule)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _binary_shape(a, b, "div")

    def vjp_rule(B, g):
        bv = B.lift(b)
        ga = _unbroadcast(B, B.div(g, bv), a.shape)
        gb = _unbroadcast(B, B.neg(B.div(B.mul(g, B.lift(a)), B.mul(bv, bv))), b.shape)
        return ga, gb

    return Tensor._make(a.data / b.data, "div", (a, b), vjp_rule)


def neg(a):
    a = _lift(a)

    def vjp_rule(B, g):
        return (B.neg(g),)

    return Tensor._make(-a.data, "neg", (a,), vjp_rule)


def matmul(a, b):
    """Matrix product.  Supports (B,n)@(n,m), (n,)@(n,m) and (B,n)@(n,)."""
    a, b = _lift(a), _lift(b)
    ok = (
        (a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0])
        or (a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[0])
        or (a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0])
    )
    if not ok:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def vjp_rule(B, g):
        av, bv = B.lift(a), B.lift(b)
        if a.ndim == 2 and b.ndim == 2:
            return B.matmul(g, B.transpose(bv)), B.matmul(B.transpose(av), g)
        if a.ndim == 1:  # (n,) @ (n,m) -> (m,)
            n, m = a.shape[0], b.shape[1]
            ga = B.matmul(bv, g)
            gb = B.matmul(B.reshape(av, (n, 1)), B.reshape(g, (1, m)))
            return ga, gb
        # (B,n) @ (n,) -> (B,)
        rows, n = a.shape
        ga = B.matmul(B.reshape(g, (rows, 1)), B.reshape(bv, (1, n)))
        gb = B.matmul(B.transpose(av), g)
        return ga, gb

    return Tensor._make(a.data @ b.data, "matmul", (a, b), vjp_rule)


def transpose(a):
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got shape {a.shape}")

    def vjp_rule(B, g):
        return (B.transpose(g),)

    return Tensor._make(np.ascontiguousarray(a.data.T), "transpose", (a,), vjp_rule)


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(shape)
    old = a.shape

    def vjp_rule(B, g):
        return (B.reshape(g, old),)

    return Tensor._make(a.data.reshape(shape).copy(), "reshape", (a,), vjp_rule)


def relu(a):
    """Elementwise max(0, x).  The subgradient at exactly 0 is taken as 0."""
    a = _lift(a)
    mask = (a.data > 0).astype(np.float64)
    mask.flags.writeable = False

    def vjp_rule(B, g):
        return (B.mul(g, B.const(mask)),)

    return Tensor._make(np.maximum(a.data, 0.0), "relu", (a,), vjp_rule)


def exp(a):
    a = _lift(a)
    out = Tensor._make(np.exp(a.data), "exp", (a,), None)

    def vjp_rule(B, g):
        return (B.mul(g, B.lift(out)),)

    out._vjp = vjp_rule
    return out


def log(a):
    a = _lift(a)

    def vjp_rule(B, g):
        return (B.div(g, B.lift(a)),)

    return Tensor._make(np.log(a.data), "log", (a,), vjp_rule)


def tensor_sum(a, axis=None):
    """Sum over all elements (axis=None, scalar result) or over axis 0/1 of a matrix."""
    a = _lift(a)
    if axis is None:
        def vjp_rule(B, g):
            return (B.expand_scalar(g, a.shape),)

        return Tensor._make(np.sum(a.data), "sum", (a,), vjp_rule)

    if a.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"sum: axis {axis} invalid for shape {a.shape}")
    if axis == 0:
        nrows = a.shape[0]

        def vjp_rule(B, g):
            return (B.broadcast_row(g, nrows),)

        return Tensor._make(np.sum(a.data, axis=0), "sum0", (a,), vjp_rule)

    ncols = a.shape[1]

    def vjp_rule(B, g):
        return (B.broadcast_col(g, ncols),)

    return Tensor._make(np.sum(a.data, axis=1), "sum1", (a,), vjp_rule)


def mean_all(a):
    a = _lift(a)
    return mul(tensor_sum(a), 1.0 / a.size)


def expand_scalar(a, shape):
    a = _lift(a)
    if a.shape != ():
        raise ShapeError(f"expand_scalar: expected scalar, got shape {a.shape}")
    shape = tuple(shape)

    def vjp_rule(B, g):
        return (B.sum(g),)

    return Tensor._make(np.full(shape, float(a.data)), "expand", (a,), vjp_rule)


def broadcast_row(a, nrows):
    """Tile a vector (k,) into (nrows, k)."""
    a = _lift(a)
    if a.ndim != 1:
        raise ShapeError(f"broadcast_row: expected 1-d, got shape {a.shape}")

    def vjp_rule(B, g):
        return (B.sum(g, axis=0),)

    return Tensor._make(np.tile(a.data, (nrows, 1)), "brow", (a,), vjp_rule)


def broadcast_col(a, ncols):
    """Tile a vector (B,) into (B, ncols)."""
    a = _lift(a)
    if a.ndim != 1:
        raise ShapeError(f"broadcast_col: expected 1-d, got shape {a.shape}")

    def vjp_rule(B, g):
        return (B.sum(g, axis=1),)

    return Tensor._make(np.tile(a.data.reshape(-1, 1), (1, ncols)), "bcol", (a,), vjp_rule)


def take_rows(a, idx):
    """Gather rows of a matrix by integer index (the indices are not differentiated)."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-d, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    nrows = a.shape[0]

    def vjp_rule(B, g):
        return (B.scatter_rows(g, idx, nrows),)

    return Tensor._make(a.data[idx], "take_rows", (a,), vjp_rule)


def scatter_rows(a, idx, nrows):
    """Inverse of take_rows: place rows at idx in a zero matrix, accumulating duplicates."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"scatter_rows: expected 2-d, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)

    def vjp_rule(B, g):
        return (B.take_rows(g, idx),)

    out = np.zeros((nrows, a.shape[1]))
    np.add.at(out, idx, a.data)
    return Tensor._make(out, "scatter_rows", (a,), vjp_rule)


# ---------------------------------------------------------------------------
# Composites used throughout the package
# ---------------------------------------------------------------------------

def affine(x, W, b):
    """W·x + b for a single input (n,), or row-wise X·Wᵀ + b for a batch (B,n).

    W has shape (m, n) and b shape (m,).  Shape mismatches raise
    :class:`ShapeError` naming both shapes.
    """
    x, W, b = _lift(x), _lift(W), _lift(b)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise ShapeError(f"affine: weight {W.shape} and bias {b.shape} do not conform")
    if x.ndim == 1:
        if x.shape[0] != W.shape[1]:
            raise ShapeError(f"affine: input {x.shape} and weight {W.shape} do not conform")
        return add(matmul(x, transpose(W)), b)
    if x.ndim == 2:
        if x.shape[1] != W.shape[1]:
            raise ShapeError(f"affine: input {x.shape} and weight {W.shape} do not conform")
        return add(matmul(x, transpose(W)), broadcast_row(b, x.shape[0]))
    raise ShapeError(f"affine: expected 1-d or 2-d input, got shape {x.shape}")


def cross_entropy(logits, labels):
    """Stable softmax cross-entropy for a batch.

    logits: (B, k) node; labels: integer array (B,).  Returns
    ``(per_example, probs)`` where per_example is a (B,) node of
    −log softmax(logits)[label] values and probs the (B, k) probability node.
    The row maxima are subtracted as constants, which leaves the gradient
    unchanged and keeps exp() in range.
    """
    logits = _lift(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected 2-d logits, got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range for {k} classes: {int(labels.min())}..{int(labels.max())}")

    shift = np.broadcast_to(logits.data.max(axis=1, keepdims=True), (n, k))
    z = sub(logits, constant(shift, op="rowmax"))
    e = exp(z)
    total = tensor_sum(e, axis=1)                  # (B,)
    log_total = log(total)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    z_label = tensor_sum(mul(z, constant(onehot, op="onehot")), axis=1)
    per_example = sub(log_total, z_label)
    probs = div(e, broadcast_col(total, k))
    return per_example, probs


def softmax_cross_entropy(logits, label):
    """−log softmax(logits)[label] for one example, plus the probability vector.

    logits is a (k,) node and label a class index in [0, k).  Returns a
    ``(loss, probs)`` pair of nodes with shapes () and (k,).
    """
    logits = _lift(logits)
    if logits.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy: expected 1-d logits, got shape {logits.shape}")
    k = logits.shape[0]
    label = int(label)
    if not 0 <= label < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    per_example, probs = cross_entropy(reshape(logits, (1, k)), np.array([label]))
    return reshape(per_example, ()), reshape(probs, (k,))


def mean_cross_entropy(logits, labels):
    """Mean softmax cross-entropy of a batch; scalar node."""
    per_example, _ = cross_entropy(logits, labels)
    return mean_all(per_example)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _reachable(outputs):
    """All ancestors of `outputs`, as an id->node map (iterative walk)."""
    seen = {}
    stack = list(outputs)
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(node.parents)
    return seen


def _backward(outputs, seeds, wrt, backend):
    reach = _reachable(outputs)
    wrt_ids = {w._id for w in wrt}

    # a node's adjoint matters iff it is a target or feeds one through its parents
    needs = {}
    for nid in sorted(reach):
        node = reach[nid]
        needs[nid] = nid in wrt_ids or any(needs[p._id] for p in node.parents)

    adjoints = {}
    for out, seed in zip(outputs, seeds):
        prev = adjoints.get(out._id)
        adjoints[out._id] = seed if prev is None else backend.add(prev, seed)

    results = {}
    for nid in sorted(reach, reverse=True):
        g = adjoints.pop(nid, None)
        if g is None:
            continue
        node = reach[nid]
        if nid in wrt_ids:
            results[nid] = g
        if node._vjp is None:
            continue
        if not any(needs[p._id] for p in node.parents):
            continue
        contributions = node._vjp(backend, g)
        for parent, contrib in zip(node.parents, contributions):
            if contrib is None or not needs[parent._id]:
                continue
            prev = adjoints.get(parent._id)
            adjoints[parent._id] = contrib if prev is None else backend.add(prev, contrib)
    return results


def vjp(outputs, seeds, wrt):
    """Vector-Jacobian product: adjoints of `wrt` given seed adjoints on `outputs`.

    Unreachable targets get exact-zero nodes of matching shape.  The results
    are graph nodes and may be differentiated again.
    """
    outputs = [_lift(o) for o in outputs]
    seed_nodes = []
    for out, s in zip(outputs, seeds):
        s = _lift(s)
        if s.shape != out.shape:
            raise ShapeError(f"vjp: seed {s.shape} does not match output {out.shape}")
        seed_nodes.append(s)
    results = _backward(outputs, seed_nodes, wrt, _GRAPH)
    return [results.get(w._id) or zeros(w.shape) for w in wrt]


def vjp_values(outputs, seeds, wrt):
    """Like :func:`vjp` but returns bare arrays (no new nodes are recorded)."""
    outputs = [_lift(o) for o in outputs]
    seed_arrays = []
    for out, s in zip(outputs, seeds):
        s = np.asarray(s, dtype=np.float64)
        if s.shape != out.shape:
            raise ShapeError(f"vjp: seed {s.shape} does not match output {out.shape}")
        seed_arrays.append(s)
    results = _backward(outputs, seed_arrays, wrt, _VALUES)
    return [np.array(results[w._id]) if w._id in results else np.zeros(w.shape) for w in wrt]


def gradient(output, wrt):
    """∂output/∂(each target) for a scalar output, as differentiable nodes.

    `output` must have shape (); targets unreachable from it yield exact-zero
    tensors of their own shape rather than an error.
    """
    output = _lift(output)
    if output.shape != ():
        raise GraphError(f"gradient: output must be scalar, got shape {output.shape}")
    return vjp([output], [constant(1.0)], wrt)


def gradient_values(output, wrt):
    """Same contract as :func:`gradient`, returning bare float64 arrays."""
    output = _lift(output)
    if output.shape != ():
        raise GraphError(f"gradient: output must be scalar, got shape {output.shape}")
    return vjp_values([output], [np.float64(1.0)], wrt)


class ComputeGraph:
    """Topologically ordered view of everything reachable from `outputs`.

    Creation order of nodes is a valid topological order, so `nodes` is
    sorted by node id.  Mostly useful for introspection: sizes, memory
    estimates, and structural checks in tests.
    """

    def __init__(self, outputs):
        if isinstance(outputs, Tensor):
            outputs = [outputs]
        reach = _reachable(list(outputs))
        self.nodes = [reach[nid] for nid in sorted(reach)]
        self.roots = [n for n in self.nodes if not n.parents]

    def __len__(self):
        return len(self.nodes)

    def verify(self):
        """Check the topological-order invariant (every operand precedes its user)."""
        position = {n._id: i for i, n in enumerate(self.nodes)}
        for i, node in enumerate(self.nodes):
            for p in node.parents:
                if position[p._id] >= i:
                    return False
        return True

    def nbytes(self):
        return sum(n.data.nbytes for n in self.nodes)
