"""Minimal dense-tensor expression graph with reverse-mode differentiation.

Every tensor is a 2-D float64 matrix; column vectors are (n, 1), scalars are
(1, 1).  ``grad`` emits the backward pass as *new graph nodes built from the
same primitive set*, so it can be applied again to any scalar function of a
gradient — this is what makes exact second-order meta-gradients possible.

The op set is closed: model code composes the primitives below, and each
primitive's adjoint rule is itself expressed in those primitives (plus
``transpose``, a linear helper primitive required to state matmul adjoints).
"""

from __future__ import annotations

import numpy as np

from ..errors import NonFiniteError, ShapeError, UnboundInputError

SMOOTH_ABS_EPS = 1e-8


class Node:
    """One vertex of the expression DAG.

    ``op`` is the primitive kind, ``parents`` the operand nodes, ``shape`` the
    statically derived extents.  ``value`` is set only for constants, ``name``
    only for inputs, ``factor`` only for ``scale``.
    """

    __slots__ = ("op", "parents", "shape", "value", "name", "factor")

    def __init__(self, op, parents=(), shape=None, value=None, name=None, factor=None):
        self.op = op
        self.parents = tuple(parents)
        self.shape = shape
        self.value = value
        self.name = name
        self.factor = factor

    def __repr__(self):
        tag = self.name if self.name else ""
        return f"Node({self.op}{' ' + tag if tag else ''}, shape={self.shape})"


def _check_2d(shape, op):
    if len(shape) != 2 or shape[0] < 1 or shape[1] < 1:
        raise ShapeError(f"{op}: expected a 2-D shape with positive extents, got {shape}")


def inp(name, shape):
    """Declare a named graph input of the given (rows, cols) shape."""
    shape = tuple(int(s) for s in shape)
    _check_2d(shape, "input")
    return Node("input", shape=shape, name=name)


def const(array):
    """Wrap a numpy array (or scalar) as an immutable constant node."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    _check_2d(arr.shape, "constant")
    arr = arr.copy()
    arr.flags.writeable = False
    return Node("constant", shape=arr.shape, value=arr)


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    return Node("matmul", (a, b), shape=(a.shape[0], b.shape[1]))


def transpose(a):
    return Node("transpose", (a,), shape=(a.shape[1], a.shape[0]))


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape(a, b, "add")
    return Node("add", (a, b), shape=a.shape)


def sub(a, b):
    _same_shape(a, b, "subtract")
    return Node("subtract", (a, b), shape=a.shape)


def scale(a, c):
    return Node("scale", (a,), shape=a.shape, factor=float(c))


def hadamard(a, b):
    _same_shape(a, b, "hadamard")
    return Node("hadamard", (a, b), shape=a.shape)


def concat_rows(parts):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: needs at least one operand")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeError(f"concat: column counts differ, {p.shape} vs cols={cols}")
    rows = sum(p.shape[0] for p in parts)
    return Node("concat", parts, shape=(rows, cols))


def total(a):
    """Sum of all entries, as a (1, 1) scalar node."""
    return Node("sum", (a,), shape=(1, 1))


def mean(a):
    return scale(total(a), 1.0 / (a.shape[0] * a.shape[1]))


def sigmoid(a):
    return Node("sigmoid", (a,), shape=a.shape)


def tanh(a):
    return Node("tanh", (a,), shape=a.shape)


def smooth_abs(a):
    """Elementwise sqrt(x^2 + eps): a differentiable |x| surrogate."""
    return Node("smooth-abs", (a,), shape=a.shape)


def exp(a):
    return Node("exp", (a,), shape=a.shape)


def log(a):
    return Node("log", (a,), shape=a.shape)


def log_softmax(a):
    """Column-wise log-softmax (softmax over the row axis of each column)."""
    return Node("log-softmax", (a,), shape=a.shape)


def cosine(u, v):
    """Cosine similarity of two column vectors, as a (1, 1) scalar node."""
    if u.shape[1] != 1 or v.shape[1] != 1:
        raise ShapeError(f"cosine-similarity: expects column vectors, got {u.shape}, {v.shape}")
    _same_shape(u, v, "cosine-similarity")
    return Node("cosine-similarity", (u, v), shape=(1, 1))


def detach(a):
    """Identity in the forward pass; blocks all gradient flow upstream."""
    return Node("detach", (a,), shape=a.shape)


# -- convenience builders ---------------------------------------------------

def ones(shape):
    return const(np.ones(shape))


def zeros(shape):
    return const(np.zeros(shape))


def broadcast_scalar(s, shape):
    """Expand a (1, 1) node to `shape` (all entries equal) via ones-matmuls."""
    if s.shape != (1, 1):
        raise ShapeError(f"broadcast_scalar: expected (1, 1), got {s.shape}")
    return matmul(matmul(ones((shape[0], 1)), s), ones((1, shape[1])))


def broadcast_rows(row, nrows):
    """Tile a (1, n) node down to (nrows, n)."""
    if row.shape[0] != 1:
        raise ShapeError(f"broadcast_rows: expected a row vector, got {row.shape}")
    return matmul(ones((nrows, 1)), row)


def broadcast_cols(col, ncols):
    """Tile an (m, 1) node across to (m, ncols)."""
    if col.shape[1] != 1:
        raise ShapeError(f"broadcast_cols: expected a column vector, got {col.shape}")
    return matmul(col, ones((1, ncols)))


def neg(a):
    return scale(a, -1.0)


def reciprocal(a):
    """Elementwise 1/x for strictly positive x, via exp(-log x)."""
    return exp(neg(log(a)))


# -- forward evaluation -----------------------------------------------------

def _topo_order(outputs):
    """Parents-before-children ordering of all nodes reachable from outputs."""
    order = []
    seen = set()
    stack = [(o, False) for o in outputs]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _forward_one(node, vals):
    op = node.op
    if op == "constant":
        return node.value
    pv = [vals[id(p)] for p in node.parents]
    if op == "matmul":
        return pv[0] @ pv[1]
    if op == "transpose":
        return pv[0].T
    if op == "add":
        return pv[0] + pv[1]
    if op == "subtract":
        return pv[0] - pv[1]
    if op == "scale":
        return pv[0] * node.factor
    if op == "hadamard":
        return pv[0] * pv[1]
    if op == "concat":
        return np.concatenate(pv, axis=0)
    if op == "sum":
        return np.array([[pv[0].sum()]])
    if op == "sigmoid":
        x = pv[0]
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if op == "tanh":
        return np.tanh(pv[0])
    if op == "smooth-abs":
        return np.sqrt(pv[0] * pv[0] + SMOOTH_ABS_EPS)
    if op == "exp":
        return np.exp(pv[0])
    if op == "log":
        return np.log(pv[0])
    if op == "log-softmax":
        x = pv[0]
        m = x.max(axis=0, keepdims=True)
        z = x - m
        return z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    if op == "cosine-similarity":
        u, v = pv[0].ravel(), pv[1].ravel()
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0.0 or nv == 0.0:
            raise ShapeError("cosine-similarity: undefined for a zero-norm vector")
        return np.array([[float(u @ v) / (nu * nv)]])
    if op == "detach":
        return pv[0]
    raise ShapeError(f"unknown op kind {op!r}")


def evaluate(outputs, bindings):
    """Evaluate the graph under `bindings` (input node -> array).

    Returns a dict keyed by node identity holding the value of every node
    reachable from `outputs`.  Use :func:`value_of` to read results out.
    """
    single = isinstance(outputs, Node)
    outs = [outputs] if single else list(outputs)
    vals = {}
    for node, arr in bindings.items():
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(-1, 1)
        if a.shape != node.shape:
            raise ShapeError(
                f"binding for input {node.name!r} has shape {a.shape}, expected {node.shape}"
            )
        vals[id(node)] = a
    for node in _topo_order(outs):
        if id(node) in vals:
            continue
        if node.op == "input":
            raise UnboundInputError(f"input {node.name!r} was not bound")
        vals[id(node)] = _forward_one(node, vals)
    return vals


def value_of(node, vals):
    return vals[id(node)]


def evaluate_one(node, bindings):
    """Evaluate a single node and return its value."""
    return value_of(node, evaluate(node, bindings))


def scalar(node, bindings):
    """Evaluate a (1, 1) node to a Python float."""
    return float(evaluate_one(node, bindings)[0, 0])


# -- reverse mode -----------------------------------------------------------

def _vjp(node, g):
    """Adjoint contributions of `node` given its incoming cotangent node `g`.

    Yields (parent, cotangent-node) pairs.  Every cotangent is built from the
    same primitive set, so gradients remain differentiable.
    """
    op = node.op
    ps = node.parents
    if op in ("input", "constant", "detach"):
        return
    if op == "matmul":
        yield ps[0], matmul(g, transpose(ps[1]))
        yield ps[1], matmul(transpose(ps[0]), g)
    elif op == "transpose":
        yield ps[0], transpose(g)
    elif op == "add":
        yield ps[0], g
        yield ps[1], g
    elif op == "subtract":
        yield ps[0], g
        yield ps[1], neg(g)
    elif op == "scale":
        yield ps[0], scale(g, node.factor)
    elif op == "hadamard":
        yield ps[0], hadamard(g, ps[1])
        yield ps[1], hadamard(g, ps[0])
    elif op == "concat":
        row = 0
        n = node.shape[0]
        for p in ps:
            r = p.shape[0]
            sel = np.zeros((r, n))
            sel[:, row:row + r] = np.eye(r)
            yield p, matmul(const(sel), g)
            row += r
    elif op == "sum":
        yield ps[0], broadcast_scalar(g, ps[0].shape)
    elif op == "sigmoid":
        one = ones(node.shape)
        yield ps[0], hadamard(g, hadamard(node, sub(one, node)))
    elif op == "tanh":
        one = ones(node.shape)
        yield ps[0], hadamard(g, sub(one, hadamard(node, node)))
    elif op == "smooth-abs":
        # d sqrt(x^2+eps)/dx = x / sqrt(x^2+eps); node value is positive.
        yield ps[0], hadamard(g, hadamard(ps[0], reciprocal(node)))
    elif op == "exp":
        yield ps[0], hadamard(g, node)
    elif op == "log":
        yield ps[0], hadamard(g, exp(neg(node)))
    elif op == "log-softmax":
        colsum = matmul(ones((1, node.shape[0])), g)
        yield ps[0], sub(g, hadamard(exp(node), broadcast_rows(colsum, node.shape[0])))
    elif op == "cosine-similarity":
        u, v = ps
        inv_nu = exp(scale(log(total(hadamard(u, u))), -0.5))
        inv_nv = exp(scale(log(total(hadamard(v, v))), -0.5))
        g_uv = hadamard(g, hadamard(inv_nu, inv_nv))
        g_cos = hadamard(g, node)
        yield u, sub(
            hadamard(v, broadcast_scalar(g_uv, u.shape)),
            hadamard(u, broadcast_scalar(hadamard(g_cos, hadamard(inv_nu, inv_nu)), u.shape)),
        )
        yield v, sub(
            hadamard(u, broadcast_scalar(g_uv, v.shape)),
            hadamard(v, broadcast_scalar(hadamard(g_cos, hadamard(inv_nv, inv_nv)), v.shape)),
        )
    else:
        raise ShapeError(f"unknown op kind {op!r}")


def _needs_adjoint(order, wrt_ids):
    """Nodes through which gradient must flow: those with a wrt leaf below."""
    needed = set()
    for node in order:  # parents precede children
        if id(node) in wrt_ids:
            needed.add(id(node))
        elif node.op != "detach" and any(id(p) in needed for p in node.parents):
            needed.add(id(node))
    return needed


def grad(output, wrt):
    """Reverse-mode gradient of a scalar node w.r.t. a list of input nodes.

    Returns one node per entry of `wrt`, of matching shape.  Inputs not
    reachable from `output` (or cut off by `detach`) get a zero constant.
    The returned nodes are ordinary graph nodes; apply `grad` again to any
    scalar function of them for second-order derivatives.
    """
    single = isinstance(wrt, Node)
    wrt_list = [wrt] if single else list(wrt)
    if output.shape != (1, 1):
        raise ShapeError(f"grad: output must be scalar-shaped (1, 1), got {output.shape}")
    order = _topo_order([output])
    wrt_ids = {id(w) for w in wrt_list}
    needed = _needs_adjoint(order, wrt_ids)
    adj = {}
    if id(output) in needed:
        adj[id(output)] = ones((1, 1))
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None:
            continue
        for parent, pg in _vjp(node, g):
            if id(parent) not in needed:
                continue
            prev = adj.get(id(parent))
            adj[id(parent)] = pg if prev is None else add(prev, pg)
    out = [adj.get(id(w)) or zeros(w.shape) for w in wrt_list]
    return out[0] if single else out


def check_finite(arr, what):
    """Raise NonFiniteError if `arr` contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return arr
