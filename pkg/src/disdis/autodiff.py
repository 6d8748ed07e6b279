"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value on a tape is a 2-D float64 numpy array; scalars are 1x1
matrices and vectors are single rows. A Tape records primitive operations
as they execute and replays them in reverse to accumulate exact analytical
adjoints. The primitive set is deliberately small and fixed; everything
larger (recurrent cells, losses) is composed from it.

`finite_diff_check` is the central-difference oracle used to validate the
gradient of any tape-built loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for a primitive operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        detail = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {detail}")


def as_array2(value, op="leaf"):
    """Coerce to a float64 matrix. Scalars become 1x1, vectors one row."""
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, a.shape[0])
    elif a.ndim != 2:
        raise ShapeError(op, a.shape)
    return a


class Var:
    """Handle on one tape node. Supports +, -, *, @ and float scaling."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        v = self.value
        if v.shape != (1, 1):
            raise ShapeError("item", v.shape)
        return float(v[0, 0])

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape.mul(self, other)
        return self.tape.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    @property
    def T(self):
        return self.tape.transpose(self)


@dataclass
class Node:
    op: str
    parents: tuple
    value: np.ndarray
    aux: object = None


def _unbroadcast(g, shape):
    # reverse a (1, c) row broadcast
    if g.shape != shape and shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    return g


# Each rule maps (out_value, parent_values, aux, out_adjoint) to a tuple of
# parent adjoint contributions. Kept in a module-level dict so tests can
# install a corrupted rule as a negative control.
def _adj_matmul(y, ps, aux, g):
    a, b = ps
    return (g @ b.T, a.T @ g)


def _adj_add(y, ps, aux, g):
    a, b = ps
    return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _adj_sub(y, ps, aux, g):
    a, b = ps
    return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _adj_mul(y, ps, aux, g):
    a, b = ps
    return (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _adj_scale(y, ps, aux, g):
    return (aux * g,)


def _adj_tanh(y, ps, aux, g):
    return (g * (1.0 - y * y),)


def _adj_sigmoid(y, ps, aux, g):
    return (g * y * (1.0 - y),)


def _adj_relu(y, ps, aux, g):
    return (g * (ps[0] > 0.0),)


def _adj_exp(y, ps, aux, g):
    return (g * y,)


def _adj_log(y, ps, aux, g):
    return (g / ps[0],)


def _adj_square(y, ps, aux, g):
    return (2.0 * g * ps[0],)


def _adj_softmax_rows(y, ps, aux, g):
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def _adj_log_softmax_rows(y, ps, aux, g):
    return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)


def _adj_concat_cols(y, ps, aux, g):
    ca = ps[0].shape[1]
    return (g[:, :ca], g[:, ca:])


def _adj_slice_cols(y, ps, aux, g):
    start, stop = aux
    ga = np.zeros_like(ps[0])
    ga[:, start:stop] = g
    return (ga,)


def _adj_sum(y, ps, aux, g):
    return (np.full_like(ps[0], g[0, 0]),)


def _adj_mean(y, ps, aux, g):
    a = ps[0]
    return (np.full_like(a, g[0, 0] / a.size),)


def _adj_transpose(y, ps, aux, g):
    return (g.T,)


def _adj_reshape(y, ps, aux, g):
    return (g.reshape(ps[0].shape),)


ADJOINT_RULES = {
    "matmul": _adj_matmul,
    "add": _adj_add,
    "sub": _adj_sub,
    "mul": _adj_mul,
    "scale": _adj_scale,
    "tanh": _adj_tanh,
    "sigmoid": _adj_sigmoid,
    "relu": _adj_relu,
    "exp": _adj_exp,
    "log": _adj_log,
    "square": _adj_square,
    "softmax_rows": _adj_softmax_rows,
    "log_softmax_rows": _adj_log_softmax_rows,
    "concat_cols": _adj_concat_cols,
    "slice_cols": _adj_slice_cols,
    "sum": _adj_sum,
    "mean": _adj_mean,
    "transpose": _adj_transpose,
    "reshape": _adj_reshape,
}


class Tape:
    """Flat record of a forward computation, in topological order."""

    def __init__(self):
        self.nodes = []
        self.param_index = {}  # name -> node idx

    # -- leaves ------------------------------------------------------------

    def _push(self, op, parents, value, aux=None):
        self.nodes.append(Node(op, parents, value, aux))
        return Var(self, len(self.nodes) - 1)

    def const(self, value):
        return self._push("leaf", (), as_array2(value))

    def param(self, name, value):
        if name in self.param_index:
            raise ValueError(f"duplicate parameter name: {name}")
        v = self._push("leaf", (), np.array(as_array2(value), copy=True))
        self.param_index[name] = v.idx
        return v

    # -- primitives ---------------------------------------------------------

    def matmul(self, a, b):
        va, vb = a.value, b.value
        if va.shape[1] != vb.shape[0]:
            raise ShapeError("matmul", va.shape, vb.shape)
        return self._push("matmul", (a.idx, b.idx), va @ vb)

    def _binary_elementwise(self, op, a, b, fn):
        va, vb = a.value, b.value
        ok = va.shape == vb.shape or (
            va.shape[1] == vb.shape[1] and (va.shape[0] == 1 or vb.shape[0] == 1)
        )
        if not ok:
            raise ShapeError(op, va.shape, vb.shape)
        return self._push(op, (a.idx, b.idx), fn(va, vb))

    def add(self, a, b):
        return self._binary_elementwise("add", a, b, np.add)

    def sub(self, a, b):
        return self._binary_elementwise("sub", a, b, np.subtract)

    def mul(self, a, b):
        return self._binary_elementwise("mul", a, b, np.multiply)

    def scale(self, a, c):
        c = float(c)
        return self._push("scale", (a.idx,), c * a.value, aux=c)

    def tanh(self, a):
        return self._push("tanh", (a.idx,), np.tanh(a.value))

    def sigmoid(self, a):
        v = a.value
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return self._push("sigmoid", (a.idx,), out)

    def relu(self, a):
        return self._push("relu", (a.idx,), np.maximum(a.value, 0.0))

    def exp(self, a):
        return self._push("exp", (a.idx,), np.exp(a.value))

    def log(self, a):
        return self._push("log", (a.idx,), np.log(a.value))

    def square(self, a):
        return self._push("square", (a.idx,), a.value * a.value)

    def softmax_rows(self, a):
        v = a.value
        e = np.exp(v - v.max(axis=1, keepdims=True))
        return self._push("softmax_rows", (a.idx,), e / e.sum(axis=1, keepdims=True))

    def log_softmax_rows(self, a):
        v = a.value
        shifted = v - v.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return self._push("log_softmax_rows", (a.idx,), shifted - lse)

    def concat_cols(self, a, b):
        va, vb = a.value, b.value
        if va.shape[0] != vb.shape[0]:
            raise ShapeError("concat_cols", va.shape, vb.shape)
        return self._push("concat_cols", (a.idx, b.idx), np.concatenate([va, vb], axis=1))

    def slice_cols(self, a, start, stop):
        v = a.value
        if not (0 <= start <= stop <= v.shape[1]):
            raise ShapeError("slice_cols", v.shape, (start, stop))
        return self._push("slice_cols", (a.idx,), v[:, start:stop].copy(), aux=(start, stop))

    def sum(self, a):
        return self._push("sum", (a.idx,), np.array([[a.value.sum()]]))

    def mean(self, a):
        return self._push("mean", (a.idx,), np.array([[a.value.mean()]]))

    def transpose(self, a):
        return self._push("transpose", (a.idx,), a.value.T.copy())

    def reshape(self, a, rows, cols):
        v = a.value
        if rows * cols != v.size:
            raise ShapeError("reshape", v.shape, (rows, cols))
        return self._push("reshape", (a.idx,), v.reshape(rows, cols).copy())

    # -- reverse pass ---------------------------------------------------------

    def backward(self, root):
        """Accumulate adjoints from a scalar root; returns the adjoint list."""
        rv = root.value
        if rv.shape != (1, 1):
            raise ShapeError("backward", rv.shape)
        adjoints = [None] * len(self.nodes)
        adjoints[root.idx] = np.ones((1, 1))
        for idx in range(root.idx, -1, -1):
            g = adjoints[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if node.op == "leaf":
                continue
            rule = ADJOINT_RULES[node.op]
            parent_values = tuple(self.nodes[p].value for p in node.parents)
            contribs = rule(node.value, parent_values, node.aux, g)
            for p, contrib in zip(node.parents, contribs):
                if adjoints[p] is None:
                    adjoints[p] = contrib.copy()
                else:
                    adjoints[p] += contrib
        return adjoints

    def gradients(self, root):
        """Gradient of a scalar root for every named parameter leaf.

        Parameters not reachable from the root get an exact zero gradient.
        """
        adjoints = self.backward(root)
        out = {}
        for name, idx in self.param_index.items():
            g = adjoints[idx]
            out[name] = np.zeros_like(self.nodes[idx].value) if g is None else g
        return out


def row_sums(a):
    """Per-row sum as a column vector, composed from matmul."""
    ones = a.tape.const(np.ones((a.shape[1], 1)))
    return a @ ones


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_param: str = ""
    worst_index: tuple = ()
    n_scalars: int = 0
    non_finite: bool = False

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max_rel_err={self.max_rel_err:.3e} "
            f"worst={self.worst_param}{list(self.worst_index)} over {self.n_scalars} scalars"
        )


def finite_diff_check(loss_fn, params, step=1e-5, tolerance=1e-5, rel_floor=1e-3):
    """Compare analytical gradients against central finite differences.

    `loss_fn(params)` must deterministically build a fresh tape and return
    `(tape, root)` with a scalar root. The relative error denominator is
    floored at `rel_floor` so that noise on near-zero gradient components
    does not mask the comparison scale of the loss itself.
    """
    tape, root = loss_fn(params)
    base = root.item()
    if not np.isfinite(base):
        return GradCheckReport(np.inf, False, non_finite=True)
    analytic = tape.gradients(root)

    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    max_rel = 0.0
    worst = ("", ())
    n = 0
    for name in params:
        arr = work[name]
        grad = analytic.get(name)
        if grad is None:
            raise KeyError(f"loss_fn did not register parameter {name!r} on its tape")
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            _, r_plus = loss_fn(work)
            arr[idx] = orig - step
            _, r_minus = loss_fn(work)
            arr[idx] = orig
            fp, fm = r_plus.item(), r_minus.item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(np.inf, False, name, idx, n, non_finite=True)
            fd = (fp - fm) / (2.0 * step)
            ad = grad[idx]
            rel = abs(ad - fd) / max(abs(ad), abs(fd), rel_floor)
            n += 1
            if rel > max_rel:
                max_rel = rel
                worst = (name, idx)
    return GradCheckReport(max_rel, max_rel <= tolerance, worst[0], worst[1], n)
