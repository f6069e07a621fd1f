"""A small reverse-mode differentiation tape over 2-d float64 arrays.

A :class:`Tape` is built once (a straight-line program of primitive
applications) and then evaluated for concrete leaf values. Nodes are integer
ids; leaves are addressed by name.

    tape = Tape()
    x = tape.leaf("x")
    y = tape.sum(tape.mul(x, x))
    values = evaluate(tape, {"x": np.array([[3.0]])})
    grads = gradient(tape, {"x": np.array([[3.0]])}, y)   # {"x": [[6.0]]}

Every value is a 2-d array; scalars are 1x1. There is no implicit
broadcasting: ``broadcast_rows`` repeats a 1xF row over the batch axis and a
1x1 scale is applied with ``matmul``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRIMITIVES = (
    "leaf", "const", "matmul", "transpose", "add", "sub", "mul", "div", "neg",
    "sigmoid", "tanh", "sqrt", "exp", "log", "broadcast_rows", "sum", "mean",
    "concat", "slice",
)


class TapeError(RuntimeError):
    pass


class TapeShapeError(TapeError):
    def __init__(self, index, op, expected, actual):
        self.index, self.op, self.expected, self.actual = index, op, expected, actual
        super().__init__(f"record {index} ({op}): expected shape {expected}, got {actual}")


class NonFiniteError(TapeError):
    def __init__(self, index, op):
        self.index, self.op = index, op
        super().__init__(f"record {index} ({op}) produced a non-finite value")


def as_array(value):
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise TapeError(f"arrays must be at most 2-d, got shape {a.shape}")
    return a


@dataclass
class Record:
    op: str
    inputs: tuple
    output: int
    attrs: dict = field(default_factory=dict)


class Tape:
    def __init__(self):
        self.records: list[Record] = []
        self.leaves: dict[str, int] = {}
        self.values: dict[int, np.ndarray] | None = None
        self._evaluated_leaves = None

    def __len__(self):
        return len(self.records)

    def _emit(self, op, inputs=(), **attrs):
        out = len(self.records)
        for i in inputs:
            if not 0 <= i < out:
                raise TapeError(f"{op}: input node {i} does not exist yet")
        self.records.append(Record(op, tuple(inputs), out, attrs))
        self.values = None
        return out

    # -- sources -----------------------------------------------------------
    def leaf(self, name, shape=None):
        if name in self.leaves:
            return self.leaves[name]
        node = self._emit("leaf", name=name, shape=tuple(shape) if shape else None)
        self.leaves[name] = node
        return node

    def const(self, value):
        return self._emit("const", value=as_array(value).copy())

    # -- primitives --------------------------------------------------------
    def matmul(self, a, b):
        return self._emit("matmul", (a, b))

    def transpose(self, a):
        return self._emit("transpose", (a,))

    def add(self, a, b):
        return self._emit("add", (a, b))

    def sub(self, a, b):
        return self._emit("sub", (a, b))

    def mul(self, a, b):
        return self._emit("mul", (a, b))

    def div(self, a, b):
        return self._emit("div", (a, b))

    def neg(self, a):
        return self._emit("neg", (a,))

    def sigmoid(self, a):
        return self._emit("sigmoid", (a,))

    def tanh(self, a):
        return self._emit("tanh", (a,))

    def sqrt(self, a):
        return self._emit("sqrt", (a,))

    def exp(self, a):
        return self._emit("exp", (a,))

    def log(self, a):
        return self._emit("log", (a,))

    def broadcast_rows(self, a, n):
        return self._emit("broadcast_rows", (a,), n=int(n))

    def sum(self, a, axis=None):
        return self._emit("sum", (a,), axis=axis)

    def mean(self, a, axis=None):
        return self._emit("mean", (a,), axis=axis)

    def concat(self, nodes, axis=0):
        return self._emit("concat", tuple(nodes), axis=axis)

    def slice(self, a, rows=None, cols=None):
        return self._emit("slice", (a,), rows=rows, cols=cols)

    def fill_like(self, a, value):
        """Constant with a's shape (known only at evaluation) filled with value."""
        return self._emit("const", value=None, fill=float(value), like=a)

    def scale(self, a, c):
        """a * c for a python scalar c."""
        return self.mul(a, self.fill_like(a, c))


def _reduce(x, axis, op):
    if axis is None:
        return np.array([[op(x)]])
    return op(x, axis=axis, keepdims=True)


def _forward(tape: Tape, leaves, check_finite=True):
    values = {}
    missing = [name for name in tape.leaves if name not in leaves]
    if missing:
        raise TapeError(f"missing leaf values: {missing}")
    for k, rec in enumerate(tape.records):
        ins = [values[i] for i in rec.inputs]
        op = rec.op
        if op == "leaf":
            out = as_array(leaves[rec.attrs["name"]])
            if rec.attrs["shape"] is not None and out.shape != rec.attrs["shape"]:
                raise TapeShapeError(k, op, rec.attrs["shape"], out.shape)
        elif op == "const":
            if rec.attrs["value"] is None:
                out = np.full_like(values[rec.attrs["like"]], rec.attrs["fill"])
            else:
                out = rec.attrs["value"]
        elif op == "matmul":
            a, b = ins
            if a.shape[1] != b.shape[0]:
                raise TapeShapeError(k, op, (a.shape[1], "*"), b.shape)
            out = a @ b
        elif op == "transpose":
            out = ins[0].T.copy()
        elif op in ("add", "sub", "mul", "div"):
            a, b = ins
            if a.shape != b.shape:
                raise TapeShapeError(k, op, a.shape, b.shape)
            out = {"add": np.add, "sub": np.subtract, "mul": np.multiply,
                   "div": np.divide}[op](a, b)
        elif op == "neg":
            out = -ins[0]
        elif op == "sigmoid":
            out = 1.0 / (1.0 + np.exp(-ins[0]))
        elif op == "tanh":
            out = np.tanh(ins[0])
        elif op == "sqrt":
            out = np.sqrt(ins[0])
        elif op == "exp":
            out = np.exp(ins[0])
        elif op == "log":
            out = np.log(ins[0])
        elif op == "broadcast_rows":
            a = ins[0]
            if a.shape[0] != 1:
                raise TapeShapeError(k, op, (1, a.shape[1]), a.shape)
            out = np.repeat(a, rec.attrs["n"], axis=0)
        elif op == "sum":
            out = _reduce(ins[0], rec.attrs["axis"], np.sum)
        elif op == "mean":
            out = _reduce(ins[0], rec.attrs["axis"], np.mean)
        elif op == "concat":
            axis = rec.attrs["axis"]
            other = 1 - axis
            for a in ins[1:]:
                if a.shape[other] != ins[0].shape[other]:
                    raise TapeShapeError(k, op, ins[0].shape, a.shape)
            out = np.concatenate(ins, axis=axis)
        elif op == "slice":
            a = ins[0]
            r = rec.attrs["rows"] or (0, a.shape[0])
            c = rec.attrs["cols"] or (0, a.shape[1])
            if not (0 <= r[0] < r[1] <= a.shape[0] and 0 <= c[0] < c[1] <= a.shape[1]):
                raise TapeShapeError(k, op, (r, c), a.shape)
            out = a[r[0]:r[1], c[0]:c[1]].copy()
        else:
            raise TapeError(f"record {k}: unknown primitive {op!r}")
        if check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(k, op)
        values[rec.output] = out
    return values


def evaluate(tape: Tape, leaves):
    """Forward values for every node; also saved on the tape for `gradient`."""
    # non-finite results are reported as NonFiniteError instead
    with np.errstate(all="ignore"):
        values = _forward(tape, leaves)
    tape.values = values
    tape._evaluated_leaves = {name: as_array(leaves[name]).copy() for name in tape.leaves}
    return values


def _backward(tape: Tape, values, seed):
    if values[seed].shape != (1, 1):
        raise TapeError(f"seed node {seed} is not scalar (shape {values[seed].shape})")
    adj = {seed: np.ones((1, 1))}

    def acc(node, g):
        if node in adj:
            adj[node] = adj[node] + g
        else:
            adj[node] = g

    for rec in reversed(tape.records[:seed + 1]):
        g = adj.pop(rec.output, None) if rec.op not in ("leaf",) else adj.get(rec.output)
        if g is None or rec.op in ("leaf", "const"):
            continue
        ins = [values[i] for i in rec.inputs]
        y = values[rec.output]
        op = rec.op
        if op == "matmul":
            a, b = ins
            acc(rec.inputs[0], g @ b.T)
            acc(rec.inputs[1], a.T @ g)
        elif op == "transpose":
            acc(rec.inputs[0], g.T)
        elif op == "add":
            acc(rec.inputs[0], g)
            acc(rec.inputs[1], g)
        elif op == "sub":
            acc(rec.inputs[0], g)
            acc(rec.inputs[1], -g)
        elif op == "mul":
            a, b = ins
            acc(rec.inputs[0], g * b)
            acc(rec.inputs[1], g * a)
        elif op == "div":
            a, b = ins
            acc(rec.inputs[0], g / b)
            acc(rec.inputs[1], -g * a / (b * b))
        elif op == "neg":
            acc(rec.inputs[0], -g)
        elif op == "sigmoid":
            acc(rec.inputs[0], g * y * (1.0 - y))
        elif op == "tanh":
            acc(rec.inputs[0], g * (1.0 - y * y))
        elif op == "sqrt":
            acc(rec.inputs[0], g / (2.0 * y))
        elif op == "exp":
            acc(rec.inputs[0], g * y)
        elif op == "log":
            acc(rec.inputs[0], g / ins[0])
        elif op == "broadcast_rows":
            acc(rec.inputs[0], g.sum(axis=0, keepdims=True))
        elif op in ("sum", "mean"):
            x = ins[0]
            scale = 1.0
            if op == "mean":
                axis = rec.attrs["axis"]
                scale = 1.0 / (x.size if axis is None else x.shape[axis])
            acc(rec.inputs[0], np.broadcast_to(g * scale, x.shape).copy())
        elif op == "concat":
            axis = rec.attrs["axis"]
            offset = 0
            for node, x in zip(rec.inputs, ins):
                n = x.shape[axis]
                acc(node, g[offset:offset + n] if axis == 0 else g[:, offset:offset + n])
                offset += n
        elif op == "slice":
            x = ins[0]
            r = rec.attrs["rows"] or (0, x.shape[0])
            c = rec.attrs["cols"] or (0, x.shape[1])
            full = np.zeros_like(x)
            full[r[0]:r[1], c[0]:c[1]] = g
            acc(rec.inputs[0], full)
        else:
            raise TapeError(f"no backward rule for {op!r}")
    return adj


def gradient(tape: Tape, leaves, seed_node):
    """d(seed)/d(leaf) for every leaf; unused leaves get zero arrays."""
    if tape.values is None or tape._evaluated_leaves is None:
        raise TapeError("tape not evaluated")
    for name in tape.leaves:
        if name not in leaves or not np.array_equal(as_array(leaves[name]),
                                                    tape._evaluated_leaves[name]):
            raise TapeError("tape not evaluated with these leaf values")
    adj = _backward(tape, tape.values, seed_node)
    out = {}
    for name, node in tape.leaves.items():
        g = adj.get(node)
        out[name] = g.copy() if g is not None else np.zeros_like(tape.values[node])
    return out


@dataclass
class FDReport:
    max_rel_error: dict
    flagged: list  # (leaf, index, analytic, numeric, rel_error)
    tol: float

    @property
    def passed(self):
        return not self.flagged

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def finite_difference_check(tape: Tape, leaves, seed_node, step=1e-5, tol=1e-6, only=None):
    """Compare `gradient` with central differences (f(x+h) - f(x-h)) / 2h.

    `only` optionally restricts the check to some leaf names.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = {k: as_array(v).copy() for k, v in leaves.items()}
    evaluate(tape, leaves)
    analytic = gradient(tape, leaves, seed_node)
    report = FDReport({}, [], tol)
    for name in tape.leaves:
        if only is not None and name not in only:
            continue
        x = leaves[name]
        worst = 0.0
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + step
            fp = _forward(tape, leaves, check_finite=False)[seed_node][0, 0]
            x[idx] = orig - step
            fm = _forward(tape, leaves, check_finite=False)[seed_node][0, 0]
            x[idx] = orig
            num = (fp - fm) / (2.0 * step)
            a = analytic[name][idx]
            err = float(relative_error(a, num))
            worst = max(worst, err)
            if err > tol:
                report.flagged.append((name, idx, float(a), float(num), err))
        report.max_rel_error[name] = worst
    return report
