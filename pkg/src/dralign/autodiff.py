"""Reverse-mode automatic differentiation on an append-only tape.

Every node holds a float64 numpy value (0-d for scalars).  ``gradient``
builds the adjoint computation out of ordinary tape operations, so the
returned gradient nodes can themselves be differentiated again.  This is
what makes a loss that contains first-order gradients (the Taylor
importance alignment term) trainable.

Typical use::

    tape = Tape()
    x = tape.variable(3.0)
    y = x * x
    (dy,) = gradient(tape, y, [x])      # dy.value == 6.0
    (d2y,) = gradient(tape, dy, [x])    # d2y.value == 2.0
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tape",
    "Node",
    "OPCODES",
    "variable",
    "constant",
    "apply",
    "gradient",
    "finite_difference",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "square",
    "sqrt",
    "absolute",
    "matmul",
    "reduce_sum",
    "mean",
    "clip",
    "reshape",
    "total",
    "dot",
]


class Node:
    """Handle to one record on a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def opcode(self) -> str:
        return self.tape._ops[self.index]

    def __repr__(self) -> str:
        return f"Node({self.index}, {self.opcode}, shape={self.shape})"

    def __float__(self) -> float:
        return float(self.value)

    def _lift(self, other) -> "Node":
        return self.tape._lift(other)

    def __add__(self, other):
        return apply(self.tape, "add", [self, self._lift(other)])

    def __radd__(self, other):
        return apply(self.tape, "add", [self._lift(other), self])

    def __sub__(self, other):
        return apply(self.tape, "sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return apply(self.tape, "sub", [self._lift(other), self])

    def __mul__(self, other):
        return apply(self.tape, "mul", [self, self._lift(other)])

    def __rmul__(self, other):
        return apply(self.tape, "mul", [self._lift(other), self])

    def __truediv__(self, other):
        return apply(self.tape, "div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return apply(self.tape, "div", [self._lift(other), self])

    def __neg__(self):
        return apply(self.tape, "neg", [self])

    def __abs__(self):
        return apply(self.tape, "abs", [self])

    def __pow__(self, power):
        if power == 2:
            return apply(self.tape, "square", [self])
        return NotImplemented

    def __matmul__(self, other):
        return apply(self.tape, "matmul", [self, self._lift(other)])

    def __rmatmul__(self, other):
        return apply(self.tape, "matmul", [self._lift(other), self])

    @property
    def T(self) -> "Node":
        return apply(self.tape, "transpose", [self])

    def sum(self, axis=None) -> "Node":
        return reduce_sum(self, axis)

    def mean(self, axis=None) -> "Node":
        return mean(self, axis)

    def reshape(self, *shape) -> "Node":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Append-only, topologically ordered record of operations.

    A tape is owned by one thread at a time; nothing here is global.
    """

    def __init__(self):
        self._ops: list[str] = []
        self._args: list[tuple[int, ...]] = []
        self._attrs: list[object] = []
        self._values: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._ops)

    def _append(self, op: str, args: tuple[int, ...], attr, value) -> Node:
        self._ops.append(op)
        self._args.append(args)
        self._attrs.append(attr)
        self._values.append(value)
        return Node(self, len(self._ops) - 1)

    def variable(self, value) -> Node:
        return self._append("var", (), None, np.array(value, dtype=np.float64))

    def constant(self, value) -> Node:
        return self._append("const", (), None, np.array(value, dtype=np.float64))

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            self.check(x)
            return x
        return self.constant(x)

    def check(self, node: Node) -> None:
        if not isinstance(node, Node):
            raise TypeError(f"expected a Node, got {type(node).__name__}")
        if node.tape is not self:
            raise ValueError("node belongs to a different tape")
        if not 0 <= node.index < len(self._ops):
            raise ValueError(f"dangling node handle {node.index}")

    def record(self, index: int) -> tuple[str, tuple[int, ...], object]:
        return self._ops[index], self._args[index], self._attrs[index]

    def evaluate(self, overrides: dict | None = None) -> list[np.ndarray]:
        """Replay every operation from the leaves.

        ``overrides`` maps leaf nodes to replacement values; without it the
        replay reproduces the cached values exactly.
        """
        repl = {}
        for node, val in (overrides or {}).items():
            self.check(node)
            if self._args[node.index]:
                raise ValueError("only leaf nodes can be overridden")
            repl[node.index] = np.array(val, dtype=np.float64)
        values: list[np.ndarray] = []
        for i, op in enumerate(self._ops):
            if op in ("var", "const"):
                values.append(repl.get(i, self._values[i]))
            else:
                operands = [values[j] for j in self._args[i]]
                values.append(_FORWARD[op](operands, self._attrs[i]))
        return values


# -- forward rules ---------------------------------------------------------


def _sum_to(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    return np.sum(x, axis=axes, keepdims=True).reshape(shape)


def _keepdims_shape(shape: tuple, axis) -> tuple:
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = {a % len(shape) for a in axes}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _dot_forward(v, _):
    n = len(v) // 2
    out = v[0] * v[n]
    for i in range(1, n):
        out = out + v[i] * v[n + i]
    return np.asarray(out, dtype=np.float64)


def _sum_forward(v, _):
    out = v[0]
    for x in v[1:]:
        out = out + x
    return np.asarray(out, dtype=np.float64)


_FORWARD: dict[str, Callable] = {
    "add": lambda v, _: np.add(v[0], v[1]),
    "sub": lambda v, _: np.subtract(v[0], v[1]),
    "mul": lambda v, _: np.multiply(v[0], v[1]),
    "div": lambda v, _: np.divide(v[0], v[1]),
    "neg": lambda v, _: np.negative(v[0]),
    "exp": lambda v, _: np.exp(v[0]),
    "log": lambda v, _: np.log(v[0]),
    "relu": lambda v, _: np.maximum(v[0], 0.0),
    "sigmoid": lambda v, _: np.asarray(expit(v[0])),
    "square": lambda v, _: np.square(v[0]),
    "sqrt": lambda v, _: np.sqrt(v[0]),
    "abs": lambda v, _: np.abs(v[0]),
    "sum": _sum_forward,
    "dot": _dot_forward,
    "matmul": lambda v, _: np.matmul(v[0], v[1]),
    "transpose": lambda v, _: np.ascontiguousarray(v[0].T),
    "reduce_sum": lambda v, axis: np.asarray(np.sum(v[0], axis=axis)),
    "reshape": lambda v, shape: np.reshape(v[0], shape),
    "broadcast_to": lambda v, shape: np.ascontiguousarray(np.broadcast_to(v[0], shape)),
    "sum_to": lambda v, shape: _sum_to(v[0], shape),
    "clip": lambda v, bounds: np.clip(v[0], bounds[0], bounds[1]),
    # locally constant, zero derivative
    "step": lambda v, _: (v[0] > 0).astype(np.float64),
    "sign": lambda v, _: np.sign(v[0]),
    "between": lambda v, bounds: ((v[0] >= bounds[0]) & (v[0] <= bounds[1])).astype(np.float64),
}

_ARITY = {
    "add": 2, "sub": 2, "mul": 2, "div": 2, "matmul": 2,
    "neg": 1, "exp": 1, "log": 1, "relu": 1, "sigmoid": 1, "square": 1,
    "sqrt": 1, "abs": 1, "transpose": 1, "reduce_sum": 1, "reshape": 1,
    "broadcast_to": 1, "sum_to": 1, "clip": 1, "step": 1, "sign": 1, "between": 1,
}

OPCODES = frozenset(_FORWARD)


def apply(tape: Tape, opcode: str, operands: Sequence[Node], attr=None) -> Node:
    """Append ``opcode(operands)`` to ``tape`` and return the new node."""
    if opcode not in _FORWARD:
        raise ValueError(f"unknown opcode {opcode!r}")
    for node in operands:
        tape.check(node)
    n = len(operands)
    if opcode in _ARITY:
        if n != _ARITY[opcode]:
            raise ValueError(f"{opcode} takes {_ARITY[opcode]} operands, got {n}")
    elif opcode == "sum":
        if n < 1:
            raise ValueError("sum needs at least one operand")
    elif opcode == "dot":
        if n < 2 or n % 2:
            raise ValueError("dot takes 2n operands [x_1..x_n, y_1..y_n]")
    if opcode == "matmul" and (operands[0].value.ndim != 2 or operands[1].value.ndim != 2):
        raise ValueError("matmul operands must be 2-D")
    value = _FORWARD[opcode]([x.value for x in operands], attr)
    return tape._append(opcode, tuple(x.index for x in operands), attr,
                        np.asarray(value, dtype=np.float64))


# -- backward rules --------------------------------------------------------
# Each rule receives the output node, the operand nodes and the upstream
# adjoint, and returns one adjoint per operand (None = no contribution).
# Rules only use tape operations, hence they are differentiable themselves.


def _unbroadcast(g: Node, shape: tuple) -> Node:
    if g.shape == shape:
        return g
    return apply(g.tape, "sum_to", [g], shape)


def _vjp_add(out, x, g):
    return [_unbroadcast(g, x[0].shape), _unbroadcast(g, x[1].shape)]


def _vjp_sub(out, x, g):
    return [_unbroadcast(g, x[0].shape), _unbroadcast(-g, x[1].shape)]


def _vjp_mul(out, x, g):
    return [_unbroadcast(g * x[1], x[0].shape), _unbroadcast(g * x[0], x[1].shape)]


def _vjp_div(out, x, g):
    ga = g / x[1]
    gb = -(ga * out)
    return [_unbroadcast(ga, x[0].shape), _unbroadcast(gb, x[1].shape)]


def _vjp_sigmoid(out, x, g):
    return [g * (out * (1.0 - out))]


def _vjp_relu(out, x, g):
    return [g * apply(g.tape, "step", [x[0]])]


def _vjp_abs(out, x, g):
    return [g * apply(g.tape, "sign", [x[0]])]


def _vjp_clip(out, x, g):
    bounds = out.tape._attrs[out.index]
    return [g * apply(g.tape, "between", [x[0]], bounds)]


def _vjp_sum(out, x, g):
    return [_unbroadcast(g, xi.shape) for xi in x]


def _vjp_dot(out, x, g):
    n = len(x) // 2
    gx = [_unbroadcast(g * x[n + i], x[i].shape) for i in range(n)]
    gy = [_unbroadcast(g * x[i], x[n + i].shape) for i in range(n)]
    return gx + gy


def _vjp_reduce_sum(out, x, g):
    axis = out.tape._attrs[out.index]
    shape = x[0].shape
    g = apply(g.tape, "reshape", [g], _keepdims_shape(shape, axis))
    return [apply(g.tape, "broadcast_to", [g], shape)]


_VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": lambda out, x, g: [-g],
    "exp": lambda out, x, g: [g * out],
    "log": lambda out, x, g: [g / x[0]],
    "relu": _vjp_relu,
    "sigmoid": _vjp_sigmoid,
    "square": lambda out, x, g: [g * (2.0 * x[0])],
    "sqrt": lambda out, x, g: [g / (2.0 * out)],
    "abs": _vjp_abs,
    "sum": _vjp_sum,
    "dot": _vjp_dot,
    "matmul": lambda out, x, g: [g @ x[1].T, x[0].T @ g],
    "transpose": lambda out, x, g: [g.T],
    "reduce_sum": _vjp_reduce_sum,
    "reshape": lambda out, x, g: [apply(g.tape, "reshape", [g], x[0].shape)],
    "broadcast_to": lambda out, x, g: [_unbroadcast(g, x[0].shape)],
    "sum_to": lambda out, x, g: [apply(g.tape, "broadcast_to", [g], x[0].shape)],
    "clip": _vjp_clip,
    "step": lambda out, x, g: [None],
    "sign": lambda out, x, g: [None],
    "between": lambda out, x, g: [None],
}


def gradient(tape: Tape, output: Node, wrt: Sequence[Node]) -> list[Node]:
    """Adjoints of ``output`` with respect to each node in ``wrt``.

    The adjoints are appended to ``tape`` as ordinary nodes.  A non-scalar
    output is seeded with ones, i.e. the gradient of its sum.
    """
    tape.check(output)
    for w in wrt:
        tape.check(w)
    top = output.index
    args = tape._args
    targets = {w.index for w in wrt}

    # which nodes up to `top` depend on at least one target
    live = bytearray(top + 1)
    for i in range(top + 1):
        if i in targets or any(live[j] for j in args[i]):
            live[i] = 1

    adjoint: dict[int, Node] = {top: tape.constant(np.ones(output.shape))}
    for i in range(top, -1, -1):
        g = adjoint.get(i)
        if g is None or not live[i] or not args[i]:
            continue
        operands = [Node(tape, j) for j in args[i]]
        contribs = _VJP[tape._ops[i]](Node(tape, i), operands, g)
        for j, c in zip(args[i], contribs):
            if c is None or not live[j]:
                continue
            prev = adjoint.get(j)
            adjoint[j] = c if prev is None else prev + c

    out = []
    for w in wrt:
        g = adjoint.get(w.index)
        out.append(g if g is not None else tape.constant(np.zeros(w.shape)))
    return out


def finite_difference(f: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of scalar ``f`` at ``point``."""
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.array(point, dtype=np.float64)
    flat = p.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(p))
        flat[i] = orig - step
        lo = float(f(p))
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(p.shape)


# -- functional helpers ----------------------------------------------------


def variable(tape: Tape, value) -> Node:
    return tape.variable(value)


def constant(tape: Tape, value) -> Node:
    return tape.constant(value)


def _unary(op: str) -> Callable[[Node], Node]:
    def f(x: Node) -> Node:
        return apply(x.tape, op, [x])

    f.__name__ = op
    return f


exp = _unary("exp")
log = _unary("log")
relu = _unary("relu")
sigmoid = _unary("sigmoid")
square = _unary("square")
sqrt = _unary("sqrt")
absolute = _unary("abs")


def matmul(a: Node, b: Node) -> Node:
    return apply(a.tape, "matmul", [a, a.tape._lift(b)])


def reduce_sum(x: Node, axis=None) -> Node:
    return apply(x.tape, "reduce_sum", [x], axis)


def mean(x: Node, axis=None) -> Node:
    shape = x.shape
    if axis is None:
        count = int(np.prod(shape)) if shape else 1
    else:
        count = shape[axis]
    return reduce_sum(x, axis) * (1.0 / count)


def clip(x: Node, lo: float, hi: float) -> Node:
    return apply(x.tape, "clip", [x], (lo, hi))


def reshape(x: Node, shape: tuple) -> Node:
    return apply(x.tape, "reshape", [x], tuple(shape))


def total(nodes: Iterable[Node]) -> Node:
    nodes = list(nodes)
    return apply(nodes[0].tape, "sum", nodes)


def dot(xs: Sequence[Node], ys: Sequence[Node]) -> Node:
    """Fused inner product sum_i xs[i] * ys[i]."""
    if len(xs) != len(ys):
        raise ValueError("dot needs equal-length operand lists")
    return apply(xs[0].tape, "dot", list(xs) + list(ys))
