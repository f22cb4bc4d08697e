"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op in this module accepts plain arrays as well as :class:`Var` objects.
With plain arrays it evaluates eagerly; as soon as one argument is a ``Var`` the
result is recorded on that variable's :class:`Tape`.  Both paths issue the same
numpy calls, so a taped forward pass reproduces an eager one bit for bit.

Complex quantities are carried as explicit (real, imaginary) pairs.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

OPS = (
    "input", "add", "sub", "mul", "div", "neg", "tanh", "sin", "cos", "exp",
    "relu", "square", "sum", "dot", "matvec", "concat", "slice",
)


class TapeError(RuntimeError):
    pass


class Tape:
    """Append-only record of one forward pass; insertion order is topological."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.inputs: dict[str, Var] = {}
        self.output: Var | None = None

    def input(self, name: str, value) -> "Var":
        value = np.array(value, dtype=np.float64)
        v = Var(value, "input", (), None, self)
        self.inputs[name] = v
        return v

    def __len__(self):
        return len(self.nodes)


class Var:
    """A node on a tape: primal value, op kind, parents and a vector-Jacobian rule."""

    __slots__ = ("value", "op", "parents", "vjp", "tape", "index")
    __array_priority__ = 100.0  # make ndarray <op> Var defer to Var's reflected ops

    def __init__(self, value, op, parents, vjp, tape):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.tape = tape
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matvec(self, o)
    __rmatmul__ = lambda self, o: matvec(o, self)
    __getitem__ = lambda self, idx: take(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)


def value(x):
    """Primal value of ``x`` (identity on arrays and scalars)."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TapeError("operands recorded on different tapes")
    return tape


def _unbroadcast(g, shape):
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _record(op, out, parents, vjp):
    tape = _tape_of(*parents)
    if tape is None:
        return out
    return Var(out, op, parents, vjp, tape)


# ----------------------------------------------------------------------------
# elementwise binary ops


def add(a, b):
    av, bv = value(a), value(b)
    out = np.add(av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = np.subtract(av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    return _record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = np.multiply(av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)),
    )


def div(a, b):
    av, bv = value(a), value(b)
    out = np.divide(av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * out / bv, sb)),
    )


# ----------------------------------------------------------------------------
# elementwise unary ops


def neg(a):
    return _record("neg", np.negative(value(a)), (a,), lambda g: (-g,))


def tanh(a):
    out = np.tanh(value(a))
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a):
    av = value(a)
    return _record("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    av = value(a)
    return _record("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def exp(a):
    out = np.exp(value(a))
    return _record("exp", out, (a,), lambda g: (g * out,))


def relu(a):
    av = value(a)
    out = np.maximum(av, 0.0)
    # subgradient 0 at the kink
    return _record("relu", out, (a,), lambda g: (g * (av > 0.0),))


def square(a):
    av = value(a)
    return _record("square", np.square(av), (a,), lambda g: (2.0 * g * av,))


# ----------------------------------------------------------------------------
# reductions and linear algebra


def sum_(a, axis=None):
    av = value(a)
    out = np.sum(av, axis=axis)
    shape = np.shape(av)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None):
    n = np.size(value(a)) if axis is None else np.shape(value(a))[axis]
    return mul(sum_(a, axis), 1.0 / n)


def dot(a, b):
    """Inner product over the last axis."""
    av, bv = value(a), value(b)
    out = np.sum(np.multiply(av, bv), axis=-1)
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g):
        g = np.expand_dims(g, -1)
        return _unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)

    return _record("dot", out, (a, b), vjp)


def matvec(a, b):
    """Matrix product ``a @ b`` for 1-D/2-D operands."""
    av, bv = value(a), value(b)
    if av.ndim > 2 or bv.ndim > 2:
        raise TapeError("matvec supports only 1-D and 2-D operands")
    out = np.matmul(av, bv)

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g * bv, g * av

    return _record("matvec", out, (a, b), vjp)


def concat(items: Sequence, axis: int = -1):
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([np.shape(v)[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tuple(items), vjp)


def take(a, idx):
    """Indexing (basic or advanced) with a scatter-add adjoint."""
    av = value(a)
    out = av[idx]

    def vjp(g):
        z = np.zeros_like(av)
        np.add.at(z, idx, g)
        return (z,)

    return _record("slice", out, (a,), vjp)


# ----------------------------------------------------------------------------
# driver


GradientBundle = dict  # name -> adjoint array, same shape as the input


def forward_record(program: Callable[..., object], inputs: Mapping[str, np.ndarray]):
    """Run ``program(**inputs)`` on a fresh tape and return ``(output value, tape)``."""
    tape = Tape()
    args = {k: tape.input(k, v) for k, v in inputs.items()}
    out = program(**args)
    if not isinstance(out, Var):
        # output does not depend on any input
        out = Var(np.asarray(out, dtype=np.float64), "input", (), None, tape)
    if np.ndim(out.value) != 0:
        raise TapeError(f"program output must be scalar, got shape {out.shape}")
    tape.output = out
    return float(out.value), tape


def backward(tape: Tape) -> GradientBundle:
    """Reverse sweep from ``tape.output``; every recorded input gets an adjoint."""
    if tape.output is None:
        raise TapeError("backward called before forward_record")
    grads: dict[int, np.ndarray] = {tape.output.index: np.ones(())}
    for node in reversed(tape.nodes[: tape.output.index + 1]):
        g = grads.pop(node.index, None) if node.op != "input" else grads.get(node.index)
        if g is None or node.vjp is None:
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if isinstance(p, Var):
                if p.index in grads:
                    grads[p.index] = grads[p.index] + pg
                else:
                    grads[p.index] = pg
    return {
        name: np.asarray(grads.get(v.index, np.zeros_like(v.value)), dtype=np.float64).reshape(v.shape)
        for name, v in tape.inputs.items()
    }


def value_and_grad(program, inputs):
    out, tape = forward_record(program, inputs)
    return out, backward(tape)


def finite_diff_check(
    program: Callable[..., object],
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-6,
    coords: Mapping[str, Sequence[int]] | None = None,
    fd_dtype=np.float64,
) -> float:
    """Worst relative error between taped gradients and central differences.

    The error of one coordinate is ``|g_ad - g_fd| / max(1, |g_fd|)``.
    ``coords`` restricts the probe to the given flat indices per input.
    The taped gradient is always float64; ``fd_dtype=np.longdouble`` evaluates
    the difference quotients in extended precision, which removes the
    cancellation noise of ``(f(x+h) - f(x-h)) / 2h`` when ``|f|`` is large.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    _, grads = value_and_grad(program, inputs)
    probe = {k: v.astype(fd_dtype) for k, v in inputs.items()}
    h = fd_dtype(h)
    worst = 0.0
    for name, x in probe.items():
        idx = range(x.size) if coords is None else coords.get(name, ())
        flat = x.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = fd_dtype(program(**probe))
            flat[i] = orig - h
            fm = fd_dtype(program(**probe))
            flat[i] = orig
            g_fd = (fp - fm) / (2 * h)
            g_ad = grads[name].reshape(-1)[i]
            worst = max(worst, float(abs(g_ad - g_fd) / max(1.0, abs(g_fd))))
    return worst
