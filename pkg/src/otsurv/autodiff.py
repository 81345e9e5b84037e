"""Minimal reverse-mode differentiation on a recording tape.

Every differentiable value is a :class:`Var` created through :class:`Tape`
ops; the tape holds the creation order, which is a valid topological order
for the backward sweep.  All values are float64 ndarrays (scalars have
shape ()).  Matrices are the only first-class citizens: row vectors are
(1, d) arrays.

Ops implement exactly the vector-Jacobian products the survival pipeline
needs; gradients are verified against central finite differences in the
test suite.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, StateError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    """A value plus the back-references needed to differentiate through it."""

    __slots__ = ("value", "grad", "backrefs")

    def __init__(self, value, backrefs=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.backrefs = backrefs  # tuple of (parent Var, vjp callable)

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Op recorder; one forward pass and one backward sweep per tape."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.consumed = False

    def _emit(self, value, backrefs=()) -> Var:
        node = Var(value, backrefs)
        self.nodes.append(node)
        return node

    # -- leaves ------------------------------------------------------------

    def leaf(self, value) -> Var:
        """A differentiable input (a parameter tensor)."""
        return self._emit(value)

    def const(self, value) -> Var:
        """A non-differentiable input; backward never reaches past it."""
        node = Var(value)
        return node

    # -- linear algebra ----------------------------------------------------

    def matmul(self, a: Var, b: Var) -> Var:
        if a.value.shape[-1] != b.value.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
        return self._emit(
            a.value @ b.value,
            ((a, lambda g, b=b: g @ b.value.T),
             (b, lambda g, a=a: a.value.T @ g)),
        )

    def transpose(self, a: Var) -> Var:
        return self._emit(a.value.T, ((a, lambda g: g.T),))

    def add(self, a: Var, b: Var) -> Var:
        return self._emit(
            a.value + b.value,
            ((a, lambda g, s=a.value.shape: _unbroadcast(g, s)),
             (b, lambda g, s=b.value.shape: _unbroadcast(g, s))),
        )

    def mul(self, a: Var, b: Var) -> Var:
        return self._emit(
            a.value * b.value,
            ((a, lambda g, b=b, s=a.value.shape: _unbroadcast(g * b.value, s)),
             (b, lambda g, a=a, s=b.value.shape: _unbroadcast(g * a.value, s))),
        )

    def scale(self, a: Var, c: float) -> Var:
        return self._emit(a.value * c, ((a, lambda g, c=c: g * c),))

    def neg(self, a: Var) -> Var:
        return self.scale(a, -1.0)

    def sub_from(self, c: float, a: Var) -> Var:
        """c - a for a plain float c."""
        return self._emit(c - a.value, ((a, lambda g: -g),))

    def add_n(self, terms: list[Var]) -> Var:
        total = terms[0].value
        for t in terms[1:]:
            total = total + t.value
        return self._emit(total, tuple((t, lambda g: g) for t in terms))

    # -- nonlinearities ----------------------------------------------------

    def selu(self, a: Var, alpha: float, lam: float) -> Var:
        x = a.value
        pos = x > 0
        y = lam * np.where(pos, x, alpha * (np.exp(np.minimum(x, 0.0)) - 1.0))
        deriv = lam * np.where(pos, 1.0, alpha * np.exp(np.minimum(x, 0.0)))
        return self._emit(y, ((a, lambda g, d=deriv: g * d),))

    def sigmoid(self, a: Var) -> Var:
        x = a.value
        z = np.exp(-np.abs(x))  # never overflows; saturates to exact 0/1
        s = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        return self._emit(s, ((a, lambda g, s=s: g * s * (1.0 - s)),))

    def softmax_rows(self, a: Var) -> Var:
        z = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)

        def vjp(g, s=s):
            return s * (g - np.sum(g * s, axis=1, keepdims=True))

        return self._emit(s, ((a, vjp),))

    def log(self, a: Var) -> Var:
        return self._emit(np.log(a.value), ((a, lambda g, a=a: g / a.value),))

    def clamp_min(self, a: Var, floor: float) -> Var:
        mask = a.value > floor
        return self._emit(np.maximum(a.value, floor),
                          ((a, lambda g, m=mask: g * m),))

    # -- shape ops ----------------------------------------------------------

    def mean_rows(self, a: Var) -> Var:
        n = a.value.shape[0]
        return self._emit(
            a.value.mean(axis=0, keepdims=True),
            ((a, lambda g, n=n, shape=a.value.shape: np.broadcast_to(g / n, shape).copy()),),
        )

    def col_slice(self, a: Var, j0: int, j1: int) -> Var:
        def vjp(g, shape=a.value.shape, j0=j0, j1=j1):
            out = np.zeros(shape)
            out[:, j0:j1] = g
            return out

        return self._emit(a.value[:, j0:j1].copy(), ((a, vjp),))

    def concat_cols(self, parts: list[Var]) -> Var:
        widths = [p.value.shape[1] for p in parts]
        offsets = np.cumsum([0] + widths)
        backrefs = tuple(
            (p, lambda g, k0=offsets[k], k1=offsets[k + 1]: g[:, k0:k1])
            for k, p in enumerate(parts)
        )
        return self._emit(np.concatenate([p.value for p in parts], axis=1), backrefs)

    def concat_rows(self, parts: list[Var]) -> Var:
        heights = [p.value.shape[0] for p in parts]
        offsets = np.cumsum([0] + heights)
        backrefs = tuple(
            (p, lambda g, k0=offsets[k], k1=offsets[k + 1]: g[k0:k1, :])
            for k, p in enumerate(parts)
        )
        return self._emit(np.concatenate([p.value for p in parts], axis=0), backrefs)

    def pick(self, a: Var, i: int, j: int) -> Var:
        def vjp(g, shape=a.value.shape, i=i, j=j):
            out = np.zeros(shape)
            out[i, j] = g
            return out

        return self._emit(a.value[i, j], ((a, vjp),))

    def sum_all(self, a: Var) -> Var:
        return self._emit(
            a.value.sum(),
            ((a, lambda g, shape=a.value.shape: np.broadcast_to(g, shape).copy()),),
        )


def backward(tape: Tape, root: Var) -> None:
    """Accumulate gradients of ``root`` into every reachable Var's ``.grad``."""
    if tape.consumed:
        raise StateError("tape already consumed by a previous backward pass")
    if root.value.shape != ():
        raise ShapeError(f"backward root must be scalar, got shape {root.value.shape}")
    tape.consumed = True
    root.grad = np.ones(())
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        for parent, vjp in node.backrefs:
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.zeros(parent.value.shape)
            parent.grad = parent.grad + contrib
