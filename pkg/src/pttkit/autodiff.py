"""Minimal reverse-mode differentiation over numpy arrays.

Only what the likelihood and the penalty terms need is implemented: einsum,
a few elementwise maps, indexing and the two chain kernels.  Complex values
follow the real/imaginary convention: the gradient stored for a complex node
is ``dL/dRe z + 1j * dL/dIm z`` of a real scalar ``L``.  For an op that is
holomorphic in its input this makes the backward rule ``g_x = conj(J)^T g_y``,
which is what every rule below implements.
"""

from __future__ import annotations

import numpy as np

from . import kernels

__all__ = [
    "Tape",
    "Node",
    "einsum",
    "conj",
    "real",
    "abs2",
    "add",
    "sub",
    "mul",
    "scale",
    "divide",
    "log",
    "clamp_min",
    "total",
    "reshape",
    "transpose",
    "take",
    "stack",
    "matrix_chain",
    "pauli_chain",
]


class Node:
    __slots__ = ("value", "grad", "_backward", "tape")

    def __init__(self, value, tape: "Tape", backward=None):
        self.value = value
        self.grad = None
        self._backward = backward
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype})"


class Tape:
    """Records nodes in creation order and replays them backwards."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value) -> Node:
        node = Node(np.asarray(value), self)
        self.nodes.append(node)
        return node

    def _record(self, value, backward) -> Node:
        node = Node(value, self, backward)
        self.nodes.append(node)
        return node

    def backward(self, out: Node) -> None:
        if np.ndim(out.value) != 0 or np.iscomplexobj(out.value):
            raise ValueError("backward needs a real scalar output")
        out.grad = np.float64(1.0)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def _v(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ValueError("at least one operand must be a tape node")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _acc(x, g) -> None:
    if not isinstance(x, Node):
        return
    if not np.iscomplexobj(x.value) and np.iscomplexobj(g):
        g = g.real
    if g.shape != x.value.shape:
        g = _unbroadcast(g, x.value.shape)
    x.grad = g if x.grad is None else x.grad + g


def _is_const(x) -> bool:
    return not isinstance(x, Node)


# --- multilinear --------------------------------------------------------

def einsum(spec: str, *ops) -> Node:
    """Differentiable ``np.einsum`` (explicit ``->`` form, no repeated indices
    inside one operand)."""
    tape = _tape_of(*ops)
    lhs, out = spec.replace(" ", "").split("->")
    terms = lhs.split(",")
    vals = [_v(o) for o in ops]
    value = np.einsum(spec, *vals, optimize=len(ops) > 2)

    def backward(g):
        for i, op in enumerate(ops):
            if _is_const(op):
                continue
            others = [terms[j] for j in range(len(ops)) if j != i]
            other_vals = [np.conj(vals[j]) for j in range(len(ops)) if j != i]
            present = set(out).union(*others) if others else set(out)
            target = "".join(c for c in terms[i] if c in present)
            gi = np.einsum(
                ",".join([out] + others) + "->" + target,
                g,
                *other_vals,
                optimize=len(others) > 1,
            )
            if target != terms[i]:
                shape = [1 if c not in present else vals[i].shape[k] for k, c in enumerate(terms[i])]
                gi = np.broadcast_to(gi.reshape(shape), vals[i].shape)
            _acc(op, np.asarray(gi))

    return tape._record(value, backward)


def conj(x: Node) -> Node:
    def backward(g):
        _acc(x, np.conj(g))

    return x.tape._record(np.conj(x.value), backward)


def real(x: Node) -> Node:
    def backward(g):
        _acc(x, g.astype(np.complex128) if np.iscomplexobj(x.value) else g)

    return x.tape._record(np.real(x.value).copy(), backward)


def abs2(x: Node) -> Node:
    val = x.value

    def backward(g):
        _acc(x, 2.0 * g * val)

    return x.tape._record((val.real**2 + val.imag**2) if np.iscomplexobj(val) else val**2, backward)


def add(a, b) -> Node:
    tape = _tape_of(a, b)

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return tape._record(_v(a) + _v(b), backward)


def sub(a, b) -> Node:
    tape = _tape_of(a, b)

    def backward(g):
        _acc(a, g)
        _acc(b, -g)

    return tape._record(_v(a) - _v(b), backward)


def mul(a, b) -> Node:
    """Elementwise product (holomorphic in both factors)."""
    tape = _tape_of(a, b)
    va, vb = _v(a), _v(b)

    def backward(g):
        _acc(a, g * np.conj(vb))
        _acc(b, g * np.conj(va))

    return tape._record(va * vb, backward)


def scale(x: Node, c) -> Node:
    def backward(g):
        _acc(x, g * np.conj(c))

    return x.tape._record(x.value * c, backward)


def divide(a, b) -> Node:
    """Real elementwise division."""
    tape = _tape_of(a, b)
    va, vb = _v(a), _v(b)

    def backward(g):
        _acc(a, g / vb)
        _acc(b, -g * va / vb**2)

    return tape._record(va / vb, backward)


def log(x: Node) -> Node:
    val = x.value

    def backward(g):
        _acc(x, g / val)

    return x.tape._record(np.log(val), backward)


def clamp_min(x: Node, floor: float) -> Node:
    val = x.value
    mask = val > floor

    def backward(g):
        _acc(x, g * mask)

    return x.tape._record(np.where(mask, val, floor), backward)


def total(x: Node, axis=None) -> Node:
    val = x.value

    def backward(g):
        if axis is None:
            _acc(x, np.broadcast_to(g, val.shape).copy())
        else:
            _acc(x, np.broadcast_to(np.expand_dims(g, axis), val.shape).copy())

    return x.tape._record(val.sum(axis=axis), backward)


# --- shape ---------------------------------------------------------------

def reshape(x: Node, shape) -> Node:
    old = x.value.shape

    def backward(g):
        _acc(x, g.reshape(old))

    return x.tape._record(x.value.reshape(shape), backward)


def transpose(x: Node, axes) -> Node:
    inv = np.argsort(axes)

    def backward(g):
        _acc(x, g.transpose(inv))

    return x.tape._record(x.value.transpose(axes), backward)


def take(x: Node, index) -> Node:
    """``x[index]`` for any numpy index; backward scatters with ``np.add.at``."""
    val = x.value

    def backward(g):
        buf = np.zeros(val.shape, dtype=np.result_type(val.dtype, g.dtype))
        np.add.at(buf, index, g)
        _acc(x, buf)

    return x.tape._record(val[index], backward)


def stack(xs, axis: int = 0) -> Node:
    tape = _tape_of(*xs)
    vals = [_v(x) for x in xs]

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for x, gi in zip(xs, parts):
            _acc(x, gi)

    return tape._record(np.stack(vals, axis=axis), backward)


# --- chain kernels -------------------------------------------------------

def matrix_chain(T: Node, R, idx: np.ndarray, iR: np.ndarray) -> Node:
    """``h_n = T[idx[n,S-1]] ... T[idx[n,0]] R[iR[n]]`` for every chain n."""
    tape = _tape_of(T, R)
    Tv = np.ascontiguousarray(_v(T), dtype=np.complex128)
    Rv = np.ascontiguousarray(_v(R), dtype=np.complex128)
    out = kernels.chain_forward(Tv, Rv, idx, iR)

    def backward(g):
        gT, gR = kernels.chain_backward(Tv, Rv, idx, iR, np.ascontiguousarray(g, dtype=np.complex128))
        _acc(T, gT)
        _acc(R, gR)

    return tape._record(out, backward)


def pauli_chain(
    sites: Node,
    site_idx: np.ndarray,
    perm: np.ndarray,
    phase: np.ndarray,
    p_out: np.ndarray,
    p_in: np.ndarray,
    Lb,
    iL: np.ndarray,
    Rb,
    iR: np.ndarray,
) -> Node:
    """Pauli expectations of a locally purified chain (see :mod:`pttkit.kernels`)."""
    tape = _tape_of(sites, Lb, Rb)
    sv = np.ascontiguousarray(_v(sites), dtype=np.complex128)
    lv = np.ascontiguousarray(_v(Lb), dtype=np.complex128)
    rv = np.ascontiguousarray(_v(Rb), dtype=np.complex128)
    args = (sv, site_idx, perm, phase, p_out, p_in, lv, iL, rv, iR)
    out = kernels.pauli_forward(*args)

    def backward(g):
        gs, gl, gr = kernels.pauli_backward(*args, np.ascontiguousarray(g, dtype=np.complex128))
        _acc(sites, gs)
        _acc(Lb, gl)
        _acc(Rb, gr)

    return tape._record(out, backward)
