"""Dense complex tensors with named axes.

Everything in the toolkit is ultimately expressed as contractions of small
dense tensors.  This module provides the labelled tensor container, a network
contractor with a cost-aware pairwise path, SVD splitting, a guarded Hermitian
eigensolver and the binary checkpoint format.
"""

from __future__ import annotations

import itertools
import json
import string
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np

__all__ = [
    "ComplexTensor",
    "NetworkSpec",
    "contract",
    "contraction_path",
    "svd_split",
    "hermitian_eig",
    "write_records",
    "read_records",
    "encode_record",
    "decode_record",
]

_SYMBOLS = string.ascii_letters


class ComplexTensor:
    """Dense complex128 array whose axes carry unique string labels.

    Args:
        data: Array-like of entries, stored row-major over ``axis_labels``.
        axis_labels: One distinct label per axis.
        name: Optional identifier used by checkpoints.
    """

    __slots__ = ("data", "axis_labels", "name")

    def __init__(self, data, axis_labels: Sequence[str], name: str = ""):
        arr = np.asarray(data, dtype=np.complex128, order="C")
        labels = tuple(str(a) for a in axis_labels)
        if arr.ndim != len(labels):
            raise ValueError(
                f"tensor has {arr.ndim} axes but {len(labels)} labels were given"
            )
        if len(set(labels)) != len(labels):
            raise ValueError(f"axis labels must be distinct, got {labels}")
        self.data = arr
        self.axis_labels = labels
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def axis(self, label: str) -> int:
        try:
            return self.axis_labels.index(label)
        except ValueError:
            raise KeyError(f"no axis labelled {label!r} in {self.axis_labels}") from None

    def extent(self, label: str) -> int:
        return self.data.shape[self.axis(label)]

    def transpose(self, labels: Sequence[str]) -> "ComplexTensor":
        perm = [self.axis(a) for a in labels]
        return ComplexTensor(self.data.transpose(perm), labels, self.name)

    def relabel(self, mapping: dict[str, str]) -> "ComplexTensor":
        return ComplexTensor(
            self.data, [mapping.get(a, a) for a in self.axis_labels], self.name
        )

    def conj(self) -> "ComplexTensor":
        return ComplexTensor(self.data.conj(), self.axis_labels, self.name)

    def scale(self, c: complex) -> "ComplexTensor":
        return ComplexTensor(self.data * c, self.axis_labels, self.name)

    def as_matrix(self, rows: Sequence[str], cols: Sequence[str]) -> np.ndarray:
        t = self.transpose(list(rows) + list(cols)).data
        nr = int(np.prod([self.extent(a) for a in rows], dtype=np.int64))
        return t.reshape(nr, -1)

    def __repr__(self) -> str:
        return f"ComplexTensor(name={self.name!r}, shape={self.shape}, axes={self.axis_labels})"


@dataclass
class NetworkSpec:
    """A small tensor network.

    Attributes:
        tensors: Participating tensors.
        pairs: Contraction bindings ``(tensor_index, axis, tensor_index, axis)``.
        open: Output axes ``(tensor_index, axis)`` in the order they should
            appear in the result.
        open_labels: Optional labels for the result axes.  Defaults to the
            source axis labels, which must then be distinct.
    """

    tensors: list[ComplexTensor]
    pairs: list[tuple[int, str, int, str]] = field(default_factory=list)
    open: list[tuple[int, str]] = field(default_factory=list)
    open_labels: list[str] | None = None

    def validate(self) -> None:
        seen: set[tuple[int, str]] = set()

        def bind(t: int, a: str) -> None:
            if not 0 <= t < len(self.tensors):
                raise ValueError(f"tensor index {t} out of range")
            self.tensors[t].axis(a)
            if (t, a) in seen:
                raise ValueError(f"axis {a!r} of tensor {t} is bound more than once")
            seen.add((t, a))

        for t1, a1, t2, a2 in self.pairs:
            bind(t1, a1)
            bind(t2, a2)
            e1 = self.tensors[t1].extent(a1)
            e2 = self.tensors[t2].extent(a2)
            if e1 != e2:
                raise ValueError(
                    f"extent mismatch contracting {a1!r}({e1}) with {a2!r}({e2})"
                )
        for t, a in self.open:
            bind(t, a)
        for t, tensor in enumerate(self.tensors):
            for a in tensor.axis_labels:
                if (t, a) not in seen:
                    raise ValueError(f"axis {a!r} of tensor {t} is not bound")
        if self.open_labels is not None and len(self.open_labels) != len(self.open):
            raise ValueError("open_labels must match open axes one to one")


def _flops(indices: Iterable[str], dims: dict[str, int]) -> int:
    out = 1
    for c in indices:
        out *= dims[c]
    return out


def contraction_path(
    inputs: Sequence[str], output: str, dims: dict[str, int], strategy: str = "auto"
) -> list[tuple[int, int]]:
    """Pairwise contraction order for an einsum-like problem.

    Args:
        inputs: Index strings of each operand.
        output: Index string of the result.
        dims: Extent of every index.
        strategy: ``"exhaustive"`` (subset dynamic programme minimising total
            multiply count), ``"greedy"`` (smallest intermediate first) or
            ``"auto"`` which uses the exhaustive search for at most 8 operands.

    Returns:
        A list of ``(i, j)`` positions into the current operand list; the two
        operands are removed and their product appended, as in opt_einsum's
        linear path format.
    """
    n = len(inputs)
    if n <= 1:
        return []
    if strategy == "auto":
        strategy = "exhaustive" if n <= 8 else "greedy"
    sets = [frozenset(s) for s in inputs]
    out_set = frozenset(output)
    if strategy == "greedy":
        return _greedy_path(sets, out_set, dims)
    if strategy == "exhaustive":
        return _exhaustive_path(sets, out_set, dims)
    raise ValueError(f"unknown strategy {strategy!r}")


def _keep(indices: frozenset, others: Sequence[frozenset], out_set: frozenset) -> frozenset:
    rest = set(out_set)
    for o in others:
        rest |= o
    return frozenset(i for i in indices if i in rest)


def _greedy_path(sets, out_set, dims):
    ops = list(sets)
    path = []
    while len(ops) > 1:
        best = None
        for i, j in itertools.combinations(range(len(ops)), 2):
            others = [ops[m] for m in range(len(ops)) if m not in (i, j)]
            new = _keep(ops[i] | ops[j], others, out_set)
            shares = bool(ops[i] & ops[j])
            key = (not shares, _flops(new, dims), _flops(ops[i] | ops[j], dims))
            if best is None or key < best[0]:
                best = (key, i, j, new)
        _, i, j, new = best
        path.append((i, j))
        ops = [ops[m] for m in range(len(ops)) if m not in (i, j)] + [new]
    return path


def _exhaustive_path(sets, out_set, dims):
    n = len(sets)
    full = (1 << n) - 1

    def members(mask):
        return [m for m in range(n) if mask >> m & 1]

    idx_cache: dict[int, frozenset] = {}

    def indices(mask):
        if mask not in idx_cache:
            inside = frozenset().union(*[sets[m] for m in members(mask)])
            outside = [sets[m] for m in range(n) if not mask >> m & 1]
            idx_cache[mask] = _keep(inside, outside, out_set)
        return idx_cache[mask]

    best: dict[int, tuple[int, object]] = {}
    for m in range(n):
        best[1 << m] = (0, m)
    for mask in range(1, full + 1):
        if mask in best:
            continue
        low = mask & -mask
        rest = mask ^ low
        best_cost = None
        sub = rest
        # enumerate subsets A containing the lowest member, B = mask \ A nonempty
        while True:
            a = sub | low
            b = mask ^ a
            if b:
                cost = (
                    best[a][0]
                    + best[b][0]
                    + _flops(indices(a) | indices(b), dims)
                )
                if best_cost is None or cost < best_cost[0]:
                    best_cost = (cost, (a, b))
            if sub == 0:
                break
            sub = (sub - 1) & rest
        best[mask] = best_cost

    # Linearise the optimal tree into positions in a shrinking operand list.
    order: list[tuple[int, int]] = []

    def emit(mask):
        node = best[mask][1]
        if isinstance(node, int):
            return
        a, b = node
        emit(a)
        emit(b)
        order.append((a, b))

    emit(full)
    current = [1 << m for m in range(n)]
    path = []
    for a, b in order:
        i, j = current.index(a), current.index(b)
        path.append((min(i, j), max(i, j)))
        current = [c for c in current if c not in (a, b)] + [a | b]
    return path


def _einsum_problem(spec: NetworkSpec):
    symbol: dict[tuple[int, str], str] = {}
    counter = iter(_SYMBOLS)
    for t1, a1, t2, a2 in spec.pairs:
        s = next(counter)
        symbol[(t1, a1)] = s
        symbol[(t2, a2)] = s
    for t, a in spec.open:
        symbol[(t, a)] = next(counter)
    inputs = [
        "".join(symbol[(t, a)] for a in tensor.axis_labels)
        for t, tensor in enumerate(spec.tensors)
    ]
    output = "".join(symbol[(t, a)] for t, a in spec.open)
    dims = {}
    for t, tensor in enumerate(spec.tensors):
        for a, e in zip(tensor.axis_labels, tensor.shape):
            dims[symbol[(t, a)]] = e
    return inputs, output, dims


def contract(spec: NetworkSpec, strategy="auto") -> ComplexTensor:
    """Fully contract a network.

    Args:
        spec: The network.  Its invariants are checked first.
        strategy: Path strategy name (see :func:`contraction_path`) or an
            explicit linear path.

    Returns:
        A :class:`ComplexTensor` with axes in the declared open order.  A
        network with no open axes yields a rank-0 tensor.

    Raises:
        ValueError: On extent mismatches, duplicate or missing bindings.
    """
    spec.validate()
    inputs, output, dims = _einsum_problem(spec)
    arrays = [t.data for t in spec.tensors]
    if isinstance(strategy, str):
        path = contraction_path(inputs, output, dims, strategy)
    else:
        path = [tuple(p) for p in strategy]
    ops = list(zip(inputs, arrays))
    out_set = frozenset(output)
    for i, j in path:
        (si, ai), (sj, aj) = ops[i], ops[j]
        others = [frozenset(ops[m][0]) for m in range(len(ops)) if m not in (i, j)]
        keep = _keep(frozenset(si) | frozenset(sj), others, out_set)
        new = "".join(c for c in dict.fromkeys(si + sj) if c in keep)
        res = np.einsum(f"{si},{sj}->{new}", ai, aj, optimize=False)
        ops = [ops[m] for m in range(len(ops)) if m not in (i, j)] + [(new, res)]
    (s, a), = ops
    data = np.einsum(f"{s}->{output}", a)
    labels = spec.open_labels
    if labels is None:
        labels = [a for _, a in spec.open]
    return ComplexTensor(data, labels)


def svd_split(
    t: ComplexTensor,
    left_axes: Sequence[str],
    right_axes: Sequence[str],
    max_rank: int | None = None,
    bond_label: str = "bond",
) -> tuple[ComplexTensor, np.ndarray, ComplexTensor]:
    """Split a tensor across a bipartition of its axes.

    Args:
        t: Tensor to split.
        left_axes: Axes that go to ``U``.
        right_axes: Axes that go to ``V``.
        max_rank: Keep at most this many singular values.
        bond_label: Label of the new bond axis on both factors.

    Returns:
        ``(U, S, V)`` with ``U`` axes ``left_axes + [bond]``, ``S`` real and
        descending and ``V`` axes ``[bond] + right_axes``; contracting
        ``U * S * V`` over the bond reproduces ``t`` when nothing is truncated.
    """
    left_axes, right_axes = list(left_axes), list(right_axes)
    if not left_axes or not right_axes:
        raise ValueError("both axis groups must be nonempty")
    if sorted(left_axes + right_axes) != sorted(t.axis_labels):
        raise ValueError("left and right axes must partition the tensor axes")
    mat = t.as_matrix(left_axes, right_axes)
    u, s, vh = np.linalg.svd(mat, full_matrices=False)
    if max_rank is not None:
        r = max(1, min(int(max_rank), s.size))
        u, s, vh = u[:, :r], s[:r], vh[:r]
    lshape = [t.extent(a) for a in left_axes]
    rshape = [t.extent(a) for a in right_axes]
    U = ComplexTensor(u.reshape(lshape + [s.size]), left_axes + [bond_label])
    V = ComplexTensor(vh.reshape([s.size] + rshape), [bond_label] + right_axes)
    return U, s, V


def hermitian_eig(t, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a Hermitian matrix.

    Args:
        t: A square ``ndarray`` or a :class:`ComplexTensor` with an even
            number of axes; the first half are rows and the second half
            columns.
        tol: Allowed Hermiticity defect relative to ``max(1, ||t||)``.

    Returns:
        ``(eigenvalues, eigenvectors)`` in ascending order, eigenvectors as
        columns.

    Raises:
        ValueError: If the matrix is not square or not Hermitian within tol.
    """
    if isinstance(t, ComplexTensor):
        half = t.ndim // 2
        if 2 * half != t.ndim:
            raise ValueError("tensor needs an even number of axes to be a matrix")
        m = t.as_matrix(t.axis_labels[:half], t.axis_labels[half:])
    else:
        m = np.asarray(t)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    defect = float(np.abs(m - m.conj().T).max(initial=0.0))
    if defect > tol * scale:
        raise ValueError(f"matrix is not Hermitian (defect {defect:.3e})")
    w, v = np.linalg.eigh(0.5 * (m + m.conj().T))
    return w, v


# --- checkpoints ---------------------------------------------------------

def encode_record(t: ComplexTensor, meta: dict | None = None) -> bytes:
    """Serialise one tensor: 4-byte header length, JSON header, raw data."""
    header = {
        "name": t.name,
        "shape": list(t.shape),
        "axis_labels": list(t.axis_labels),
        "dtype": "c128",
    }
    if meta is not None:
        header["meta"] = meta
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(t.data, dtype="<c16").tobytes()
    return struct.pack("<I", len(hbytes)) + hbytes + payload


def decode_record(buf: bytes) -> tuple[ComplexTensor, dict | None]:
    (hlen,) = struct.unpack_from("<I", buf, 0)
    header = json.loads(buf[4 : 4 + hlen].decode("utf-8"))
    if header.get("dtype") != "c128":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    data = np.frombuffer(buf[4 + hlen :], dtype="<c16")
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError("record payload does not match its declared shape")
    t = ComplexTensor(data.reshape(shape).copy(), header["axis_labels"], header["name"])
    return t, header.get("meta")


def write_records(
    fh: BinaryIO, records: Sequence[tuple[ComplexTensor, dict | None]]
) -> None:
    """Write a model file: record count, then each record with an 8-byte length."""
    fh.write(struct.pack("<I", len(records)))
    for t, meta in records:
        rec = encode_record(t, meta)
        fh.write(struct.pack("<Q", len(rec)))
        fh.write(rec)


def read_records(fh: BinaryIO) -> list[tuple[ComplexTensor, dict | None]]:
    (count,) = struct.unpack("<I", fh.read(4))
    out = []
    for _ in range(count):
        (n,) = struct.unpack("<Q", fh.read(8))
        out.append(decode_record(fh.read(n)))
    return out
