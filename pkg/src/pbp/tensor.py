"""Dense tensors whose modes carry semantic labels.

Every tensor used by learning and inference (operators, root tensors, leaf
tensors and messages) is a :class:`NamedTensor`.  Operations align operands by
label, never by axis position, so permuting the stored mode order of an input
does not change a result beyond the documented output mode order.

Vectorization is row-major (C order) over the declared label order.  A tensor
over modes ``(a, b)`` with extents ``(2, 3)`` vectorizes entry ``(i, j)`` to
index ``i * 3 + j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

__all__ = [
    "ModeLabel",
    "NamedTensor",
    "Sep",
    "Var",
    "Feat",
    "outer_product",
    "mode_multiply",
    "contract",
    "hadamard",
    "pinv",
    "vectorize",
    "devectorize",
    "marginalize",
]

_KINDS = ("separator", "variable", "feature")


@dataclass(frozen=True)
class ModeLabel:
    kind: str
    key: Hashable

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown mode kind {self.kind!r}")

    def __str__(self):
        return f"{self.kind}:{self.key}"

    def to_json(self):
        return {"kind": self.kind, "id": self.key}

    @classmethod
    def from_json(cls, obj):
        key = obj["id"]
        if isinstance(key, list):
            key = tuple(key)
        return cls(obj["kind"], key)


def Sep(sep_id) -> ModeLabel:
    return ModeLabel("separator", sep_id)


def Var(var_id) -> ModeLabel:
    return ModeLabel("variable", var_id)


def Feat(tag) -> ModeLabel:
    return ModeLabel("feature", tag)


class NamedTensor:
    """Immutable dense array with one label per mode.

    Parameters
    ----------
    labels : sequence of ModeLabel
        Pairwise distinct labels, one per axis of ``data``.
    data : array_like
        Real, finite entries.  A copy is stored read-only.
    """

    __slots__ = ("labels", "data")

    def __init__(self, labels: Sequence[ModeLabel], data):
        labels = tuple(labels)
        arr = np.array(data, dtype=float)
        if arr.ndim != len(labels):
            raise ValueError(
                f"{len(labels)} labels given for an order-{arr.ndim} array"
            )
        seen = set()
        for lab in labels:
            if not isinstance(lab, ModeLabel):
                raise TypeError(f"mode label must be a ModeLabel, got {lab!r}")
            if lab in seen:
                raise ValueError(f"duplicate mode label {lab}")
            seen.add(lab)
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"all extents must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("NamedTensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def order(self) -> int:
        return len(self.labels)

    @property
    def modes(self) -> list[tuple[ModeLabel, int]]:
        return list(zip(self.labels, self.data.shape))

    def has(self, label: ModeLabel) -> bool:
        return label in self.labels

    def axis(self, label: ModeLabel) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"tensor has no mode {label}; modes are "
                           f"{[str(l) for l in self.labels]}") from None

    def extent(self, label: ModeLabel) -> int:
        return self.data.shape[self.axis(label)]

    def transpose(self, labels: Sequence[ModeLabel]) -> "NamedTensor":
        """Return the same tensor with its modes stored in ``labels`` order."""
        labels = tuple(labels)
        if sorted(map(str, labels)) != sorted(map(str, self.labels)):
            raise ValueError("transpose labels must be a permutation of the modes")
        perm = [self.axis(l) for l in labels]
        return NamedTensor(labels, np.transpose(self.data, perm))

    def array(self, labels: Sequence[ModeLabel] | None = None) -> np.ndarray:
        """Data as a plain array, optionally in a requested mode order."""
        if labels is None:
            return self.data
        return self.transpose(labels).data

    def allclose(self, other: "NamedTensor", atol=1e-12, rtol=0.0) -> bool:
        if set(self.labels) != set(other.labels):
            return False
        b = other.array(self.labels)
        return b.shape == self.shape and np.allclose(self.data, b, atol=atol, rtol=rtol)

    def __repr__(self):
        modes = ", ".join(f"{l}[{n}]" for l, n in self.modes)
        return f"NamedTensor({modes})"

    def to_json(self) -> dict:
        return {
            "modes": [{"label": l.to_json(), "extent": int(n)} for l, n in self.modes],
            "data": self.data.ravel(order="C").tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NamedTensor":
        labels = [ModeLabel.from_json(m["label"]) for m in obj["modes"]]
        shape = tuple(int(m["extent"]) for m in obj["modes"])
        data = np.asarray(obj["data"], dtype=float)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError("data length does not match the product of extents")
        return cls(labels, data.reshape(shape))


def outer_product(a: NamedTensor, b: NamedTensor) -> NamedTensor:
    """Outer product; result modes are ``a``'s modes followed by ``b``'s."""
    shared = set(a.labels) & set(b.labels)
    if shared:
        names = ", ".join(sorted(str(l) for l in shared))
        raise ValueError(f"outer product operands share mode label(s): {names}")
    data = np.multiply.outer(a.data, b.data)
    return NamedTensor(a.labels + b.labels, data)


def contract(*tensors: NamedTensor, keep: Sequence[ModeLabel] | None = None) -> NamedTensor:
    """Multiply tensors and sum over every label they share.

    Labels occurring in exactly one operand survive, in order of first
    appearance, unless ``keep`` fixes the output modes explicitly.
    """
    if not tensors:
        raise ValueError("contract needs at least one tensor")
    index: dict[ModeLabel, int] = {}
    extents: dict[ModeLabel, int] = {}
    counts: dict[ModeLabel, int] = {}
    operands = []
    for t in tensors:
        subs = []
        for lab, n in t.modes:
            if lab in extents and extents[lab] != n:
                raise ValueError(
                    f"extent mismatch on mode {lab}: {extents[lab]} vs {n}"
                )
            extents[lab] = n
            index.setdefault(lab, len(index))
            counts[lab] = counts.get(lab, 0) + 1
            subs.append(index[lab])
        operands += [t.data, subs]
    if keep is None:
        out = [lab for lab in index if counts[lab] == 1]
    else:
        out = list(keep)
        missing = [l for l in out if l not in index]
        if missing:
            raise KeyError(f"cannot keep absent mode(s) {[str(l) for l in missing]}")
    if len(index) > 52:
        raise ValueError("too many distinct modes for a single contraction")
    data = np.einsum(*operands, [index[l] for l in out], optimize=len(tensors) > 2)
    return NamedTensor(out, np.asarray(data))


def mode_multiply(t: NamedTensor, m: NamedTensor, label: ModeLabel) -> NamedTensor:
    """Contract ``t`` with a vector or matrix ``m`` along ``label``.

    A vector eliminates the mode.  A matrix with modes ``(label, other)``
    replaces ``label`` by ``other`` at the same position in ``t``.
    """
    if not t.has(label):
        raise KeyError(f"tensor has no mode {label}")
    if not m.has(label):
        raise KeyError(f"multiplier has no mode {label}")
    if t.extent(label) != m.extent(label):
        raise ValueError(
            f"extent mismatch on mode {label}: {t.extent(label)} vs {m.extent(label)}"
        )
    if m.order == 1:
        out = [l for l in t.labels if l != label]
        return contract(t, m, keep=out)
    if m.order == 2:
        other = m.labels[1] if m.labels[0] == label else m.labels[0]
        if t.has(other):
            raise ValueError(f"result would duplicate mode {other}")
        out = [other if l == label else l for l in t.labels]
        return contract(t, m, keep=out)
    raise ValueError("mode_multiply expects a vector or a matrix multiplier")


def hadamard(a: NamedTensor, b: NamedTensor) -> NamedTensor:
    """Entrywise product of tensors over identical modes (aligned by label)."""
    if set(a.labels) != set(b.labels):
        raise ValueError(
            "hadamard operands must have identical modes: "
            f"{[str(l) for l in a.labels]} vs {[str(l) for l in b.labels]}"
        )
    bd = b.array(a.labels)
    if bd.shape != a.shape:
        raise ValueError(f"extent mismatch: {a.shape} vs {bd.shape}")
    return NamedTensor(a.labels, a.data * bd)


def pinv(
    m: NamedTensor,
    row_labels: Sequence[ModeLabel],
    col_labels: Sequence[ModeLabel] | None = None,
    rtol: float | None = None,
) -> NamedTensor:
    """Moore-Penrose pseudoinverse of ``m`` matricized as rows x columns.

    The result carries the column modes first, then the row modes, so that
    contracting it with ``m`` over the row modes yields the projector onto the
    row space of the matricization.  Singular values at or below
    ``rtol * sigma_max`` are treated as zero, with
    ``rtol = max(rows, cols) * eps`` by default.
    """
    row_labels = list(row_labels)
    if col_labels is None:
        col_labels = [l for l in m.labels if l not in row_labels]
    col_labels = list(col_labels)
    if sorted(map(str, row_labels + col_labels)) != sorted(map(str, m.labels)):
        raise ValueError("row and column labels must partition the tensor modes")
    rows = [m.extent(l) for l in row_labels]
    cols = [m.extent(l) for l in col_labels]
    nr, nc = int(np.prod(rows, dtype=np.int64)), int(np.prod(cols, dtype=np.int64))
    mat = m.array(row_labels + col_labels).reshape(nr, nc)
    if rtol is None:
        rtol = max(nr, nc) * np.finfo(float).eps
    inv = np.linalg.pinv(mat, rcond=rtol)
    return NamedTensor(col_labels + row_labels, inv.reshape(cols + rows))


def vectorize(t: NamedTensor, labels: Sequence[ModeLabel], tag) -> NamedTensor:
    """Fuse ``labels`` (row-major in that order) into one trailing feature mode."""
    labels = list(labels)
    for lab in labels:
        if not t.has(lab):
            raise KeyError(f"tensor has no mode {lab}")
    rest = [l for l in t.labels if l not in labels]
    arr = t.array(rest + labels)
    size = int(np.prod([t.extent(l) for l in labels], dtype=np.int64))
    return NamedTensor(rest + [Feat(tag)], arr.reshape(arr.shape[: len(rest)] + (size,)))


def devectorize(t: NamedTensor, label: ModeLabel, modes: Iterable[tuple[ModeLabel, int]]) -> NamedTensor:
    """Inverse of :func:`vectorize`: split ``label`` into ``modes`` (row-major)."""
    modes = list(modes)
    shape = [n for _, n in modes]
    if int(np.prod(shape, dtype=np.int64)) != t.extent(label):
        raise ValueError("split extents do not multiply to the fused extent")
    rest = [l for l in t.labels if l != label]
    arr = t.array(rest + [label])
    return NamedTensor(rest + [l for l, _ in modes], arr.reshape(arr.shape[:-1] + tuple(shape)))


def marginalize(t: NamedTensor, labels: Iterable[ModeLabel]) -> NamedTensor:
    """Sum out the given modes."""
    labels = list(labels)
    axes = tuple(t.axis(l) for l in labels)
    rest = [l for l in t.labels if l not in labels]
    return NamedTensor(rest, t.data.sum(axis=axes))
