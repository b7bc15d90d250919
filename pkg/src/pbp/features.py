"""Indicator feature vectors for discrete variables.

States are 0-based everywhere.  The feature vector of a group of variables is
the row-major vectorization of the outer product of their one-hot indicators,
so an assignment ``(a1, ..., ak)`` lands on index
``ravel_multi_index((a1, ..., ak), cards)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError


def indicator(x: int, cardinality: int) -> np.ndarray:
    if not 0 <= x < cardinality:
        raise ValidationError(f"state {x} out of range for cardinality {cardinality}")
    e = np.zeros(cardinality)
    e[x] = 1.0
    return e


@dataclass(frozen=True)
class FeatureMap:
    """Indicator features over an ordered group of variables.

    An empty group has the single constant feature ``[1]``.
    """

    variables: tuple[int, ...]
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        if len(self.variables) != len(self.cardinalities):
            raise ValueError("one cardinality per variable is required")

    @classmethod
    def of(cls, variables: Sequence[int], structure) -> "FeatureMap":
        variables = tuple(variables)
        return cls(variables, tuple(structure.card(v) for v in variables))

    @property
    def dim(self) -> int:
        return int(np.prod(self.cardinalities, dtype=np.int64))

    def index(self, assignment: Sequence[int] | Mapping[int, int]) -> int:
        if isinstance(assignment, Mapping):
            missing = [v for v in self.variables if v not in assignment]
            if missing:
                raise ValidationError(f"incomplete assignment: missing variable(s) {missing}")
            assignment = [assignment[v] for v in self.variables]
        if len(assignment) != len(self.variables):
            raise ValidationError("incomplete assignment")
        for x, c in zip(assignment, self.cardinalities):
            if not 0 <= x < c:
                raise ValidationError(f"state {x} out of range for cardinality {c}")
        if not self.variables:
            return 0
        return int(np.ravel_multi_index(tuple(int(x) for x in assignment), self.cardinalities))

    def assignment(self, index: int) -> tuple[int, ...]:
        if not self.variables:
            return ()
        return tuple(int(i) for i in np.unravel_index(index, self.cardinalities))

    def encode(self, rows: np.ndarray) -> np.ndarray:
        """Feature index of each row of an ``(N, len(variables))`` state array."""
        rows = np.asarray(rows)
        if not self.variables:
            return np.zeros(rows.shape[0], dtype=np.int64)
        return np.ravel_multi_index(tuple(rows.T), self.cardinalities).astype(np.int64)

    def __call__(self, assignment) -> np.ndarray:
        v = np.zeros(self.dim)
        v[self.index(assignment)] = 1.0
        return v

    def one_hot(self, rows: np.ndarray) -> np.ndarray:
        idx = self.encode(rows)
        out = np.zeros((idx.size, self.dim))
        out[np.arange(idx.size), idx] = 1.0
        return out


def sufficient_stats(fmap: FeatureMap, assignment) -> np.ndarray:
    """theta over a core group: vectorized outer product of indicators."""
    return fmap(assignment)


def evidence_features(fmap: FeatureMap, assignment) -> np.ndarray:
    """eta over an evidence set; ``[1]`` when the set is empty."""
    return fmap(assignment)


def zeta(cardinality: int, observed: int | None) -> np.ndarray:
    """All-ones when unobserved, the indicator of the observed state otherwise."""
    if observed is None:
        return np.ones(cardinality)
    return indicator(observed, cardinality)
