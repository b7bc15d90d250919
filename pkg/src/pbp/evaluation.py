"""Posterior-quality metrics shared by the PBP pipeline and the baselines."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import PBPError, ValidationError
from .model import GraphicalModel

KL_FLOOR = 1e-12


def kl_divergence(p, q, floor: float = KL_FLOOR) -> float:
    """``KL(p || q)`` with ``0 log 0 = 0`` and ``q`` floored at ``floor``.

    ``p`` is the reference (exact) distribution and ``q`` the estimate.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValidationError(f"length mismatch: {p.shape} vs {q.shape}")
    q = np.maximum(q, floor)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


@dataclass
class KLSummary:
    avg_kl: float
    evaluated: int
    skipped: int
    failed: int = 0


def exact_query_table(model: GraphicalModel, query: int, evidence_vars: Sequence[int]) -> np.ndarray:
    """``P[evidence_vars..., query]`` with the query on the last axis."""
    return model.marginal(list(evidence_vars) + [query])


def average_posterior_kl(model: GraphicalModel, posterior: Callable[[dict[int, int]], np.ndarray],
                         query: int, evidence_vars: Sequence[int]) -> KLSummary:
    """Average ``KL(exact || estimate)`` over every joint realization of the evidence.

    Realizations with zero probability under ``model`` are skipped.  An
    estimator that raises a :class:`PBPError` on a realization (for instance
    because it estimates zero evidence probability) is charged with the
    uniform distribution and counted in ``failed``.
    """
    evidence_vars = list(evidence_vars)
    if query in evidence_vars:
        raise ValidationError("query variable is also an evidence variable")
    table = exact_query_table(model, query, evidence_vars)
    cards = [model.structure.card(v) for v in evidence_vars]
    total, n, skipped, failed = 0.0, 0, 0, 0
    for values in itertools.product(*[range(c) for c in cards]):
        joint = table[values]
        mass = joint.sum()
        if mass <= 0:
            skipped += 1
            continue
        ev = dict(zip(evidence_vars, values))
        try:
            est = posterior(ev)
        except PBPError:
            failed += 1
            est = np.full(joint.size, 1.0 / joint.size)
        total += kl_divergence(joint / mass, est)
        n += 1
    return KLSummary(total / n if n else float("nan"), n, skipped, failed)
