"""Reference algorithms that know (or fit) the CPTs.

:class:`CliqueCalibrator` runs two-pass Shafer-Shenoy message passing over a
junction tree of the model with a leading batch axis, so the same code gives
exact posteriors for one evidence map and the E-step of EM for every distinct
training row at once.
"""

from __future__ import annotations

import json
import logging
import string
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError, ZeroEvidenceError
from .junction_tree import clique_tree
from .model import Dataset, GraphicalModel, Structure, random_model, validate_evidence

log = logging.getLogger(__name__)

_BATCH = "batch"
_LETTERS = string.ascii_letters


def _einsum(operands: Sequence[tuple[np.ndarray, Sequence]], out: Sequence) -> np.ndarray:
    """einsum over arbitrary hashable axis labels."""
    letters: dict = {}

    def sub(labels):
        for l in labels:
            if l not in letters:
                letters[l] = _LETTERS[len(letters)]
        return "".join(letters[l] for l in labels)

    spec = ",".join(sub(labels) for _, labels in operands) + "->" + sub(out)
    arrays = [a for a, _ in operands]
    return np.einsum(spec, *arrays, optimize=len(arrays) > 2)


class CliqueCalibrator:
    """Batched sum-product over a fixed clique tree of ``structure``."""

    def __init__(self, structure: Structure):
        self.structure = structure
        cliques, edges = clique_tree(structure)
        self.cliques = [tuple(sorted(c)) for c in cliques]
        adj: dict[int, list[int]] = {i: [] for i in range(len(cliques))}
        for a, b in edges:
            adj[a].append(b)
            adj[b].append(a)
        self.parent: dict[int, int | None] = {0: None}
        self.order = [0]
        queue = deque([0])
        while queue:
            c = queue.popleft()
            for k in sorted(adj[c]):
                if k not in self.parent:
                    self.parent[k] = c
                    self.order.append(k)
                    queue.append(k)
        self.children = {c: [k for k in self.order if self.parent[k] == c] for c in self.order}
        # every family goes to the first clique that contains it; so does every variable's evidence
        self.family_home = {}
        self.var_home = {}
        for v in range(len(structure)):
            fam = set(structure.family(v))
            self.family_home[v] = next(i for i, c in enumerate(self.cliques) if fam <= set(c))
            self.var_home[v] = next(i for i, c in enumerate(self.cliques) if v in c)

    def _sep(self, a: int, b: int) -> list[int]:
        return sorted(set(self.cliques[a]) & set(self.cliques[b]))

    def calibrate(self, cpts: Mapping[int, np.ndarray], evidence: np.ndarray) -> list[np.ndarray]:
        """Unnormalized clique beliefs ``P[C, e_b]`` for each batch row ``b``.

        ``evidence`` is an ``(B, n_variables)`` integer array with ``-1`` for
        unobserved entries.  Belief ``i`` has axes ``(batch,) + cliques[i]``.
        """
        st = self.structure
        B = evidence.shape[0]
        local: dict[int, list] = {i: [] for i in range(len(self.cliques))}
        for v in range(len(st)):
            local[self.family_home[v]].append((cpts[v], st.family(v)))
            col = evidence[:, v]
            if np.any(col >= 0):
                ind = np.ones((B, st.card(v)))
                obs = col >= 0
                ind[obs] = 0.0
                ind[np.flatnonzero(obs), col[obs]] = 1.0
                local[self.var_home[v]].append((ind, (_BATCH, v)))
        for i in local:
            # keeps the batch axis present on every clique
            local[i].append((np.ones(B), (_BATCH,)))
        up: dict[int, np.ndarray] = {}
        for c in reversed(self.order):
            p = self.parent[c]
            if p is None:
                continue
            ops = local[c] + [(up[k], (_BATCH, *self._sep(k, c))) for k in self.children[c]]
            up[c] = _einsum(ops, (_BATCH, *self._sep(c, p)))
        down: dict[int, np.ndarray] = {}
        for c in self.order:
            for k in self.children[c]:
                ops = list(local[c])
                ops += [(up[j], (_BATCH, *self._sep(j, c))) for j in self.children[c] if j != k]
                if self.parent[c] is not None:
                    ops.append((down[c], (_BATCH, *self._sep(c, self.parent[c]))))
                down[k] = _einsum(ops, (_BATCH, *self._sep(c, k)))
        beliefs = []
        for c in range(len(self.cliques)):
            ops = list(local[c]) + [(up[k], (_BATCH, *self._sep(k, c))) for k in self.children[c]]
            if self.parent[c] is not None:
                ops.append((down[c], (_BATCH, *self._sep(c, self.parent[c]))))
            beliefs.append(_einsum(ops, (_BATCH, *self.cliques[c])))
        return beliefs

    def marginal(self, beliefs: list[np.ndarray], var_ids: Sequence[int]) -> np.ndarray:
        """Batch of ``P[var_ids, e_b]`` read off a clique containing all of them."""
        want = set(var_ids)
        i = next(i for i, c in enumerate(self.cliques) if want <= set(c))
        return _einsum([(beliefs[i], (_BATCH, *self.cliques[i]))], (_BATCH, *var_ids))


def _evidence_row(structure: Structure, evidence: Mapping[int, int]) -> np.ndarray:
    row = np.full((1, len(structure)), -1, dtype=np.int64)
    for k, x in evidence.items():
        row[0, k] = x
    return row


def sum_product_exact(model: GraphicalModel, evidence: Mapping[int, int], query: int,
                      calibrator: CliqueCalibrator | None = None) -> np.ndarray:
    """Exact ``P[query | evidence]`` by Shafer-Shenoy on the model's clique tree."""
    evidence = validate_evidence(model.structure, evidence)
    if not 0 <= query < len(model.structure):
        raise ValidationError(f"unknown query variable id {query}")
    cal = calibrator or CliqueCalibrator(model.structure)
    beliefs = cal.calibrate(model.cpts, _evidence_row(model.structure, evidence))
    unnorm = cal.marginal(beliefs, [query])[0]
    total = unnorm.sum()
    if total <= 0:
        raise ZeroEvidenceError("evidence has probability zero")
    return unnorm / total


# ---------------------------------------------------------------------- EM


@dataclass(frozen=True)
class EMConfig:
    restarts: int = 10
    max_iter: int = 500
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ValidationError("restarts must be at least 1")
        if not self.tol > 0:
            raise ValidationError("convergence threshold must be positive")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")


@dataclass
class EMResult:
    model: GraphicalModel
    traces: list[list[float]]
    best_restart: int
    seconds: float
    config: EMConfig
    converged: list[bool] = field(default_factory=list)

    @property
    def log_likelihood(self) -> float:
        return self.traces[self.best_restart][-1]

    def to_json(self) -> dict:
        obj = self.model.to_json()
        obj["em"] = {
            "restarts": self.config.restarts,
            "max_iter": self.config.max_iter,
            "tol": self.config.tol,
            "seed": self.config.seed,
            "best_restart": self.best_restart,
            "converged": self.converged,
            "traces": self.traces,
            "seconds": self.seconds,
        }
        return obj

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


class _Batch:
    """Distinct training rows with multiplicities."""

    def __init__(self, structure: Structure, data: Dataset):
        data.validate(structure)
        rows, counts = np.unique(data.values, axis=0, return_counts=True)
        full = np.full((rows.shape[0], len(structure)), -1, dtype=np.int64)
        full[:, list(data.columns)] = rows
        self.evidence = full
        self.counts = counts.astype(float)


def _e_step(cal: CliqueCalibrator, cpts, batch: _Batch) -> tuple[float, dict[int, np.ndarray]]:
    st = cal.structure
    beliefs = cal.calibrate(cpts, batch.evidence)
    z = beliefs[0].reshape(beliefs[0].shape[0], -1).sum(axis=1)
    if np.any(z <= 0):
        raise ZeroEvidenceError("a training row has probability zero under the current CPTs")
    expected = {}
    for v in range(len(st)):
        fam = list(st.family(v))
        m = cal.marginal(beliefs, fam)
        # each row's family marginal sums to z as well; normalizing by its own
        # total keeps fully observed rows exactly one-hot
        mass = m.reshape(m.shape[0], -1).sum(axis=1)
        expected[v] = np.tensordot(batch.counts, m / mass.reshape((-1,) + (1,) * (m.ndim - 1)), axes=(0, 0))
    return float(batch.counts @ np.log(z)), expected


def _m_step(expected: Mapping[int, np.ndarray], previous: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    cpts = {}
    for v, counts in expected.items():
        tot = counts.sum(axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            new = np.where(tot > 0, counts / tot, previous[v])
        cpts[v] = new
    return cpts


def em_step(model: GraphicalModel, data: Dataset) -> tuple[GraphicalModel, float]:
    """One EM iteration; returns the updated model and the log-likelihood of ``model``."""
    cal = CliqueCalibrator(model.structure)
    ll, expected = _e_step(cal, model.cpts, _Batch(model.structure, data))
    return GraphicalModel(model.structure, _m_step(expected, model.cpts)), ll


def _run(cal: CliqueCalibrator, batch: _Batch, init: GraphicalModel, config: EMConfig):
    cpts = dict(init.cpts)
    trace: list[float] = []
    converged = False
    for it in range(config.max_iter + 1):
        ll, expected = _e_step(cal, cpts, batch)
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= config.tol * abs(trace[-2]):
            converged = True
            break
        if it == config.max_iter:
            break
        cpts = _m_step(expected, cpts)
    return cpts, trace, converged


def em_learn(structure: Structure, dataset: Dataset, config: EMConfig = EMConfig()) -> EMResult:
    """Fit CPTs by EM with random restarts; keep the restart with the best final log-likelihood."""
    if len(dataset) == 0:
        raise ValidationError("EM needs at least one sample")
    start = time.perf_counter()
    cal = CliqueCalibrator(structure)
    batch = _Batch(structure, dataset)
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    best, traces, flags = None, [], []
    for r, ss in enumerate(seeds):
        cpts, trace, ok = _run(cal, batch, random_model(structure, ss), config)
        traces.append(trace)
        flags.append(ok)
        if best is None or trace[-1] > traces[best[0]][-1]:
            best = (r, cpts)
        log.debug("EM restart %d: %d iterations, log-likelihood %.6f", r, len(trace), trace[-1])
    seconds = time.perf_counter() - start
    return EMResult(GraphicalModel(structure, best[1]), traces, best[0], seconds, config, flags)


@dataclass
class EMRow:
    N: int
    train_seconds: float
    avg_kl: float
    skipped: int
    log_likelihood: float


def em_wallclock_and_quality(true_model: GraphicalModel, datasets: Mapping[int, Dataset], query: int,
                             evidence_vars: Sequence[int], config: EMConfig = EMConfig()) -> list[EMRow]:
    """Train EM on each dataset; report total wall-clock and the average posterior KL."""
    from .evaluation import average_posterior_kl

    rows = []
    for n in sorted(datasets):
        fit = em_learn(true_model.structure, datasets[n], config)
        cal = CliqueCalibrator(fit.model.structure)
        summary = average_posterior_kl(
            true_model, lambda ev: sum_product_exact(fit.model, ev, query, cal), query, evidence_vars
        )
        rows.append(EMRow(n, fit.seconds, summary.avg_kl, summary.skipped, fit.log_likelihood))
    return rows
