"""Two-stage regression learning of the observable parametrization.

For every non-leaf separator ``S`` with child separators ``S_1..S_K``:

* S1A regresses ``theta^S`` (indicators of the core group) on ``eta^S``
  (indicators of the evidence set);
* S1B regresses the vectorized outer product of the children's ``theta`` on
  the same ``eta^S``;
* S2 linearly regresses the S1B predictions on the S1A predictions, which
  gives the operator ``W^S`` with modes ``(S, S_1, ..., S_K)``.

The root tensor is the average of the outer product of ``theta`` over the
separators adjacent to the root.

Every quantity is computed from joint "mass" tables over small groups of
observables.  :class:`EmpiricalMoments` fills them with counts from a dataset;
:class:`PopulationMoments` with exact probabilities from a known model.  Both
drive the same code, so :func:`learn_population` is exactly the infinite-data
limit of :func:`learn`.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import SingularDesignError, TreeMismatchError, ValidationError
from .features import FeatureMap
from .junction_tree import LatentJunctionTree
from .model import Dataset, GraphicalModel
from .regression import check_design, grouped_ridge, linear_operator
from .tensor import NamedTensor, Sep

log = logging.getLogger(__name__)

RIDGE_SCALE = 1e-3


@dataclass(frozen=True)
class RegressionConfig:
    """Ridge penalties; ``None`` means ``1e-3 * N`` (N = total sample weight)."""

    lambda1: float | None = None
    lambda2: float | None = None

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if v is not None and (not np.isfinite(v) or v < 0):
                raise ValidationError(f"{name} must be finite and non-negative, got {v}")

    def resolve(self, total: float) -> tuple[float, float]:
        l1 = RIDGE_SCALE * total if self.lambda1 is None else float(self.lambda1)
        l2 = RIDGE_SCALE * total if self.lambda2 is None else float(self.lambda2)
        return l1, l2


# ------------------------------------------------------------------ moments


class EmpiricalMoments:
    """Count tables from a dataset."""

    source = "empirical"

    def __init__(self, data: Dataset, structure):
        data.validate(structure)
        self.data = data
        self.structure = structure
        self.total = float(len(data))

    def codes(self, var_ids: Sequence[int]) -> np.ndarray:
        return FeatureMap.of(var_ids, self.structure).encode(self.data.select(var_ids))

    def table(self, var_ids: Sequence[int]) -> np.ndarray:
        fmap = FeatureMap.of(var_ids, self.structure)
        counts = np.bincount(self.codes(var_ids), minlength=fmap.dim).astype(float)
        return counts.reshape(fmap.cardinalities)


class PopulationMoments:
    """Exact probability tables from a model with known CPTs."""

    source = "population"

    def __init__(self, model: GraphicalModel):
        self.model = model
        self.structure = model.structure
        self.total = 1.0

    def table(self, var_ids: Sequence[int]) -> np.ndarray:
        if not var_ids:
            return np.array(1.0)
        return self.model.marginal(list(var_ids))


@dataclass
class SeparatorMoments:
    """Per-evidence-cell weights and conditional means for one separator."""

    cells: np.ndarray          # indices of evidence cells with positive weight
    weights: np.ndarray        # (n_cells,)
    theta_means: np.ndarray    # (n_cells, dim theta^S)
    target_means: np.ndarray   # (n_cells, prod_k dim theta^{S_k})


def _children_vars(tree: LatentJunctionTree, sep_id: int) -> tuple[list[int], list[int]]:
    kids = tree.child_separators(tree.separator(sep_id).child)
    vars_, dims = [], []
    for k in kids:
        vars_ += list(tree.alpha[k.id])
        dims.append(tree.feature_dim(k.id))
    return vars_, dims


def separator_moments(moments, tree: LatentJunctionTree, sep_id: int) -> SeparatorMoments:
    beta = list(tree.beta[sep_id])
    alpha = list(tree.alpha[sep_id])
    kid_vars, _ = _children_vars(tree, sep_id)
    st = tree.structure
    n_eta = FeatureMap.of(beta, st).dim
    w = np.asarray(moments.table(beta), dtype=float).reshape(n_eta)
    th = np.asarray(moments.table(beta + alpha), dtype=float).reshape(n_eta, -1)
    tg = np.asarray(moments.table(beta + kid_vars), dtype=float).reshape(n_eta, -1)
    keep = np.flatnonzero(w > 0)
    wk = w[keep]
    return SeparatorMoments(keep, wk, th[keep] / wk[:, None], tg[keep] / wk[:, None])


# -------------------------------------------------------------- parameters


@dataclass
class LearnedParams:
    """Operators ``W^S`` for non-leaf separators plus the root tensor."""

    operators: dict[int, NamedTensor]
    root_tensor: NamedTensor
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "format": "pbp-params/1",
            "metadata": self.metadata,
            "root_tensor": self.root_tensor.to_json(),
            "operators": {str(k): t.to_json() for k, t in sorted(self.operators.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LearnedParams":
        if obj.get("format") != "pbp-params/1":
            raise ValidationError("not a learned-parameters file")
        return cls(
            operators={int(k): NamedTensor.from_json(t) for k, t in obj["operators"].items()},
            root_tensor=NamedTensor.from_json(obj["root_tensor"]),
            metadata=dict(obj.get("metadata", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "LearnedParams":
        return cls.from_json(json.loads(Path(path).read_text()))

    def check_tree(self, tree: LatentJunctionTree) -> None:
        want = self.metadata.get("tree_hash")
        if want is not None and want != tree.hash():
            raise TreeMismatchError("parameters were learned on a different junction tree")


# ---------------------------------------------------------------- stages


def _per_sample(moments: EmpiricalMoments, tree, sep_id, cell_values, cells):
    codes = moments.codes(list(tree.beta[sep_id]))
    lookup = np.full(FeatureMap.of(tree.beta[sep_id], tree.structure).dim, -1)
    lookup[cells] = np.arange(cells.size)
    return cell_values[lookup[codes]]


def s1a_regress(dataset: Dataset, tree: LatentJunctionTree, sep_id: int,
                config: RegressionConfig = RegressionConfig()) -> np.ndarray:
    """Per-sample predictions of ``E[theta^S | eta^S]``, shape ``(N, dim theta^S)``."""
    mom = EmpiricalMoments(dataset, tree.structure)
    sm = separator_moments(mom, tree, sep_id)
    l1, _ = config.resolve(mom.total)
    check_design(sm.cells.size, bool(tree.beta[sep_id]), l1, f"separator {sep_id}")
    return _per_sample(mom, tree, sep_id, grouped_ridge(sm.weights, sm.theta_means, l1), sm.cells)


def s1b_regress(dataset: Dataset, tree: LatentJunctionTree, sep_id: int,
                config: RegressionConfig = RegressionConfig()) -> np.ndarray:
    """Per-sample predictions of ``E[theta^{S_1} x ... x theta^{S_K} | eta^S]`` (vectorized)."""
    mom = EmpiricalMoments(dataset, tree.structure)
    sm = separator_moments(mom, tree, sep_id)
    l1, _ = config.resolve(mom.total)
    check_design(sm.cells.size, bool(tree.beta[sep_id]), l1, f"separator {sep_id}")
    return _per_sample(mom, tree, sep_id, grouped_ridge(sm.weights, sm.target_means, l1), sm.cells)


def s2_regress(s1a_preds: np.ndarray, s1b_preds: np.ndarray, config: RegressionConfig = RegressionConfig(),
               weights: np.ndarray | None = None) -> np.ndarray:
    """Stage-2 operator as a ``(dim target, dim theta^S)`` matrix."""
    X = np.asarray(s1a_preds, dtype=float)
    Y = np.asarray(s1b_preds, dtype=float)
    if X.shape[0] != Y.shape[0]:
        raise ValidationError("stage-2 inputs must have the same number of samples")
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    _, l2 = config.resolve(w.sum())
    return linear_operator(X, Y, w, l2)


def operator_tensor(tree: LatentJunctionTree, sep_id: int, W: np.ndarray) -> NamedTensor:
    """Reshape a stage-2 matrix into the tensor with modes ``(S, S_1, ..., S_K)``."""
    kids = tree.child_separators(tree.separator(sep_id).child)
    dims = [tree.feature_dim(k.id) for k in kids]
    labels = [Sep(sep_id)] + [Sep(k.id) for k in kids]
    data = W.T.reshape([tree.feature_dim(sep_id)] + dims)
    return NamedTensor(labels, data)


def learn_operator(moments, tree: LatentJunctionTree, sep_id: int, config: RegressionConfig) -> NamedTensor:
    sm = separator_moments(moments, tree, sep_id)
    l1, _ = config.resolve(moments.total)
    check_design(sm.cells.size, bool(tree.beta[sep_id]), l1, f"separator {sep_id}")
    xhat = grouped_ridge(sm.weights, sm.theta_means, l1)
    yhat = grouped_ridge(sm.weights, sm.target_means, l1)
    _, l2 = config.resolve(moments.total)
    W = linear_operator(xhat, yhat, sm.weights, l2)
    return operator_tensor(tree, sep_id, W)


def root_tensor_from(moments, tree: LatentJunctionTree) -> NamedTensor:
    seps = tree.root_separators
    vars_ = [v for s in seps for v in tree.alpha[s]]
    table = np.asarray(moments.table(vars_), dtype=float) / moments.total
    return NamedTensor([Sep(s) for s in seps], table.reshape([tree.feature_dim(s) for s in seps]))


def root_tensor(dataset: Dataset, tree: LatentJunctionTree) -> NamedTensor:
    """Average over samples of the outer product of the root separators' theta."""
    if len(dataset) < 1:
        raise ValidationError("root tensor needs at least one sample")
    return root_tensor_from(EmpiricalMoments(dataset, tree.structure), tree)


def _learn(moments, tree: LatentJunctionTree, config: RegressionConfig) -> LearnedParams:
    start = time.perf_counter()
    operators = {}
    for sid in tree.nonleaf_separators:
        if not tree.beta[sid]:
            log.info("separator %d has no evidence set; operator encodes unconditional moments", sid)
        try:
            operators[sid] = learn_operator(moments, tree, sid, config)
        except (SingularDesignError, np.linalg.LinAlgError) as exc:
            raise SingularDesignError(f"separator {sid}: {exc}") from exc
    root = root_tensor_from(moments, tree)
    l1, l2 = config.resolve(moments.total)
    meta = {
        "source": moments.source,
        "N": moments.total if moments.source == "empirical" else None,
        "lambda1": l1,
        "lambda2": l2,
        "tree_hash": tree.hash(),
        "learn_seconds": time.perf_counter() - start,
    }
    return LearnedParams(operators, root, meta)


def learn(tree: LatentJunctionTree, dataset: Dataset, config: RegressionConfig = RegressionConfig()) -> LearnedParams:
    """Learn every operator and the root tensor from samples of the observables."""
    if len(dataset) < 1:
        raise ValidationError("learning needs at least one sample")
    return _learn(EmpiricalMoments(dataset, tree.structure), tree, config)


def learn_population(tree: LatentJunctionTree, model: GraphicalModel,
                     config: RegressionConfig = RegressionConfig(0.0, 0.0), cap: int = 2**24) -> LearnedParams:
    """Same pipeline with exact expectations in place of sample averages."""
    size = int(np.prod(model.structure.cardinalities, dtype=np.int64))
    if size > cap:
        raise ValidationError(f"model has {size} joint states, above the cap of {cap}")
    if model.structure != tree.structure:
        raise ValidationError("model and tree were built from different structures")
    return _learn(PopulationMoments(model), tree, config)
