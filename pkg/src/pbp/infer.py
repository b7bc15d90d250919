"""Predictive belief propagation with learned operators.

Evidence enters only at the leaves: each leaf sends
``pinv(Phi) x_delta (outer product of zeta)`` upward.  Internal cliques apply
their operator ``W^S`` to the children's messages on the way up, the root
tensor exchanges information between subtrees, and on the way down each
internal clique sends ``W^S x_S m_down x_{siblings} m_up`` to every child.
A query at leaf ``C_Q`` multiplies the transformed incoming and outgoing
messages entrywise, which estimates ``P[delta(C_Q), evidence]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError, ZeroEvidenceError
from .features import FeatureMap, zeta
from .junction_tree import LatentJunctionTree
from .learn import LearnedParams
from .model import validate_evidence
from .tensor import NamedTensor, Sep, Var, contract, hadamard, marginalize, pinv

log = logging.getLogger(__name__)

MessageStore = dict[tuple[int, int], NamedTensor]


@dataclass(frozen=True)
class LeafTensor:
    sep_id: int
    phi: NamedTensor       # modes (S_l, A_1, ..., A_n)
    phi_pinv: NamedTensor  # modes (A_1, ..., A_n, S_l)


@dataclass
class QueryResult:
    query: int
    evidence: dict[int, int]
    posterior: np.ndarray
    evidence_probability: float
    clamped: bool

    def to_json(self, structure, metadata: dict | None = None) -> dict:
        return {
            "query": structure.name(self.query),
            "evidence": {structure.name(k): int(v) for k, v in sorted(self.evidence.items())},
            "posterior": [float(p) for p in self.posterior],
            "evidence_probability": float(self.evidence_probability),
            "clamped": bool(self.clamped),
            "metadata": dict(metadata or {}),
        }


def build_leaf_tensors(tree: LatentJunctionTree) -> dict[int, LeafTensor]:
    """Leaf tensor per leaf separator; fibers along the feature mode are theta."""
    out = {}
    for sid in tree.leaf_separators:
        alpha = tree.alpha[sid]
        fmap = FeatureMap.of(alpha, tree.structure)
        data = np.empty((fmap.dim,) + fmap.cardinalities)
        for idx in np.ndindex(*fmap.cardinalities):
            data[(slice(None),) + idx] = fmap(idx)
        phi = NamedTensor([Sep(sid)] + [Var(a) for a in alpha], data)
        out[sid] = LeafTensor(sid, phi, pinv(phi, [Sep(sid)]))
    return out


def _zeta_tensors(tree: LatentJunctionTree, variables: Sequence[int], evidence: Mapping[int, int]):
    return [NamedTensor([Var(x)], zeta(tree.structure.card(x), evidence.get(x))) for x in variables]


def leaf_message(tree: LatentJunctionTree, leaf_tensors: Mapping[int, LeafTensor], clique: int,
                 evidence: Mapping[int, int]) -> NamedTensor:
    """Initial upward message of a leaf clique."""
    c = tree.cliques[clique]
    if not c.is_leaf:
        raise ValidationError(f"clique {clique} is not a leaf")
    lt = leaf_tensors[tree.separator_above(clique).id]
    return contract(lt.phi_pinv, *_zeta_tensors(tree, c.observables, evidence))


def _expect_mode(msg: NamedTensor, tree: LatentJunctionTree, sep_id: int) -> NamedTensor:
    if msg.labels != (Sep(sep_id),) or msg.shape != (tree.feature_dim(sep_id),):
        raise RuntimeError(f"message for separator {sep_id} has modes {msg!r}")
    return msg


def upward_pass(tree: LatentJunctionTree, params: LearnedParams,
                leaf_messages: Mapping[int, NamedTensor]) -> MessageStore:
    store: MessageStore = {}
    for c in tree.upward_order():
        if c == tree.root:
            continue
        s = tree.separator_above(c)
        if tree.cliques[c].is_leaf:
            msg = leaf_messages[c]
        else:
            try:
                incoming = [store[(k, c)] for k in tree.children(c)]
            except KeyError as exc:
                raise RuntimeError(f"clique {c} scheduled before child message {exc}") from None
            msg = contract(params.operators[s.id], *incoming)
        store[(c, s.parent)] = _expect_mode(msg, tree, s.id)
    return store


def root_messages(tree: LatentJunctionTree, params: LearnedParams, store: MessageStore) -> MessageStore:
    r = tree.root
    kids = tree.children(r)
    for k in kids:
        others = [store[(j, r)] for j in kids if j != k]
        msg = contract(params.root_tensor, *others)
        store[(r, k)] = _expect_mode(msg, tree, tree.separator_above(k).id)
    return store


def downward_pass(tree: LatentJunctionTree, params: LearnedParams, store: MessageStore) -> MessageStore:
    for c in tree.downward_order():
        if c == tree.root or tree.cliques[c].is_leaf:
            continue
        s = tree.separator_above(c)
        down = store[(s.parent, c)]
        kids = tree.children(c)
        for k in kids:
            others = [store[(j, c)] for j in kids if j != k]
            msg = contract(params.operators[s.id], down, *others)
            store[(c, k)] = _expect_mode(msg, tree, tree.separator_above(k).id)
    return store


class PBPInference:
    """Inference engine bound to one tree and one parameter set."""

    def __init__(self, tree: LatentJunctionTree, params: LearnedParams):
        params.check_tree(tree)
        for sid in tree.nonleaf_separators:
            if sid not in params.operators:
                raise ValidationError(f"parameters lack the operator for separator {sid}")
        self.tree = tree
        self.params = params
        self.leaf_tensors = build_leaf_tensors(tree)

    def messages(self, evidence: Mapping[int, int]) -> MessageStore:
        tree = self.tree
        leaves = {c.id: leaf_message(tree, self.leaf_tensors, c.id, evidence)
                  for c in tree.cliques if c.is_leaf}
        store = upward_pass(tree, self.params, leaves)
        root_messages(tree, self.params, store)
        return downward_pass(tree, self.params, store)

    def leaf_joint(self, clique: int, store: MessageStore) -> NamedTensor:
        """Unnormalized estimate of ``P[delta(C), evidence]`` at a leaf."""
        s = self.tree.separator_above(clique)
        lt = self.leaf_tensors[s.id]
        u = contract(store[(s.parent, clique)], lt.phi_pinv)
        v = contract(lt.phi, store[(clique, s.parent)])
        return hadamard(u, v)

    def _evidence(self, evidence):
        return validate_evidence(self.tree.structure, evidence)

    def posteriors(self, evidence: Mapping[int, int], queries: Sequence[int]) -> list[QueryResult]:
        evidence = self._evidence(evidence)
        st = self.tree.structure
        for q in queries:
            if not 0 <= q < len(st) or not st.is_observable(q):
                raise ValidationError(f"query variable {q} must be observable")
        store = self.messages(evidence)
        joints: dict[int, NamedTensor] = {}
        out = []
        for q in queries:
            c = self.tree.host(q)
            if c not in joints:
                joints[c] = self.leaf_joint(c, store)
            joint = joints[c]
            raw_total = float(joint.data.sum())
            p_e = max(raw_total, 0.0)
            if q in evidence:
                post = np.zeros(st.card(q))
                post[evidence[q]] = 1.0
                out.append(QueryResult(q, dict(evidence), post, p_e, raw_total < 0))
                continue
            rest = [l for l in joint.labels if l != Var(q)]
            unnorm = marginalize(joint, rest).data
            clamped = bool(np.any(unnorm < 0))
            unnorm = np.clip(unnorm, 0.0, None)
            total = unnorm.sum()
            if not total > 0:
                raise ZeroEvidenceError("estimated probability of the evidence is zero")
            out.append(QueryResult(q, dict(evidence), unnorm / total, p_e, clamped or raw_total < 0))
        return out

    def posterior(self, evidence: Mapping[int, int], query: int) -> QueryResult:
        return self.posteriors(evidence, [query])[0]

    def evidence_probability(self, evidence: Mapping[int, int], with_flag: bool = False):
        evidence = self._evidence(evidence)
        store = self.messages(evidence)
        leaf = min(c.id for c in self.tree.cliques if c.is_leaf)
        raw = float(self.leaf_joint(leaf, store).data.sum())
        if raw < 0:
            log.debug("negative evidence-probability estimate %.3g clamped to 0", raw)
        value = max(raw, 0.0)
        return (value, raw < 0) if with_flag else value


def query_posterior(tree: LatentJunctionTree, params: LearnedParams, evidence: Mapping[int, int],
                    query: int) -> QueryResult:
    """Estimated ``P[query | evidence]`` for an observable query variable."""
    return PBPInference(tree, params).posterior(evidence, query)


def evidence_probability(tree: LatentJunctionTree, params: LearnedParams, evidence: Mapping[int, int]) -> float:
    """Estimated joint probability of the evidence (clamped at 0)."""
    return PBPInference(tree, params).evidence_probability(evidence)
