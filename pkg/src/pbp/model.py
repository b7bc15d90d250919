"""Discrete latent-variable directed models.

A :class:`Structure` holds variables and edges; a :class:`GraphicalModel`
adds one conditional probability table per variable.  CPT arrays have one
axis per parent (in the order the parent edges were declared) followed by the
child axis, so ``cpt[p1, p2, x] = P(X = x | parents = (p1, p2))``.

Brute-force enumeration here is the ground truth that every other inference
path in the package is checked against.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError, ZeroEvidenceError
from .tensor import NamedTensor, Var

JOINT_CAP = 2**24
GENERATOR_NAME = "numpy.random.default_rng/PCG64"


class Role(enum.Enum):
    OBSERVABLE = "observable"
    LATENT = "latent"


@dataclass(frozen=True)
class Variable:
    id: int
    name: str
    cardinality: int
    role: Role

    @property
    def observable(self) -> bool:
        return self.role is Role.OBSERVABLE


class Structure:
    """Variables plus a directed acyclic edge set.

    Variable ids are contiguous from 0 in declaration order.
    """

    def __init__(self, variables: Sequence[Variable], edges: Iterable[tuple[int, int]]):
        variables = tuple(variables)
        for i, v in enumerate(variables):
            if v.id != i:
                raise ValidationError(f"variable ids must be contiguous from 0; got {v.id} at {i}")
            if v.cardinality < 2:
                raise ValidationError(f"variable {v.name!r} needs cardinality >= 2")
        names = [v.name for v in variables]
        if len(set(names)) != len(names):
            raise ValidationError("variable names must be unique")
        edges = tuple((int(p), int(c)) for p, c in edges)
        n = len(variables)
        parents: list[list[int]] = [[] for _ in range(n)]
        children: list[list[int]] = [[] for _ in range(n)]
        for p, c in edges:
            if not (0 <= p < n and 0 <= c < n):
                raise ValidationError(f"edge ({p}, {c}) references an unknown variable")
            if p == c or p in parents[c]:
                raise ValidationError(f"invalid or repeated edge ({p}, {c})")
            parents[c].append(p)
            children[p].append(c)
        self.variables = variables
        self.edges = edges
        self._parents = tuple(tuple(ps) for ps in parents)
        self._children = tuple(tuple(cs) for cs in children)
        self._index = {v.name: v.id for v in variables}
        self.topological_order = self._toposort()

    @classmethod
    def build(cls, nodes: Sequence[tuple[str, int, bool]], edges: Iterable[tuple[str, str]]) -> "Structure":
        """Construct from ``(name, cardinality, observable)`` triples and named edges."""
        variables = [
            Variable(i, name, int(card), Role.OBSERVABLE if obs else Role.LATENT)
            for i, (name, card, obs) in enumerate(nodes)
        ]
        index = {v.name: v.id for v in variables}
        try:
            id_edges = [(index[p], index[c]) for p, c in edges]
        except KeyError as exc:
            raise ValidationError(f"edge references unknown variable {exc.args[0]!r}") from None
        return cls(variables, id_edges)

    def _toposort(self) -> tuple[int, ...]:
        indeg = [len(ps) for ps in self._parents]
        ready = [i for i, d in enumerate(indeg) if d == 0]
        order = []
        while ready:
            ready.sort()
            v = ready.pop(0)
            order.append(v)
            for c in self._children[v]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.variables):
            raise ValidationError("edge set contains a directed cycle")
        return tuple(order)

    def __len__(self):
        return len(self.variables)

    def parents(self, i: int) -> tuple[int, ...]:
        return self._parents[i]

    def children(self, i: int) -> tuple[int, ...]:
        return self._children[i]

    def family(self, i: int) -> tuple[int, ...]:
        return self._parents[i] + (i,)

    def id(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ValidationError(f"unknown variable {name!r}") from None

    def name(self, i: int) -> str:
        return self.variables[i].name

    def card(self, i: int) -> int:
        return self.variables[i].cardinality

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(v.cardinality for v in self.variables)

    @property
    def observables(self) -> tuple[int, ...]:
        return tuple(v.id for v in self.variables if v.observable)

    @property
    def latents(self) -> tuple[int, ...]:
        return tuple(v.id for v in self.variables if not v.observable)

    def is_observable(self, i: int) -> bool:
        return self.variables[i].observable

    def with_cardinalities(self, cards: Mapping[str, int] | int) -> "Structure":
        if isinstance(cards, int):
            cards = {v.name: cards for v in self.variables}
        variables = [
            Variable(v.id, v.name, int(cards.get(v.name, v.cardinality)), v.role)
            for v in self.variables
        ]
        return Structure(variables, self.edges)

    def cpt_shape(self, i: int) -> tuple[int, ...]:
        return tuple(self.card(j) for j in self.family(i))

    def to_json(self) -> dict:
        return {
            "variables": [
                {"name": v.name, "cardinality": v.cardinality, "observable": v.observable}
                for v in self.variables
            ],
            "edges": [[self.name(p), self.name(c)] for p, c in self.edges],
        }

    def __eq__(self, other):
        return isinstance(other, Structure) and self.to_json() == other.to_json()

    def __hash__(self):
        return hash(json.dumps(self.to_json(), sort_keys=True))


class GraphicalModel:
    """A :class:`Structure` with normalized conditional probability tables."""

    def __init__(self, structure: Structure, cpts: Mapping[int, np.ndarray]):
        tables = {}
        for v in structure.variables:
            if v.id not in cpts:
                raise ValidationError(f"missing CPT for variable {v.name!r}")
            t = np.array(cpts[v.id], dtype=float)
            shape = structure.cpt_shape(v.id)
            if t.shape != shape:
                if t.size != int(np.prod(shape)):
                    raise ValidationError(
                        f"CPT for {v.name!r} has {t.size} entries, expected shape {shape}"
                    )
                t = t.reshape(shape)
            if np.any(t < 0) or not np.all(np.isfinite(t)):
                raise ValidationError(f"CPT for {v.name!r} has negative or non-finite entries")
            if not np.allclose(t.sum(axis=-1), 1.0, atol=1e-12, rtol=0):
                raise ValidationError(f"CPT rows for {v.name!r} must sum to 1")
            t.setflags(write=False)
            tables[v.id] = t
        self.structure = structure
        self.cpts = tables
        self._joint = None

    def __getattr__(self, name):
        # structure accessors (observables, card, parents, ...) pass through
        if name.startswith("_") or name == "structure":
            raise AttributeError(name)
        return getattr(self.structure, name)

    def to_json(self) -> dict:
        obj = self.structure.to_json()
        obj["cpts"] = {
            self.structure.name(i): self.cpts[i].ravel().tolist() for i in sorted(self.cpts)
        }
        return obj

    def einsum_operands(self) -> list:
        ops = []
        for i in range(len(self.structure)):
            ops += [self.cpts[i], list(self.structure.family(i))]
        return ops

    def marginal(self, var_ids: Sequence[int]) -> np.ndarray:
        """Exact joint marginal ``P[var_ids]`` with axes in the given order."""
        var_ids = list(var_ids)
        if len(set(var_ids)) != len(var_ids):
            raise ValueError("marginal variables must be distinct")
        if self._joint is not None:
            rest = tuple(i for i in range(len(self.structure)) if i not in var_ids)
            m = self._joint.sum(axis=rest)
            kept = [i for i in range(len(self.structure)) if i in var_ids]
            return np.transpose(m, [kept.index(i) for i in var_ids])
        return np.einsum(*self.einsum_operands(), var_ids, optimize="greedy")

    def joint_array(self, cap: int = JOINT_CAP) -> np.ndarray:
        size = int(np.prod(self.structure.cardinalities, dtype=np.int64))
        if size > cap:
            raise ValidationError(f"joint has {size} states, above the cap of {cap}")
        if self._joint is None:
            j = np.einsum(*self.einsum_operands(), list(range(len(self.structure))), optimize="greedy")
            j.setflags(write=False)
            self._joint = j
        return self._joint


@dataclass(frozen=True)
class Dataset:
    """Complete assignments of the observables, one row per sample."""

    columns: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2 or vals.shape[1] != len(self.columns):
            raise ValidationError("dataset values must be an (N, n_columns) array")
        vals = vals.astype(np.int64, copy=True)
        vals.setflags(write=False)
        object.__setattr__(self, "columns", tuple(int(c) for c in self.columns))
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.shape[0]

    def column(self, var_id: int) -> np.ndarray:
        return self.values[:, self.columns.index(var_id)]

    def select(self, var_ids: Sequence[int]) -> np.ndarray:
        idx = [self.columns.index(v) for v in var_ids]
        return self.values[:, idx]

    def validate(self, structure: Structure) -> None:
        for j, v in enumerate(self.columns):
            if not structure.is_observable(v):
                raise ValidationError(f"dataset column {structure.name(v)!r} is not observable")
            col = self.values[:, j]
            if col.size and (col.min() < 0 or col.max() >= structure.card(v)):
                raise ValidationError(f"values of {structure.name(v)!r} out of range")
        missing = set(structure.observables) - set(self.columns)
        if missing:
            names = sorted(structure.name(v) for v in missing)
            raise ValidationError(f"dataset lacks observable column(s) {names}")


def validate_evidence(structure: Structure, evidence: Mapping[int, int], allow_latent=False) -> dict[int, int]:
    out = {}
    for k, x in evidence.items():
        k, x = int(k), int(x)
        if not 0 <= k < len(structure):
            raise ValidationError(f"unknown evidence variable id {k}")
        if not allow_latent and not structure.is_observable(k):
            raise ValidationError(f"evidence variable {structure.name(k)!r} is latent")
        if not 0 <= x < structure.card(k):
            raise ValidationError(f"evidence value {x} out of range for {structure.name(k)!r}")
        out[k] = x
    return out


# ---------------------------------------------------------------- generation


def random_model(structure: Structure, seed, cardinalities: Mapping[str, int] | int | None = None,
                 concentration: float = 1.0) -> GraphicalModel:
    """Draw every CPT row from a symmetric Dirichlet with the seeded generator."""
    if cardinalities is not None:
        structure = structure.with_cardinalities(cardinalities)
    rng = np.random.default_rng(seed)
    cpts = {}
    for v in structure.variables:
        shape = structure.cpt_shape(v.id)
        rows = int(np.prod(shape[:-1], dtype=np.int64))
        draw = rng.dirichlet(np.full(v.cardinality, concentration), size=rows)
        # renormalize so rows sum to one within float rounding
        draw /= draw.sum(axis=1, keepdims=True)
        cpts[v.id] = draw.reshape(shape)
    return GraphicalModel(structure, cpts)


def _sample_all(model: GraphicalModel, n: int, rng: np.random.Generator) -> np.ndarray:
    s = model.structure
    out = np.zeros((n, len(s)), dtype=np.int64)
    for v in s.topological_order:
        cpt = model.cpts[v]
        pa = s.parents(v)
        rows = cpt[tuple(out[:, p] for p in pa)] if pa else np.broadcast_to(cpt, (n, cpt.shape[-1]))
        cdf = np.cumsum(rows, axis=1)
        u = rng.random(n)
        out[:, v] = np.minimum((u[:, None] >= cdf).sum(axis=1), cpt.shape[-1] - 1)
    return out


def ancestral_sample(model: GraphicalModel, n: int, seed) -> Dataset:
    """Sample ``n`` joint draws in topological order and keep the observables."""
    if int(n) < 1:
        raise ValidationError("sample size must be at least 1")
    rng = np.random.default_rng(seed)
    full = _sample_all(model, int(n), rng)
    obs = model.structure.observables
    return Dataset(obs, full[:, list(obs)])


# ----------------------------------------------------------------- oracles


def brute_force_joint(model: GraphicalModel, cap: int = JOINT_CAP) -> NamedTensor:
    """Full joint over every variable, modes in variable-id order."""
    joint = model.joint_array(cap)
    return NamedTensor([Var(i) for i in range(len(model.structure))], joint)


def _posterior_by_enumeration(model: GraphicalModel, evidence: dict[int, int], query: int) -> np.ndarray:
    joint = model.joint_array()
    index = [slice(None)] * joint.ndim
    for k, x in evidence.items():
        index[k] = x
    sliced = joint[tuple(index)]
    free = [i for i in range(joint.ndim) if i not in evidence]
    if query in evidence:
        total = sliced.sum()
        if total <= 0:
            raise ZeroEvidenceError("evidence has probability zero")
        post = np.zeros(model.structure.card(query))
        post[evidence[query]] = 1.0
        return post
    axis = free.index(query)
    unnorm = sliced.sum(axis=tuple(a for a in range(sliced.ndim) if a != axis))
    total = unnorm.sum()
    if total <= 0:
        raise ZeroEvidenceError("evidence has probability zero")
    return unnorm / total


def exact_posterior(model: GraphicalModel, evidence: Mapping[int, int], query: int,
                    method: str = "both", atol: float = 1e-10) -> np.ndarray:
    """Exact ``P[query | evidence]``.

    ``method="both"`` sums the brute-force joint and also runs sum-product
    over a junction tree built from the true CPTs, and raises if the two
    disagree by more than ``atol``.  ``"enumeration"`` or ``"junction_tree"``
    run a single path.
    """
    evidence = validate_evidence(model.structure, evidence)
    if not 0 <= query < len(model.structure):
        raise ValidationError(f"unknown query variable id {query}")
    results = []
    if method in ("both", "enumeration"):
        results.append(_posterior_by_enumeration(model, evidence, query))
    if method in ("both", "junction_tree"):
        from .baselines import sum_product_exact

        results.append(sum_product_exact(model, evidence, query))
    if not results:
        raise ValueError(f"unknown method {method!r}")
    if len(results) == 2:
        err = np.max(np.abs(results[0] - results[1]))
        if err > atol:
            raise AssertionError(f"exact posterior paths disagree by {err:.3e}")
    return results[0]


def exact_evidence_probability(model: GraphicalModel, evidence: Mapping[int, int]) -> float:
    """``P[evidence]`` by summing the joint over everything unobserved."""
    evidence = validate_evidence(model.structure, evidence)
    if not evidence:
        return float(model.joint_array().sum())
    keys = sorted(evidence)
    marg = model.marginal(keys)
    return float(marg[tuple(evidence[k] for k in keys)])


# ------------------------------------------------------------------ presets

_FIG4_LATENT = ("A", "B", "C", "F")
_FIG4_EDGES = (
    ("A", "B"), ("A", "C"), ("B", "F"), ("C", "F"),
    ("A", "K"), ("A", "L"),
    ("B", "D"), ("B", "G"),
    ("C", "E"), ("C", "H"),
    ("F", "I"), ("F", "J"), ("F", "N"),
    ("B", "M"), ("C", "M"),
)


def fig4_structure(cardinality: int = 2, cardinalities: Mapping[str, int] | None = None) -> Structure:
    """Loopy latent model used by the synthetic experiment.

    Latent A, B, C, F form the loop A-B-F-C-A; D, E and G..N are observable.
    The experiment queries D given G, H and E.
    """
    cardinalities = dict(cardinalities or {})
    names = ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K", "L", "M", "N"]
    nodes = [(n, cardinalities.get(n, cardinality), n not in _FIG4_LATENT) for n in names]
    return Structure.build(nodes, _FIG4_EDGES)


def fig2_structure(cardinality: int = 2) -> Structure:
    """Small loopy model whose junction tree has a two-latent separator {A, B}."""
    latent = ("A", "B", "C", "D")
    names = ["A", "B", "C", "D", "E", "F", "G", "H", "I"]
    edges = [
        ("A", "B"), ("A", "C"), ("B", "C"), ("A", "D"), ("B", "D"),
        ("C", "E"), ("C", "F"), ("D", "G"), ("D", "H"), ("A", "I"),
    ]
    return Structure.build([(n, cardinality, n not in latent) for n in names], edges)


def hmm_structure(length: int, hidden_card: int = 2, obs_card: int = 2) -> Structure:
    """Hidden Markov chain H0 -> H1 -> ... with one observation per step."""
    nodes = [(f"H{t}", hidden_card, False) for t in range(length)]
    nodes += [(f"X{t}", obs_card, True) for t in range(length)]
    edges = [(f"H{t}", f"H{t + 1}") for t in range(length - 1)]
    edges += [(f"H{t}", f"X{t}") for t in range(length)]
    return Structure.build(nodes, edges)


def random_latent_structure(seed, n_latent: int = 3, n_observable: int = 5,
                            cards: Sequence[int] = (2, 3), extra_parent_prob: float = 0.3,
                            obs_per_latent: int = 1) -> Structure:
    """Random connected latent-variable DAG.

    Latents form a random tree (optionally with extra parents, which makes the
    moral graph loopy).  Each latent gets at least ``obs_per_latent`` observable
    children; the remaining observables pick one or two latent parents.
    Observable cardinalities are never below their parents' smallest
    cardinality, which keeps latent states generically identifiable.
    """
    rng = np.random.default_rng(seed)
    lat_cards = [int(rng.choice(cards)) for _ in range(n_latent)]
    nodes = [(f"H{i}", lat_cards[i], False) for i in range(n_latent)]
    edges = []
    for i in range(1, n_latent):
        p = int(rng.integers(0, i))
        edges.append((f"H{p}", f"H{i}"))
        if i >= 2 and rng.random() < extra_parent_prob:
            q = int(rng.integers(0, i))
            if q != p:
                edges.append((f"H{q}", f"H{i}"))
    parents_of_obs = []
    for i in range(n_latent):
        parents_of_obs += [[i]] * obs_per_latent
    while len(parents_of_obs) < n_observable:
        first = int(rng.integers(0, n_latent))
        pa = [first]
        if n_latent > 1 and rng.random() < extra_parent_prob:
            second = int(rng.integers(0, n_latent))
            if second != first:
                pa.append(second)
        parents_of_obs.append(pa)
    parents_of_obs = parents_of_obs[:max(n_observable, n_latent * obs_per_latent)]
    for j, pa in enumerate(parents_of_obs):
        lo = max(lat_cards[p] for p in pa)
        choices = [c for c in cards if c >= lo] or [lo]
        nodes.append((f"X{j}", int(rng.choice(choices)), True))
        edges += [(f"H{p}", f"X{j}") for p in pa]
    return Structure.build(nodes, edges)


# ----------------------------------------------------------------------- io


def structure_from_json(obj: dict) -> Structure:
    try:
        nodes = [(v["name"], int(v["cardinality"]), bool(v["observable"])) for v in obj["variables"]]
        edges = [tuple(e) for e in obj.get("edges", [])]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model file: {exc}") from None
    for e in edges:
        if len(e) != 2:
            raise ValidationError(f"edge {list(e)} must be a [parent, child] pair")
    return Structure.build(nodes, edges)


def model_from_json(obj: dict) -> GraphicalModel:
    structure = structure_from_json(obj)
    if "cpts" not in obj:
        raise ValidationError("model file has no CPTs")
    cpts = {}
    for name, flat in obj["cpts"].items():
        cpts[structure.id(name)] = np.asarray(flat, dtype=float)
    return GraphicalModel(structure, cpts)


def save_model(model: GraphicalModel | Structure, path) -> None:
    Path(path).write_text(json.dumps(model.to_json(), indent=1))


def load_model(path) -> GraphicalModel:
    return model_from_json(_read_json(path))


def load_structure(path) -> Structure:
    return structure_from_json(_read_json(path))


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def write_dataset(data: Dataset, structure: Structure, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([structure.name(c) for c in data.columns])
    w.writerows(data.values.tolist())


def save_dataset(data: Dataset, structure: Structure, path) -> None:
    with open(path, "w", newline="") as fh:
        write_dataset(data, structure, fh)


def load_dataset(path, structure: Structure) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty dataset file")
    header = [h.strip() for h in rows[0]]
    cols = []
    for h in header:
        try:
            cols.append(structure.id(h))
        except ValidationError:
            raise ValidationError(f"{path}: unknown column {h!r}") from None
    try:
        values = np.array([[int(x) for x in r] for r in rows[1:] if r], dtype=np.int64)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-integer state ({exc})") from None
    if values.size == 0:
        values = values.reshape(0, len(cols))
    data = Dataset(tuple(cols), values)
    data.validate(structure)
    return data
