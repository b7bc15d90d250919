"""Latent junction trees.

Pipeline: moralize -> min-fill triangulation -> maximal cliques -> maximum
weight spanning clique tree -> prune observable-free leaves -> pick a root ->
associate every observable with one leaf clique (adding pendant cliques where
needed) -> core groups and evidence sets per separator.

Separators are identified by the clique directly below them, so separator
``k`` always sits between clique ``k + 1`` and its parent once the final tree
has been renumbered in breadth-first order from the root (clique 0).
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ValidationError
from .model import Structure, random_model

log = logging.getLogger(__name__)

Graph = dict[int, set[int]]

BETA_CAP = 1024
RANK_ENUMERATION_CAP = 2**20
_RANK_SEED = 20170901


class RunningIntersectionError(RuntimeError):
    """A clique tree violates the running intersection property (a bug)."""


# ------------------------------------------------------------ graph steps


def moralize(structure: Structure) -> Graph:
    """Undirected skeleton plus an edge between every pair of co-parents."""
    g: Graph = {v.id: set() for v in structure.variables}
    for p, c in structure.edges:
        g[p].add(c)
        g[c].add(p)
    for v in structure.variables:
        pa = structure.parents(v.id)
        for i, a in enumerate(pa):
            for b in pa[i + 1:]:
                g[a].add(b)
                g[b].add(a)
    return g


def _copy(g: Graph) -> Graph:
    return {v: set(n) for v, n in g.items()}


def _fill_in(g: Graph, v: int) -> list[tuple[int, int]]:
    nb = sorted(g[v])
    return [(a, b) for i, a in enumerate(nb) for b in nb[i + 1:] if b not in g[a]]


def triangulate(graph: Graph) -> tuple[Graph, list[int]]:
    """Greedy min-fill elimination, ties broken by the lowest vertex id.

    Returns the chordal supergraph and the elimination order.
    """
    work = _copy(graph)
    chordal = _copy(graph)
    order = []
    while work:
        v = min(work, key=lambda u: (len(_fill_in(work, u)), u))
        for a, b in _fill_in(work, v):
            for h in (work, chordal):
                h[a].add(b)
                h[b].add(a)
        for u in work[v]:
            work[u].discard(v)
        del work[v]
        order.append(v)
    return chordal, order


def is_chordal(graph: Graph) -> bool:
    """Maximum cardinality search followed by a perfect-elimination check."""
    if not graph:
        return True
    weight = {v: 0 for v in graph}
    numbered: list[int] = []
    unnumbered = set(graph)
    while unnumbered:
        v = max(unnumbered, key=lambda u: (weight[u], -u))
        numbered.append(v)
        unnumbered.discard(v)
        for u in graph[v]:
            if u in unnumbered:
                weight[u] += 1
    # reverse of the MCS visit order is a perfect elimination order iff chordal
    pos = {v: i for i, v in enumerate(numbered)}
    for v in numbered:
        earlier = [u for u in graph[v] if pos[u] < pos[v]]
        if not earlier:
            continue
        p = max(earlier, key=lambda u: pos[u])
        if not set(earlier) - {p} <= graph[p]:
            return False
    return True


def maximal_cliques(chordal: Graph, order: list[int]) -> list[frozenset[int]]:
    """Maximal cliques from elimination cliques, sorted by member tuple."""
    pos = {v: i for i, v in enumerate(order)}
    cands = []
    for v in order:
        later = {u for u in chordal[v] if pos[u] > pos[v]}
        cands.append(frozenset({v} | later))
    cliques = [c for c in cands if not any(c < d for d in cands)]
    return sorted(set(cliques), key=lambda c: tuple(sorted(c)))


def _connected(nodes: Iterable[int], adj: Mapping[int, set[int]]) -> bool:
    nodes = list(nodes)
    if not nodes:
        return True
    seen = {nodes[0]}
    stack = [nodes[0]]
    while stack:
        v = stack.pop()
        for u in adj[v]:
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return len(seen) == len(nodes)


def build_tree(chordal: Graph, order: list[int] | None = None) -> tuple[list[frozenset[int]], list[tuple[int, int]]]:
    """Maximal cliques joined by a maximum-weight spanning tree.

    Edge weight is the number of shared variables; ties go to the
    lexicographically smallest clique-id pair.  The running intersection
    property is verified before returning.
    """
    if not _connected(chordal, chordal):
        raise ValidationError("model graph is disconnected")
    if order is None:
        order = _mcs_elimination_order(chordal)
    cliques = maximal_cliques(chordal, order)
    pairs = []
    for i in range(len(cliques)):
        for j in range(i + 1, len(cliques)):
            w = len(cliques[i] & cliques[j])
            if w:
                pairs.append((-w, i, j))
    pairs.sort()
    parent = list(range(len(cliques)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    edges = []
    for _, i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            edges.append((i, j))
    if len(edges) != len(cliques) - 1:
        raise ValidationError("clique graph is disconnected")
    if not running_intersection_holds(cliques, edges):
        raise RunningIntersectionError("clique tree violates the running intersection property")
    return cliques, edges


def _mcs_elimination_order(chordal: Graph) -> list[int]:
    weight = {v: 0 for v in chordal}
    visit = []
    left = set(chordal)
    while left:
        v = max(left, key=lambda u: (weight[u], -u))
        visit.append(v)
        left.discard(v)
        for u in chordal[v]:
            if u in left:
                weight[u] += 1
    return visit[::-1]


def running_intersection_holds(cliques: Mapping[int, frozenset[int]] | list[frozenset[int]],
                               edges: Iterable[tuple[int, int]]) -> bool:
    """For every variable, the cliques containing it form a connected subtree."""
    if isinstance(cliques, list):
        cliques = dict(enumerate(cliques))
    adj: dict[int, set[int]] = {c: set() for c in cliques}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    variables = set().union(*cliques.values()) if cliques else set()
    for v in variables:
        holders = [c for c, m in cliques.items() if v in m]
        sub = {c: {d for d in adj[c] if v in cliques[d]} for c in holders}
        if not _connected(holders, sub):
            return False
    return True


def clique_tree(structure: Structure) -> tuple[list[frozenset[int]], list[tuple[int, int]]]:
    """Plain junction tree of the model (every family lies inside some clique)."""
    chordal, order = triangulate(moralize(structure))
    return build_tree(chordal, order)


# --------------------------------------------------------- the latent tree


@dataclass(frozen=True)
class Clique:
    id: int
    members: frozenset[int]
    is_leaf: bool
    observables: tuple[int, ...]  # delta(C): observables associated with this leaf


@dataclass(frozen=True)
class Separator:
    id: int
    members: frozenset[int]
    parent: int
    child: int


@dataclass
class LatentJunctionTree:
    structure: Structure
    cliques: tuple[Clique, ...]
    separators: tuple[Separator, ...]
    root: int
    alpha: dict[int, tuple[int, ...]] = field(default_factory=dict)
    beta: dict[int, tuple[int, ...]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._children: dict[int, list[int]] = {c.id: [] for c in self.cliques}
        self._up: dict[int, Separator] = {}
        for s in self.separators:
            self._children[s.parent].append(s.child)
            self._up[s.child] = s
        self._host = {x: c.id for c in self.cliques for x in c.observables}

    # topology ---------------------------------------------------------
    def children(self, clique: int) -> list[int]:
        return self._children[clique]

    def parent(self, clique: int) -> int | None:
        s = self._up.get(clique)
        return None if s is None else s.parent

    def separator_above(self, clique: int) -> Separator:
        return self._up[clique]

    def child_separators(self, clique: int) -> list[Separator]:
        return [self._up[c] for c in self._children[clique]]

    def separator(self, sep_id: int) -> Separator:
        return self.separators[sep_id]

    def is_leaf_separator(self, sep_id: int) -> bool:
        return self.cliques[self.separators[sep_id].child].is_leaf

    @property
    def leaf_separators(self) -> list[int]:
        return [s.id for s in self.separators if self.is_leaf_separator(s.id)]

    @property
    def nonleaf_separators(self) -> list[int]:
        return [s.id for s in self.separators if not self.is_leaf_separator(s.id)]

    @property
    def root_separators(self) -> list[int]:
        return [s.id for s in self.child_separators(self.root)]

    def host(self, var_id: int) -> int:
        """Leaf clique the observable is associated with."""
        return self._host[var_id]

    def upward_order(self) -> list[int]:
        """Cliques with every child before its parent."""
        return self.downward_order()[::-1]

    def downward_order(self) -> list[int]:
        order, queue = [], deque([self.root])
        while queue:
            c = queue.popleft()
            order.append(c)
            queue.extend(self._children[c])
        return order

    def subtree(self, clique: int) -> list[int]:
        out, stack = [], [clique]
        while stack:
            c = stack.pop()
            out.append(c)
            stack.extend(self._children[c])
        return out

    def inside_outside(self, sep_id: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        sub = set(self.subtree(self.separators[sep_id].child))
        inside = sorted(x for c in sub for x in self.cliques[c].observables)
        outside = sorted(x for c in self.cliques if c.id not in sub for x in c.observables)
        return tuple(inside), tuple(outside)

    def clique_distances(self, start: int, blocked: int | None = None) -> dict[int, int]:
        adj = {c.id: set(self._children[c.id]) for c in self.cliques}
        for s in self.separators:
            adj[s.child].add(s.parent)
        dist = {start: 0}
        queue = deque([start])
        while queue:
            c = queue.popleft()
            for d in sorted(adj[c]):
                if d not in dist and d != blocked:
                    dist[d] = dist[c] + 1
                    queue.append(d)
        return dist

    def feature_dim(self, sep_id: int) -> int:
        return int(np.prod([self.structure.card(v) for v in self.alpha[sep_id]], dtype=np.int64))

    # serialization ------------------------------------------------------
    def to_json(self) -> dict:
        name = self.structure.name
        return {
            "root": self.root,
            "cliques": [
                {
                    "id": c.id,
                    "members": [name(v) for v in sorted(c.members)],
                    "leaf": c.is_leaf,
                    "observables": [name(v) for v in c.observables],
                }
                for c in self.cliques
            ],
            "separators": [
                {
                    "id": s.id,
                    "members": [name(v) for v in sorted(s.members)],
                    "parent": s.parent,
                    "child": s.child,
                }
                for s in self.separators
            ],
            "alpha": {str(k): [name(v) for v in vs] for k, vs in sorted(self.alpha.items())},
            "beta": {str(k): [name(v) for v in vs] for k, vs in sorted(self.beta.items())},
            "warnings": list(self.warnings),
        }

    def hash(self) -> str:
        payload = {"structure": self.structure.to_json(), "tree": self.to_json()}
        payload["tree"].pop("warnings")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ------------------------------------------------------ construction steps


class _WorkTree:
    """Mutable clique tree used while assembling the latent tree."""

    def __init__(self, cliques: list[frozenset[int]], edges: list[tuple[int, int]]):
        self.members = dict(enumerate(cliques))
        self.adj: dict[int, set[int]] = {i: set() for i in self.members}
        for a, b in edges:
            self.adj[a].add(b)
            self.adj[b].add(a)
        self.next_id = len(cliques)

    def remove(self, c: int):
        for d in self.adj.pop(c):
            self.adj[d].discard(c)
        del self.members[c]

    def attach(self, members: frozenset[int], host: int) -> int:
        c = self.next_id
        self.next_id += 1
        self.members[c] = members
        self.adj[c] = {host}
        self.adj[host].add(c)
        return c

    def edges(self):
        return [(a, b) for a in self.adj for b in self.adj[a] if a < b]

    def rooted_children(self, root: int) -> dict[int, list[int]]:
        children = {root: []}
        queue = deque([root])
        while queue:
            c = queue.popleft()
            kids = sorted(d for d in self.adj[c] if d not in children)
            children[c] = kids
            for d in kids:
                children[d] = []
                queue.append(d)
            children[c] = kids
        return children


def _prune_observable_free(work: _WorkTree, structure: Structure) -> None:
    obs = set(structure.observables)
    changed = True
    while changed and len(work.members) > 1:
        changed = False
        for c in sorted(work.members):
            if len(work.adj[c]) <= 1 and not (work.members[c] & obs) and len(work.members) > 1:
                work.remove(c)
                changed = True


def select_root(cliques: Mapping[int, frozenset[int]], adj: Mapping[int, set[int]]) -> int:
    """Non-leaf clique of minimum eccentricity (lowest id on ties).

    A tree without any non-leaf clique (one or two cliques) falls back to the
    lowest-id clique.
    """
    ids = sorted(cliques)
    inner = [c for c in ids if len(adj[c]) >= 2]
    candidates = inner or ids

    def ecc(c):
        dist = {c: 0}
        queue = deque([c])
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return max(dist.values())

    return min(candidates, key=lambda c: (ecc(c), c))


def _leaf_choice(work: _WorkTree, root: int, structure: Structure) -> dict[int, int | None]:
    children = work.rooted_children(root)
    leaves = [c for c, kids in children.items() if not kids and c != root]
    choice = {}
    for x in structure.observables:
        cands = [c for c in leaves if x in work.members[c]]
        choice[x] = min(cands, key=lambda c: (len(work.members[c]), c)) if cands else None
    return choice


def associate_observables(work: _WorkTree, root: int, structure: Structure,
                          moral: Graph) -> dict[int, int]:
    """Map each observable to one leaf clique, adding pendants where needed.

    Leaves that end up hosting nothing are pruned first (repeatedly, since a
    pruned leaf can expose a new one).  An observable that then lives in no
    leaf gets a pendant clique holding it and its latent moral-graph
    neighbours from the smallest clique containing it.
    Returns ``observable -> leaf clique``.
    """
    while True:
        choice = _leaf_choice(work, root, structure)
        children = work.rooted_children(root)
        used = set(choice.values())
        dead = [c for c, kids in children.items() if not kids and c != root and c not in used]
        if not dead:
            break
        for c in dead:
            work.remove(c)
    assoc = {}
    for x in structure.observables:
        if choice[x] is not None:
            assoc[x] = choice[x]
            continue
        hosts = [c for c in work.members if x in work.members[c]]
        host = min(hosts, key=lambda c: (len(work.members[c]), c))
        latent_nb = {u for u in moral[x] if not structure.is_observable(u)} & work.members[host]
        pendant = work.attach(frozenset({x} | latent_nb), host)
        assoc[x] = pendant
        log.debug("pendant clique %s added for observable %s",
                  sorted(structure.name(v) for v in work.members[pendant]), structure.name(x))
    return assoc


def _finalize(work: _WorkTree, root: int, assoc: dict[int, int], structure: Structure) -> LatentJunctionTree:
    children = work.rooted_children(root)
    order, queue = [], deque([root])
    while queue:
        c = queue.popleft()
        order.append(c)
        queue.extend(children[c])
    new_id = {old: i for i, old in enumerate(order)}
    delta: dict[int, list[int]] = {}
    for x, c in assoc.items():
        delta.setdefault(new_id[c], []).append(x)
    cliques = tuple(
        Clique(
            id=new_id[old],
            members=work.members[old],
            is_leaf=not children[old] and old != root,
            observables=tuple(sorted(delta.get(new_id[old], []))),
        )
        for old in order
    )
    separators = []
    for old in order[1:]:
        par = next(p for p in order if old in children[p])
        separators.append(
            Separator(
                id=new_id[old] - 1,
                members=work.members[old] & work.members[par],
                parent=new_id[par],
                child=new_id[old],
            )
        )
    separators.sort(key=lambda s: s.id)
    mem = {c.id: c.members for c in cliques}
    if not running_intersection_holds(mem, [(s.parent, s.child) for s in separators]):
        raise RunningIntersectionError("latent junction tree violates the running intersection property")
    for s in separators:
        if not s.members:
            raise RunningIntersectionError(f"separator {s.id} is empty")
    return LatentJunctionTree(structure, cliques, tuple(separators), root=0)


# ------------------------------------------------------ alpha and beta sets


def _ranked_observables(tree: LatentJunctionTree, sep_id: int, inside: bool) -> list[int]:
    s = tree.separator(sep_id)
    if inside:
        dist = tree.clique_distances(s.child, blocked=s.parent)
    else:
        dist = tree.clique_distances(s.parent, blocked=s.child)
    ins, outs = tree.inside_outside(sep_id)
    pool = ins if inside else outs
    return sorted(pool, key=lambda x: (dist[tree.host(x)], x))


def _card(structure: Structure, vs: Iterable[int]) -> int:
    return int(np.prod([structure.card(v) for v in vs], dtype=np.int64))


class _GenericRank:
    """Ranks of conditional tables under one generic (random) parameter draw.

    Only the structure is used: for almost every CPT setting the rank of a
    table such as ``P[alpha, S]`` equals its value at a random draw.
    """

    def __init__(self, structure: Structure, seed: int = _RANK_SEED):
        self.structure = structure
        self.model = random_model(structure, seed)

    def rank(self, rows: list[int], cols: list[int]) -> int:
        m = self.model.marginal(list(rows) + list(cols))
        mat = m.reshape(_card(self.structure, rows), _card(self.structure, cols))
        sv = np.linalg.svd(mat, compute_uv=False)
        if sv.size == 0 or sv[0] == 0:
            return 0
        return int(np.sum(sv > sv[0] * 1e-9))


def core_group(tree: LatentJunctionTree, structure: Structure, sep_id: int,
               rank_check: bool = True, _ranker: _GenericRank | None = None) -> tuple[int, ...]:
    """Core group alpha(S): nearest inside observables that pin down S.

    Leaf separators take every observable of their leaf.  Elsewhere inside
    observables are added in order of tree distance (ties by id) until the
    prefix captures as much of the separator state as the whole inside set:
    equal generic rank of ``P[prefix, S]`` and ``P[inside, S]`` when that is
    cheap to enumerate, otherwise joint cardinality >= separator cardinality.
    """
    s = tree.separator(sep_id)
    ranked = _ranked_observables(tree, sep_id, inside=True)
    if not ranked:
        raise ValidationError(f"separator {sep_id} has no inside observables")
    if tree.is_leaf_separator(sep_id):
        return tuple(sorted(tree.cliques[s.child].observables))
    members = sorted(s.members)
    sep_card = _card(structure, members)
    if _card(structure, ranked) < sep_card:
        tree.warnings.append(
            f"separator {sep_id}: inside observables have fewer joint states than the separator; "
            "the rank condition cannot hold"
        )
    use_rank = rank_check and _card(structure, set(ranked) | set(members)) <= RANK_ENUMERATION_CAP
    if use_rank:
        ranker = _ranker or _GenericRank(structure)
        target = ranker.rank(ranked, members)
        for k in range(1, len(ranked) + 1):
            if ranker.rank(ranked[:k], members) >= target:
                return tuple(ranked[:k])
        return tuple(ranked)
    for k in range(1, len(ranked) + 1):
        if _card(structure, ranked[:k]) >= sep_card:
            return tuple(ranked[:k])
    return tuple(ranked)


def evidence_set(tree: LatentJunctionTree, sep_id: int, cap: int = BETA_CAP) -> tuple[int, ...]:
    """Evidence set beta(S): nearest outside observables, joint states <= cap."""
    ranked = _ranked_observables(tree, sep_id, inside=False)
    out, size = [], 1
    for x in ranked:
        c = tree.structure.card(x)
        if size * c > cap:
            break
        out.append(x)
        size *= c
    return tuple(out)


def build_latent_junction_tree(structure: Structure, beta_cap: int = BETA_CAP,
                               root_members: Iterable[int] | None = None,
                               rank_check: bool = True) -> LatentJunctionTree:
    """Run the whole construction deterministically.

    ``root_members`` forces the root to be the clique with exactly those
    variables (it must be a non-leaf clique of the pruned clique tree).
    """
    moral = moralize(structure)
    chordal, order = triangulate(moral)
    cliques, edges = build_tree(chordal, order)
    work = _WorkTree(cliques, edges)
    _prune_observable_free(work, structure)
    if root_members is not None:
        want = frozenset(root_members)
        matches = [c for c, m in work.members.items() if m == want]
        if not matches:
            raise ValidationError(f"no clique with members {sorted(want)}")
        root = matches[0]
    else:
        root = select_root(work.members, work.adj)
    assoc = associate_observables(work, root, structure, moral)
    tree = _finalize(work, root, assoc, structure)
    ranker = _GenericRank(structure) if rank_check else None
    for s in tree.separators:
        tree.alpha[s.id] = core_group(tree, structure, s.id, rank_check, ranker)
        tree.beta[s.id] = evidence_set(tree, s.id, beta_cap)
    for sid in tree.nonleaf_separators:
        if not tree.beta[sid]:
            tree.warnings.append(
                f"separator {sid}: empty evidence set; stage-1 regressions reduce to unconditional means"
            )
    if ranker is not None:
        _check_instruments(tree, ranker)
    for w in tree.warnings:
        log.warning(w)
    return tree


def _check_instruments(tree: LatentJunctionTree, ranker: _GenericRank) -> None:
    st = tree.structure
    for sid in tree.nonleaf_separators:
        alpha, beta = list(tree.alpha[sid]), list(tree.beta[sid])
        members = sorted(tree.separator(sid).members)
        if not beta or _card(st, alpha + beta + members) > RANK_ENUMERATION_CAP:
            continue
        if ranker.rank(alpha, beta) < ranker.rank(alpha, members):
            tree.warnings.append(
                f"separator {sid}: evidence set is a weak instrument (generic rank deficit); "
                "the operator is not identified"
            )
