"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import itertools
import time

import numpy as np
import pytest

from conftest import chain4_structure, eq1_residual
from pbp.baselines import EMConfig, em_learn, em_step
from pbp.experiment import DEFAULT_SIZES, ExperimentSpec, run_experiment
from pbp.infer import PBPInference, build_leaf_tensors
from pbp.junction_tree import build_latent_junction_tree, clique_tree, running_intersection_holds
from pbp.learn import learn_population
from pbp.model import (
    Structure,
    ancestral_sample,
    fig2_structure,
    fig4_structure,
    hmm_structure,
    random_latent_structure,
    random_model,
)
from pbp.tensor import NamedTensor, Sep, Var, contract, pinv

# mean avg-KL of the fig4 query D | G,H,E over data seeds 0-4, model seed 0,
# default ridge; produced by the harness and frozen here as regression values
FIG4_SWEEP = {
    1024: 0.06744988043981624,
    4096: 0.016955081626445535,
    16384: 0.005604346200901479,
    65536: 0.00011049452962847277,
    131072: 5.5332698461874246e-05,
}


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


def observable_posteriors(model):
    """Exact ``P[q | e]`` for every evidence map over the observables, by enumeration."""
    s = model.structure
    obs = list(s.observables)
    table = model.marginal(obs)
    out = {}
    for states in itertools.product(*[[None, *range(s.card(v))] for v in obs]):
        ev = {v: x for v, x in zip(obs, states) if x is not None}
        idx = tuple(slice(None) if x is None else x for x in states)
        sub = table[idx]
        free = [v for v, x in zip(obs, states) if x is None]
        mass = sub.sum()
        if mass <= 0:
            continue
        for j, q in enumerate(free):
            axes = tuple(k for k in range(len(free)) if k != j)
            out[(tuple(sorted(ev.items())), q)] = sub.sum(axis=axes) / mass
    return out


def test_criterion_1_population_consistency(report):
    start = time.perf_counter()
    worst, pairs = 0.0, 0
    for seed in range(5):
        s = random_latent_structure(100 + seed, n_latent=4, n_observable=5, cards=(2, 3))
        assert len(s) <= 10 and set(s.cardinalities) <= {2, 3}
        m = random_model(s, seed)
        tree = build_latent_junction_tree(s)
        eng = PBPInference(tree, learn_population(tree, m))
        exact = observable_posteriors(m)
        by_ev = {}
        for ev, q in exact:
            by_ev.setdefault(ev, []).append(q)
        for ev, qs in by_ev.items():
            for r in eng.posteriors(dict(ev), qs):
                worst = max(worst, np.abs(r.posterior - exact[(ev, r.query)]).max())
                pairs += 1
    elapsed = time.perf_counter() - start
    ok = report(1, worst <= 1e-6 and elapsed <= 120,
                f"{pairs} pairs, max abs error {worst:.2e} <= 1e-6, {elapsed:.1f}s <= 120s")
    assert ok


def test_criterion_2_finite_sample_convergence(report):
    start = time.perf_counter()
    spec = ExperimentSpec(query="D", evidence=["G", "H", "E"], preset="fig4", sizes=list(DEFAULT_SIZES),
                          seeds=list(range(5)), algorithms=["pbp"])
    res = run_experiment(spec)
    curve = dict(zip(spec.sizes, res.panels()["quality"]["pbp"]["avg_kl"]))
    elapsed = time.perf_counter() - start
    lo, hi = curve[2**10], curve[2**17]
    ok = hi <= 0.02 and hi <= lo / 5 and elapsed <= 600
    report(2, ok, f"avg KL {lo:.3e} at N=2^10, {hi:.3e} at N=2^17 (<= 0.02 and <= 1/5), {elapsed:.1f}s")
    assert ok
    for n, v in FIG4_SWEEP.items():
        assert curve[n] == pytest.approx(v, rel=1e-6)


def test_criterion_3_speed_versus_em(report):
    start = time.perf_counter()
    spec = ExperimentSpec(query="D", evidence=["G", "H", "E"], preset="fig4", sizes=[10**4], seeds=[0],
                          algorithms=["pbp", "em"], em_restarts=10, em_tol=1e-6)
    rows = {r["algorithm"]: r for r in run_experiment(spec).rows}
    elapsed = time.perf_counter() - start
    pbp, em = rows["pbp"], rows["em"]
    faster = pbp["train_seconds"] < em["train_seconds"]
    close = pbp["avg_kl"] <= 2 * em["avg_kl"]
    report(3, faster and close and elapsed <= 900,
           f"train {pbp['train_seconds']:.3f}s vs EM {em['train_seconds']:.1f}s ({'ok' if faster else 'slower'}); "
           f"avg KL {pbp['avg_kl']:.3e} vs 2 x EM {2 * em['avg_kl']:.3e} ({'ok' if close else 'exceeds'}); "
           f"{elapsed:.1f}s")
    assert faster, "PBP training is not faster than EM"
    assert close, "PBP average KL exceeds twice the EM average KL"


def test_criterion_4_operator_identity(report):
    m = random_model(chain4_structure(), 7)
    tree = build_latent_junction_tree(m.structure)
    assert len(tree.separators) == 3
    params = learn_population(tree, m)
    worst = max(eq1_residual(m, tree, params, sid) for sid in tree.nonleaf_separators)
    ok = report(4, worst <= 1e-8, f"max residual {worst:.2e} <= 1e-8 over every outside assignment")
    assert ok


def _loop_contract(a, b):
    # a: (i, j, k), b: (k, j, l) -> (i, l)
    out = np.zeros((a.shape[0], b.shape[2]))
    for i in range(a.shape[0]):
        for l in range(b.shape[2]):
            for j in range(a.shape[1]):
                for k in range(a.shape[2]):
                    out[i, l] += a[i, j, k] * b[k, j, l]
    return out


def test_criterion_5_structural_invariants(report):
    start = time.perf_counter()
    rip = 0
    for seed in range(100):
        s = random_latent_structure(seed, n_latent=2 + seed % 4, n_observable=3 + seed % 5)
        cliques, edges = clique_tree(s)
        tree = build_latent_junction_tree(s)
        members = {c.id: frozenset(c.members) for c in tree.cliques}
        tree_edges = [(x.parent, x.child) for x in tree.separators]
        rip += running_intersection_holds(cliques, edges) and running_intersection_holds(members, tree_edges)
    rng = np.random.default_rng(5)
    tensor_err = 0.0
    for _ in range(20):
        i, j, k, l = rng.integers(1, 5, 4)
        a, b = rng.normal(size=(i, j, k)), rng.normal(size=(k, j, l))
        got = contract(NamedTensor([Var(0), Var(1), Var(2)], a), NamedTensor([Var(2), Var(1), Var(3)], b))
        tensor_err = max(tensor_err, np.abs(got.data - _loop_contract(a, b)).max())
        outer = contract(NamedTensor([Var(0), Var(1), Var(2)], a), NamedTensor([Sep(0)], b[0, 0]))
        tensor_err = max(tensor_err, np.abs(outer.data - a[..., None] * b[0, 0][None, None, None]).max())
    penrose = 0.0
    for _ in range(20):
        r, c = rng.integers(1, 40, 2)
        rank = int(rng.integers(1, min(r, c) + 1))
        A = rng.normal(size=(r, rank)) @ rng.normal(size=(rank, c))
        P = pinv(NamedTensor([Sep(0), Sep(1)], A), [Sep(0)]).array([Sep(1), Sep(0)])
        penrose = max(penrose, np.abs(A @ P @ A - A).max(), np.abs(P @ A @ P - P).max(),
                      np.abs((A @ P).T - A @ P).max(), np.abs((P @ A).T - P @ A).max())
    elapsed = time.perf_counter() - start
    ok = rip == 100 and tensor_err <= 1e-12 and penrose <= 1e-9 and elapsed < 60
    report(5, ok, f"RIP {rip}/100, tensor error {tensor_err:.1e} <= 1e-12, "
                  f"Penrose {penrose:.1e} <= 1e-9, {elapsed:.1f}s < 60s")
    assert ok


def test_criterion_6_em_sanity(report):
    worst_drop = 0.0
    for factory in (fig4_structure, lambda: hmm_structure(5)):
        m = random_model(factory(), 1)
        fit = em_learn(m.structure, ancestral_sample(m, 3000, 2), EMConfig(restarts=10))
        for trace in fit.traces:
            t = np.array(trace)
            worst_drop = max(worst_drop, float(np.max((t[:-1] - t[1:]) / np.abs(t[:-1]), initial=0.0)))
    s = Structure.build([("A", 3, True), ("B", 2, True), ("C", 3, True), ("D", 2, True)],
                        [("A", "B"), ("A", "C"), ("B", "C"), ("C", "D")])
    data = ancestral_sample(random_model(s, 0), 5000, 0)
    new, _ = em_step(random_model(s, 1), data)
    exact = True
    for v in range(len(s)):
        fam = list(s.family(v))
        counts = np.zeros([s.card(x) for x in fam])
        np.add.at(counts, tuple(data.select(fam).T), 1)
        exact &= np.array_equal(new.cpts[v], counts / counts.sum(axis=-1, keepdims=True))
    ok = report(6, worst_drop <= 1e-9 and exact,
                f"largest relative LL decrease {worst_drop:.1e} <= 1e-9; fully observed step equals counts: {exact}")
    assert ok


def test_criterion_7_evidence_probability_normalization(report):
    worst = 0.0
    models = [random_model(fig4_structure(), 0), random_model(fig2_structure(3), 1),
              random_model(hmm_structure(6), 2)]
    models += [random_model(random_latent_structure(s, cards=(2, 3)), s) for s in range(3)]
    for m in models:
        s = m.structure
        assert int(np.prod([s.card(v) for v in s.observables])) <= 2**12
        tree = build_latent_junction_tree(s)
        eng = PBPInference(tree, learn_population(tree, m))
        obs = s.observables
        total = sum(eng.evidence_probability(dict(zip(obs, vals)))
                    for vals in itertools.product(*[range(s.card(v)) for v in obs]))
        worst = max(worst, abs(total - 1))
    ok = report(7, worst <= 1e-6, f"{len(models)} models, max |sum - 1| = {worst:.1e} <= 1e-6")
    assert ok


def test_criterion_8_identity_leaf_tensors(report):
    structures = [fig4_structure(), fig2_structure(3), hmm_structure(4, 3, 3)]
    structures += [random_latent_structure(s, cards=(2, 3)) for s in range(5)]
    one_hot = identity = True
    count = 0
    for s in structures:
        tree = build_latent_junction_tree(s)
        for sid, lt in build_leaf_tensors(tree).items():
            alpha = tree.alpha[sid]
            n = lt.phi.shape[0]
            for idx in np.ndindex(*lt.phi.shape[1:]):
                expect = np.zeros(n)
                expect[np.ravel_multi_index(idx, lt.phi.shape[1:])] = 1.0
                one_hot &= np.array_equal(lt.phi.data[(slice(None),) + idx], expect)
            # matricize as (feature x assignment) and (assignment x feature)
            phi = lt.phi.data.reshape(n, -1)
            inv = lt.phi_pinv.array([Var(a) for a in alpha] + [Sep(sid)]).reshape(-1, n)
            identity &= np.array_equal(inv @ phi, np.eye(n)) and np.array_equal(phi @ inv, np.eye(n))
            count += 1
    ok = report(8, one_hot and identity, f"{count} leaf tensors; one-hot reshaping: {one_hot}; pinv x phi = I: {identity}")
    assert ok
