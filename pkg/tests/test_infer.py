import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbp.errors import TreeMismatchError, ValidationError, ZeroEvidenceError
from pbp.infer import PBPInference, build_leaf_tensors, evidence_probability, leaf_message, query_posterior
from pbp.junction_tree import build_latent_junction_tree
from pbp.learn import LearnedParams, learn, learn_population
from pbp.model import (
    GraphicalModel,
    Structure,
    ancestral_sample,
    exact_evidence_probability,
    exact_posterior,
    fig2_structure,
    fig4_structure,
    hmm_structure,
    random_latent_structure,
    random_model,
)
from pbp.tensor import Sep, contract, hadamard


def pair_structure():
    # the leaf {H, X1, X2} carries two observables
    return Structure.build(
        [("H", 2, False), ("G", 2, False), ("X1", 2, True), ("X2", 2, True),
         ("Y1", 2, True), ("Y2", 2, True), ("Y3", 2, True)],
        [("H", "X1"), ("H", "X2"), ("X1", "X2"), ("H", "G"), ("G", "Y1"), ("G", "Y2"), ("H", "Y3")],
    )


def engine(model, **tree_kw):
    tree = build_latent_junction_tree(model.structure, **tree_kw)
    return PBPInference(tree, learn_population(tree, model))


def max_posterior_error(model, eng, evidence):
    s = model.structure
    queries = [q for q in s.observables if q not in evidence]
    err = 0.0
    for r in eng.posteriors(evidence, queries):
        err = max(err, np.abs(r.posterior - exact_posterior(model, evidence, r.query)).max())
    return err


class TestLeafTensors:
    def test_singleton_is_identity(self):
        tree = build_latent_junction_tree(hmm_structure(3))
        for lt in build_leaf_tensors(tree).values():
            np.testing.assert_array_equal(lt.phi.data, np.eye(2))
            np.testing.assert_array_equal(lt.phi_pinv.data, np.eye(2))

    def test_two_binary_observables(self):
        s = pair_structure()
        tree = build_latent_junction_tree(s)
        host = tree.host(s.id("X1"))
        lt = build_leaf_tensors(tree)[tree.separator_above(host).id]
        assert lt.phi.shape == (4, 2, 2)
        np.testing.assert_array_equal(lt.phi.data, np.eye(4).reshape(4, 2, 2))

    @pytest.mark.parametrize("factory", [fig4_structure, fig2_structure, pair_structure])
    def test_pinv_is_left_inverse(self, factory):
        tree = build_latent_junction_tree(factory())
        for lt in build_leaf_tensors(tree).values():
            n = lt.phi.shape[0]
            phi = lt.phi.data.reshape(n, -1)
            pinv = lt.phi_pinv.array(list(lt.phi.labels[1:]) + [lt.phi.labels[0]]).reshape(-1, n)
            np.testing.assert_array_equal(phi @ pinv, np.eye(n))
            assert set(np.unique(phi)) == {0.0, 1.0}
            np.testing.assert_array_equal(phi.sum(axis=0), 1.0)


class TestLeafMessages:
    def test_no_evidence_is_all_ones(self):
        tree = build_latent_junction_tree(fig4_structure())
        lts = build_leaf_tensors(tree)
        for c in tree.cliques:
            if c.is_leaf:
                np.testing.assert_array_equal(leaf_message(tree, lts, c.id, {}).data, 1.0)

    def test_observed_singleton_is_one_hot(self):
        s = hmm_structure(3)
        tree = build_latent_junction_tree(s)
        x = s.id("X1")
        msg = leaf_message(tree, build_leaf_tensors(tree), tree.host(x), {x: 1})
        assert msg.labels == (Sep(tree.separator_above(tree.host(x)).id),)
        np.testing.assert_array_equal(msg.data, [0.0, 1.0])

    def test_partial_evidence_by_hand(self):
        s = pair_structure()
        tree = build_latent_junction_tree(s)
        x1 = s.id("X1")
        msg = leaf_message(tree, build_leaf_tensors(tree), tree.host(x1), {x1: 1})
        # X1 fixed to 1, X2 free: entries 2*x1 + x2 for x2 in {0, 1}
        np.testing.assert_array_equal(msg.data, [0, 0, 1, 1])

    def test_rejects_internal_clique(self):
        tree = build_latent_junction_tree(fig4_structure())
        with pytest.raises(ValidationError):
            leaf_message(tree, build_leaf_tensors(tree), tree.root, {})


class TestMessages:
    def test_root_message_without_evidence_is_marginal(self):
        m = random_model(fig4_structure(), 3)
        eng = engine(m)
        tree = eng.tree
        store = eng.messages({})
        for k in tree.children(tree.root):
            sid = tree.separator_above(k).id
            np.testing.assert_allclose(store[(tree.root, k)].data, m.marginal(list(tree.alpha[sid])).ravel(), atol=1e-12)

    def test_all_directed_edges_present(self):
        eng = engine(random_model(fig4_structure(), 3))
        store = eng.messages({})
        for s in eng.tree.separators:
            assert (s.child, s.parent) in store and (s.parent, s.child) in store

    def test_matches_global_contraction(self):
        m = random_model(hmm_structure(5), 4)
        eng = engine(m)
        tree, params = eng.tree, eng.params
        s = m.structure
        evidence = {s.id("X0"): 1, s.id("X2"): 0, s.id("X4"): 1}
        q = s.id("X3")
        hq = tree.host(q)
        lts = eng.leaf_tensors
        # one contraction over the whole network, leaving the query leaf's modes open
        parts = [params.root_tensor, *params.operators.values(), lts[tree.separator_above(hq).id].phi_pinv]
        for c in tree.cliques:
            if c.is_leaf and c.id != hq:
                parts.append(leaf_message(tree, lts, c.id, evidence))
        u = contract(*parts)
        v = contract(lts[tree.separator_above(hq).id].phi, leaf_message(tree, lts, hq, evidence))
        expect = hadamard(u, v)
        got = eng.leaf_joint(hq, eng.messages(evidence))
        assert got.allclose(expect.transpose(got.labels), atol=1e-12)


class TestPopulationExactness:
    @pytest.mark.parametrize("seed", range(6))
    def test_random_models(self, seed):
        m = random_model(random_latent_structure(seed), seed)
        eng = engine(m)
        rng = np.random.default_rng(seed)
        obs = m.structure.observables
        for _ in range(10):
            ev = {v: int(rng.integers(m.structure.card(v))) for v in obs if rng.random() < 0.4}
            assert max_posterior_error(m, eng, ev) <= 1e-8
            assert abs(eng.evidence_probability(ev) - exact_evidence_probability(m, ev)) <= 1e-10

    @pytest.mark.parametrize("factory", [fig4_structure, fig2_structure, pair_structure])
    def test_named_structures(self, factory):
        m = random_model(factory(), 12)
        eng = engine(m)
        s = m.structure
        obs = s.observables
        rng = np.random.default_rng(0)
        for _ in range(15):
            ev = {v: int(rng.integers(s.card(v))) for v in obs if rng.random() < 0.5}
            assert max_posterior_error(m, eng, ev) <= 1e-8

    def test_root_choice_does_not_matter(self):
        m = random_model(hmm_structure(5), 8)
        s = m.structure
        roots = [("H1", "H2"), ("H2", "H3"), ("H0", "H1")]
        engines = [engine(m, root_members=[s.id(a) for a in r]) for r in roots]
        assert len({frozenset(e.tree.cliques[e.tree.root].members) for e in engines}) == 3
        ev = {s.id("X0"): 0, s.id("X3"): 1}
        for q in (s.id("X1"), s.id("X2"), s.id("X4")):
            ref = engines[0].posterior(ev, q).posterior
            for e in engines[1:]:
                np.testing.assert_allclose(e.posterior(ev, q).posterior, ref, atol=1e-10)

    def test_posteriors_match_single_queries(self):
        m = random_model(fig4_structure(), 1)
        eng = engine(m)
        s = m.structure
        ev = {s.id("G"): 1, s.id("E"): 0}
        qs = [s.id(x) for x in "DHIK"]
        for r in eng.posteriors(ev, qs):
            np.testing.assert_array_equal(r.posterior, eng.posterior(ev, r.query).posterior)


class TestQueries:
    def test_observed_query_is_one_hot(self):
        m = random_model(fig4_structure(), 1)
        s = m.structure
        r = engine(m).posterior({s.id("D"): 1}, s.id("D"))
        np.testing.assert_array_equal(r.posterior, [0.0, 1.0])

    def test_latent_query_rejected(self):
        m = random_model(fig4_structure(), 1)
        with pytest.raises(ValidationError, match="observable"):
            engine(m).posterior({}, m.structure.id("A"))

    def test_latent_evidence_rejected(self):
        m = random_model(fig4_structure(), 1)
        s = m.structure
        with pytest.raises(ValidationError):
            engine(m).posterior({s.id("A"): 0}, s.id("D"))

    def test_empty_evidence_probability_is_one(self):
        assert abs(engine(random_model(fig4_structure(), 2)).evidence_probability({}) - 1.0) <= 1e-12

    def test_full_evidence_is_joint_entry(self):
        m = random_model(fig2_structure(), 2)
        obs = m.structure.observables
        eng = engine(m)
        table = m.marginal(list(obs))
        for vals in [(0,) * len(obs), (1, 0, 1, 1, 0)]:
            assert abs(eng.evidence_probability(dict(zip(obs, vals))) - table[vals]) <= 1e-12

    def test_zero_evidence(self):
        s = Structure.build([("H", 2, False), ("X1", 2, True), ("X2", 2, True), ("X3", 2, True)],
                            [("H", "X1"), ("H", "X2"), ("H", "X3")])
        m = GraphicalModel(s, {0: [0.4, 0.6], 1: [[1.0, 0.0], [1.0, 0.0]],
                               2: [[0.8, 0.2], [0.3, 0.7]], 3: [[0.6, 0.4], [0.1, 0.9]]})
        eng = engine(m)
        assert abs(eng.evidence_probability({1: 1})) <= 1e-12
        with pytest.raises(ZeroEvidenceError):
            eng.posterior({1: 1}, 2)

    def test_json_record(self):
        m = random_model(fig4_structure(), 1)
        s = m.structure
        r = engine(m).posterior({s.id("G"): 0}, s.id("D"))
        obj = r.to_json(s, {"tree_hash": "x"})
        assert obj["query"] == "D" and obj["evidence"] == {"G": 0}
        assert abs(sum(obj["posterior"]) - 1) <= 1e-12 and obj["clamped"] is False

    def test_wrappers(self):
        m = random_model(fig4_structure(), 1)
        tree = build_latent_junction_tree(m.structure)
        p = learn_population(tree, m)
        s = m.structure
        ev = {s.id("H"): 1}
        np.testing.assert_allclose(query_posterior(tree, p, ev, s.id("D")).posterior,
                                   exact_posterior(m, ev, s.id("D")), atol=1e-10)
        assert abs(evidence_probability(tree, p, ev) - exact_evidence_probability(m, ev)) <= 1e-12


class TestEngine:
    def test_tree_mismatch(self):
        m = random_model(fig4_structure(), 0)
        p = learn_population(build_latent_junction_tree(m.structure), m)
        with pytest.raises(TreeMismatchError):
            PBPInference(build_latent_junction_tree(m.structure, beta_cap=4), p)

    def test_missing_operator(self):
        m = random_model(fig4_structure(), 0)
        tree = build_latent_junction_tree(m.structure)
        p = learn_population(tree, m)
        broken = LearnedParams({}, p.root_tensor, dict(p.metadata))
        with pytest.raises(ValidationError, match="operator"):
            PBPInference(tree, broken)


_HMM = hmm_structure(5)
_HMM_MODEL = random_model(_HMM, 5)
_HMM_TREE = build_latent_junction_tree(_HMM)
_HMM_ENGINE = PBPInference(_HMM_TREE, learn(_HMM_TREE, ancestral_sample(_HMM_MODEL, 300, 0)))


class TestEmpiricalOutputs:
    @settings(max_examples=80)
    @given(st.lists(st.sampled_from([None, 0, 1]), min_size=5, max_size=5), st.integers(0, 4))
    def test_posterior_on_simplex(self, states, q):
        obs = _HMM.observables
        ev = {v: x for v, x in zip(obs, states) if x is not None}
        try:
            r = _HMM_ENGINE.posterior(ev, obs[q])
        except ZeroEvidenceError:
            return
        assert np.all(r.posterior >= 0)
        assert abs(r.posterior.sum() - 1) <= 1e-12
        assert r.evidence_probability >= 0

    def test_sum_over_complete_evidence_equals_empty_evidence(self):
        # messages are multilinear in the leaf indicators, so summing the raw
        # estimates over every complete assignment gives the no-evidence estimate
        obs = _HMM.observables
        leaf = min(c.id for c in _HMM_TREE.cliques if c.is_leaf)

        def raw(ev):
            return _HMM_ENGINE.leaf_joint(leaf, _HMM_ENGINE.messages(ev)).data.sum()

        total = sum(raw(dict(zip(obs, vals))) for vals in itertools.product(range(2), repeat=len(obs)))
        assert abs(total - raw({})) <= 1e-10

    def test_population_probabilities_sum_to_one(self):
        eng = engine(_HMM_MODEL)
        obs = _HMM.observables
        total = sum(eng.evidence_probability(dict(zip(obs, v))) for v in itertools.product(range(2), repeat=len(obs)))
        assert abs(total - 1) <= 1e-10
