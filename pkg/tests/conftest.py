import logging

import numpy as np
import pytest
from hypothesis import settings

from pbp.model import Structure, random_model

settings.register_profile("pbp", deadline=None, max_examples=60)
settings.load_profile("pbp")


@pytest.fixture(autouse=True)
def _quiet_tree_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="pbp.junction_tree")


def chain4_structure(card: int = 2) -> Structure:
    """X1 <- H1 -> H2 -> H3 -> X3: four cliques, three separators, one internal."""
    return Structure.build(
        [("H1", card, False), ("H2", card, False), ("H3", card, False), ("X1", card, True), ("X3", card, True)],
        [("H1", "H2"), ("H2", "H3"), ("H1", "X1"), ("H3", "X3")],
    )


def chain_ab() -> Structure:
    return Structure.build([("A", 2, True), ("B", 2, True)], [("A", "B")])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def chain4():
    return chain4_structure()


@pytest.fixture
def chain4_model():
    return random_model(chain4_structure(), 7)


def child_alpha(tree, sid):
    return [v for k in tree.child_separators(tree.separator(sid).child) for v in tree.alpha[k.id]]


def conditional(table, n_cond):
    """Rows of ``table`` (conditioning axes first) normalized over the rest."""
    flat = table.reshape(int(np.prod(table.shape[:n_cond])), -1)
    mass = flat.sum(axis=1)
    keep = mass > 0
    return flat[keep] / mass[keep, None]


def eq1_residual(model, tree, params, sid, joint=True):
    """Max violation of the operator relation over complete outside evidence.

    ``joint=True`` checks ``E[theta^{S_1} x ... x theta^{S_K} | Omega]``;
    ``joint=False`` uses the outer product of the per-child expectations.
    """
    outside = list(tree.inside_outside(sid)[1])
    alpha = list(tree.alpha[sid])
    kids = child_alpha(tree, sid)
    lhs = conditional(model.marginal(outside + alpha), len(outside))
    rhs = conditional(model.marginal(outside + kids), len(outside))
    if not joint:
        shapes = [tree.feature_dim(k.id) for k in tree.child_separators(tree.separator(sid).child)]
        rows = []
        for r in rhs:
            t = r.reshape(shapes)
            margs = [t.sum(axis=tuple(j for j in range(len(shapes)) if j != i)) for i in range(len(shapes))]
            out = margs[0]
            for m in margs[1:]:
                out = np.multiply.outer(out, m)
            rows.append(out.ravel())
        rhs = np.array(rows)
    W = params.operators[sid].data.reshape(tree.feature_dim(sid), -1)
    return np.max(np.abs(lhs @ W - rhs))
