import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from concordia.boolean import enumerate_joint, marginals, mpe

from graphs import ground_text, random_graph
from oracles import boolean_joint

AB = "predicate: A/1 open .\npredicate: B/1 open .\n"


def _ab(weight):
    _, g = ground_text(AB + f"{weight!r} :: A(x) -> B(x) .")
    return g, g.atom_id("A", ("x",)), g.atom_id("B", ("x",))


def _violating_mass(table, a, b):
    col = {int(i): j for j, i in enumerate(table.free)}
    return sum(p for bits, p in table.rows() if bits[col[a]] == 1 and bits[col[b]] == 0)


def test_empty_theory_is_uniform():
    g, _, _ = _ab(1.0)
    t = enumerate_joint(g, np.zeros(1))
    assert len(t.probs) == 4 and np.allclose(t.probs, 0.25)
    assert np.allclose(marginals(g, np.zeros(1)), 0.5)


def test_violating_mass_shrinks_with_weight():
    masses = []
    for lam in (0.0, 1.0, 10.0):
        g, a, b = _ab(1.0)
        masses.append(_violating_mass(enumerate_joint(g, np.array([lam])), a, b))
    assert masses[0] == pytest.approx(0.25)
    assert masses[0] > masses[1] > masses[2] > 0


def test_ln2_weight_gives_one_seventh():
    g, a, b = _ab(1.0)
    t = enumerate_joint(g, np.array([math.log(2)]))
    assert _violating_mass(t, a, b) == pytest.approx(1 / 7, abs=1e-12)
    oracle = boolean_joint(g, [math.log(2)], [int(i) for i in t.free], [0] * g.n_atoms)
    assert oracle[(1, 0)] == pytest.approx(1 / 7, abs=1e-12)


def test_mpe_breaks_ties_lexicographically():
    g, a, b = _ab(1.0)
    assert list(mpe(g, np.zeros(1))) == [0, 0]
    assert list(mpe(g, np.array([math.log(2)]))) == [0, 0]


def test_mpe_follows_observed_premise():
    g, a, b = _ab(1.0)
    bits = mpe(g, np.ones(1), {a: 1.0})
    assert bits[a] == 1 and bits[b] == 1


def test_observed_soft_values_are_binarised():
    g, a, b = _ab(1.0)
    assert marginals(g, np.ones(1), {a: 0.7})[a] == 1.0
    assert marginals(g, np.ones(1), {a: 0.3})[a] == 0.0


def _exclusive(rule_weight=None):
    text = "predicate: Obj/1 closed .\npredicate: Cls/2 open .\n"
    text += "0 :: Obj(o) -> Cls(o, c1) .\n0 :: Obj(o) -> Cls(o, c2) .\nconstraint: Cls(O, +C) = 1 .\n"
    if rule_weight is not None:
        text += f"{rule_weight} :: -> Cls(o, c1) .\n"
    t, g = ground_text(text, [("Obj", ("o",), 1.0)])
    return t, g, g.atom_id("Cls", ("o", "c1")), g.atom_id("Cls", ("o", "c2"))


def test_exclusive_targets_are_symmetric():
    t, g, c1, c2 = _exclusive()
    m = marginals(g, t.initial_weights())
    assert m[c1] == pytest.approx(0.5) and m[c2] == pytest.approx(0.5)


def test_exclusive_with_prior_rule():
    t, g, c1, c2 = _exclusive(1.0)
    m = marginals(g, t.initial_weights())
    assert m[c1] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    assert m[c1] == pytest.approx(0.731, abs=1e-3)
    assert m[c1] + m[c2] == pytest.approx(1.0, abs=1e-12)


def test_hard_rules_filter_assignments():
    g, a, b = _ab(1.0)
    t = enumerate_joint(g, np.ones(1), hard=[True])
    assert _violating_mass(t, a, b) == 0.0
    assert np.allclose(sorted(t.probs), [0, 1 / 3, 1 / 3, 1 / 3])


def test_too_many_free_atoms_rejected():
    text = "predicate: P/1 open .\npredicate: Q/1 open .\n1 :: P(X) -> Q(X) ."
    _, g = ground_text(text, queries=[("P", (f"c{i}",)) for i in range(11)])
    with pytest.raises(ValueError, match="limit"):
        enumerate_joint(g, np.ones(1), max_free=20)


# ----------------------------------------------------------------- property

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.booleans(), st.integers(1, 6))
def test_joint_matches_brute_force(seed, constraint, n_free):
    _, g, w = random_graph(np.random.default_rng(seed), n_free=n_free, n_rules=6, constraint=constraint)
    t = enumerate_joint(g, w)
    groups = [list(ids) for ids, _ in g.constraint_groups]
    oracle = boolean_joint(g, w, [int(i) for i in t.free], list(t.base), groups)
    got = {bits: p for bits, p in t.rows() if p > 0}
    assert set(got) == set(oracle)
    for k, p in oracle.items():
        assert got[k] == pytest.approx(p, rel=1e-9, abs=1e-15)
    assert t.probs.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_mpe_has_maximal_probability(seed, constraint):
    _, g, w = random_graph(np.random.default_rng(seed), n_free=4, n_rules=6, constraint=constraint)
    t = enumerate_joint(g, w)
    bits = mpe(g, w)
    row = [j for j, a in enumerate(t.assignments) if np.array_equal(a, bits[t.free])][0]
    assert t.probs[row] == t.probs.max()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_zero_weights_are_uniform_over_feasible(seed, constraint):
    _, g, w = random_graph(np.random.default_rng(seed), n_free=3, constraint=constraint)
    t = enumerate_joint(g, np.zeros_like(w))
    nz = t.probs[t.probs > 0]
    assert np.allclose(nz, 1 / len(nz))
    m = marginals(g, w)
    assert np.all((m >= 0) & (m <= 1))
