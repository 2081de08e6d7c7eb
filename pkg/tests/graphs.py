"""Small theories and random ground graphs shared by several test modules."""
from __future__ import annotations

import numpy as np

from concordia.grounding import FactSet, collect_constants, ground_theory
from concordia.logic import parse_theory

TWO_BOX_RULES = """
predicate: Doing/2 open .
predicate: Close/2 closed .
1.0 :: Doing(B1, A) & Close(B1, B2) -> Doing(B2, A) .
"""


def two_boxes(prune: bool = False):
    """Two boxes, one activity, close in both directions."""
    t = parse_theory(TWO_BOX_RULES)
    facts = FactSet([("Close", ("b1", "b2"), 1.0), ("Close", ("b2", "b1"), 1.0)])
    queries = [("Doing", ("b1", "crossing")), ("Doing", ("b2", "crossing"))]
    dm = collect_constants(t, facts, queries)
    return t, ground_theory(t, dm, facts, queries=queries, prune=prune)


def ground_text(text: str, facts=(), queries=(), prune: bool = False):
    t = parse_theory(text)
    fs = FactSet(facts)
    return t, ground_theory(t, collect_constants(t, fs, queries), fs, queries=queries, prune=prune)


def random_graph(rng: np.random.Generator, n_free: int = 3, n_obs: int = 3, n_rules: int = 5,
                 constraint: bool = False):
    """Propositional-style graph over atoms F<i>(a) (free) and O<i>(a) (facts).

    With ``constraint`` the free atoms are Y(a, c<i>) under Y(X, +C) = 1.
    Returns ``(theory, graph, weights)``.
    """
    free = [f"Y(a, c{i})" for i in range(n_free)] if constraint else [f"F{i}(a)" for i in range(n_free)]
    obs = [f"O{i}(a)" for i in range(n_obs)]
    pool = free + obs
    lines = [f"predicate: O{i}/1 closed ." for i in range(n_obs)]
    lines += ["predicate: Y/2 open ."] if constraint else [f"predicate: F{i}/1 open ." for i in range(n_free)]
    for _ in range(n_rules):
        k = int(rng.integers(0, 3))
        concl = free[int(rng.integers(len(free)))] if rng.random() < 0.8 else pool[int(rng.integers(len(pool)))]
        choices = [a for a in pool if a != concl]
        prem = [choices[int(j)] for j in rng.choice(len(choices), size=min(k, len(choices)), replace=False)]
        w = round(float(rng.uniform(0.1, 3.0)), 3)
        body = " & ".join(prem)
        lines.append(f"{w} :: {body + ' ' if body else ''}-> {concl} .")
    if constraint:
        lines.append("constraint: Y(X, +C) = 1 .")
    # every free atom appears at least once so the graph has all of them
    for a in free:
        lines.append(f"0.0 :: O0(a) -> {a} .")
    facts = [(f"O{i}", ("a",), round(float(rng.uniform(0, 1)), 3)) for i in range(n_obs)]
    t, g = ground_text("\n".join(lines), facts)
    return t, g, t.initial_weights()
