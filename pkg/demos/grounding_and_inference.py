"""
Grounding a rule and reading its MAP state
==========================================

Two boxes are close to each other and one of them is known to be crossing.
A single rule carries the activity along the Close relation.  We ground it,
solve the soft-logic MAP problem, and compare with exact Boolean marginals.
"""
import numpy as np

from concordia.boolean import marginals
from concordia.grounding import FactSet, collect_constants, ground_theory
from concordia.harness.experiment import rule_text
from concordia.logic import parse_theory
from concordia.psl import map_infer

theory = parse_theory("""
predicate: Doing/2 open .
predicate: Close/2 closed .
1.0 :: Doing(B1, A) & Close(B1, B2) -> Doing(B2, A) .
""")
for r in theory.rules:
    print("rule:", rule_text(r))

facts = FactSet([("Close", ("b1", "b2"), 1.0), ("Close", ("b2", "b1"), 1.0),
                 ("Doing", ("b1", "crossing"), 0.8)])
queries = [("Doing", ("b2", "crossing"))]
graph = ground_theory(theory, collect_constants(theory, facts, queries), facts, queries=queries)

# the rule is instantiated once per ordered pair of close boxes
print("ground rules:", len(graph.ground_rules))

weights = theory.initial_weights()
res = map_infer(graph, weights)
b2 = graph.atom_id("Doing", ("b2", "crossing"))
print(f"MAP  Doing(b2, crossing) = {res.values[b2]:.3f}  (converged={res.converged}, {res.iterations} iterations)")

# the Boolean view binarises the soft fact (0.8 -> true) and enumerates
for lam in (0.0, 1.0, 3.0):
    p = marginals(graph, np.array([lam]))[b2]
    print(f"Boolean  P(Doing(b2, crossing)) at weight {lam}: {p:.3f}")
