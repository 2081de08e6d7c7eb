"""Independent reference computations used to derive and check test values.

Nothing here imports the package's numerical code: every function is a
straight-line re-derivation from the definitions (plain loops, itertools,
or a brute-force grid), so agreement with the package is evidence rather
than tautology.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


# --------------------------------------------------------------- semantics

def luk_truth(premise: list[float], conclusion: float) -> float:
    body = max(0.0, sum(premise) - (len(premise) - 1))
    return min(1.0, 1.0 - body + conclusion)


def hinge(premise: list[float], conclusion: float, p: int) -> float:
    return (1.0 - luk_truth(premise, conclusion)) ** p


def bool_violated(premise: list[int], conclusion: int) -> int:
    return int(all(premise) and not conclusion)


# ---------------------------------------------------------------- grounds

def rules_as_lists(graph) -> list[tuple[int, list[int], int]]:
    """(rule_index, premise ids, conclusion id) read off the public fields."""
    return [(gr.rule_index, list(gr.premise_ids), gr.conclusion_id) for gr in graph.ground_rules]


def energy_loop(graph, weights, values, p: int) -> float:
    total = 0.0
    for r, prem, concl in rules_as_lists(graph):
        total += weights[r] * hinge([values[i] for i in prem], values[concl], p)
    return total


def grid_minimum(graph, weights, base: np.ndarray, free: list[int], p: int, step: float = 0.01) -> tuple[float, np.ndarray]:
    """Minimum energy over a regular grid on the free coordinates.

    Each free atom gets its own broadcast axis, so the grid is never
    materialised per atom.  Constraint groups are honoured exactly by keeping
    only grid points whose group sums hit the target (integer arithmetic on
    grid indices).
    """
    k = int(round(1 / step))
    nf = len(free)
    pos = {a: j for j, a in enumerate(free)}

    def axis(j, arr):
        shape = [1] * nf
        shape[j] = k + 1
        return arr.reshape(shape)

    idx = np.arange(k + 1)
    value = {a: axis(pos[a], idx / k) for a in free}
    e = np.zeros([k + 1] * nf)
    for r, prem, concl in rules_as_lists(graph):
        s = sum((value.get(i, base[i]) for i in prem), 0.0)
        body = np.maximum(0.0, s - (len(prem) - 1)) if prem else 1.0
        dist = np.maximum(0.0, body - value.get(concl, base[concl]))
        e = e + weights[r] * dist ** p
    for ids, target in graph.constraint_groups:
        cols = [i for i in ids if i in pos]
        if not cols:
            continue
        need = (target - sum(base[i] for i in ids if i not in pos)) * k
        tot = sum((axis(pos[i], idx) for i in cols), 0)
        e = np.where(np.abs(tot - need) < 1e-6, e, np.inf)
    j = np.unravel_index(int(np.argmin(e)), e.shape) if nf else ()
    vals = np.array(base, dtype=float)
    for a, t in zip(free, j):
        vals[a] = t / k
    return float(e[j] if nf else e), vals


def substitution_count(domains: dict[str, list[str]], variables: list[str]) -> int:
    return math.prod(len(domains[v]) for v in variables)


# ---------------------------------------------------------------- boolean

def boolean_joint(graph, weights, free: list[int], base_bits: list[int], exclusive_groups=()) -> dict[tuple, float]:
    """Exact Boolean joint by enumerating every assignment of ``free``."""
    table = {}
    for bits in itertools.product((0, 1), repeat=len(free)):
        x = list(base_bits)
        for a, b in zip(free, bits):
            x[a] = b
        if any(sum(x[i] for i in g) != 1 for g in exclusive_groups):
            continue
        cost = sum(weights[r] * bool_violated([x[i] for i in prem], x[concl])
                   for r, prem, concl in rules_as_lists(graph))
        table[bits] = math.exp(-cost)
    z = sum(table.values())
    return {k: v / z for k, v in table.items()}


# -------------------------------------------------------------- simplexes

def simplex_bisect(v: list[float], target: float = 1.0) -> list[float]:
    """Projection onto the simplex via bisection on the threshold."""
    lo, hi = min(v) - target, max(v)
    for _ in range(200):
        mid = (lo + hi) / 2
        if sum(max(x - mid, 0.0) for x in v) > target:
            lo = mid
        else:
            hi = mid
    t = (lo + hi) / 2
    return [max(x - t, 0.0) for x in v]


# ----------------------------------------------------------------- neural

def mlp_forward(weights, biases, x, output: str, heads=()):
    """Straight-line forward pass with Python floats."""
    a = [float(v) for v in x]
    n = len(weights)
    for k in range(n):
        W, b = weights[k], biases[k]
        z = [sum(a[i] * W[i][j] for i in range(len(a))) + b[j] for j in range(len(b))]
        a = [math.tanh(v) for v in z] if k < n - 1 else z
    if output == "sigmoid":
        return 1.0 / (1.0 + math.exp(-a[0]))
    out, start = [], 0
    for h in (heads or (len(a),)):
        part = a[start:start + h]
        m = max(part)
        e = [math.exp(v - m) for v in part]
        s = sum(e)
        out.append([v / s for v in e])
        start += h
    return out[0] if len(out) == 1 else out


def kl(p: list[float], q: list[float], eps: float = 1e-6) -> float:
    n = len(p)
    ps = [(1 - eps) * x + eps / n for x in p]
    qs = [(1 - eps) * x + eps / n for x in q]
    return sum(a * math.log(a / b) for a, b in zip(ps, qs))


def central_diff(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.empty_like(theta)
    for i in range(len(theta)):
        t = theta.copy()
        t[i] += h
        up = f(t)
        t[i] -= 2 * h
        g[i] = (up - f(t)) / (2 * h)
    return g


# ---------------------------------------------------------------- scoring

def plain_accuracy(pred, true) -> float:
    return sum(int(a == b) for a, b in zip(pred, true)) / len(true)


def plain_rmse(pred, true) -> float:
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(pred, true)) / len(true))
