"""Exact Boolean-semantics inference by enumeration on tiny Herbrand bases.

Each ground rule contributes ``w_i`` to the energy when it is violated
(premise true, conclusion false).  Constraint groups become exactly-one
filters and hard rules become inviolable filters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .grounding import GroundFactorGraph

__all__ = ["JointTable", "enumerate_joint", "marginals", "mpe", "binarize", "MAX_FREE_ATOMS"]

MAX_FREE_ATOMS = 20


@dataclass
class JointTable:
    free: np.ndarray  # atom ids enumerated, in column order
    base: np.ndarray  # bits of every atom; free columns overwritten per row
    assignments: np.ndarray  # (2**n_free, n_free) in lexicographic order
    probs: np.ndarray

    def rows(self):
        for a, p in zip(self.assignments, self.probs):
            yield tuple(int(b) for b in a), float(p)

    def full(self, row: int) -> np.ndarray:
        bits = self.base.copy()
        bits[self.free] = self.assignments[row]
        return bits


def binarize(value: float) -> int:
    return int(value >= 0.5)


def _base_bits(graph: GroundFactorGraph, observed: Mapping[int, float] | None) -> tuple[np.ndarray, np.ndarray]:
    vals = graph.fact_values()
    if observed:
        for i, v in observed.items():
            vals[i] = v
    known = ~np.isnan(vals)
    bits = np.zeros(graph.n_atoms, dtype=np.int8)
    bits[known] = (vals[known] >= 0.5).astype(np.int8)
    return bits, np.flatnonzero(~known)


def enumerate_joint(
    graph: GroundFactorGraph,
    weights: np.ndarray,
    observed: Mapping[int, float] | None = None,
    *,
    hard: Sequence[bool] | None = None,
    exclusive: bool = True,
    max_free: int = MAX_FREE_ATOMS,
) -> JointTable:
    """Joint distribution over the unobserved atoms given the observed ones.

    Rows violating an exactly-one constraint group (when ``exclusive``) or a
    hard rule get probability zero.
    """
    bits, free = _base_bits(graph, observed)
    n = len(free)
    if n > max_free:
        raise ValueError(f"{n} free atoms exceed the enumeration limit of {max_free}")
    weights = np.asarray(weights, dtype=float)
    hard_mask = np.zeros(len(weights), dtype=bool) if hard is None else np.asarray(hard, dtype=bool)

    # lexicographic order: first free atom is the most significant bit
    codes = np.arange(2**n, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    assign = ((codes[:, None] >> shifts[None, :]) & 1).astype(np.int8)
    full = np.broadcast_to(bits, (len(codes), graph.n_atoms)).copy()
    full[:, free] = assign

    e = np.zeros(len(codes))
    allowed = np.ones(len(codes), dtype=bool)
    for gr in graph.ground_rules:
        prem = np.ones(len(codes), dtype=bool)
        for i in gr.premise_ids:
            prem &= full[:, i] == 1
        violated = prem & (full[:, gr.conclusion_id] == 0)
        if hard_mask[gr.rule_index]:
            allowed &= ~violated
        else:
            e += weights[gr.rule_index] * violated
    if exclusive:
        for ids, _ in graph.constraint_groups:
            allowed &= full[:, list(ids)].sum(axis=1) == 1
    if not allowed.any():
        raise ValueError("no assignment satisfies the constraints")
    logw = np.where(allowed, -e, -np.inf)
    logw -= logw[allowed].max()
    w = np.exp(logw)
    probs = w / w.sum()
    return JointTable(free, bits, assign, probs)


def marginals(
    graph: GroundFactorGraph,
    weights: np.ndarray,
    observed: Mapping[int, float] | None = None,
    **kw,
) -> np.ndarray:
    """Probability of truth for every atom; observed atoms report their bit."""
    table = enumerate_joint(graph, weights, observed, **kw)
    out = table.base.astype(float)
    out[table.free] = table.probs @ table.assignments
    return out


def mpe(
    graph: GroundFactorGraph,
    weights: np.ndarray,
    observed: Mapping[int, float] | None = None,
    **kw,
) -> np.ndarray:
    """Most probable full assignment; ties go to the lexicographically smallest."""
    table = enumerate_joint(graph, weights, observed, **kw)
    return table.full(int(np.argmax(table.probs)))
