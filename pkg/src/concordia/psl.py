"""Hinge-loss MRF over a ground factor graph: Lukasiewicz semantics, MAP
inference by projected gradient descent, and MAP-approximate weight learning.

The joint is ``P(x) ∝ exp(-sum_i w_i sum_j (1 - r_ij(x))^p)``: satisfying a
rule lowers the energy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .grounding import GroundFactorGraph, GroundRule

__all__ = [
    "SolverOptions", "MapResult", "TargetPrediction", "rule_truth", "potential",
    "energy", "rule_potentials", "map_infer", "target_distribution",
    "learn_weights_step", "project_simplex", "project_constraints",
    "interpretation", "problem_rows",
]


@dataclass(frozen=True)
class SolverOptions:
    penalty: int = 2
    step_size: float = 1.0  # fraction of the safe step 1/L
    max_iter: int = 5000
    tol: float = 1e-6
    init: float = 0.5
    check_monotone: bool = False
    accelerate: bool = True  # momentum with monotone restarts (penalty 2 only)

    def __post_init__(self):
        if self.penalty not in (1, 2):
            raise ValueError(f"penalty must be 1 or 2, got {self.penalty}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0 < self.step_size <= 1:
            raise ValueError("step_size must be in (0, 1]")
        if not 0 <= self.init <= 1:
            raise ValueError("init must be in [0, 1]")


@dataclass
class MapResult:
    values: np.ndarray  # NaN for atoms outside the inference problem
    free: np.ndarray
    converged: bool
    iterations: int
    residual: float
    energy: float
    energy_trace: list[float] = field(default_factory=list)

    def diagnostics(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual": self.residual,
            "energy": self.energy,
            "energy_trace": list(self.energy_trace),
        }


@dataclass
class TargetPrediction:
    dist: np.ndarray | float
    degenerate: bool
    result: MapResult


def rule_truth(gr: GroundRule, values: Sequence[float]) -> float:
    body = max(0.0, sum(values[i] for i in gr.premise_ids) - (len(gr.premise_ids) - 1))
    return min(1.0, 1.0 - body + values[gr.conclusion_id])


def potential(gr: GroundRule, values: Sequence[float], p: int = 2) -> float:
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    return (1.0 - rule_truth(gr, values)) ** p


def _distances(arr: dict, values: np.ndarray, rows=None) -> np.ndarray:
    prem, mask, n_prem, concl = arr["prem"], arr["prem_mask"], arr["n_prem"], arr["concl"]
    if rows is not None:
        prem, mask, n_prem, concl = prem[rows], mask[rows], n_prem[rows], concl[rows]
    s = np.where(mask, values[np.where(mask, prem, 0)], 0.0).sum(axis=1)
    return np.maximum(0.0, s - (n_prem - 1) - values[concl])


def rule_potentials(graph: GroundFactorGraph, values: np.ndarray, p: int = 2, rows=None) -> np.ndarray:
    """Per-rule sums ``sum_j f_ij`` (length = number of theory rules seen)."""
    arr = graph.arrays()
    n_rules = len(graph.groundings_per_rule)
    if not len(graph.ground_rules):
        return np.zeros(n_rules)
    rule = arr["rule"] if rows is None else arr["rule"][rows]
    d = _distances(arr, np.asarray(values, dtype=float), rows)
    return np.bincount(rule, weights=d**p, minlength=n_rules)


def energy(graph: GroundFactorGraph, weights: np.ndarray, values: np.ndarray, p: int = 2) -> float:
    pots = rule_potentials(graph, values, p)
    return float(np.dot(np.asarray(weights, dtype=float)[: len(pots)], pots))


# ---------------------------------------------------------------------------
# projections


def project_simplex(v: np.ndarray, target: float = 1.0) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto ``{x >= 0, sum x = target}``."""
    v = np.asarray(v, dtype=float)
    flat = v.ndim == 1
    V = v.reshape(1, -1) if flat else v
    z = np.broadcast_to(np.asarray(target, dtype=float), (V.shape[0],))
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - z[:, None]
    ind = np.arange(1, V.shape[1] + 1)
    rho = np.count_nonzero(U - css / ind > 0, axis=1)
    theta = css[np.arange(V.shape[0]), rho - 1] / rho
    out = np.maximum(V - theta[:, None], 0.0)
    return out.ravel() if flat else out


def _project_capped(v: np.ndarray, target: float) -> np.ndarray:
    """Projection onto ``{0 <= x <= 1, sum x = target}`` by bisection on the shift."""
    if target <= 0:
        return np.zeros_like(v)
    if target >= len(v):
        return np.ones_like(v)
    if target <= 1:
        return np.minimum(project_simplex(v, target), 1.0)
    lo, hi = v.min() - 1.0, v.max()
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.clip(v - mid, 0, 1).sum() > target:
            lo = mid
        else:
            hi = mid
    return np.clip(v - 0.5 * (lo + hi), 0, 1)


def project_constraints(values: np.ndarray, groups: Sequence[tuple[Sequence[int], float]]) -> np.ndarray:
    """Project each group onto its simplex, then clip everything to [0, 1]."""
    out = np.array(values, dtype=float)
    for ids, target in groups:
        ids = np.asarray(ids, dtype=int)
        out[ids] = _project_capped(out[ids], target)
    return np.clip(out, 0.0, 1.0)


class _Projector:
    """Projection onto box x constraint groups for the free coordinates."""

    def __init__(self, n_free: int, groups: list[tuple[np.ndarray, float]]):
        self.buckets: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
        self.capped: list[tuple[np.ndarray, float]] = []
        rows: dict[int, tuple[list, list]] = {}
        grouped = np.zeros(n_free, dtype=bool)
        for pos, t in groups:
            if len(pos) == 0:
                continue
            grouped[pos] = True
            if 0 < t <= 1:
                rows.setdefault(len(pos), ([], []))
                rows[len(pos)][0].append(pos)
                rows[len(pos)][1].append(t)
            else:
                self.capped.append((pos, t))
        for size, (idx, ts) in sorted(rows.items()):
            idx = np.array(idx, dtype=int)
            self.buckets.append((idx, np.array(ts, dtype=float)[:, None], np.arange(1, size + 1), np.arange(len(idx))))
        self.loose = np.flatnonzero(~grouped)
        self.all_loose = not grouped.any()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.all_loose:
            return np.clip(x, 0.0, 1.0)
        x = x.copy()
        for idx, ts, ind, rws in self.buckets:
            V = x[idx]
            U = -np.sort(-V, axis=1)
            css = np.cumsum(U, axis=1) - ts
            rho = (U * ind > css).sum(axis=1)
            theta = css[rws, rho - 1] / rho
            x[idx] = np.minimum(np.maximum(V - theta[:, None], 0.0), 1.0)
        for pos, t in self.capped:
            x[pos] = _project_capped(x[pos], t)
        if len(self.loose):
            x[self.loose] = np.clip(x[self.loose], 0.0, 1.0)
        return x


# ---------------------------------------------------------------------------
# MAP inference


def interpretation(graph: GroundFactorGraph, observed: Mapping[int, float] | None = None) -> np.ndarray:
    """Fact values overlaid with ``observed``; NaN marks unassigned atoms."""
    vals = graph.fact_values()
    if observed:
        ids = np.fromiter(observed.keys(), dtype=int, count=len(observed))
        vs = np.fromiter(observed.values(), dtype=float, count=len(observed))
        if np.any((vs < 0) | (vs > 1)):
            raise ValueError("observed values must lie in [0, 1]")
        vals[ids] = vs
    return vals


@dataclass
class _Problem:
    values: np.ndarray
    free: np.ndarray
    rows: np.ndarray
    lam: np.ndarray
    groups: list


def _setup(graph, weights, observed, free) -> _Problem:
    vals = interpretation(graph, observed)
    n = graph.n_atoms
    free_mask = np.zeros(n, dtype=bool)
    if free is None:
        free_mask = np.isnan(vals)
    else:
        free_mask[np.asarray(free, dtype=int)] = True
        if observed and any(free_mask[i] for i in observed):
            raise ValueError("an atom cannot be both observed and free")
        free_mask &= np.isnan(vals) | ~graph.observed_mask()
    unavailable = np.isnan(vals) & ~free_mask
    weights = np.asarray(weights, dtype=float)
    if len(weights) < len(graph.groundings_per_rule):
        raise ValueError("one weight per theory rule is required")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    rows = np.zeros(0, dtype=int)
    lam = np.zeros(0)
    if graph.ground_rules:
        arr = graph.arrays()
        prem, mask, concl = arr["prem"], arr["prem_mask"], arr["concl"]
        safe = np.where(mask, prem, 0)
        touches = (mask & free_mask[safe]).any(axis=1) | free_mask[concl]
        blocked = (mask & unavailable[safe]).any(axis=1) | unavailable[concl]
        lam_all = weights[arr["rule"]]
        rows = np.flatnonzero(touches & ~blocked & (lam_all > 0))
        lam = lam_all[rows]
    free_ids = np.flatnonzero(free_mask)
    pos = np.full(n, -1, dtype=int)
    pos[free_ids] = np.arange(len(free_ids))
    groups = []
    for ids, target in graph.constraint_groups:
        ids = np.asarray(ids, dtype=int)
        f = ids[free_mask[ids]]
        if len(f) == 0:
            continue
        fixed = ids[~free_mask[ids]]
        fixed_vals = vals[fixed]
        if np.isnan(fixed_vals).any():
            continue
        groups.append((pos[f], target - float(fixed_vals.sum())))
    return _Problem(vals, free_ids, rows, lam, groups)


def map_infer(
    graph: GroundFactorGraph,
    weights: np.ndarray,
    observed: Mapping[int, float] | None = None,
    opts: SolverOptions | None = None,
    *,
    free: Sequence[int] | None = None,
    init_values: np.ndarray | None = None,
) -> MapResult:
    """Minimise the weighted hinge energy over the free atoms.

    ``observed`` overlays the graph's facts; ``free`` lists the atoms to
    optimise (default: every atom without a value).  Atoms that are neither
    observed nor free are outside the problem and every ground rule touching
    them is ignored.  ``init_values`` warm-starts the free coordinates.
    """
    opts = opts or SolverOptions()
    prob = _setup(graph, weights, observed, free)
    vals, free_ids = prob.values, prob.free
    project = _Projector(len(free_ids), prob.groups)
    if init_values is not None:
        x = np.asarray(init_values, dtype=float)[free_ids].copy()
        x = np.where(np.isnan(x), opts.init, x)
    else:
        x = np.full(len(free_ids), opts.init)
    x = project(x)

    arr = graph.arrays() if graph.ground_rules else None
    rows = prob.rows
    if len(free_ids) == 0 or len(rows) == 0:
        vals[free_ids] = x
        e = _energy_rows(arr, vals, rows, prob.lam, opts.penalty)
        return MapResult(vals, free_ids, True, 0, 0.0, e, [e])

    prem = arr["prem"][rows]
    mask = arr["prem_mask"][rows]
    n = graph.n_atoms
    safe = np.where(mask, prem, 0)
    padded = np.where(mask, prem, n)  # slot n holds a constant 0
    offset = arr["n_prem"][rows] - 1
    concl = arr["concl"][rows]
    lam = prob.lam
    free_mask = np.zeros(n, dtype=bool)
    free_mask[free_ids] = True
    prem_free = mask & free_mask[safe]
    concl_free = free_mask[concl]
    k_free = prem_free.sum(axis=1) + concl_free
    flat_prem = safe[prem_free]
    row_of_prem = np.nonzero(prem_free)[0]
    p = opts.penalty

    if p == 2:
        contrib = 2.0 * lam * k_free
    else:
        contrib = lam.astype(float)
    lip = _scatter(flat_prem, contrib[row_of_prem], n) + _scatter(concl[concl_free], contrib[concl_free], n)
    scale = float(lip[free_ids].max())
    base_step = opts.step_size / scale

    v = np.append(vals, 0.0)
    v[free_ids] = x

    def dist(v):
        return np.maximum(0.0, v[padded].sum(axis=1) - offset - v[concl])

    def grad(d):
        coef = 2.0 * lam * d if p == 2 else lam * (d > 0)
        g = _scatter(flat_prem, coef[row_of_prem], n) - _scatter(concl[concl_free], coef[concl_free], n)
        return g[free_ids]

    d = dist(v)
    e = float(np.dot(lam, d**p))
    trace = [e]
    best_x, best_e = x, e
    converged = False
    residual = np.inf
    it = 0
    if p == 2 and opts.accelerate:
        # monotone accelerated projected gradient: the reported iterate only
        # moves when the energy does not go up
        y, t, w = x.copy(), 1.0, v.copy()
        for it in range(1, opts.max_iter + 1):
            w[free_ids] = y
            z = project(y - base_step * grad(dist(w)))
            residual = float(np.max(np.abs(z - y)))
            w[free_ids] = z
            ez = float(np.dot(lam, dist(w) ** 2))
            x_prev = x
            if ez <= e:
                x, e = z, ez
            if opts.check_monotone and e > trace[-1]:
                raise AssertionError(f"energy increased at iteration {it}: {trace[-1]} -> {e}")
            trace.append(e)
            if residual < opts.tol:
                converged = True
                break
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = project(x + (t / t_new) * (z - x) + ((t - 1.0) / t_new) * (x - x_prev))
            t = t_new
        v[free_ids] = x
        return MapResult(v[:n], free_ids, converged, it, residual, e, trace)
    for it in range(1, opts.max_iter + 1):
        step = base_step if p == 2 else base_step / np.sqrt(it)
        x_new = project(x - step * grad(d))
        residual = float(np.max(np.abs(x_new - x)))
        x = x_new
        v[free_ids] = x
        d = dist(v)
        e = float(np.dot(lam, d**p))
        if p == 2:
            if opts.check_monotone and e > trace[-1] + 1e-12 * max(1.0, abs(trace[-1])):
                raise AssertionError(f"energy increased at iteration {it}: {trace[-1]} -> {e}")
            best_x, best_e = x, e
        elif e < best_e:
            best_x, best_e = x, e
        trace.append(best_e)
        if residual < opts.tol:
            converged = True
            break
    v[free_ids] = best_x
    return MapResult(v[:n], free_ids, converged, it, residual, best_e, trace)


def _scatter(idx: np.ndarray, w: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(idx, weights=w, minlength=n).astype(float, copy=False)


def _energy_rows(arr, values, rows, lam, p) -> float:
    if arr is None or len(rows) == 0:
        return 0.0
    d = _distances(arr, values, rows)
    return float(np.dot(lam, d**p))


def target_distribution(
    graph: GroundFactorGraph,
    weights: np.ndarray,
    observed: Mapping[int, float] | None,
    targets: Sequence[int],
    opts: SolverOptions | None = None,
    *,
    regression: bool = False,
    free: Sequence[int] | None = None,
    init_values: np.ndarray | None = None,
    result: MapResult | None = None,
) -> TargetPrediction:
    """Read the logic component's prediction off the MAP state.

    Classification renormalises the target atoms' soft values; regression
    returns the single target atom's value.
    """
    targets = np.asarray(targets, dtype=int)
    if regression:
        if len(targets) != 1:
            raise ValueError("regression needs exactly one target atom")
    elif len(targets) < 2:
        raise ValueError("classification needs at least two target atoms")
    if result is None:
        result = map_infer(graph, weights, observed, opts, free=free, init_values=init_values)
    vals = result.values[targets]
    if np.isnan(vals).any():
        raise ValueError("target atoms are outside the inference problem")
    if regression:
        return TargetPrediction(float(vals[0]), False, result)
    total = vals.sum()
    if total <= 0:
        return TargetPrediction(np.full(len(targets), 1.0 / len(targets)), True, result)
    return TargetPrediction(vals / total, False, result)


def learn_weights_step(
    graph: GroundFactorGraph,
    truth: np.ndarray | Mapping[int, float],
    observed: Mapping[int, float] | None,
    weights: np.ndarray,
    lr: float,
    opts: SolverOptions | None = None,
    *,
    free: Sequence[int] | None = None,
    learnable: np.ndarray | None = None,
    tie_groups: np.ndarray | None = None,
    map_result: MapResult | None = None,
) -> np.ndarray:
    """One projected gradient-ascent step on the MAP-approximate log-likelihood.

    ``g_i = sum_j f_ij(MAP(observed)) - sum_j f_ij(truth)`` and
    ``w_i <- max(0, w_i + lr * g_i)``.  ``truth`` must assign every atom of
    the inference problem (an array, or a mapping overlaid on the facts).
    """
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    opts = opts or SolverOptions()
    weights = np.asarray(weights, dtype=float)
    if map_result is None:
        map_result = map_infer(graph, weights, observed, opts, free=free)
    if isinstance(truth, Mapping):
        truth_vals = interpretation(graph, {**(observed or {}), **truth})
    else:
        truth_vals = np.asarray(truth, dtype=float)
    missing = np.isnan(truth_vals[map_result.free])
    if missing.any():
        raise ValueError(f"truth assignment leaves {int(missing.sum())} free atoms unassigned")
    rows = problem_rows(graph, map_result)
    g = rule_potentials(graph, map_result.values, opts.penalty, rows) - rule_potentials(graph, truth_vals, opts.penalty, rows)
    g = np.pad(g, (0, len(weights) - len(g)))
    if tie_groups is not None:
        tie_groups = np.asarray(tie_groups, dtype=int)
        g = np.bincount(tie_groups, weights=g)[tie_groups]
    step = lr * g
    if learnable is not None:
        step = np.where(learnable, step, 0.0)
    return np.where(step != 0, np.maximum(0.0, weights + step), weights)


def problem_rows(graph: GroundFactorGraph, result: MapResult) -> np.ndarray:
    """Ground rules touching a free atom with every atom inside the problem."""
    if not graph.ground_rules:
        return np.zeros(0, dtype=int)
    arr = graph.arrays()
    mask = arr["prem_mask"]
    safe = np.where(mask, arr["prem"], 0)
    free_mask = np.zeros(graph.n_atoms, dtype=bool)
    free_mask[result.free] = True
    known = ~np.isnan(result.values)
    touches = (mask & free_mask[safe]).any(axis=1) | free_mask[arr["concl"]]
    inside = (~mask | known[safe]).all(axis=1) & known[arr["concl"]]
    return np.flatnonzero(touches & inside)
