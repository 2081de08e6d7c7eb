"""Herbrand base construction and rule instantiation."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .logic import Atom, Rule, Theory

__all__ = [
    "FactSet", "GroundAtom", "GroundRule", "GroundFactorGraph", "DomainMap",
    "AtomTable", "GroundingError", "collect_constants", "ground_theory",
    "apply_substitution", "ground_atom", "read_facts", "write_facts",
    "DEFAULT_GROUNDING_CAP",
]

DEFAULT_GROUNDING_CAP = 10**7

Key = tuple[str, tuple[str, ...]]


class GroundingError(ValueError):
    pass


class FactSet:
    """Observed soft truth values keyed by ``(predicate, constants)``."""

    def __init__(self, entries: Iterable[tuple[str, Sequence[str], float]] = ()):
        self._values: dict[Key, float] = {}
        for pred, consts, value in entries:
            self.add(pred, consts, value)

    def add(self, predicate: str, constants: Sequence[str], value: float = 1.0) -> None:
        key = (predicate, tuple(constants))
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"fact {_key_str(key)} has value {value} outside [0, 1]")
        if key in self._values:
            raise ValueError(f"duplicate fact {_key_str(key)}")
        self._values[key] = value

    def get(self, key: Key, default: float | None = None) -> float | None:
        return self._values.get(key, default)

    def __contains__(self, key: object) -> bool:
        return key in self._values

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self):
        for (pred, consts), v in self._values.items():
            yield pred, consts, v

    def keys(self):
        return self._values.keys()

    def items(self):
        return self._values.items()

    def union(self, *others: "FactSet") -> "FactSet":
        out = FactSet(self)
        for o in others:
            for pred, consts, v in o:
                out.add(pred, consts, v)
        return out

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FactSet) and self._values == other._values

    def __repr__(self) -> str:
        return f"FactSet({len(self)} facts)"


def _key_str(key: Key) -> str:
    return f"{key[0]}({', '.join(key[1])})"


def read_facts(path: str | Path, arities: Mapping[str, int] | None = None) -> FactSet:
    """Read ``predicate<TAB>c1<TAB>...[<TAB>value]`` lines.

    Without ``arities`` a trailing field that parses as a number is taken as
    the value; with them the predicate's arity decides.
    """
    facts = FactSet()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            try:
                pred, consts, value = parse_fact_fields(line.split("\t"), arities)
                facts.add(pred, consts, value)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return facts


def parse_fact_fields(fields: list[str], arities: Mapping[str, int] | None = None) -> tuple[str, tuple[str, ...], float]:
    pred, rest = fields[0], fields[1:]
    if not pred:
        raise ValueError("empty predicate name")
    if arities is not None and pred in arities:
        n = arities[pred]
        if len(rest) not in (n, n + 1):
            raise ValueError(f"{pred} expects {n} constants, got {len(rest)} fields")
        value = float(rest[n]) if len(rest) == n + 1 else 1.0
        return pred, tuple(rest[:n]), value
    if rest:
        try:
            return pred, tuple(rest[:-1]), float(rest[-1])
        except ValueError:
            pass
    return pred, tuple(rest), 1.0


def write_facts(facts: FactSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pred, consts, v in facts:
            fh.write("\t".join((pred, *consts, repr(v))) + "\n")


@dataclass(frozen=True)
class GroundAtom:
    id: int
    predicate: str
    constants: tuple[str, ...]
    observed: bool
    value: float | None = None  # fact value when observed

    @property
    def key(self) -> Key:
        return self.predicate, self.constants

    def __str__(self) -> str:
        return _key_str(self.key)


@dataclass(frozen=True)
class GroundRule:
    rule_index: int
    premise_ids: tuple[int, ...]
    conclusion_id: int


class AtomTable:
    """Get-or-insert map from ``(predicate, constants)`` to dense ids."""

    def __init__(self, facts: FactSet | None = None):
        self.facts = facts if facts is not None else FactSet()
        self.atoms: list[GroundAtom] = []
        self.index: dict[Key, int] = {}

    def get(self, key: Key) -> int | None:
        return self.index.get(key)

    def intern(self, key: Key, *, observed: bool | None = None, value: float | None = None) -> int:
        i = self.index.get(key)
        if i is not None:
            return i
        fact = self.facts.get(key)
        if fact is not None:
            observed, value = True, fact
        elif observed is None:
            observed = False
        i = len(self.atoms)
        self.atoms.append(GroundAtom(i, key[0], key[1], bool(observed), value if observed else None))
        self.index[key] = i
        return i


@dataclass
class GroundFactorGraph:
    atoms: list[GroundAtom]
    ground_rules: list[GroundRule]
    constraint_groups: list[tuple[tuple[int, ...], float]]
    groundings_per_rule: list[int]
    index: dict[Key, int] = field(default_factory=dict)
    queries: frozenset[int] = frozenset()
    _arrays: dict | None = field(default=None, repr=False, compare=False)
    _incidence: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def atom_id(self, predicate: str, constants: Sequence[str]) -> int:
        return self.index[(predicate, tuple(constants))]

    def find(self, predicate: str, constants: Sequence[str]) -> int | None:
        return self.index.get((predicate, tuple(constants)))

    def observed_mask(self) -> np.ndarray:
        return np.array([a.observed for a in self.atoms], dtype=bool)

    def fact_values(self) -> np.ndarray:
        """Observed atoms carry their value, all others NaN."""
        return np.array([a.value if a.observed else np.nan for a in self.atoms], dtype=float)

    def latent_ids(self) -> np.ndarray:
        """Unobserved atoms that are not query atoms."""
        return np.array([a.id for a in self.atoms if not a.observed and a.id not in self.queries], dtype=int)

    def arrays(self) -> dict:
        """Padded index arrays over ground rules, cached."""
        if self._arrays is None:
            n = len(self.ground_rules)
            kmax = max((len(g.premise_ids) for g in self.ground_rules), default=0)
            prem = np.full((n, max(kmax, 1)), -1, dtype=np.int64)
            for r, g in enumerate(self.ground_rules):
                prem[r, : len(g.premise_ids)] = g.premise_ids
            self._arrays = {
                "prem": prem,
                "prem_mask": prem >= 0,
                "n_prem": np.array([len(g.premise_ids) for g in self.ground_rules], dtype=np.int64),
                "concl": np.array([g.conclusion_id for g in self.ground_rules], dtype=np.int64),
                "rule": np.array([g.rule_index for g in self.ground_rules], dtype=np.int64),
            }
        return self._arrays

    def incidence(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR map atom id -> ground-rule rows that mention it, cached."""
        if self._incidence is None:
            self._incidence = self._build_incidence()
        return self._incidence

    def _build_incidence(self) -> tuple[np.ndarray, np.ndarray]:
        arr = self.arrays()
        if not self.ground_rules:
            return np.zeros(self.n_atoms + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        rows = np.concatenate([np.nonzero(arr["prem_mask"])[0], np.arange(len(self.ground_rules))])
        atoms = np.concatenate([arr["prem"][arr["prem_mask"]], arr["concl"]])
        order = np.lexsort((rows, atoms))
        ptr = np.zeros(self.n_atoms + 1, dtype=np.int64)
        np.add.at(ptr, atoms + 1, 1)
        return np.cumsum(ptr), rows[order]

    def local(self, seeds: Iterable[int], expand: np.ndarray | None = None) -> tuple["GroundFactorGraph", np.ndarray]:
        """Sub-graph of the ground rules reachable from ``seeds``.

        Reachability passes through atoms flagged in ``expand`` (default: the
        latent atoms).  Constraint groups touching a kept atom are kept whole.
        Returns the sub-graph and the original id of each of its atoms.
        """
        if expand is None:
            expand = np.zeros(self.n_atoms, dtype=bool)
            expand[self.latent_ids()] = True
        ptr, rows_of = self.incidence()
        arr = self.arrays()
        keep_atom = np.zeros(self.n_atoms, dtype=bool)
        keep_row = np.zeros(len(self.ground_rules), dtype=bool)
        frontier = sorted(set(int(i) for i in seeds))
        keep_atom[frontier] = True
        while frontier:
            rows = np.unique(np.concatenate([rows_of[ptr[i] : ptr[i + 1]] for i in frontier])) if frontier else []
            rows = np.asarray(rows, dtype=np.int64)
            rows = rows[~keep_row[rows]]
            keep_row[rows] = True
            touched = np.concatenate([arr["prem"][rows][arr["prem_mask"][rows]], arr["concl"][rows]]) if len(rows) else np.zeros(0, dtype=np.int64)
            touched = np.unique(touched)
            new = touched[~keep_atom[touched]]
            keep_atom[new] = True
            frontier = [int(i) for i in new if expand[i]]
        groups_old = []
        for ids, target in self.constraint_groups:
            if keep_atom[list(ids)].any():
                keep_atom[list(ids)] = True
                groups_old.append((ids, target))
        old_ids = np.flatnonzero(keep_atom)
        new_of = np.full(self.n_atoms, -1, dtype=np.int64)
        new_of[old_ids] = np.arange(len(old_ids))
        atoms = [GroundAtom(int(new_of[i]), a.predicate, a.constants, a.observed, a.value) for i, a in ((i, self.atoms[i]) for i in old_ids)]
        ground_rules = []
        per_rule = [0] * len(self.groundings_per_rule)
        for r in np.flatnonzero(keep_row):
            g = self.ground_rules[r]
            ground_rules.append(GroundRule(g.rule_index, tuple(int(new_of[i]) for i in g.premise_ids), int(new_of[g.conclusion_id])))
            per_rule[g.rule_index] += 1
        groups = [(tuple(int(new_of[i]) for i in ids), target) for ids, target in groups_old]
        sub = GroundFactorGraph(
            atoms=atoms,
            ground_rules=ground_rules,
            constraint_groups=groups,
            groundings_per_rule=per_rule,
            index={a.key: a.id for a in atoms},
            queries=frozenset(int(new_of[i]) for i in self.queries if keep_atom[i]),
        )
        return sub, old_ids


@dataclass
class DomainMap:
    """Per argument-position constant sets, merged across shared variables."""

    classes: dict[tuple[str, int], int]
    domains: dict[int, tuple[str, ...]]

    def domain(self, predicate: str, position: int) -> tuple[str, ...]:
        c = self.classes.get((predicate, position))
        return self.domains.get(c, ()) if c is not None else ()

    def __getitem__(self, pos: tuple[str, int]) -> tuple[str, ...]:
        return self.domain(*pos)


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def collect_constants(t: Theory, facts: FactSet, queries: Iterable[Key] = ()) -> DomainMap:
    arities = t.arities()
    uf = _UnionFind()
    for pred, n in arities.items():
        for i in range(n):
            uf.find((pred, i))
    for r in t.rules:
        where: dict[str, list[tuple[str, int]]] = {}
        for a in (*r.premise, r.conclusion):
            for i, term in enumerate(a.args):
                if term.is_var:
                    where.setdefault(term.name, []).append((a.predicate, i))
        for positions in where.values():
            for p in positions[1:]:
                uf.union(positions[0], p)
    for c in t.constraints:
        where = {}
        for i, term in enumerate(c.args):
            if term.is_var:
                where.setdefault(term.name, []).append((c.predicate, i))
        for positions in where.values():
            for p in positions[1:]:
                uf.union(positions[0], p)

    pools: dict[tuple[str, int], set[str]] = {}

    def add(pred: str, consts: Sequence[str], what: str) -> None:
        if pred not in arities:
            raise GroundingError(f"{what} {_key_str((pred, tuple(consts)))} uses undeclared predicate {pred}")
        if len(consts) != arities[pred]:
            raise GroundingError(f"{what} {_key_str((pred, tuple(consts)))} has arity {len(consts)}, expected {arities[pred]}")
        for i, c in enumerate(consts):
            pools.setdefault(uf.find((pred, i)), set()).add(c)

    for pred, consts, _ in facts:
        add(pred, consts, "fact")
    for pred, consts in queries:
        add(pred, consts, "query")
    for a in t.atoms():
        for i, term in enumerate(a.args):
            if not term.is_var:
                pools.setdefault(uf.find((a.predicate, i)), set()).add(term.name)

    roots = sorted({uf.find(p) for p in uf.parent})
    ids = {root: k for k, root in enumerate(roots)}
    classes = {p: ids[uf.find(p)] for p in uf.parent}
    domains = {ids[root]: tuple(sorted(pools.get(root, ()))) for root in roots}
    return DomainMap(classes, domains)


def ground_atom(atom: Atom, sigma: Mapping[str, str]) -> Key:
    consts = []
    for t in atom.args:
        if t.is_var:
            if t.name not in sigma:
                raise GroundingError(f"substitution does not bind variable {t.name}")
            consts.append(sigma[t.name])
        else:
            consts.append(t.name)
    return atom.predicate, tuple(consts)


def apply_substitution(r: Rule, sigma: Mapping[str, str], table: AtomTable, rule_index: int = 0) -> GroundRule:
    """Instantiate ``r`` under a total substitution, registering its atoms."""
    missing = [v for v in r.variables() if v not in sigma]
    if missing:
        raise GroundingError(f"substitution is not total: unbound {', '.join(missing)}")
    prem = tuple(table.intern(ground_atom(a, sigma)) for a in r.premise)
    concl = table.intern(ground_atom(r.conclusion, sigma))
    return GroundRule(rule_index, prem, concl)


def ground_theory(
    t: Theory,
    dm: DomainMap,
    facts: FactSet,
    *,
    queries: Iterable[Key] = (),
    prune: bool = False,
    cap: int = DEFAULT_GROUNDING_CAP,
) -> GroundFactorGraph:
    """Instantiate every rule over the domains in ``dm``.

    Without ``prune`` every substitution over the sorted domains yields a
    ground rule (minus tautologies and duplicates); atoms of closed predicates
    missing from ``facts`` become observed zeros.  With ``prune`` ground rules
    whose potential is identically zero given the facts are skipped, which
    turns grounding into a join over the facts.

    Atoms of ``query`` predicates exist only when they are facts or listed in
    ``queries``; substitutions touching any other atom of such a predicate
    are skipped in both modes.  Under ``prune``, atoms of open predicates
    that occur in no constraint exist only when derivable (a fact, a query,
    or the conclusion of some grounding); the rest are taken as false.
    """
    kinds = {name: d.kind for name, d in t.predicates().items()}
    table = AtomTable(facts)
    for key in sorted(facts.keys()):
        table.intern(key)
    query_keys = sorted(set(map(lambda q: (q[0], tuple(q[1])), queries)))
    for key in query_keys:
        table.intern(key)
    query_ids = frozenset(table.index[k] for k in query_keys if k not in facts)

    by_pred: dict[str, list[tuple[str, ...]]] = {}
    for key in table.index:
        by_pred.setdefault(key[0], []).append(key[1])
    for v in by_pred.values():
        v.sort()

    def lookup(key: Key) -> tuple[bool, float | None]:
        """(exists, known value) for a ground atom before registering it."""
        i = table.index.get(key)
        if i is not None:
            a = table.atoms[i]
            return True, a.value if a.observed else None
        kind = kinds.get(key[0], "open")
        if kind == "closed":
            return True, 0.0
        if kind == "query":
            return False, None
        return True, None

    def register(key: Key) -> int:
        if key in table.index:
            return table.index[key]
        return table.intern(key, observed=kinds.get(key[0]) == "closed", value=0.0)

    def rule_domains(rule: Rule) -> dict[str, tuple[str, ...]]:
        dom = {}
        for a in (*rule.premise, rule.conclusion):
            for i, term in enumerate(a.args):
                if term.is_var and term.name not in dom:
                    dom[term.name] = dm.domain(a.predicate, i)
        return dom

    def candidate(rule: Rule, sigma: dict[str, str]):
        """Atom keys of a grounding, or None when it is skipped."""
        keys = [ground_atom(a, sigma) for a in rule.premise]
        ckey = ground_atom(rule.conclusion, sigma)
        if ckey in keys:
            return None  # tautology
        info = [lookup(k) for k in (*keys, ckey)]
        if not all(exists for exists, _ in info):
            return None
        if prune:
            vals = [v for _, v in info]
            body_max = sum(1.0 if v is None else v for v in vals[:-1]) - (len(keys) - 1)
            if body_max <= 0 or vals[-1] == 1.0 or all(v is not None for v in vals):
                return None
        return keys, ckey

    join_kinds = kinds
    if prune:
        # open atoms outside constraints exist only when derivable: a fact, a
        # query, or the conclusion of some grounding (computed to a fixpoint)
        constrained = {c.predicate for c in t.constraints}
        derived = {p for p, k in kinds.items() if k == "open" and p not in constrained}
        join_kinds = {p: ("query" if p in derived else k) for p, k in kinds.items()}
        known = {k for k in table.index if k[0] in derived}
        while True:
            fresh: set[Key] = set()
            for rule in t.rules:
                if rule.conclusion.predicate not in derived:
                    continue

                def note(sigma, rule=rule):
                    c = candidate(rule, sigma)
                    if c is not None and c[1] not in known:
                        fresh.add(c[1])

                _join(rule, rule_domains(rule), join_kinds, by_pred, lookup, note)
            if not fresh:
                break
            known |= fresh
            for key in fresh:
                by_pred.setdefault(key[0], []).append(key[1])
            for p in {k[0] for k in fresh}:
                by_pred[p].sort()

    ground_rules: list[GroundRule] = []
    per_rule: list[int] = []
    for ri, rule in enumerate(t.rules):
        variables = rule.variables()
        dom = rule_domains(rule)
        seen: set[tuple[tuple[int, ...], int]] = set()
        count = 0

        def emit(sigma: dict[str, str]) -> None:
            nonlocal count
            c = candidate(rule, sigma)
            if c is None:
                return
            keys, ckey = c
            prem = tuple(register(k) for k in keys)
            concl = register(ckey)
            sig = (prem, concl)
            if sig in seen:
                return
            seen.add(sig)
            ground_rules.append(GroundRule(ri, prem, concl))
            count += 1
            if count > cap:
                raise GroundingError(f"rule {ri} ({_rule_str(rule)}) exceeds the grounding cap of {cap}")

        if not prune:
            size = math.prod(len(dom[v]) for v in variables) if variables else 1
            if size > cap:
                raise GroundingError(f"rule {ri} ({_rule_str(rule)}) would produce {size} groundings, cap is {cap}")
            for combo in itertools.product(*(dom[v] for v in variables)):
                emit(dict(zip(variables, combo)))
        else:
            _join(rule, dom, join_kinds, by_pred, lookup, emit)
        per_rule.append(count)

    groups = _constraint_groups(t, dm, table, kinds)
    return GroundFactorGraph(
        atoms=table.atoms,
        ground_rules=ground_rules,
        constraint_groups=groups,
        groundings_per_rule=per_rule,
        index=table.index,
        queries=query_ids,
    )


def _join(rule: Rule, dom, kinds, by_pred, lookup, emit) -> None:
    """Backtracking enumeration; closed/query premise atoms iterate existing atoms only."""
    premise = rule.premise
    conclusion_vars = [v for v in rule.conclusion.variables()]

    def rec(k: int, sigma: dict[str, str]) -> None:
        if k == len(premise):
            free = [v for v in dict.fromkeys(conclusion_vars) if v not in sigma]
            for combo in itertools.product(*(dom[v] for v in free)):
                emit({**sigma, **dict(zip(free, combo))})
            return
        atom = premise[k]
        unbound = [v for v in dict.fromkeys(atom.variables()) if v not in sigma]
        if kinds.get(atom.predicate, "open") in ("closed", "query"):
            for consts in by_pred.get(atom.predicate, ()):
                ext = dict(sigma)
                ok = True
                for term, c in zip(atom.args, consts):
                    want = ext.get(term.name) if term.is_var else term.name
                    if want is None:
                        if c not in dom[term.name]:
                            ok = False
                            break
                        ext[term.name] = c
                    elif want != c:
                        ok = False
                        break
                if ok:
                    exists, v = lookup(ground_atom(atom, ext))
                    if exists and v != 0.0:
                        rec(k + 1, ext)
            return
        for combo in itertools.product(*(dom[v] for v in unbound)):
            ext = {**sigma, **dict(zip(unbound, combo))}
            exists, v = lookup(ground_atom(atom, ext))
            if exists and v != 0.0:
                rec(k + 1, ext)

    rec(0, {})


def _constraint_groups(t: Theory, dm: DomainMap, table: AtomTable, kinds) -> list[tuple[tuple[int, ...], float]]:
    groups = []
    for c in t.constraints:
        fixed_vars = list(dict.fromkeys(term.name for i, term in enumerate(c.args) if term.is_var and i != c.summed_position))
        doms = {}
        for i, term in enumerate(c.args):
            if term.is_var:
                doms.setdefault(term.name, dm.domain(c.predicate, i))
        summed = c.args[c.summed_position].name
        for combo in itertools.product(*(doms[v] for v in fixed_vars)):
            sigma = dict(zip(fixed_vars, combo))
            ids = []
            for value in doms[summed]:
                key = ground_atom(Atom(c.predicate, c.args), {**sigma, summed: value})
                if kinds.get(c.predicate, "open") == "query" and key not in table.index:
                    continue
                ids.append(table.intern(key, observed=kinds.get(c.predicate) == "closed", value=0.0))
            if ids:
                groups.append((tuple(ids), c.target))
    return groups


def _rule_str(rule: Rule) -> str:
    body = " & ".join(map(str, rule.premise))
    return f"{body} -> {rule.conclusion}"
