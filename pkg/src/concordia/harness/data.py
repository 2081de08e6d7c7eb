"""Datasets, the tau/nu mapping configuration, and instance building."""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..grounding import FactSet, GroundFactorGraph, collect_constants, ground_theory, parse_fact_fields
from ..logic import Theory
from ..model import Instance, LogicProblem, scale_regression

__all__ = [
    "DataError", "Datum", "Dataset", "Template", "FeatureSpec", "MappingConfig",
    "FeatureEncoder", "load_dataset", "read_data", "read_fact_file", "read_mapping",
    "build_instances", "write_data", "write_fact_file", "DATA_COLUMNS", "SPLITS",
]

DATA_COLUMNS = ("id", "split", "group", "label")
SPLITS = ("train", "test", "unlabeled")
NO_GROUP = "-"
MAPPING_KEYS = {"task", "target", "classes", "label_range", "neural", "features", "evidence"}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Datum:
    id: str
    split: str
    group: str
    label: str | None
    fields: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Template:
    """``Pred(field, *, 'const')``: fields are read from the datum, ``*`` is the class."""

    predicate: str
    args: tuple[str, ...]

    _RE = re.compile(r"^\s*([A-Za-z_]\w*)\s*\((.*)\)\s*$")

    @classmethod
    def parse(cls, text: str) -> "Template":
        m = cls._RE.match(text)
        if not m:
            raise DataError(f"bad atom template {text!r}")
        args = tuple(a.strip() for a in m.group(2).split(",")) if m.group(2).strip() else ()
        if any(not a for a in args):
            raise DataError(f"bad atom template {text!r}")
        return cls(m.group(1), args)

    @property
    def has_class(self) -> bool:
        return "*" in self.args

    def key(self, d: Datum, cls_name: str | None = None) -> tuple[str, tuple[str, ...]]:
        out = []
        for a in self.args:
            if a == "*":
                if cls_name is None:
                    raise DataError(f"template {self} needs a class")
                out.append(cls_name)
            elif a[0] in "'\"":
                out.append(a[1:-1])
            elif a == "id":
                out.append(d.id)
            elif a == "group":
                out.append(d.group)
            else:
                if a not in d.fields:
                    raise DataError(f"datum {d.id} has no field {a!r} for template {self}")
                out.append(d.fields[a])
        return self.predicate, tuple(out)

    def __str__(self) -> str:
        return f"{self.predicate}({', '.join(self.args)})"


@dataclass(frozen=True)
class FeatureSpec:
    """``field:onehot`` or ``field:num[:lo:hi]``."""

    field: str
    kind: str
    lo: float = 0.0
    hi: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "FeatureSpec":
        parts = [p.strip() for p in text.split(":")]
        if len(parts) == 2 and parts[1] == "onehot":
            return cls(parts[0], "onehot")
        if parts[1:2] == ["num"] and len(parts) in (2, 4):
            if len(parts) == 2:
                return cls(parts[0], "num")
            lo, hi = float(parts[2]), float(parts[3])
            if hi <= lo:
                raise DataError(f"feature {text!r}: range must be increasing")
            return cls(parts[0], "num", lo, hi)
        raise DataError(f"bad feature spec {text!r}")


@dataclass(frozen=True)
class MappingConfig:
    """How a datum becomes logic observations (tau) and a feature vector (nu).

    ``evidence = label``: every datum is its own inference problem and the
    labels of the other labeled data are observed.  ``evidence = joint``: one
    problem per group in which all the group's targets are inferred together.
    """

    task: str
    target: Template
    classes: tuple[str, ...] = ()
    label_range: tuple[float, float] = (0.0, 1.0)
    neural: Template | None = None
    features: tuple[FeatureSpec, ...] = ()
    evidence: str = "label"

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise DataError("task must be classification or regression")
        if self.task == "classification":
            if len(self.classes) < 2 or len(set(self.classes)) != len(self.classes):
                raise DataError("classification needs at least two distinct classes")
            if not self.target.has_class:
                raise DataError("classification target template needs a '*' class slot")
        elif self.target.has_class:
            raise DataError("regression target template takes no class slot")
        if self.evidence not in ("label", "joint"):
            raise DataError("evidence must be 'label' or 'joint'")
        if not self.features:
            raise DataError("at least one feature is required")

    @property
    def predicates(self) -> set[str]:
        out = {self.target.predicate}
        if self.neural is not None:
            out.add(self.neural.predicate)
        return out

    def check(self, theory: Theory) -> None:
        """Every referenced predicate must be known to the theory with the right arity."""
        arities = theory.arities()
        for t in (self.target, self.neural):
            if t is None:
                continue
            if t.predicate not in arities:
                raise DataError(f"mapping references undeclared predicate {t.predicate}")
            if arities[t.predicate] != len(t.args):
                raise DataError(f"mapping uses {t.predicate} with arity {len(t.args)}, theory has {arities[t.predicate]}")

    def encode_label(self, label: str) -> int | float:
        if self.task == "classification":
            if label not in self.classes:
                raise DataError(f"unknown class {label!r}")
            return self.classes.index(label)
        v = float(label)
        lo, hi = self.label_range
        if not lo <= v <= hi:
            raise DataError(f"label {v} outside the range [{lo}, {hi}]")
        return scale_regression(v, lo, hi)

    def to_section(self) -> dict[str, str]:
        out = {"task": self.task, "target": str(self.target), "evidence": self.evidence}
        if self.classes:
            out["classes"] = ", ".join(self.classes)
        if self.task == "regression":
            out["label_range"] = f"{self.label_range[0]!r}, {self.label_range[1]!r}"
        if self.neural is not None:
            out["neural"] = str(self.neural)
        parts = []
        for f in self.features:
            parts.append(f"{f.field}:onehot" if f.kind == "onehot" else f"{f.field}:num:{f.lo!r}:{f.hi!r}")
        out["features"] = ", ".join(parts)
        return out


def mapping_from_section(sec: Mapping[str, str]) -> MappingConfig:
    unknown = set(sec) - MAPPING_KEYS
    if unknown:
        raise DataError(f"unknown [mapping] keys: {', '.join(sorted(unknown))}")
    for k in ("task", "target", "features"):
        if k not in sec:
            raise DataError(f"[mapping] needs {k!r}")
    lr = (0.0, 1.0)
    if "label_range" in sec:
        vals = [float(x) for x in sec["label_range"].split(",")]
        if len(vals) != 2:
            raise DataError("label_range takes two numbers")
        lr = (vals[0], vals[1])
        if lr[1] <= lr[0]:
            raise DataError("label_range must be increasing")
    return MappingConfig(
        task=sec["task"].strip(),
        target=Template.parse(sec["target"]),
        classes=tuple(c.strip() for c in sec.get("classes", "").split(",") if c.strip()),
        label_range=lr,
        neural=Template.parse(sec["neural"]) if sec.get("neural", "").strip() else None,
        features=tuple(FeatureSpec.parse(x) for x in _split_list(sec["features"])),
        evidence=sec.get("evidence", "label").strip(),
    )


def _split_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def read_mapping(config_path: str | Path) -> MappingConfig:
    cp = configparser.ConfigParser(interpolation=None)
    path = Path(config_path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    cp.read(path, encoding="utf-8")
    if not cp.has_section("mapping"):
        raise DataError(f"{path}: missing [mapping] section")
    return mapping_from_section(dict(cp["mapping"]))


@dataclass
class Dataset:
    data: list[Datum]
    facts: FactSet
    group_facts: dict[str, FactSet]
    mapping: MappingConfig

    def split(self, name: str) -> list[Datum]:
        return [d for d in self.data if d.split == name]

    def by_id(self) -> dict[str, Datum]:
        return {d.id: d for d in self.data}


def read_data(path: str | Path) -> list[Datum]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty data file")
    header = lines[0].split("\t")
    if tuple(header[:4]) != DATA_COLUMNS:
        raise DataError(f"{path}:1: header must start with {', '.join(DATA_COLUMNS)}")
    names = header[4:]
    if len(set(names)) != len(names) or any(n in DATA_COLUMNS for n in names):
        raise DataError(f"{path}:1: duplicate field names")
    seen: set[str] = set()
    data = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cols)}")
        did, split, group, label = cols[:4]
        if not did:
            raise DataError(f"{path}:{lineno}: empty id")
        if did in seen:
            raise DataError(f"{path}:{lineno}: duplicate datum id {did!r}")
        if split not in SPLITS:
            raise DataError(f"{path}:{lineno}: split must be one of {', '.join(SPLITS)}")
        seen.add(did)
        label = None if label in ("", "?") else label
        if split == "unlabeled":
            label = None
        data.append(Datum(did, split, group or NO_GROUP, label, dict(zip(names, cols[4:]))))
    return data


def write_data(data: Sequence[Datum], path: str | Path) -> None:
    names = list(data[0].fields) if data else []
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join((*DATA_COLUMNS, *names)) + "\n")
        for d in data:
            row = [d.id, d.split, d.group, "" if d.label is None else d.label, *(d.fields[n] for n in names)]
            fh.write("\t".join(row) + "\n")


def read_fact_file(path: str | Path, arities: Mapping[str, int] | None = None) -> tuple[FactSet, dict[str, FactSet]]:
    """Shared facts plus group-scoped ones (lines whose first field is ``@group``)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"fact file not found: {path}")
    shared = FactSet()
    groups: dict[str, FactSet] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            target = shared
            if fields[0].startswith("@"):
                target = groups.setdefault(fields[0][1:], FactSet())
                fields = fields[1:]
            try:
                pred, consts, value = parse_fact_fields(fields, arities)
                target.add(pred, consts, value)
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
    return shared, groups


def write_fact_file(shared: FactSet, groups: Mapping[str, FactSet], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pred, consts, value in sorted(shared):
            fh.write("\t".join((pred, *consts, repr(float(value)))) + "\n")
        for g in sorted(groups):
            for pred, consts, value in sorted(groups[g]):
                fh.write("\t".join((f"@{g}", pred, *consts, repr(float(value)))) + "\n")


def load_dataset(
    data_path: str | Path,
    facts_path: str | Path | None,
    config_path: str | Path,
    *,
    arities: Mapping[str, int] | None = None,
) -> Dataset:
    """Read and validate a dataset; errors carry file and line numbers."""
    mapping = read_mapping(config_path)
    data = read_data(data_path)
    if facts_path is not None:
        shared, groups = read_fact_file(facts_path, arities)
    else:
        shared, groups = FactSet(), {}
    for d in data:
        if d.label is not None:
            try:
                mapping.encode_label(d.label)
            except ValueError as e:
                raise DataError(f"{data_path}: datum {d.id}: {e}") from None
        for f in mapping.features:
            if f.field not in d.fields:
                raise DataError(f"{data_path}: datum {d.id} lacks feature field {f.field!r}")
            if f.kind == "num":
                try:
                    float(d.fields[f.field])
                except ValueError:
                    raise DataError(f"{data_path}: datum {d.id}: field {f.field!r} is not numeric") from None
    return Dataset(data, shared, groups, mapping)


class FeatureEncoder:
    """nu: datum fields to a fixed-width vector (one-hot vocabularies fitted on all data)."""

    def __init__(self, specs: Sequence[FeatureSpec], data: Iterable[Datum]):
        self.specs = tuple(specs)
        data = list(data)
        self.vocab: dict[str, dict[str, int]] = {}
        for s in self.specs:
            if s.kind == "onehot":
                values = sorted({d.fields[s.field] for d in data})
                self.vocab[s.field] = {v: i for i, v in enumerate(values)}
        self.width = sum(len(self.vocab[s.field]) if s.kind == "onehot" else 1 for s in self.specs)

    def __call__(self, d: Datum) -> np.ndarray:
        out = []
        for s in self.specs:
            if s.kind == "onehot":
                v = np.zeros(len(self.vocab[s.field]))
                idx = self.vocab[s.field].get(d.fields[s.field])
                if idx is not None:
                    v[idx] = 1.0
                out.append(v)
            else:
                out.append(np.array([(float(d.fields[s.field]) - s.lo) / (s.hi - s.lo)]))
        return np.concatenate(out) if out else np.zeros(0)


def _label_values(mapping: MappingConfig, label) -> list[float]:
    if mapping.task == "regression":
        return [float(label)]
    return [1.0 if k == label else 0.0 for k in range(len(mapping.classes))]


def build_instances(
    ds: Dataset,
    theory: Theory,
    *,
    labeled: Iterable[str] | None = None,
    encoder: FeatureEncoder | None = None,
) -> dict[str, Instance]:
    """Ground the theory per group and wrap every datum as an ``Instance``.

    ``labeled`` names the data whose labels may be used as tau(xy) and, in
    ``label`` evidence mode, as observations for the other data (default:
    every labeled train datum).  All data keep their label for evaluation.
    """
    mp = ds.mapping
    mp.check(theory)
    if labeled is None:
        labeled = [d.id for d in ds.data if d.split == "train" and d.label is not None]
    labeled = set(labeled)
    encoder = encoder or FeatureEncoder(mp.features, ds.data)
    classes = mp.classes if mp.task == "classification" else (None,)
    groups: dict[str, list[Datum]] = {}
    for d in ds.data:
        groups.setdefault(d.group, []).append(d)
    out: dict[str, Instance] = {}
    for g in sorted(groups):
        members = groups[g]
        facts = ds.facts.union(ds.group_facts[g]) if g in ds.group_facts else ds.facts
        tkeys = {d.id: [mp.target.key(d, c) for c in classes] for d in members}
        nkeys = {d.id: [mp.neural.key(d, c) for c in classes] for d in members} if mp.neural else {}
        for d in members:
            for k in tkeys[d.id]:
                if k in facts:
                    raise DataError(f"target atom {k[0]}{k[1]} of datum {d.id} is also a fact")
        queries = [k for ks in tkeys.values() for k in ks] + [k for ks in nkeys.values() for k in ks]
        dm = collect_constants(theory, facts, queries)
        graph = ground_theory(theory, dm, facts, queries=queries, prune=True)
        tids = {i: np.array([graph.atom_id(*k) for k in ks]) for i, ks in tkeys.items()}
        nids = {i: np.array([graph.atom_id(*k) for k in ks]) for i, ks in nkeys.items()}
        labels = {d.id: mp.encode_label(d.label) if d.label is not None else None for d in members}
        feats = {d.id: encoder(d) for d in members}

        if mp.evidence == "joint":
            seeds = np.concatenate([tids[d.id] for d in members])
            sub, old = graph.local(seeds)
            new_of = {int(o): k for k, o in enumerate(old)}
            truth = {}
            for d in members:
                if d.id in labeled and labels[d.id] is not None:
                    for i, v in zip(tids[d.id], _label_values(mp, labels[d.id])):
                        truth[new_of[int(i)]] = v
            free = np.union1d([new_of[int(i)] for i in seeds], sub.latent_ids()).astype(int)
            peers = [([np.array([new_of[int(i)] for i in nids[d.id] if int(i) in new_of])], feats[d.id]) for d in members] if nids else []
            prob = LogicProblem(f"{g}", sub, {}, free, truth, peers)
            for d in members:
                out[d.id] = Instance(d.id, feats[d.id], labels[d.id], prob, [np.array([new_of[int(i)] for i in tids[d.id]])])
            continue

        evidence = {}
        for d in members:
            if d.id in labeled and labels[d.id] is not None:
                for i, v in zip(tids[d.id], _label_values(mp, labels[d.id])):
                    evidence[int(i)] = v
        own_of = {int(i): d.id for d in members for i in tids[d.id]}
        expand = np.zeros(graph.n_atoms, dtype=bool)
        expand[graph.latent_ids()] = True
        for d in members:
            sub, old = graph.local(tids[d.id], expand)
            new_of = {int(o): k for k, o in enumerate(old)}
            observed = {k: evidence[int(o)] for k, o in enumerate(old) if int(o) in evidence and own_of.get(int(o)) != d.id}
            own = np.array([new_of[int(i)] for i in tids[d.id]])
            latent = np.array([k for k in sub.latent_ids() if k not in observed], dtype=int)
            free = np.union1d(own, latent).astype(int)
            truth = {}
            if d.id in labeled and labels[d.id] is not None:
                truth = {int(k): v for k, v in zip(own, _label_values(mp, labels[d.id]))}
            peers = []
            if nids:
                peers = [([np.array([new_of[int(i)] for i in nids[d.id] if int(i) in new_of])], feats[d.id])]
            prob = LogicProblem(f"{g}:{d.id}", sub, observed, free, truth, peers)
            out[d.id] = Instance(d.id, feats[d.id], labels[d.id], prob, [own])
    return out
