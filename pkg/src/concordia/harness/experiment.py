"""Config-driven experiments: load or generate data, train, evaluate, report.

A config is an INI file.  Every section and key is checked against a fixed
schema; anything unknown is an error rather than a silently ignored typo.

    [experiment]  name, seed, fractions, baseline
    [generator]   kind = recommend | chain, plus generator arguments
    [data]        data, facts   (paths relative to the config file)
    [theory]      rules, weights
    [mapping]     see ``harness.data``
    [neural]      hidden, lr, init_seed
    [gating]      lr
    [solver]      penalty, step_size, max_iter, tol, init, accelerate
    [training]    epochs, mode, priors, lr_logic, use_logic
"""
from __future__ import annotations

import configparser
import csv
import inspect
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ..logic import Rule, Theory, parse_theory
from ..model import (
    TRAIN_MODES, ConcordiaModel, Instance, ModelConfig, TrainHistory, make_model, train,
)
from ..neural import init_mlp
from ..psl import SolverOptions
from .data import Dataset, DataError, build_instances, load_dataset, mapping_from_section
from .metrics import COMPONENTS, Metrics, evaluate
from .synth import SynthBundle, synth_latent_chain, synth_recommend

__all__ = [
    "ConfigError", "ExperimentConfig", "TrainSettings", "Report", "SCHEMA",
    "read_config", "parse_config", "check_config_keys", "settings_from_sections", "subsample", "load_weights",
    "build_model", "fit", "rule_text", "run_experiment", "write_history", "write_metrics",
]

GENERATORS = {"recommend": synth_recommend, "chain": synth_latent_chain}

SCHEMA: dict[str, set[str] | None] = {
    "experiment": {"name", "seed", "fractions", "baseline"},
    "generator": None,  # checked against the chosen generator's signature
    "data": {"data", "facts"},
    "theory": {"rules", "weights"},
    "mapping": None,  # checked by mapping_from_section
    "neural": {"hidden", "lr", "init_seed"},
    "gating": {"lr"},
    "solver": {"penalty", "step_size", "max_iter", "tol", "init", "accelerate"},
    "training": {"epochs", "mode", "priors", "lr_logic", "use_logic"},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSettings:
    """Everything needed to build and train a model, minus the data."""

    epochs: int = 5
    mode: str = "supervised"
    priors: bool = False
    use_logic: bool = True
    hidden: tuple[int, ...] = (16,)
    init_seed: int = 0
    lr_neural: float = 0.05
    lr_logic: float = 0.01
    lr_gate: float = 0.05
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(tol=1e-4))

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {', '.join(TRAIN_MODES)}")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("epochs", "mode", "priors", "use_logic", "init_seed", "lr_neural", "lr_logic", "lr_gate")}
        d["hidden"] = list(self.hidden)
        d["solver"] = {k: getattr(self.solver, k) for k in
                       ("penalty", "step_size", "max_iter", "tol", "init", "accelerate")}
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    fractions: tuple[float, ...]
    baseline: bool
    settings: TrainSettings
    generator: tuple[str, dict] | None = None
    data_path: Path | None = None
    facts_path: Path | None = None
    rules_path: Path | None = None
    weights_path: Path | None = None
    mapping: dict | None = None
    source: Path | None = None


@dataclass
class Report:
    """Result of ``run_experiment``; ``rows`` mirror metrics.csv."""

    config: ExperimentConfig
    rows: list[dict]
    histories: list[tuple[float, str, TrainHistory]]
    weights: dict[float, list[float]]
    files: dict[str, Path] = field(default_factory=dict)

    def row(self, fraction: float, model: str = "concordia") -> dict:
        for r in self.rows:
            if r["fraction"] == fraction and r["model"] == model:
                return r
        raise KeyError((fraction, model))


# ---------------------------------------------------------------- parsing

def _bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "yes", "true", "on"):
        return True
    if t in ("0", "no", "false", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _num(text: str, key: str, kind=float):
    try:
        return kind(text.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def _floats(text: str, key: str) -> tuple[float, ...]:
    return tuple(_num(x, key) for x in text.split(",") if x.strip())


def read_config(path: str | Path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    return cp


def check_config_keys(cp: configparser.ConfigParser) -> None:
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        allowed = SCHEMA[sec]
        if allowed is None:
            continue
        unknown = set(cp[sec]) - allowed
        if unknown:
            raise ConfigError(f"unknown keys in [{sec}]: {', '.join(sorted(unknown))}")


def _generator_args(kind: str, sec: Mapping[str, str]) -> dict:
    if kind not in GENERATORS:
        raise ConfigError(f"unknown generator kind {kind!r}")
    params = inspect.signature(GENERATORS[kind]).parameters
    args = {}
    for k, v in sec.items():
        if k == "kind":
            continue
        if k not in params or k == "seed":
            raise ConfigError(f"unknown key in [generator] for kind {kind}: {k}")
        default = params[k].default
        args[k] = _num(v, k, int if isinstance(default, int) else float)
    return args


def settings_from_sections(cp: configparser.ConfigParser, base: TrainSettings | None = None) -> TrainSettings:
    """Read [neural], [gating], [solver] and [training] over ``base``."""
    s = base or TrainSettings()
    upd: dict[str, Any] = {}
    if cp.has_section("neural"):
        sec = cp["neural"]
        if "hidden" in sec:
            upd["hidden"] = tuple(_num(x, "hidden", int) for x in sec["hidden"].split(",") if x.strip())
        if "lr" in sec:
            upd["lr_neural"] = _num(sec["lr"], "neural.lr")
        if "init_seed" in sec:
            upd["init_seed"] = _num(sec["init_seed"], "init_seed", int)
    if cp.has_section("gating") and "lr" in cp["gating"]:
        upd["lr_gate"] = _num(cp["gating"]["lr"], "gating.lr")
    if cp.has_section("training"):
        sec = cp["training"]
        if "epochs" in sec:
            upd["epochs"] = _num(sec["epochs"], "epochs", int)
        if "mode" in sec:
            upd["mode"] = sec["mode"].strip()
        if "priors" in sec:
            upd["priors"] = _bool(sec["priors"], "priors")
        if "use_logic" in sec:
            upd["use_logic"] = _bool(sec["use_logic"], "use_logic")
        if "lr_logic" in sec:
            upd["lr_logic"] = _num(sec["lr_logic"], "lr_logic")
    if cp.has_section("solver"):
        sec = cp["solver"]
        sv: dict[str, Any] = {}
        for k in ("step_size", "tol", "init"):
            if k in sec:
                sv[k] = _num(sec[k], k)
        for k in ("penalty", "max_iter"):
            if k in sec:
                sv[k] = _num(sec[k], k, int)
        if "accelerate" in sec:
            sv["accelerate"] = _bool(sec["accelerate"], "accelerate")
        try:
            upd["solver"] = replace(s.solver, **sv)
        except ValueError as e:
            raise ConfigError(f"[solver]: {e}") from None
    try:
        return replace(s, **upd)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def parse_config(cp: configparser.ConfigParser, source: Path | None = None) -> ExperimentConfig:
    check_config_keys(cp)
    root = source.parent if source is not None else Path(".")
    exp = cp["experiment"] if cp.has_section("experiment") else {}
    fractions = _floats(exp.get("fractions", "1.0"), "fractions")
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ConfigError("fractions must lie in (0, 1]")
    generator = None
    if cp.has_section("generator"):
        sec = dict(cp["generator"])
        if "kind" not in sec:
            raise ConfigError("[generator] needs 'kind'")
        generator = (sec["kind"].strip(), _generator_args(sec["kind"].strip(), sec))
    paths: dict[str, Path | None] = {"data": None, "facts": None, "rules": None, "weights": None}
    for sec_name in ("data", "theory"):
        if cp.has_section(sec_name):
            for k, v in cp[sec_name].items():
                paths[k] = root / v.strip()
    if generator is not None and paths["data"] is not None:
        raise ConfigError("use either [generator] or [data], not both")
    mapping = dict(cp["mapping"]) if cp.has_section("mapping") else None
    if mapping is not None:
        try:
            mapping_from_section(mapping)
        except DataError as e:
            raise ConfigError(str(e)) from None
    return ExperimentConfig(
        name=exp.get("name", source.stem if source else "experiment").strip(),
        seed=_num(exp.get("seed", "0"), "seed", int),
        fractions=fractions,
        baseline=_bool(exp.get("baseline", "no"), "baseline"),
        settings=settings_from_sections(cp),
        generator=generator,
        data_path=paths["data"],
        facts_path=paths["facts"],
        rules_path=paths["rules"],
        weights_path=paths["weights"],
        mapping=mapping,
        source=source,
    )


def load_weights(path: str | Path, n_rules: int) -> np.ndarray:
    """Read a ``rule<TAB>weight`` file as written by ``save_model``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    w = np.full(n_rules, np.nan)
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            i, v = int(parts[0]), float(parts[1])
        except (ValueError, IndexError):
            raise ConfigError(f"{path}:{lineno}: expected 'rule<TAB>weight'") from None
        if not 0 <= i < n_rules:
            raise ConfigError(f"{path}:{lineno}: no rule {i}")
        w[i] = v
    if np.isnan(w).any():
        raise ConfigError(f"{path}: missing weights for rules {np.flatnonzero(np.isnan(w)).tolist()}")
    return w


# ---------------------------------------------------------------- running

def subsample(ds: Dataset, fraction: float, seed: int) -> list[str]:
    """Ids of a label-stratified, seeded ``fraction`` of the labeled train data."""
    train = [d for d in ds.data if d.split == "train" and d.label is not None]
    if fraction >= 1.0:
        return [d.id for d in train]
    rng = np.random.default_rng([seed, 11])
    strata: dict[str, list[str]] = {}
    for d in train:
        strata.setdefault(d.label, []).append(d.id)
    keep = []
    for label in sorted(strata):
        ids = strata[label]
        k = int(round(fraction * len(ids)))
        keep.extend(ids[int(i)] for i in sorted(rng.permutation(len(ids))[:k]))
    order = {d.id: i for i, d in enumerate(train)}
    return sorted(keep, key=order.__getitem__)


def build_model(theory: Theory, ds: Dataset, n_features: int, s: TrainSettings,
                weights: np.ndarray | None = None) -> ConcordiaModel:
    mp = ds.mapping
    regression = mp.task == "regression"
    heads = () if regression else (len(mp.classes),)
    widths = (n_features, *s.hidden, 1 if regression else heads[0])
    predictor = init_mlp(widths, output="sigmoid" if regression else "softmax", seed=s.init_seed)
    priors = s.priors and s.use_logic
    if priors and mp.neural is None:
        raise ConfigError("priors need a neural template in the mapping")
    cfg = ModelConfig(
        task=mp.task, heads=heads, priors=priors,
        neural_predicate=mp.neural.predicate if mp.neural is not None else None,
        use_logic=s.use_logic, lr_neural=s.lr_neural, lr_logic=s.lr_logic, lr_gate=s.lr_gate,
        solver=s.solver, label_range=mp.label_range if regression else (0.0, 1.0),
    )
    return make_model(theory, predictor, cfg, weights=weights, seed=s.init_seed)


def fit(m: ConcordiaModel, ds: Dataset, instances: Mapping[str, Instance], labeled: Sequence[str],
        s: TrainSettings, seed: int) -> tuple[ConcordiaModel, TrainHistory]:
    """Train on ``labeled`` ids; unused train and unlabeled data feed the unsupervised passes."""
    chosen = set(labeled)
    lab = [instances[i] for i in labeled]
    rest = [instances[d.id] for d in ds.data
            if (d.split == "train" and d.id not in chosen) or d.split == "unlabeled"]
    if s.mode == "supervised":
        return train(m, lab, s.epochs, "supervised", seed=seed)
    if s.mode == "semi":
        return train(m, lab, s.epochs, "semi", unlabeled=rest, seed=seed)
    return train(m, lab, s.epochs, "unsupervised", unlabeled=rest, seed=seed)


def _load(cfg: ExperimentConfig) -> tuple[Dataset, Theory]:
    if cfg.generator is not None:
        kind, args = cfg.generator
        b: SynthBundle = GENERATORS[kind](cfg.seed, **args)
        theory = b.theory
        if cfg.rules_path is not None:
            theory = parse_theory(Path(cfg.rules_path).read_text(encoding="utf-8"))
        ds = b.dataset
        if cfg.mapping is not None:
            ds = replace(ds, mapping=mapping_from_section(cfg.mapping))
        return ds, theory
    if cfg.data_path is None or cfg.source is None:
        raise ConfigError("need a [generator] or a [data] section")
    if cfg.rules_path is None:
        raise ConfigError("[theory] rules is required with [data]")
    theory = parse_theory(Path(cfg.rules_path).read_text(encoding="utf-8"))
    return load_dataset(cfg.data_path, cfg.facts_path, cfg.source, arities=theory.arities()), theory


def rule_text(r: Rule) -> str:
    body = " & ".join(map(str, r.premise))
    return f"{body + ' ' if body else ''}-> {r.conclusion}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def write_metrics(rows: Sequence[dict], path: str | Path) -> None:
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in keys])


def write_history(histories: Sequence[tuple[float, str, TrainHistory]], path: str | Path) -> None:
    cols = ["epoch", "updates", "neural_loss", "gate_loss", "energy_truth", "train_metric", "eval_metric"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "model", *cols])
        for frac, name, h in histories:
            for rec in h.records:
                w.writerow([_fmt(frac), name, *(_fmt(getattr(rec, c)) for c in cols)])


def _summary_text(cfg: ExperimentConfig, theory: Theory, report: Report) -> str:
    s = cfg.settings
    task = report.rows[0]["task"] if report.rows else "?"
    key = "rmse" if task == "regression" else "accuracy"
    lines = [
        f"experiment {cfg.name} (seed {cfg.seed})",
        f"mode {s.mode}, priors {'on' if s.priors else 'off'}, logic {'on' if s.use_logic else 'off'}, "
        f"epochs {s.epochs}, penalty {s.solver.penalty}",
        "",
        f"{'fraction':>8}  {'model':<10} {'n_train':>7}  " + "  ".join(f"{c + '_' + key:>16}" for c in COMPONENTS) + "  mean_kappa",
    ]
    for r in report.rows:
        vals = "  ".join(f"{r.get(c + '_' + key, float('nan')):>16.4f}" for c in COMPONENTS)
        lines.append(f"{r['fraction']:>8.2f}  {r['model']:<10} {r['n_train']:>7d}  {vals}  {r['mean_kappa']:.4f}")
    lines.append("")
    lines.append("learned rule weights (last fraction):")
    last = report.weights[cfg.fractions[-1]]
    for r, w in zip(theory.rules, last):
        lines.append(f"  {w:8.4f}  {rule_text(r)}")
    return "\n".join(lines) + "\n"


def run_experiment(
    config_path: str | Path,
    out: str | Path | None = None,
    *,
    overrides: Mapping[str, Any] | None = None,
) -> Report:
    """Train and evaluate once per data fraction and write the report files.

    ``overrides`` may set ``seed``, ``fractions`` and any ``TrainSettings``
    field (``penalty`` goes to the solver).  Writes metrics.csv (one row per
    fraction and model), history.csv (one row per epoch), summary.json and
    summary.txt into ``out`` when given.
    """
    path = Path(config_path)
    cfg = parse_config(read_config(path), path)
    if overrides:
        ov = dict(overrides)
        top = {k: ov.pop(k) for k in ("seed", "fractions", "baseline") if k in ov}
        if "penalty" in ov:
            ov["solver"] = replace(cfg.settings.solver, penalty=int(ov.pop("penalty")))
        try:
            cfg = replace(cfg, settings=replace(cfg.settings, **ov), **top)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad override: {e}") from None
    ds, theory = _load(cfg)
    s = cfg.settings
    init_w = load_weights(cfg.weights_path, len(theory.rules)) if cfg.weights_path else None
    if not any(d.split == "test" and d.label is not None for d in ds.data):
        raise DataError("no labeled test data to evaluate on")

    models = [("concordia", s)]
    if cfg.baseline and s.use_logic:
        models.append(("neural", replace(s, use_logic=False, priors=False)))
    rows, histories, weights = [], [], {}
    for frac in cfg.fractions:
        labeled = subsample(ds, frac, cfg.seed)
        if not labeled and s.mode != "unsupervised":
            raise DataError(f"fraction {frac} leaves no labeled training data")
        instances = build_instances(ds, theory, labeled=labeled)
        test = [instances[d.id] for d in ds.data if d.split == "test" and d.label is not None]
        n_features = len(next(iter(instances.values())).features)
        for name, ms in models:
            m = build_model(theory, ds, n_features, ms, init_w)
            m, hist = fit(m, ds, instances, labeled, ms, cfg.seed)
            met: Metrics = evaluate(m, test)
            rows.append({"fraction": frac, "model": name, "task": met.task, "n_train": len(labeled),
                         "n_test": met.n, **{k: v for k, v in met.flat().items() if k != "n"}})
            histories.append((frac, name, hist))
            if name == "concordia":
                weights[frac] = [float(w) for w in m.weights]
    report = Report(cfg, rows, histories, weights)
    if out is not None:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        files = {"metrics": d / "metrics.csv", "history": d / "history.csv",
                 "summary": d / "summary.json", "text": d / "summary.txt"}
        write_metrics(rows, files["metrics"])
        write_history(histories, files["history"])
        summary = {
            "name": cfg.name, "seed": cfg.seed, "fractions": list(cfg.fractions),
            "generator": {"kind": cfg.generator[0], **cfg.generator[1]} if cfg.generator else None,
            "settings": s.as_dict(),
            "rules": [rule_text(r) for r in theory.rules],
            "weights": {_fmt(f): w for f, w in weights.items()},
            "results": rows,
        }
        files["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        files["text"].write_text(_summary_text(cfg, theory, report), encoding="utf-8")
        report.files = files
    return report


