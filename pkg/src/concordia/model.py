"""The integration layer: gating network, mixture, inference and the joint
parameter update of the neural predictor, the rule weights and the gate."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grounding import GroundFactorGraph
from .logic import Theory, format_theory, parse_theory
from .neural import MLP, Predictor, init_mlp, load_predictor, loss as neural_loss, save_predictor
from .psl import (
    MapResult, SolverOptions, interpretation, learn_weights_step, map_infer,
    problem_rows, rule_potentials,
)

__all__ = [
    "ModelConfig", "LogicProblem", "Instance", "ConcordiaModel", "Prediction", "StepStats",
    "TrainHistory", "EpochRecord", "make_model", "mixture", "gate", "gate_loss_and_grad",
    "gate_grad_check", "translate", "logic_distribution", "infer_concordia", "infer_multitask",
    "update_concordia", "train", "scale_regression", "unscale_regression", "save_model",
    "load_model", "KAPPA_CLIP", "GATE_HIDDEN",
]

KAPPA_CLIP = 1e-12
GATE_HIDDEN = 8
TRAIN_MODES = ("supervised", "semi", "unsupervised")


@dataclass(frozen=True)
class ModelConfig:
    task: str = "classification"
    heads: tuple[int, ...] = (2,)  # classes per task head; empty for regression
    priors: bool = False
    neural_predicate: str | None = None
    use_logic: bool = True
    lr_neural: float = 0.05
    lr_logic: float = 0.01
    lr_gate: float = 0.05
    solver: SolverOptions = field(default_factory=SolverOptions)
    label_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ValueError("task must be 'classification' or 'regression'")
        if self.task == "classification" and (not self.heads or min(self.heads) < 2):
            raise ValueError("every classification head needs at least two classes")
        if min(self.lr_neural, self.lr_logic, self.lr_gate) < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.label_range[1] <= self.label_range[0]:
            raise ValueError("label_range must be increasing")

    @property
    def regression(self) -> bool:
        return self.task == "regression"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = list(self.heads)
        d["label_range"] = list(self.label_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["solver"] = SolverOptions(**d["solver"])
        d["heads"] = tuple(d["heads"])
        d["label_range"] = tuple(d["label_range"])
        return cls(**d)


@dataclass
class LogicProblem:
    """One MAP problem shared by the data whose targets live in ``graph``.

    ``observed`` is tau(x) on top of the graph's facts, ``truth`` the labels
    known for tau(xy), and ``peers`` the (neural atom ids per head, features)
    of every datum whose predictions feed the graph when priors are on.
    """

    key: str
    graph: GroundFactorGraph
    observed: dict[int, float]
    free: np.ndarray
    truth: dict[int, float] = field(default_factory=dict)
    peers: list[tuple[list[np.ndarray], np.ndarray]] = field(default_factory=list)


@dataclass
class Instance:
    id: str
    features: np.ndarray
    label: object = None  # class index, list of indices per head, or unit-scaled value
    problem: LogicProblem | None = None
    targets: list[np.ndarray] = field(default_factory=list)  # atom ids per head


@dataclass(frozen=True)
class ConcordiaModel:
    theory: Theory
    weights: np.ndarray
    predictor: Predictor
    gate: MLP
    config: ModelConfig

    @property
    def n_heads(self) -> int:
        return 1 if self.config.regression else len(self.config.heads)


@dataclass
class Prediction:
    label: object
    dist: object
    kappa: float
    neural: object
    logic: object
    converged: bool = True

    def __iter__(self):
        return iter((self.label, self.dist, self.kappa))


@dataclass
class StepStats:
    neural_loss: float
    gate_loss: float
    energy_truth: float
    prediction: Prediction


@dataclass
class EpochRecord:
    epoch: int
    updates: int
    neural_loss: float
    gate_loss: float
    energy_truth: float
    train_metric: float
    eval_metric: float = float("nan")


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def rows(self) -> list[dict]:
        return [asdict(r) for r in self.records]


def scale_regression(value: float, lo: float, hi: float) -> float:
    if hi <= lo:
        raise ValueError("need lo < hi")
    return (value - lo) / (hi - lo)


def unscale_regression(unit: float, lo: float, hi: float) -> float:
    if hi <= lo:
        raise ValueError("need lo < hi")
    return lo + unit * (hi - lo)


def make_model(
    theory: Theory,
    predictor: Predictor,
    config: ModelConfig,
    *,
    n_features: int | None = None,
    weights: np.ndarray | None = None,
    seed: int = 0,
) -> ConcordiaModel:
    """Assemble a model with a freshly initialised gate."""
    if config.priors:
        if not config.neural_predicate or config.neural_predicate not in theory.predicates():
            raise ValueError(f"priors need the theory to declare the neural predicate {config.neural_predicate!r}")
    if config.regression:
        if getattr(predictor, "task", "regression") != "regression":
            raise ValueError("a regression model needs a regression predictor")
    elif tuple(getattr(predictor, "heads", config.heads)) != tuple(config.heads):
        raise ValueError(f"predictor heads {predictor.heads} do not match the target spec {config.heads}")
    if n_features is None:
        n_features = predictor.widths[0]
    gt = init_mlp((n_features, GATE_HIDDEN, 1), output="sigmoid", seed=np.random.default_rng([seed, 7]))
    w = theory.initial_weights() if weights is None else np.asarray(weights, dtype=float).copy()
    if len(w) != len(theory.rules):
        raise ValueError("one weight per rule is required")
    return ConcordiaModel(theory, w, predictor, gt, config)


def mixture(kappa: float, pn, pl):
    """``kappa * pn + (1 - kappa) * pl``, entrywise."""
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    pn_a, pl_a = np.asarray(pn, dtype=float), np.asarray(pl, dtype=float)
    if pn_a.shape != pl_a.shape:
        raise ValueError(f"arity mismatch: {pn_a.shape} vs {pl_a.shape}")
    if kappa == 1.0:
        out = pn_a.copy()
    elif kappa == 0.0:
        out = pl_a.copy()
    else:
        out = kappa * pn_a + (1.0 - kappa) * pl_a
    return float(out) if out.ndim == 0 else out


def gate(gt: MLP, f: np.ndarray) -> float:
    """Gating weight kappa, kept strictly inside (0, 1)."""
    return float(np.clip(gt.predict(f), KAPPA_CLIP, 1.0 - KAPPA_CLIP))


def _heads(value, n: int) -> list:
    return [value] if n == 1 and not isinstance(value, list) else list(value)


def _gate_loss_kappa(kappa: float, label, pn, pl, regression: bool) -> tuple[float, float]:
    """Loss of the mixture and its derivative with respect to kappa."""
    if regression:
        mix = kappa * float(pn) + (1 - kappa) * float(pl)
        r = mix - float(label)
        return r * r, 2.0 * r * (float(pn) - float(pl))
    total, d = 0.0, 0.0
    labels = _heads(label, len(pn) if isinstance(pn, list) else 1)
    pns = pn if isinstance(pn, list) else [pn]
    pls = pl if isinstance(pl, list) else [pl]
    for y, a, b in zip(labels, pns, pls):
        a_y, b_y = float(a[int(y)]), float(b[int(y)])
        mix = max(kappa * a_y + (1 - kappa) * b_y, 1e-300)
        total -= np.log(mix)
        d -= (a_y - b_y) / mix
    return total, d


def gate_loss_and_grad(gt: MLP, f: np.ndarray, label, pn, pl, regression: bool = False):
    """Mixture loss against the label; the gradient flows only through kappa."""
    z, acts = gt.forward(f)
    kappa = 1.0 / (1.0 + np.exp(-z[0])) if z[0] >= 0 else np.exp(z[0]) / (1.0 + np.exp(z[0]))
    value, dk = _gate_loss_kappa(float(kappa), label, pn, pl, regression)
    grads = gt.backward(acts, np.array([dk * kappa * (1.0 - kappa)]))
    return value, grads


def gate_grad_check(gt: MLP, f: np.ndarray, label, pn, pl, regression: bool = False, h: float = 1e-5) -> float:
    """Max relative error of the gate gradient against central differences."""
    _, grads = gate_loss_and_grad(gt, f, label, pn, pl, regression)
    analytic = np.concatenate([a.ravel() for gW, gb in grads for a in (gW, gb)])
    theta = gt.flat()
    numeric = np.empty_like(theta)
    for i in range(len(theta)):
        t = theta.copy()
        t[i] += h
        up = gate_loss_and_grad(gt.with_flat(t), f, label, pn, pl, regression)[0]
        t[i] -= 2 * h
        down = gate_loss_and_grad(gt.with_flat(t), f, label, pn, pl, regression)[0]
        numeric[i] = (up - down) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-5)
    return float(np.max(np.abs(analytic - numeric) / denom))


def translate(m: ConcordiaModel, problem: LogicProblem) -> dict[int, float]:
    """Neural predictions written onto the neural atoms of every peer."""
    if not m.config.priors:
        return {}
    z: dict[int, float] = {}
    for atom_heads, feats in problem.peers:
        pred = m.predictor.predict(feats)
        if m.config.regression:
            for ids in atom_heads:
                for i in np.asarray(ids, dtype=int):
                    z[int(i)] = float(pred)
            continue
        preds = pred if isinstance(pred, list) else [pred]
        for ids, p in zip(atom_heads, preds):
            ids = np.asarray(ids, dtype=int)
            if len(ids) == 0:
                continue
            if len(ids) != len(p):
                raise ValueError("neural atoms do not match the number of classes")
            for i, v in zip(ids, p):
                z[int(i)] = float(v)
    if problem.peers and not z:
        raise ValueError("priors are on but the problem has no neural atoms")
    return z


def _read_targets(m: ConcordiaModel, inst: Instance, values: np.ndarray):
    """Per-head logic distributions (or the regression value) off a MAP state."""
    if m.config.regression:
        v = float(values[int(np.asarray(inst.targets[0])[0])])
        if np.isnan(v):
            raise ValueError("target atom is outside the inference problem")
        return v, False
    out, degenerate = [], False
    for ids in inst.targets:
        vals = values[np.asarray(ids, dtype=int)]
        if np.isnan(vals).any():
            raise ValueError("target atoms are outside the inference problem")
        total = vals.sum()
        if total <= 0:
            degenerate = True
            out.append(np.full(len(vals), 1.0 / len(vals)))
        else:
            out.append(vals / total)
    return out, degenerate


def _uniform_logic(m: ConcordiaModel, inst: Instance):
    if m.config.regression:
        return 0.5
    return [np.full(k, 1.0 / k) for k in m.config.heads]


def logic_distribution(m: ConcordiaModel, inst: Instance, cache: dict | None = None):
    """Delta_L for ``inst``: MAP under tau(x) (plus the neural priors).

    Returns ``(per-head distributions or value, MapResult or None, z)``.
    ``cache`` keeps warm starts and, for a fixed model, whole results.
    """
    prob = inst.problem
    if prob is None or not m.theory.rules and not prob.graph.constraint_groups:
        return _uniform_logic(m, inst), None, {}
    z = translate(m, prob)
    res = None
    memo_key = ("result", prob.key)
    if cache is not None and cache.get("frozen"):
        res = cache.get(memo_key)
    if res is None:
        warm = cache.get(("warm", prob.key)) if cache is not None else None
        observed = {**prob.observed, **z}
        res = map_infer(prob.graph, m.weights, observed, m.config.solver, free=prob.free, init_values=warm)
        if cache is not None:
            cache[("warm", prob.key)] = res.values
            if cache.get("frozen"):
                cache[memo_key] = res
    dist, _ = _read_targets(m, inst, res.values)
    return dist, res, z


def _argmax(p: np.ndarray) -> int:
    return int(np.argmax(p))  # first maximum, i.e. the lowest class index


def infer_multitask(m: ConcordiaModel, inst: Instance, cache: dict | None = None) -> Prediction:
    """Mixture per task head from one MAP solve; kappa is shared by the heads."""
    pn = m.predictor.predict(inst.features)
    if m.config.use_logic:
        pl, res, _ = logic_distribution(m, inst, cache)
        kappa = gate(m.gate, inst.features)
    else:
        pl, res, kappa = None, None, 1.0
    return _compose(m, pn, pl, kappa, res)


def infer_concordia(m: ConcordiaModel, inst: Instance, cache: dict | None = None) -> Prediction:
    """Single-task inference; iterates as ``(label, distribution, kappa)``."""
    pred = infer_multitask(m, inst, cache)
    if m.config.regression:
        return pred
    if len(pred.dist) != 1:
        raise ValueError("model has several task heads; use infer_multitask")
    return Prediction(pred.label[0], pred.dist[0], pred.kappa, pred.neural[0], pred.logic[0], pred.converged)


def _teacher(m: ConcordiaModel, pl):
    if pl is None:
        return None
    if m.config.regression:
        return float(pl)
    return pl[0] if len(pl) == 1 else pl


def _label_for_predictor(m: ConcordiaModel, label):
    if m.config.regression or label is None:
        return label
    return label[0] if isinstance(label, list) and len(label) == 1 else label


def update_concordia(
    m: ConcordiaModel,
    inst: Instance,
    mode: str = "supervised",
    cache: dict | None = None,
) -> tuple[ConcordiaModel, StepStats]:
    """One joint step on ``inst``.

    The neural predictor distils from the logic distribution at the current
    weights; the rule weights take one MAP-approximate likelihood step; the
    gate fits the label through kappa, with the mixture built from the
    pre-step predictor and weights.  Unsupervised mode only moves the
    predictor, on the KL term alone.
    """
    if mode not in ("supervised", "unsupervised"):
        raise ValueError("mode must be 'supervised' or 'unsupervised'")
    cfg = m.config
    supervised = mode == "supervised"
    if supervised and inst.label is None:
        raise ValueError(f"datum {inst.id} has no label for a supervised step")
    pn = m.predictor.predict(inst.features)
    if cfg.use_logic:
        pl, res, z = logic_distribution(m, inst, cache)
    else:
        pl, res, z = None, None, {}
    label = _label_for_predictor(m, inst.label)
    teacher = _teacher(m, pl)
    n_loss = neural_loss(pn, label, teacher, mode, cfg.task) if (supervised or teacher is not None) else 0.0
    predictor = m.predictor.update(inst.features, label, teacher, cfg.lr_neural, mode) if (supervised or teacher is not None) else m.predictor

    weights = m.weights
    e_truth = float("nan")
    g_loss = float("nan")
    gt = m.gate
    kappa = 1.0
    if supervised and cfg.use_logic:
        prob = inst.problem
        if res is not None and prob is not None and prob.truth:
            truth_vals = _truth_values(m, prob, z, res, cache)
            rows = problem_rows(prob.graph, res)
            e_truth = float(np.dot(m.weights[: len(m.theory.rules)], _pad(rule_potentials(prob.graph, truth_vals, cfg.solver.penalty, rows), len(m.weights))))
            if cfg.lr_logic > 0:
                weights = learn_weights_step(
                    prob.graph, truth_vals, {**prob.observed, **z}, m.weights, cfg.lr_logic, cfg.solver,
                    free=prob.free, learnable=m.theory.learnable_mask(), tie_groups=m.theory.tie_groups(),
                    map_result=res,
                )
        kappa = gate(m.gate, inst.features)
        pn_g = pn if cfg.regression or isinstance(pn, list) else [pn]
        g_loss, grads = gate_loss_and_grad(m.gate, inst.features, inst.label if cfg.regression else _heads(inst.label, m.n_heads), pn_g, pl, cfg.regression)
        gt = m.gate.apply(grads, cfg.lr_gate)
    elif cfg.use_logic:
        kappa = gate(m.gate, inst.features)

    pred = _compose(m, pn, pl, kappa, res)
    new = replace(m, predictor=predictor, weights=weights, gate=gt)
    return new, StepStats(float(n_loss), g_loss, e_truth, pred)


def _pad(g: np.ndarray, n: int) -> np.ndarray:
    return np.pad(g, (0, n - len(g)))


def _compose(m: ConcordiaModel, pn, pl, kappa: float, res: MapResult | None) -> Prediction:
    converged = res.converged if res is not None else True
    if m.config.regression:
        unit = mixture(kappa, pn, pn if pl is None else pl)
        lo, hi = m.config.label_range
        return Prediction(unscale_regression(unit, lo, hi), unit, kappa, float(pn), pl, converged)
    pns = pn if isinstance(pn, list) else [pn]
    pls = pns if pl is None else pl
    dists = [mixture(kappa, a, b) for a, b in zip(pns, pls)]
    return Prediction([_argmax(d) for d in dists], dists, kappa, pns, pls, converged)


def _truth_values(m: ConcordiaModel, prob: LogicProblem, z: dict, res: MapResult, cache: dict | None) -> np.ndarray:
    """tau(xy) completed on the free atoms the labels do not cover.

    Latent atoms (and targets of unlabeled peers) take their MAP value with
    every known label clamped, the usual hard-EM completion.
    """
    observed = {**prob.observed, **z, **prob.truth}
    rest = np.array([i for i in prob.free if int(i) not in prob.truth], dtype=int)
    if len(rest) == 0:
        return interpretation(prob.graph, observed)
    key = ("truth", prob.key)
    warm = cache.get(key) if cache is not None else None
    if warm is None:
        warm = res.values
    tr = map_infer(prob.graph, m.weights, observed, m.config.solver, free=rest, init_values=warm)
    if cache is not None:
        cache[key] = tr.values
    return tr.values


def _metric(task: str, preds: list, labels: list, heads: int) -> float:
    if not preds:
        return float("nan")
    if task == "regression":
        err = np.array(preds, float) - np.array(labels, float)
        return float(np.sqrt(np.mean(err**2)))
    hits = [p == (l if isinstance(l, list) else [l]) for p, l in zip(preds, labels)]
    return float(np.mean(hits))


def train(
    m: ConcordiaModel,
    labeled: Sequence[Instance],
    epochs: int,
    mode: str = "supervised",
    *,
    unlabeled: Sequence[Instance] = (),
    seed: int = 0,
    eval_set: Sequence[Instance] = (),
    eval_fn=None,
) -> tuple[ConcordiaModel, TrainHistory]:
    """Per-example training passes over shuffled data.

    ``supervised`` passes over ``labeled``; ``semi`` runs a supervised pass
    over ``labeled`` then an unsupervised pass over ``unlabeled`` each epoch;
    ``unsupervised`` passes over both without using labels.  The train metric
    of a record is computed from the predictions made right before each update
    (accuracy, or RMSE on the label scale for regression).
    """
    if mode not in TRAIN_MODES:
        raise ValueError(f"mode must be one of {TRAIN_MODES}")
    if epochs < 0:
        raise ValueError("epochs must be nonnegative")
    if mode == "supervised":
        passes = [(list(labeled), "supervised")]
    elif mode == "semi":
        passes = [(list(labeled), "supervised"), (list(unlabeled), "unsupervised")]
    else:
        passes = [(list(labeled) + list(unlabeled), "unsupervised")]
    if epochs > 0 and not any(data for data, _ in passes):
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    history = TrainHistory()
    cache: dict = {}
    lo, hi = m.config.label_range
    for epoch in range(1, epochs + 1):
        n_losses, g_losses, energies, preds, labels = [], [], [], [], []
        updates = 0
        for data, step_mode in passes:
            order = rng.permutation(len(data))
            for k in order:
                inst = data[int(k)]
                m, stats = update_concordia(m, inst, step_mode, cache)
                updates += 1
                n_losses.append(stats.neural_loss)
                if not np.isnan(stats.gate_loss):
                    g_losses.append(stats.gate_loss)
                if not np.isnan(stats.energy_truth):
                    energies.append(stats.energy_truth)
                if inst.label is not None:
                    preds.append(stats.prediction.label)
                    labels.append(unscale_regression(inst.label, lo, hi) if m.config.regression else inst.label)
        rec = EpochRecord(
            epoch=epoch,
            updates=updates,
            neural_loss=float(np.mean(n_losses)) if n_losses else float("nan"),
            gate_loss=float(np.mean(g_losses)) if g_losses else float("nan"),
            energy_truth=float(np.mean(energies)) if energies else float("nan"),
            train_metric=_metric(m.config.task, preds, labels, m.n_heads),
        )
        if eval_fn is not None and eval_set:
            rec.eval_metric = float(eval_fn(m, eval_set))
        history.records.append(rec)
    return m, history


BUNDLE_VERSION = 1


def save_model(m: ConcordiaModel, directory: str | Path) -> None:
    """Write the model bundle: rules, weights, predictor, gate and manifest."""
    if not isinstance(m.predictor, MLP):
        raise TypeError("only the built-in predictor can be saved")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "theory.rules").write_text(format_theory(m.theory) + "\n", encoding="utf-8")
    with open(d / "weights.tsv", "w", encoding="utf-8") as fh:
        fh.write("rule\tweight\n")
        for i, w in enumerate(m.weights):
            fh.write(f"{i}\t{float(w)!r}\n")
    save_predictor(m.predictor, d / "predictor.npz")
    save_predictor(m.gate, d / "gate.npz")
    manifest = {"version": BUNDLE_VERSION, "config": m.config.to_dict()}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(directory: str | Path) -> ConcordiaModel:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {manifest.get('version')}")
    theory = parse_theory((d / "theory.rules").read_text(encoding="utf-8"))
    lines = (d / "weights.tsv").read_text(encoding="utf-8").splitlines()[1:]
    weights = np.array([float(line.split("\t")[1]) for line in lines], dtype=float)
    return ConcordiaModel(
        theory, weights, load_predictor(d / "predictor.npz"), load_predictor(d / "gate.npz"),
        ModelConfig.from_dict(manifest["config"]),
    )
