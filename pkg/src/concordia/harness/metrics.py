"""Classification and regression metrics with a per-component breakdown."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..model import ConcordiaModel, Instance, infer_multitask, unscale_regression

__all__ = [
    "Metrics", "accuracy", "macro_prf", "rmse", "score", "evaluate",
    "prediction_rows", "write_predictions", "score_predictions", "COMPONENTS",
]

COMPONENTS = ("mixture", "neural", "logic")


def accuracy(pred: Sequence[int], true: Sequence[int]) -> float:
    if len(true) == 0:
        return float("nan")
    return float(np.mean(np.asarray(pred) == np.asarray(true)))


def macro_prf(pred: Sequence[int], true: Sequence[int]) -> tuple[float, float, float]:
    """Macro precision and recall over the classes seen in either list; F1 is their harmonic mean."""
    pred, true = np.asarray(pred), np.asarray(true)
    if len(true) == 0:
        return float("nan"), float("nan"), float("nan")
    classes = np.union1d(pred, true)
    ps, rs = [], []
    for c in classes:
        tp = np.sum((pred == c) & (true == c))
        n_pred, n_true = np.sum(pred == c), np.sum(true == c)
        ps.append(tp / n_pred if n_pred else 0.0)
        rs.append(tp / n_true if n_true else 0.0)
    p, r = float(np.mean(ps)), float(np.mean(rs))
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def rmse(pred: Sequence[float], true: Sequence[float]) -> float:
    if len(true) == 0:
        return float("nan")
    d = np.asarray(pred, dtype=float) - np.asarray(true, dtype=float)
    return float(np.sqrt(np.mean(d * d)))


def score(task: str, pred: Sequence, true: Sequence) -> dict[str, float]:
    if task == "regression":
        return {"rmse": rmse(pred, true)}
    p, r, f1 = macro_prf(pred, true)
    return {"accuracy": accuracy(pred, true), "precision": p, "recall": r, "f1": f1}


@dataclass
class Metrics:
    task: str
    n: int
    components: dict[str, dict[str, float]] = field(default_factory=dict)
    mean_kappa: float = float("nan")
    nonconverged: int = 0

    def __getitem__(self, component: str) -> dict[str, float]:
        return self.components[component]

    def flat(self) -> dict[str, float]:
        out: dict[str, float] = {"n": self.n}
        for comp in COMPONENTS:
            for k, v in self.components.get(comp, {}).items():
                out[f"{comp}_{k}"] = v
        out["mean_kappa"] = self.mean_kappa
        out["nonconverged"] = self.nonconverged
        return out


def prediction_rows(m: ConcordiaModel, instances: Sequence[Instance]) -> list[dict]:
    """Per-datum label and the mixture, neural-alone and logic-alone predictions.

    Regression values are on the label scale; classification values are class
    indices of the first task head.
    """
    cache: dict = {"frozen": True}
    lo, hi = m.config.label_range
    rows = []
    for inst in instances:
        p = infer_multitask(m, inst, cache)
        if m.config.regression:
            label = unscale_regression(inst.label, lo, hi) if inst.label is not None else None
            neural = unscale_regression(p.neural, lo, hi)
            logic = unscale_regression(p.logic, lo, hi) if p.logic is not None else float("nan")
            mix = p.label
        else:
            label = inst.label[0] if isinstance(inst.label, list) else inst.label
            neural = int(np.argmax(p.neural[0]))
            logic = int(np.argmax(p.logic[0])) if p.logic is not None and m.config.use_logic else -1
            mix = p.label[0]
        rows.append({"id": inst.id, "label": label, "mixture": mix, "neural": neural,
                     "logic": logic, "kappa": p.kappa, "converged": p.converged})
    return rows


def evaluate(m: ConcordiaModel, instances: Sequence[Instance]) -> Metrics:
    """Mixture, neural-alone and logic-alone scores on labeled ``instances``."""
    rows = [r for r in prediction_rows(m, instances) if r["label"] is not None]
    task = m.config.task
    true = [r["label"] for r in rows]
    comps = {}
    for comp in COMPONENTS:
        if comp == "logic" and not m.config.use_logic:
            comps[comp] = {k: float("nan") for k in score(task, [0], [0])}
            continue
        comps[comp] = score(task, [r[comp] for r in rows], true)
    kappas = [r["kappa"] for r in rows]
    return Metrics(task, len(rows), comps, float(np.mean(kappas)) if kappas else float("nan"),
                   sum(1 for r in rows if not r["converged"]))


def write_predictions(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "mixture", "neural", "logic", "kappa"])
        for r in rows:
            w.writerow([r["id"], r["label"], repr(r["mixture"]), repr(r["neural"]), repr(r["logic"]), repr(r["kappa"])])


def score_predictions(path: str | Path, task: str) -> dict[str, dict[str, float]]:
    """Score a dumped predictions file with plain arithmetic (no numpy)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader(fh) if r["label"] not in ("", "None")]
    out = {}
    for comp in COMPONENTS:
        if task == "regression":
            errs = [(float(r[comp]) - float(r["label"])) ** 2 for r in rows]
            out[comp] = {"rmse": (sum(errs) / len(errs)) ** 0.5}
        else:
            pairs = [(int(r[comp]), int(r["label"])) for r in rows]
            out[comp] = {"accuracy": sum(p == t for p, t in pairs) / len(pairs)}
    return out
