"""Command-line interface: ``concordia <command> [flags]``.

Every command writes its artifacts under ``--out`` (or prints to stdout when
a command has nothing to write) and exits nonzero with a one-line diagnostic
on any error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..boolean import marginals
from ..grounding import FactSet, collect_constants, ground_theory, read_facts
from ..logic import Theory, format_theory, parse_theory, validate_theory
from ..model import load_model, save_model
from ..psl import SolverOptions, map_infer
from .data import DataError, build_instances, load_dataset
from .experiment import (
    ConfigError, TrainSettings, build_model, check_config_keys, fit, load_weights, read_config, rule_text,
    run_experiment, settings_from_sections, subsample, write_history, write_metrics,
)
from .metrics import evaluate, prediction_rows, write_predictions
from .synth import synth_latent_chain, synth_recommend, write_bundle

__all__ = ["main", "build_parser"]


def _shared() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--rules", help="rule file")
    p.add_argument("--facts", help="fact file (TSV)")
    p.add_argument("--data", help="data file (TSV)")
    p.add_argument("--config", help="INI config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--penalty", type=int, choices=(1, 2), default=None)
    p.add_argument("--mode", choices=("supervised", "semi", "unsupervised"), default=None)
    p.add_argument("--priors", choices=("on", "off"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--out", help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    shared = _shared()
    ap = argparse.ArgumentParser(prog="concordia", description="Logic/neural mixture models over PSL-style theories.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("parse", parents=[shared], help="validate a rule file and print it normalised")
    sub.add_parser("ground", parents=[shared], help="ground rules over facts and report sizes")
    p = sub.add_parser("infer", parents=[shared], help="MAP state (or Boolean marginals) of the open atoms")
    p.add_argument("--weights", help="weights file (rule<TAB>weight)")
    p.add_argument("--semantics", choices=("lukasiewicz", "boolean"), default="lukasiewicz")
    sub.add_parser("learn-weights", parents=[shared], help="learn rule weights alone from a labeled dataset")
    sub.add_parser("train", parents=[shared], help="train a model and write its bundle")
    p = sub.add_parser("eval", parents=[shared], help="score a saved model on the test split")
    p.add_argument("--model", required=True, help="model bundle directory")
    p = sub.add_parser("synth-recommend", parents=[shared], help="write a synthetic rating dataset")
    p.add_argument("--n-users", type=int, default=40)
    p.add_argument("--n-items", type=int, default=40)
    p.add_argument("--density", type=float, default=0.5)
    p = sub.add_parser("synth-chain", parents=[shared], help="write a synthetic activity dataset")
    p.add_argument("--n-frames", type=int, default=3)
    p.add_argument("--boxes-per-frame", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--distractors", type=int, default=0)
    p = sub.add_parser("run", parents=[shared], help="run a config-driven experiment")
    p.add_argument("--no-logic", action="store_true", help="ablation: neural predictor only")
    return ap


def _need(args, *names: str) -> None:
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"{args.command} needs {', '.join(missing)}")


def _out(args) -> Path:
    _need(args, "out")
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _theory(args) -> Theory:
    _need(args, "rules")
    return parse_theory(Path(args.rules).read_text(encoding="utf-8"))


def _facts(args, t: Theory) -> FactSet:
    return read_facts(args.facts, t.arities()) if args.facts else FactSet()


def _settings(args) -> TrainSettings:
    s = settings_from_sections(read_config(args.config)) if args.config else TrainSettings()
    upd = {}
    if args.epochs is not None:
        upd["epochs"] = args.epochs
    if args.mode is not None:
        upd["mode"] = args.mode
    if args.priors is not None:
        upd["priors"] = args.priors == "on"
    if args.penalty is not None:
        upd["solver"] = replace(s.solver, penalty=args.penalty)
    return replace(s, **upd)


def _dataset(args, t: Theory):
    _need(args, "data", "config")
    check_config_keys(read_config(args.config))
    return load_dataset(args.data, args.facts, args.config, arities=t.arities())


# ---------------------------------------------------------------- commands

def cmd_parse(args) -> int:
    t = _theory(args)
    report = validate_theory(t)
    print(format_theory(t))
    for issue in report:
        print(f"issue: {issue.message}", file=sys.stderr)
    if args.out:
        (_out(args) / "theory.rules").write_text(format_theory(t) + "\n", encoding="utf-8")
    return 0 if report.ok else 1


def cmd_ground(args) -> int:
    t = _theory(args)
    facts = _facts(args, t)
    g = ground_theory(t, collect_constants(t, facts), facts)
    stats = {
        "atoms": g.n_atoms,
        "observed_atoms": int(g.observed_mask().sum()),
        "ground_rules": len(g.ground_rules),
        "constraint_groups": len(g.constraint_groups),
        "per_rule": [{"rule": rule_text(r), "groundings": int(n)} for r, n in zip(t.rules, g.groundings_per_rule)],
    }
    text = json.dumps(stats, indent=2) + "\n"
    if args.out:
        (_out(args) / "grounding.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_infer(args) -> int:
    t = _theory(args)
    facts = _facts(args, t)
    g = ground_theory(t, collect_constants(t, facts), facts)
    w = load_weights(args.weights, len(t.rules)) if args.weights else t.initial_weights()
    free = g.latent_ids()
    rows = []
    if args.semantics == "boolean":
        probs = marginals(g, w)
        values = np.array([a.value if a.observed else float(probs[a.id]) for a in g.atoms])
        status = {"semantics": "boolean", "free_atoms": int(len(free))}
    else:
        opts = SolverOptions(penalty=args.penalty or 2)
        res = map_infer(g, w, None, opts, free=free)
        values = res.values
        status = {"semantics": "lukasiewicz", "energy": res.energy, "iterations": res.iterations,
                  "converged": res.converged}
    for a in g.atoms:
        rows.append([a.predicate, *a.constants, repr(round(float(values[a.id]), 10)), "observed" if a.observed else "inferred"])
    out = _out(args)
    with open(out / "map.tsv", "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, delimiter="\t", lineterminator="\n").writerows(rows)
    (out / "inference.json").write_text(json.dumps(status, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(status, sort_keys=True))
    return 0


def _train_common(args, settings: TrainSettings):
    t = _theory(args)
    ds = _dataset(args, t)
    seed = args.seed or 0
    labeled = subsample(ds, args.fraction if args.fraction is not None else 1.0, seed)
    inst = build_instances(ds, t, labeled=labeled)
    n_features = len(next(iter(inst.values())).features)
    m = build_model(t, ds, n_features, settings)
    m, hist = fit(m, ds, inst, labeled, settings, seed)
    return t, m, hist


def cmd_learn_weights(args) -> int:
    s = replace(_settings(args), lr_neural=0.0, lr_gate=0.0, priors=False, use_logic=True, mode="supervised")
    t, m, hist = _train_common(args, s)
    out = _out(args)
    with open(out / "weights.tsv", "w", encoding="utf-8") as fh:
        fh.write("rule\tweight\n")
        for i, w in enumerate(m.weights):
            fh.write(f"{i}\t{float(w)!r}\n")
    write_history([(args.fraction or 1.0, "logic", hist)], out / "history.csv")
    for r, w in zip(t.rules, m.weights):
        print(f"{w:8.4f}  {rule_text(r)}")
    return 0


def cmd_train(args) -> int:
    t, m, hist = _train_common(args, _settings(args))
    out = _out(args)
    save_model(m, out / "model")
    write_history([(args.fraction or 1.0, "concordia" if m.config.use_logic else "neural", hist)], out / "history.csv")
    last = hist.records[-1] if hist.records else None
    if last is not None:
        print(f"epochs {len(hist.records)}  train metric {last.train_metric:.4f}")
    return 0


def cmd_eval(args) -> int:
    t = _theory(args) if args.rules else None
    m = load_model(args.model)
    ds = _dataset(args, t or m.theory)
    inst = build_instances(ds, m.theory)
    test = [inst[d.id] for d in ds.data if d.split == "test" and d.label is not None]
    if not test:
        raise DataError("no labeled test data")
    met = evaluate(m, test)
    out = _out(args)
    write_metrics([{"model": "concordia" if m.config.use_logic else "neural", "task": met.task, "n_test": met.n,
                    **{k: v for k, v in met.flat().items() if k != "n"}}], out / "metrics.csv")
    write_predictions(prediction_rows(m, test), out / "predictions.csv")
    for comp, vals in met.components.items():
        print(comp, " ".join(f"{k}={v:.4f}" for k, v in vals.items()))
    return 0


def cmd_synth_recommend(args) -> int:
    b = synth_recommend(args.seed or 0, args.n_users, args.n_items, args.density)
    paths = write_bundle(b, _out(args))
    print(" ".join(str(p) for p in paths.values()))
    return 0


def cmd_synth_chain(args) -> int:
    b = synth_latent_chain(args.seed or 0, args.n_frames, args.boxes_per_frame, args.noise,
                           n_distractors=args.distractors)
    paths = write_bundle(b, _out(args))
    print(" ".join(str(p) for p in paths.values()))
    return 0


def cmd_run(args) -> int:
    _need(args, "config")
    ov: dict = {}
    if args.seed is not None:
        ov["seed"] = args.seed
    if args.fraction is not None:
        ov["fractions"] = (args.fraction,)
    if args.epochs is not None:
        ov["epochs"] = args.epochs
    if args.mode is not None:
        ov["mode"] = args.mode
    if args.priors is not None:
        ov["priors"] = args.priors == "on"
    if args.penalty is not None:
        ov["penalty"] = args.penalty
    if args.no_logic:
        ov["use_logic"] = False
        ov["priors"] = False
    report = run_experiment(args.config, _out(args), overrides=ov)
    sys.stdout.write(report.files["text"].read_text(encoding="utf-8"))
    return 0


COMMANDS = {
    "parse": cmd_parse, "ground": cmd_ground, "infer": cmd_infer, "learn-weights": cmd_learn_weights,
    "train": cmd_train, "eval": cmd_eval, "synth-recommend": cmd_synth_recommend,
    "synth-chain": cmd_synth_chain, "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"concordia {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
