"""Neural predictors mixed with hinge-loss logic models.

Submodules, bottom up:

``logic``
    rule language: parse, validate, format.
``grounding``
    facts, constants and ground factor graphs.
``psl``
    Lukasiewicz potentials, constrained MAP inference, weight learning.
``boolean``
    exact enumeration over small Boolean bases.
``neural``
    predictor contract and a numpy MLP with a distillation loss.
``model``
    gate, mixture, joint training and model bundles.
``harness``
    datasets, generators, metrics, experiments and the CLI.
"""
from .boolean import enumerate_joint, marginals, mpe
from .grounding import FactSet, GroundFactorGraph, collect_constants, ground_theory, read_facts
from .logic import Theory, format_theory, parse_theory, validate_theory
from .model import (
    ConcordiaModel, ModelConfig, infer_concordia, infer_multitask, load_model, make_model,
    mixture, save_model, scale_regression, train, unscale_regression, update_concordia,
)
from .neural import MLP, init_mlp, kl_divergence
from .psl import SolverOptions, energy, learn_weights_step, map_infer, target_distribution

__version__ = "0.1.0"

__all__ = [
    "parse_theory", "validate_theory", "format_theory", "Theory",
    "FactSet", "GroundFactorGraph", "collect_constants", "ground_theory", "read_facts",
    "SolverOptions", "map_infer", "energy", "target_distribution", "learn_weights_step",
    "enumerate_joint", "marginals", "mpe",
    "MLP", "init_mlp", "kl_divergence",
    "ConcordiaModel", "ModelConfig", "make_model", "mixture", "infer_concordia", "infer_multitask",
    "update_concordia", "train", "scale_regression", "unscale_regression", "save_model", "load_model",
]
