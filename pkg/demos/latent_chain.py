"""
Training the mixture on the latent activity chain
=================================================

Each scene has a few boxes in a few frames.  A box's activity can be read
from noisy features, and rules propagate it across frames and across close
boxes.  We train the neural predictor, the rule weights and the gate
together, then look at each component's test accuracy.
"""
import numpy as np

from concordia.harness.data import build_instances
from concordia.harness.experiment import rule_text
from concordia.harness.metrics import evaluate
from concordia.harness.synth import synth_latent_chain
from concordia.model import ModelConfig, make_model, train
from concordia.neural import init_mlp
from concordia.psl import SolverOptions

bundle = synth_latent_chain(0, n_distractors=2)
inst = build_instances(bundle.dataset, bundle.theory)
train_set = [inst[d.id] for d in bundle.dataset.data if d.split == "train" and d.label is not None]
test_set = [inst[d.id] for d in bundle.dataset.data if d.split == "test" and d.label is not None]
print(f"{len(train_set)} training and {len(test_set)} test examples")

cfg = ModelConfig(heads=(4,), neural_predicate="Dnn", priors=True, solver=SolverOptions(tol=1e-4))
model = make_model(bundle.theory, init_mlp((len(train_set[0].features), 16, 4), seed=0), cfg)


def show(tag, m):
    met = evaluate(m, test_set)
    print(tag, "  ".join(f"{k}={met[k]['accuracy']:.3f}" for k in ("mixture", "neural", "logic")))


show("before:", model)
model, hist = train(model, train_set, 10, seed=0)
show("after: ", model)

# learned weights; the last two rules are distractors
for r, w in zip(bundle.theory.rules, np.round(model.weights, 3)):
    print(f"{w:7.3f}  {rule_text(r)}")
