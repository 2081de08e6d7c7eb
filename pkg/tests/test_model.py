import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from concordia.harness.data import build_instances
from concordia.harness.metrics import evaluate
from concordia.harness.synth import synth_latent_chain
from concordia.logic import parse_theory
from concordia.model import (
    KAPPA_CLIP, Instance, LogicProblem, ModelConfig, gate, gate_grad_check, gate_loss_and_grad, infer_concordia,
    infer_multitask, load_model, logic_distribution, make_model, mixture, save_model, scale_regression, train,
    translate, unscale_regression, update_concordia,
)
from concordia.neural import MLP, init_mlp
from concordia.psl import SolverOptions

from graphs import ground_text
from oracles import central_diff, mlp_forward

FAST = SolverOptions(tol=1e-4)


@pytest.fixture(scope="module")
def chain():
    b = synth_latent_chain(0)
    inst = build_instances(b.dataset, b.theory)
    train_set = [inst[d.id] for d in b.dataset.data if d.split == "train"]
    test_set = [inst[d.id] for d in b.dataset.data if d.split == "test"]
    return b, train_set, test_set


def chain_model(b, priors=False, **kw):
    cfg = ModelConfig(heads=(4,), priors=priors, neural_predicate="Dnn", solver=FAST, **kw)
    return make_model(b.theory, init_mlp((4, 16, 4), seed=0), cfg)


# ----------------------------------------------------------------- mixture

def test_mixture_examples():
    assert np.array_equal(mixture(1.0, [0.8, 0.2], [0.1, 0.9]), [0.8, 0.2])
    assert np.array_equal(mixture(0.0, [0.8, 0.2], [0.1, 0.9]), [0.1, 0.9])
    assert np.allclose(mixture(0.5, [0.8, 0.2], [0.2, 0.8]), [0.5, 0.5])
    assert np.allclose(mixture(0.3, [1, 0], [0, 1]), [0.3, 0.7])
    assert mixture(0.25, 0.8, 0.4) == pytest.approx(0.5)


def test_mixture_rejects_bad_input():
    with pytest.raises(ValueError, match="arity"):
        mixture(0.5, [0.5, 0.5], [1 / 3] * 3)
    with pytest.raises(ValueError):
        mixture(1.5, [0.5, 0.5], [0.5, 0.5])


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.integers(2, 6), st.integers(0, 2**31))
def test_mixture_is_a_distribution(kappa, n, seed):
    rng = np.random.default_rng(seed)
    pn, pl = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    out = mixture(kappa, pn, pl)
    assert out.sum() == pytest.approx(1.0, abs=1e-9) and np.all((out >= 0) & (out <= 1))


def test_mixture_of_equal_inputs_is_that_input():
    p = np.array([0.1, 0.6, 0.3])
    for k in (0.0, 0.37, 1.0):
        assert np.allclose(mixture(k, p, p), p, atol=1e-15)


# -------------------------------------------------------------------- gate

def test_zero_gate_is_one_half():
    gt = init_mlp((3, 8, 1), output="sigmoid", seed=0)
    assert gate(gt.with_flat(np.zeros(len(gt.flat()))), np.ones(3)) == 0.5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3), st.integers(0, 1000))
def test_gate_stays_inside_unit_interval(x, seed):
    k = gate(init_mlp((3, 8, 1), output="sigmoid", seed=seed), np.array(x))
    assert 0 < k < 1 and KAPPA_CLIP <= k <= 1 - KAPPA_CLIP


def _gate_oracle_loss(gt: MLP, x, label, pn, pl, regression):
    kappa = mlp_forward([W.tolist() for W in gt.weights], [b.tolist() for b in gt.biases], x, "sigmoid")
    if regression:
        return (kappa * pn + (1 - kappa) * pl - label) ** 2
    return -math.log(kappa * pn[label] + (1 - kappa) * pl[label])


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("regression", [False, True])
def test_gate_gradient_matches_independent_differences(seed, regression):
    rng = np.random.default_rng(seed)
    gt = init_mlp((3, 8, 1), output="sigmoid", seed=seed)
    x = rng.normal(size=3)
    if regression:
        label, pn, pl = float(rng.random()), float(rng.random()), float(rng.random())
        args = (label, pn, pl)
    else:
        label, pn, pl = 1, rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
        args = (label, [pn], [pl])
    _, grads = gate_loss_and_grad(gt, x, *args, regression)
    analytic = np.concatenate([a.ravel() for gW, gb in grads for a in (gW, gb)])
    numeric = central_diff(lambda t: _gate_oracle_loss(gt.with_flat(t), list(x), label, pn, pl, regression), gt.flat())
    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-5)
    assert err.max() < 1e-4
    assert gate_grad_check(gt, x, *args, regression) < 1e-4


# --------------------------------------------------------------- translate

def _prior_problem(n_classes):
    text = "predicate: Dnn/2 query .\npredicate: Cls/2 open .\nLEARN :: Dnn(O, C) -> Cls(O, C) .\n" \
           "constraint: Cls(O, +C) = 1 ."
    classes = [f"c{i}" for i in range(n_classes)]
    queries = [("Dnn", ("o", c)) for c in classes] + [("Cls", ("o", c)) for c in classes]
    t, g = ground_text(text, queries=queries)
    dnn = np.array([g.atom_id("Dnn", ("o", c)) for c in classes])
    cls = np.array([g.atom_id("Cls", ("o", c)) for c in classes])
    return t, g, dnn, cls


def _fixed_predictor(probs):
    """Zero-weight softmax net whose biases are the log-probabilities."""
    n = len(probs)
    net = init_mlp((2, n), seed=0)
    return net.with_flat(np.concatenate([np.zeros(2 * n), np.log(probs)]))


def test_translate_copies_neural_predictions():
    t, g, dnn, cls = _prior_problem(2)
    prob = LogicProblem("o", g, {}, cls, peers=[([dnn], np.zeros(2))])
    m = make_model(t, _fixed_predictor([0.7, 0.3]), ModelConfig(heads=(2,), priors=True, neural_predicate="Dnn"))
    z = translate(m, prob)
    assert z == pytest.approx({int(dnn[0]): 0.7, int(dnn[1]): 0.3})


def test_translate_uniform_four_classes():
    t, g, dnn, cls = _prior_problem(4)
    prob = LogicProblem("o", g, {}, cls, peers=[([dnn], np.zeros(2))])
    m = make_model(t, _fixed_predictor([0.25] * 4), ModelConfig(heads=(4,), priors=True, neural_predicate="Dnn"))
    assert np.allclose(list(translate(m, prob).values()), 0.25)


def test_translate_regression_value():
    text = "predicate: Dnn/2 query .\npredicate: Rates/2 open .\n1 :: Dnn(U, I) -> Rates(U, I) ."
    t, g = ground_text(text, queries=[("Dnn", ("u", "i")), ("Rates", ("u", "i"))])
    d = g.atom_id("Dnn", ("u", "i"))
    reg = init_mlp((2, 1), output="sigmoid", seed=0).with_flat(np.zeros(3))
    m = make_model(t, reg, ModelConfig(task="regression", heads=(), priors=True, neural_predicate="Dnn"))
    prob = LogicProblem("u", g, {}, np.array([g.atom_id("Rates", ("u", "i"))]), peers=[([np.array([d])], np.zeros(2))])
    assert translate(m, prob) == {d: 0.5}


def test_priors_need_declared_neural_predicate():
    t = parse_theory("1 :: P(X) -> Q(X) .")
    with pytest.raises(ValueError, match="neural predicate"):
        make_model(t, init_mlp((2, 2), seed=0), ModelConfig(priors=True, neural_predicate="Dnn"))


def test_prediction_composes_three_calls():
    t, g, dnn, cls = _prior_problem(3)
    prob = LogicProblem("o", g, {}, cls, peers=[([dnn], np.zeros(2))])
    inst = Instance("o", np.array([0.3, -0.4]), 2, prob, [cls])
    m = make_model(t, _fixed_predictor([0.5, 0.2, 0.3]), ModelConfig(heads=(3,), priors=True, neural_predicate="Dnn"))
    pn = m.predictor.predict(inst.features)
    pl, _, _ = logic_distribution(m, inst)
    kappa = gate(m.gate, inst.features)
    label, dist, k = infer_concordia(m, inst)
    assert k == kappa
    assert np.allclose(dist, kappa * pn + (1 - kappa) * pl[0], atol=1e-15)
    assert label == int(np.argmax(kappa * pn + (1 - kappa) * pl[0]))
    # the prior rule pulls the logic towards the neural prediction
    assert int(np.argmax(pl[0])) == 0


# ------------------------------------------------------------------ update

def test_neural_update_uses_pre_step_teacher(chain):
    b, tr, _ = chain
    m = chain_model(b, priors=True)
    inst = tr[0]
    pl, _, _ = logic_distribution(m, inst)
    want = m.predictor.update(inst.features, inst.label, pl[0], m.config.lr_neural)
    new, _ = update_concordia(m, inst)
    assert new.predictor == want
    assert not np.array_equal(new.weights, m.weights)


def test_zero_learning_rates_leave_model_unchanged(chain):
    b, tr, _ = chain
    m = chain_model(b, priors=True, lr_neural=0.0, lr_logic=0.0, lr_gate=0.0)
    new, _ = update_concordia(m, tr[0])
    assert new.predictor == m.predictor and new.gate == m.gate and np.array_equal(new.weights, m.weights)


def test_unsupervised_step_moves_only_the_predictor(chain):
    b, tr, _ = chain
    m = chain_model(b)
    new, stats = update_concordia(m, tr[0], "unsupervised")
    assert new.gate == m.gate and new.weights.tobytes() == m.weights.tobytes()
    assert new.predictor != m.predictor and math.isnan(stats.gate_loss)


def test_supervised_step_needs_label(chain):
    b, tr, _ = chain
    with pytest.raises(ValueError, match="label"):
        update_concordia(chain_model(b), replace(tr[0], label=None))


# ------------------------------------------------------------------- train

def test_zero_epochs_is_a_no_op(chain):
    b, tr, _ = chain
    m = chain_model(b)
    new, hist = train(m, tr, 0)
    assert new is m and len(hist) == 0


def test_empty_dataset_is_an_error(chain):
    b, _, _ = chain
    with pytest.raises(ValueError, match="empty"):
        train(chain_model(b), [], 1)


def test_semi_supervised_update_count(chain):
    b, tr, _ = chain
    lab, unl = tr[:7], [replace(i, label=None) for i in tr[7:12]]
    _, hist = train(chain_model(b), lab, 2, "semi", unlabeled=unl)
    assert [r.updates for r in hist.records] == [12, 12]


def test_supervised_training_improves_accuracy(chain):
    b, tr, te = chain
    m = chain_model(b, lr_logic=0.0)
    before = evaluate(m, te)["mixture"]["accuracy"]
    m, hist = train(m, tr, 15, seed=0)
    assert len(hist) == 15
    assert evaluate(m, te)["mixture"]["accuracy"] > before


def test_training_is_deterministic(chain):
    b, tr, _ = chain
    a, ha = train(chain_model(b), tr[:20], 2, seed=4)
    c, hc = train(chain_model(b), tr[:20], 2, seed=4)
    assert a.predictor == c.predictor and a.gate == c.gate and np.array_equal(a.weights, c.weights)
    assert ha.rows() == hc.rows()


def test_saturated_gate_with_empty_theory_equals_neural(chain):
    b, _, te = chain
    net = init_mlp((4, 16, 4), seed=3)
    m = make_model(parse_theory(""), net, ModelConfig(heads=(4,)))
    gt = m.gate.with_flat(np.concatenate([m.gate.flat()[:-1], [60.0]]))
    m = replace(m, gate=gt)
    bare = [Instance(i.id, i.features, i.label) for i in te]
    for inst in bare:
        pred = infer_concordia(m, inst)
        assert pred.label == int(np.argmax(net.predict(inst.features)))
    met = evaluate(m, bare)
    assert met["mixture"]["accuracy"] == met["neural"]["accuracy"]


# --------------------------------------------------------------- multitask

MULTI = """predicate: Obj/1 closed .
predicate: F1/1 closed .
predicate: F2/1 closed .
predicate: A/2 open .
predicate: B/2 open .
2 :: F1(O) -> A(O, a1) .
1 :: Obj(O) -> A(O, a0) .
1.5 :: F2(O) -> B(O, b0) .
0.5 :: Obj(O) -> B(O, b1) .
constraint: A(O, +C) = 1 .
constraint: B(O, +C) = 1 .
"""


def _task(text, facts):
    t, g = ground_text(text, facts)
    return t, g


def test_independent_heads_match_single_task_runs():
    facts = [("Obj", ("o",), 1.0), ("F1", ("o",), 0.8), ("F2", ("o",), 0.6)]
    t, g = _task(MULTI, facts)
    a_ids = np.array([g.atom_id("A", ("o", c)) for c in ("a0", "a1")])
    b_ids = np.array([g.atom_id("B", ("o", c)) for c in ("b0", "b1")])
    x = np.array([0.2, -0.1, 0.5])
    net = init_mlp((3, 5, 4), heads=(2, 2), seed=2)
    m = make_model(t, net, ModelConfig(heads=(2, 2)))
    inst = Instance("o", x, [0, 1], LogicProblem("o", g, {}, g.latent_ids()), [a_ids, b_ids])
    multi = infer_multitask(m, inst)
    assert len(multi.dist) == 2

    lines = MULTI.splitlines()
    for h, (keep, pred, cls) in enumerate([((5, 6, 9), "A", ("a0", "a1")), ((7, 8, 10), "B", ("b0", "b1"))]):
        text = "\n".join(lines[:5] + [lines[k] for k in keep])
        ts, gs = _task(text, facts)
        ids = np.array([gs.atom_id(pred, ("o", c)) for c in cls])
        cols = slice(2 * h, 2 * h + 2)
        single_net = MLP((net.weights[0], net.weights[1][:, cols]), (net.biases[0], net.biases[1][cols]), heads=(2,))
        ms = make_model(ts, single_net, ModelConfig(heads=(2,)))
        s = infer_concordia(ms, Instance("o", x, h, LogicProblem("o", gs, {}, gs.latent_ids()), [ids]))
        assert s.kappa == multi.kappa
        assert np.allclose(s.dist, multi.dist[h], atol=1e-6)
        assert s.label == multi.label[h]


def test_single_task_multitask_wraps_single():
    facts = [("Obj", ("o",), 1.0), ("F1", ("o",), 0.8)]
    text = "\n".join(MULTI.splitlines()[:5] + MULTI.splitlines()[5:7] + [MULTI.splitlines()[9]])
    t, g = _task(text, facts)
    ids = np.array([g.atom_id("A", ("o", c)) for c in ("a0", "a1")])
    m = make_model(t, init_mlp((3, 2), seed=1), ModelConfig(heads=(2,)))
    inst = Instance("o", np.ones(3), 0, LogicProblem("o", g, {}, g.latent_ids()), [ids])
    a, b = infer_multitask(m, inst), infer_concordia(m, inst)
    assert a.label == [b.label] and np.array_equal(a.dist[0], b.dist)


# -------------------------------------------------------------- regression

def test_regression_scaling():
    assert scale_regression(3, 1, 5) == 0.5
    assert scale_regression(1, 1, 5) == 0.0 and scale_regression(5, 1, 5) == 1.0
    with pytest.raises(ValueError):
        scale_regression(3, 5, 5)


@settings(max_examples=100, deadline=None)
@given(st.floats(-100, 100), st.floats(-50, 50), st.floats(0.1, 50))
def test_unscale_inverts_scale(v, lo, width):
    hi = lo + width
    assert unscale_regression(scale_regression(v, lo, hi), lo, hi) == pytest.approx(v, abs=1e-9)


# ------------------------------------------------------------------ bundle

def test_bundle_round_trip(chain, tmp_path):
    b, tr, te = chain
    m, _ = train(chain_model(b, priors=True), tr[:10], 1)
    save_model(m, tmp_path / "bundle")
    back = load_model(tmp_path / "bundle")
    assert back.predictor == m.predictor and back.gate == m.gate and np.array_equal(back.weights, m.weights)
    assert back.config == m.config
    for inst in te[:5]:
        p, q = infer_concordia(m, inst), infer_concordia(back, inst)
        assert p.label == q.label and np.array_equal(p.dist, q.dist)
