"""Neural component: a small numpy MLP with hand-written backprop and the
distillation objective (supervised loss plus KL to the logic teacher)."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

__all__ = [
    "MLP", "Predictor", "init_mlp", "predict", "loss", "update_neural", "grad_check",
    "softmax", "kl_divergence", "bernoulli_kl", "save_predictor", "load_predictor",
    "KL_EPS", "CHECKPOINT_VERSION",
]

KL_EPS = 1e-6
CHECKPOINT_VERSION = 1
MODES = ("supervised", "unsupervised")


@runtime_checkable
class Predictor(Protocol):
    """What the integration layer needs from a neural component."""

    task: str
    heads: tuple[int, ...]

    def predict(self, x: np.ndarray): ...

    def update(self, x: np.ndarray, label, teacher, lr: float, mode: str = "supervised") -> "Predictor": ...


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def _smooth(p: np.ndarray, eps: float) -> np.ndarray:
    return (1.0 - eps) * p + eps / len(p)


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = KL_EPS) -> float:
    """KL(p || q) after mixing both with the uniform distribution at weight ``eps``."""
    p, q = _smooth(np.asarray(p, float), eps), _smooth(np.asarray(q, float), eps)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def bernoulli_kl(p: float, q: float, eps: float = KL_EPS) -> float:
    return kl_divergence(np.array([p, 1.0 - p]), np.array([q, 1.0 - q]), eps)


@dataclass(frozen=True)
class MLP:
    """Fully connected tanh network.

    ``output`` is ``"softmax"`` (one softmax per entry of ``heads``) or
    ``"sigmoid"`` (a single unit in (0, 1), used for regression and gating).
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    output: str = "softmax"
    heads: tuple[int, ...] = ()

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    @property
    def task(self) -> str:
        return "classification" if self.output == "softmax" else "regression"

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.widths[0],):
            raise ValueError(f"input width {x.shape} does not match the network's {self.widths[0]}")
        return x

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Output pre-activations and the cached layer inputs."""
        a = self._check(x)
        acts = [a]
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            if k < last:
                a = np.tanh(z)
                acts.append(a)
        return z, acts

    def _split(self, z: np.ndarray) -> list[np.ndarray]:
        return np.split(z, np.cumsum(self.heads)[:-1])

    def predict(self, x: np.ndarray):
        z, _ = self.forward(x)
        if self.output == "sigmoid":
            return _sigmoid(z[0])
        probs = [softmax(zh) for zh in self._split(z)]
        return probs[0] if len(probs) == 1 else probs

    def backward(self, acts: list[np.ndarray], dz: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        grads = []
        delta = dz
        for k in range(len(self.weights) - 1, -1, -1):
            grads.append((np.outer(acts[k], delta), delta.copy()))
            if k > 0:
                delta = (self.weights[k] @ delta) * (1.0 - acts[k] ** 2)
        return grads[::-1]

    def loss_and_grad(self, x, label, teacher, mode: str = "supervised"):
        """Value and parameter gradients of the distillation objective.

        ``teacher`` of ``None`` drops the KL term; unsupervised mode drops the
        supervised term.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        z, acts = self.forward(x)
        total = 0.0
        if self.output == "sigmoid":
            y = _sigmoid(z[0])
            dy = 0.0
            if mode == "supervised":
                total += (y - float(label)) ** 2
                dy += 2.0 * (y - float(label))
            if teacher is not None:
                p = np.array([y, 1 - y])
                q = np.array([float(teacher), 1 - float(teacher)])
                total += kl_divergence(p, q)
                ps, qs = _smooth(p, KL_EPS), _smooth(q, KL_EPS)
                dy += (1 - KL_EPS) * (np.log(ps[0] / qs[0]) - np.log(ps[1] / qs[1]))
            dz = np.array([dy * y * (1 - y)])
        else:
            labels = _as_heads(label, len(self.heads))
            teachers = _as_heads(teacher, len(self.heads)) if teacher is not None else None
            dzs = []
            for h, zh in enumerate(self._split(z)):
                p = softmax(zh)
                dzh = np.zeros_like(p)
                if mode == "supervised":
                    y = int(labels[h])
                    lse = zh.max() + np.log(np.exp(zh - zh.max()).sum())
                    total += lse - zh[y]
                    dzh += p
                    dzh[y] -= 1.0
                if teachers is not None:
                    q = np.asarray(teachers[h], float)
                    total += kl_divergence(p, q)
                    ps, qs = _smooth(p, KL_EPS), _smooth(q, KL_EPS)
                    g = (1 - KL_EPS) * (np.log(ps) - np.log(qs) + 1.0)
                    dzh += p * (g - p @ g)
                dzs.append(dzh)
            dz = np.concatenate(dzs)
        return float(total), self.backward(acts, dz)

    def apply(self, grads, lr: float) -> "MLP":
        if lr == 0:
            return self
        return replace(
            self,
            weights=tuple(W - lr * gW for W, (gW, _) in zip(self.weights, grads)),
            biases=tuple(b - lr * gb for b, (_, gb) in zip(self.biases, grads)),
        )

    def update(self, x, label, teacher, lr: float, mode: str = "supervised") -> "MLP":
        _, grads = self.loss_and_grad(x, label, teacher, mode)
        return self.apply(grads, lr)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for W, b in zip(self.weights, self.biases) for a in (W, b)])

    def with_flat(self, theta: np.ndarray) -> "MLP":
        ws, bs, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            ws.append(theta[k : k + W.size].reshape(W.shape))
            k += W.size
            bs.append(theta[k : k + b.size].copy())
            k += b.size
        return replace(self, weights=tuple(ws), biases=tuple(bs))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MLP):
            return NotImplemented
        return (
            self.output == other.output
            and self.heads == other.heads
            and len(self.weights) == len(other.weights)
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    __hash__ = None


def _as_heads(value, n: int) -> list:
    if n == 1 and not (isinstance(value, (list, tuple)) and len(value) == 1):
        return [value]
    if len(value) != n:
        raise ValueError(f"expected {n} heads, got {len(value)}")
    return list(value)


def init_mlp(
    widths: Sequence[int],
    *,
    output: str = "softmax",
    heads: Sequence[int] | None = None,
    seed: int | np.random.Generator = 0,
) -> MLP:
    """Xavier-uniform weights, zero biases."""
    if output not in ("softmax", "sigmoid"):
        raise ValueError("output must be 'softmax' or 'sigmoid'")
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    if output == "sigmoid":
        if widths[-1] != 1:
            raise ValueError("a sigmoid output has width 1")
        heads = ()
    else:
        heads = tuple(heads) if heads else (widths[-1],)
        if sum(heads) != widths[-1]:
            raise ValueError("head sizes must add up to the output width")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLP(tuple(weights), tuple(biases), output, heads)


def predict(p: MLP, f: np.ndarray):
    return p.predict(f)


def loss(pred, label, teacher, mode: str = "supervised", task: str = "classification") -> float:
    """Distillation objective evaluated on distributions.

    Classification: cross-entropy plus KL(pred || teacher) per head.
    Regression: squared error plus the KL between Bernoulli(pred) and
    Bernoulli(teacher).  Unsupervised mode keeps the KL term only.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if task == "regression":
        total = (float(pred) - float(label)) ** 2 if mode == "supervised" else 0.0
        if teacher is not None:
            total += bernoulli_kl(float(pred), float(teacher))
        return total
    multi = isinstance(pred, (list, tuple))
    preds = list(pred) if multi else [pred]
    labels = list(label) if multi and mode == "supervised" else [label]
    teachers = (list(teacher) if multi else [teacher]) if teacher is not None else None
    total = 0.0
    for h, p in enumerate(preds):
        p = np.asarray(p, float)
        if mode == "supervised":
            total += -np.log(max(p[int(labels[h])], np.finfo(float).tiny))
        if teachers is not None:
            total += kl_divergence(p, teachers[h])
    return float(total)


def update_neural(p: Predictor, f: np.ndarray, label, teacher, lr: float, mode: str = "supervised") -> Predictor:
    return p.update(f, label, teacher, lr, mode)


def grad_check(p: MLP, f: np.ndarray, label, teacher, mode: str = "supervised", h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    The relative error of each parameter is ``|a - n| / max(|a|, |n|, 1e-5)``.
    """
    f = p._check(f)
    _, grads = p.loss_and_grad(f, label, teacher, mode)
    analytic = np.concatenate([a.ravel() for gW, gb in grads for a in (gW, gb)])
    theta = p.flat()
    numeric = np.empty_like(theta)
    for i in range(len(theta)):
        t = theta.copy()
        t[i] += h
        up = p.with_flat(t).loss_and_grad(f, label, teacher, mode)[0]
        t[i] -= 2 * h
        down = p.with_flat(t).loss_and_grad(f, label, teacher, mode)[0]
        numeric[i] = (up - down) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-5)
    return float(np.max(np.abs(analytic - numeric) / denom)) if len(theta) else 0.0


def save_predictor(p: MLP, path: str | Path) -> None:
    meta = {"version": CHECKPOINT_VERSION, "widths": list(p.widths), "output": p.output, "heads": list(p.heads)}
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for k, (W, b) in enumerate(zip(p.weights, p.biases)):
        arrays[f"W{k}"] = W
        arrays[f"b{k}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_predictor(path: str | Path) -> MLP:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        n = len(meta["widths"]) - 1
        weights = tuple(data[f"W{k}"].copy() for k in range(n))
        biases = tuple(data[f"b{k}"].copy() for k in range(n))
    return MLP(weights, biases, meta["output"], tuple(meta["heads"]))
