"""Seeded synthetic datasets: a rating task and a latent-chain activity task."""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..grounding import FactSet
from ..logic import Theory, parse_theory
from .data import Dataset, Datum, FeatureSpec, MappingConfig, Template, write_data, write_fact_file

__all__ = [
    "SynthBundle", "synth_recommend", "synth_latent_chain", "write_bundle",
    "recommend_theory_text", "chain_theory_text", "ACTIVITIES",
]

ACTIVITIES = ("crossing", "waiting", "queuing", "walking", "talking", "dancing", "jogging", "idle")


@dataclass
class SynthBundle:
    dataset: Dataset
    theory: Theory
    theory_text: str
    info: dict


def _split(rng: np.random.Generator, n: int, test_fraction: float) -> np.ndarray:
    """Boolean test mask with round(n * test_fraction) entries set."""
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[: int(round(n * test_fraction))]] = True
    return mask


def recommend_theory_text() -> str:
    return "\n".join([
        "# ratings of similar items and of similar users agree",
        "predicate: Rates/2 query .",
        "predicate: Dnn/2 query .",
        "predicate: SimItem/2 closed .",
        "predicate: SimUser/2 closed .",
        "predicate: AvgUser/2 closed .",
        "predicate: AvgItem/2 closed .",
        "LEARN :: SimItem(I1, I2) & Rates(U, I1) -> Rates(U, I2) .",
        "LEARN :: SimItem(I1, I2) & Rates(U, I2) -> Rates(U, I1) .",
        "LEARN :: SimUser(U1, U2) & Rates(U1, I) -> Rates(U2, I) .",
        "LEARN :: SimUser(U1, U2) & Rates(U2, I) -> Rates(U1, I) .",
        "LEARN :: AvgUser(U, I) <-> Rates(U, I) .",
        "LEARN :: AvgItem(U, I) <-> Rates(U, I) .",
        "LEARN :: Dnn(U, I) <-> Rates(U, I) .",
    ]) + "\n"


def _top_k(latent: np.ndarray, k: int) -> list[tuple[int, int]]:
    unit = latent / np.linalg.norm(latent, axis=1, keepdims=True)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    pairs = []
    for a in range(len(latent)):
        for b in np.argsort(-sim[a], kind="stable")[:k]:
            pairs.append((a, int(b)))
    return pairs


def synth_recommend(
    seed: int,
    n_users: int = 40,
    n_items: int = 40,
    density: float = 0.5,
    *,
    rank: int = 3,
    k_sim: int = 5,
    history_fraction: float = 0.3,
    test_fraction: float = 0.25,
    noise: float = 0.3,
    bias_scale: float = 0.6,
    interaction: float = 0.45,
) -> SynthBundle:
    """Ratings in [1, 5] from latent user/item factors.

    Part of the observed ratings becomes history facts that the rules can
    read; the rest are train and test data.  Similarity facts mark each
    user's (item's) ``k_sim`` nearest neighbours by latent cosine.
    """
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(n_users, rank))
    V = rng.normal(size=(n_items, rank))
    bu = rng.normal(scale=bias_scale, size=n_users)
    bi = rng.normal(scale=bias_scale, size=n_items)
    raw = 3.0 + bu[:, None] + bi[None, :] + interaction * (U @ V.T) + rng.normal(scale=noise, size=(n_users, n_items))
    ratings = np.clip(np.rint(raw), 1, 5)
    observed = np.argwhere(rng.random((n_users, n_items)) < density)
    users = [f"u{i}" for i in range(n_users)]
    items = [f"i{j}" for j in range(n_items)]

    order = rng.permutation(len(observed))
    n_hist = int(round(len(observed) * history_fraction))
    hist = observed[np.sort(order[:n_hist])]
    rest = observed[np.sort(order[n_hist:])]
    test = _split(rng, len(rest), test_fraction)

    unit = (ratings - 1.0) / 4.0
    facts = FactSet()
    for u, i in hist:
        facts.add("Rates", (users[u], items[i]), float(unit[u, i]))
    for a, b in _top_k(V, min(k_sim, n_items - 1)) if n_items > 1 else []:
        facts.add("SimItem", (items[a], items[b]), 1.0)
    for a, b in _top_k(U, min(k_sim, n_users - 1)) if n_users > 1 else []:
        facts.add("SimUser", (users[a], users[b]), 1.0)
    global_mean = float(unit[tuple(hist.T)].mean()) if len(hist) else 0.5
    user_mean, item_mean = {}, {}
    for u in range(n_users):
        vals = [unit[u, i] for uu, i in hist if uu == u]
        user_mean[u] = float(np.mean(vals)) if vals else global_mean
    for i in range(n_items):
        vals = [unit[u, i] for u, ii in hist if ii == i]
        item_mean[i] = float(np.mean(vals)) if vals else global_mean
    for u, i in observed:
        facts.add("AvgUser", (users[u], items[i]), round(user_mean[u], 6))
        facts.add("AvgItem", (users[u], items[i]), round(item_mean[i], 6))

    data = []
    for k, (u, i) in enumerate(rest):
        data.append(Datum(
            f"r{k}", "test" if test[k] else "train", "-", str(int(ratings[u, i])),
            {"user": users[u], "item": items[i]},
        ))
    mapping = MappingConfig(
        task="regression",
        target=Template("Rates", ("user", "item")),
        label_range=(1.0, 5.0),
        neural=Template("Dnn", ("user", "item")),
        features=(FeatureSpec("user", "onehot"), FeatureSpec("item", "onehot")),
        evidence="label",
    )
    text = recommend_theory_text()
    ds = Dataset(data, facts, {}, mapping)
    info = {"kind": "recommend", "seed": seed, "n_users": n_users, "n_items": n_items,
            "density": density, "n_history": int(len(hist)), "n_data": len(data)}
    return SynthBundle(ds, parse_theory(text), text, info)


def chain_theory_text(n_distractors: int = 0) -> str:
    lines = [
        "# per-box activity with actors tracked across frames",
        "predicate: Doing/2 query .",
        "predicate: Dnn/2 query .",
        "predicate: Frame/2 closed .",
        "predicate: Flabel/2 closed .",
        "predicate: Close/2 closed .",
        "predicate: Sequence/2 closed .",
        "predicate: Same/2 open .",
    ]
    lines += [f"predicate: Noise{k}/2 closed ." for k in range(1, n_distractors + 1)]
    lines += [
        "constraint: Doing(B, +A) = 1 .",
        "LEARN :: Frame(B, F) & Flabel(F, A) -> Doing(B, A) .",
        "LEARN :: Doing(B1, A) & Close(B1, B2) -> Doing(B2, A) .",
        "LEARN :: Sequence(B1, B2) & Close(B1, B2) -> Same(B1, B2) .",
        "LEARN :: Doing(B1, A) & Same(B1, B2) -> Doing(B2, A) .",
        "LEARN :: Dnn(B, A) -> Doing(B, A) .",
    ]
    lines += [f"LEARN :: Noise{k}(B, A) -> Doing(B, A) ." for k in range(1, n_distractors + 1)]
    return "\n".join(lines) + "\n"


def synth_latent_chain(
    seed: int,
    n_frames: int = 3,
    boxes_per_frame: int = 3,
    noise: float = 0.1,
    *,
    n_scenes: int = 24,
    n_activities: int = 4,
    n_distractors: int = 0,
    n_features: int = 4,
    feature_noise: float = 1.0,
    test_fraction: float = 0.25,
    bandwidth: float = 1.0,
) -> SynthBundle:
    """Scenes of actors tracked over frames, each scene with one group activity.

    Every actor follows the scene activity except with probability ``noise``,
    in which case it keeps a different action in all frames.  Boxes carry
    noisy features of their actor's action; frames carry the observed group
    activity; closeness is an RBF of the box positions.  Each distractor rule
    reads a random fact per box that is unrelated to the labels.
    """
    if n_activities > len(ACTIVITIES):
        raise ValueError(f"at most {len(ACTIVITIES)} activities")
    rng = np.random.default_rng(seed)
    acts = ACTIVITIES[:n_activities]
    protos = rng.normal(size=(n_activities, n_features)) * 1.5
    test_scene = _split(rng, n_scenes, test_fraction)
    shared = FactSet()
    groups: dict[str, FactSet] = {}
    data = []
    for s in range(n_scenes):
        g = f"s{s}"
        fs = FactSet()
        activity = int(rng.integers(n_activities))
        actions = np.full(boxes_per_frame, activity)
        for a in range(boxes_per_frame):
            if rng.random() < noise:
                actions[a] = (activity + 1 + rng.integers(n_activities - 1)) % n_activities
        pos = rng.uniform(0, 3, size=(boxes_per_frame, 2))
        boxes = [[f"{g}f{f}b{a}" for a in range(boxes_per_frame)] for f in range(n_frames)]
        frame_pos = []
        for f in range(n_frames):
            frame = f"{g}f{f}"
            fs.add("Flabel", (frame, acts[activity]), 1.0)
            frame_pos.append(pos.copy())
            for a in range(boxes_per_frame):
                fs.add("Frame", (boxes[f][a], frame), 1.0)
            pos = pos + rng.normal(scale=0.15, size=pos.shape)
        if boxes_per_frame > 1:
            for f in range(n_frames):
                for f2 in (f, f + 1):
                    if f2 >= n_frames:
                        continue
                    for a in range(boxes_per_frame):
                        for b in range(boxes_per_frame):
                            if f2 == f and a == b:
                                continue
                            d2 = float(np.sum((frame_pos[f][a] - frame_pos[f2][b]) ** 2))
                            v = round(float(np.exp(-d2 / (2 * bandwidth**2))), 6)
                            if v >= 0.05:
                                fs.add("Close", (boxes[f][a], boxes[f2][b]), v)
                                if f2 != f:
                                    fs.add("Close", (boxes[f2][b], boxes[f][a]), v)
                            if f2 != f:
                                fs.add("Sequence", (boxes[f][a], boxes[f2][b]), 1.0)
                                fs.add("Sequence", (boxes[f2][b], boxes[f][a]), 1.0)
        for f in range(n_frames):
            for a in range(boxes_per_frame):
                b = boxes[f][a]
                for k in range(1, n_distractors + 1):
                    fs.add(f"Noise{k}", (b, acts[int(rng.integers(n_activities))]), 1.0)
                x = protos[actions[a]] + rng.normal(scale=feature_noise, size=n_features)
                fields = {f"x{j}": repr(round(float(x[j]), 6)) for j in range(n_features)}
                data.append(Datum(b, "test" if test_scene[s] else "train", g, acts[actions[a]], fields))
        groups[g] = fs
    mapping = MappingConfig(
        task="classification",
        target=Template("Doing", ("id", "*")),
        classes=tuple(acts),
        neural=Template("Dnn", ("id", "*")),
        features=tuple(FeatureSpec(f"x{j}", "num") for j in range(n_features)),
        evidence="joint",
    )
    text = chain_theory_text(n_distractors)
    info = {"kind": "chain", "seed": seed, "n_scenes": n_scenes, "n_frames": n_frames,
            "boxes_per_frame": boxes_per_frame, "noise": noise, "n_distractors": n_distractors}
    return SynthBundle(Dataset(data, shared, groups, mapping), parse_theory(text), text, info)


def write_bundle(b: SynthBundle, out: str | Path) -> dict[str, Path]:
    """Write data.tsv, facts.tsv, theory.rules and mapping.ini into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / n for k, n in
             (("data", "data.tsv"), ("facts", "facts.tsv"), ("rules", "theory.rules"), ("config", "mapping.ini"))}
    write_data(b.dataset.data, paths["data"])
    write_fact_file(b.dataset.facts, b.dataset.group_facts, paths["facts"])
    paths["rules"].write_text(b.theory_text, encoding="utf-8")
    cp = configparser.ConfigParser(interpolation=None)
    cp["mapping"] = b.dataset.mapping.to_section()
    with open(paths["config"], "w", encoding="utf-8", newline="\n") as fh:
        cp.write(fh)
    return paths
