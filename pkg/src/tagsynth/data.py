"""Planted synthetic dataset with known label structure, plus dataset IO.

The generator plants a ground-truth joint distribution over tag patterns,
derives target labels from designated parent tags through an OR rule with a
small flip rate, and renders instances as noisy sums of per-class prototype
vectors. Because the joint is an explicit table, every conditional the rest of
the pipeline estimates has an analytic value to compare against.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .labelgraph import LabelGraph, LabelSpace, estimate_target_prior, link_targets
from .rng import substream


@dataclass
class Instance:
    """One example: features, optional tags, optional target labels."""

    x: np.ndarray
    y_s: np.ndarray | None = None
    y_t: np.ndarray | None = None


@dataclass(frozen=True)
class PlantedConfig:
    n_inexact: int = 8
    n_target: int = 2
    d_x: int = 32
    n_labeled: int = 500
    n_unlabeled: int = 3000
    n_test: int = 2000
    noise_scale: float = 0.5
    flip_rate: float = 0.1
    tag_scale: float = 1.0
    target_scale: float = 1.0
    interaction_scale: float = 0.0
    style_dim: int = 0
    style_scale: float = 1.0
    parents_per_target: int = 2
    size_weights: tuple = (0.02, 1.0, 0.9, 0.35, 0.08)
    size_tail_decay: float = 0.2
    pair_boost: float = 4.0

    def __post_init__(self):
        if self.n_inexact < 1:
            raise ValueError("at least one inexact class is required")
        if self.n_target < 0:
            raise ValueError("n_target must be non-negative")
        if self.parents_per_target * self.n_target > self.n_inexact:
            raise ValueError("not enough inexact classes to give every target "
                             "its own parents")
        if self.d_x < 1:
            raise ValueError("d_x must be positive")
        for name in ("n_labeled", "n_unlabeled", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.noise_scale < 0.0:
            raise ValueError("noise_scale must be non-negative")
        if self.tag_scale <= 0.0:
            raise ValueError("tag_scale must be positive")
        if self.target_scale <= 0.0:
            raise ValueError("target_scale must be positive")
        if self.interaction_scale < 0.0:
            raise ValueError("interaction_scale must be non-negative")
        if self.style_dim < 0:
            raise ValueError("style_dim must be non-negative")
        if self.style_dim > self.d_x:
            raise ValueError("style_dim cannot exceed d_x")
        if self.style_scale <= 0.0:
            raise ValueError("style_scale must be positive")
        if not 0.0 <= self.flip_rate < 0.5:
            raise ValueError("flip_rate must lie in [0, 0.5)")
        if len(self.size_weights) == 0 or min(self.size_weights) < 0.0:
            raise ValueError("size_weights must be non-empty and non-negative")


def _label_space(config: PlantedConfig) -> LabelSpace:
    return LabelSpace(
        inexact=tuple(f"tag{i}" for i in range(config.n_inexact)),
        target=tuple(f"target{j}" for j in range(config.n_target)),
    )


def _parent_map(config: PlantedConfig) -> dict:
    """Consecutive disjoint tag blocks parent the targets."""
    k = config.parents_per_target
    return {
        f"target{j}": [f"tag{i}" for i in range(j * k, (j + 1) * k)]
        for j in range(config.n_target)
    }


def _pattern_bits(n_tags: int) -> np.ndarray:
    """All 2^n tag patterns, pattern i has bit j = (i >> j) & 1."""
    idx = np.arange(2 ** n_tags)
    return ((idx[:, None] >> np.arange(n_tags)[None, :]) & 1).astype(np.float64)


@dataclass
class PlantedModel:
    """Explicit ground-truth joint over labels plus rendering parameters."""

    space: LabelSpace
    prototypes: np.ndarray        # (|S|+|T|, d_x)
    pattern_probs: np.ndarray     # (2^|S|,), sums to 1
    parents: dict                 # target name -> list of parent tag names
    noise_scale: float
    flip_rate: float
    interactions: np.ndarray | None = None   # (2^|S|, d_x) per-pattern offsets
    style: np.ndarray | None = None          # (d_x, k) label-independent basis
    patterns: np.ndarray = field(init=False)

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.pattern_probs = np.asarray(self.pattern_probs, dtype=np.float64)
        self.patterns = _pattern_bits(self.space.n_inexact)
        if self.pattern_probs.shape != (self.patterns.shape[0],):
            raise ValueError("pattern_probs length must be 2^|S|")
        if abs(self.pattern_probs.sum() - 1.0) > 1e-9:
            raise ValueError("pattern probabilities must sum to 1")
        if self.prototypes.shape[0] != self.space.n_classes:
            raise ValueError("one prototype per class is required")
        if self.interactions is not None:
            self.interactions = np.asarray(self.interactions, dtype=np.float64)
            expected = (self.patterns.shape[0], self.prototypes.shape[1])
            if self.interactions.shape != expected:
                raise ValueError(f"interactions must have shape {expected}, "
                                 f"got {self.interactions.shape}")
        if self.style is not None:
            self.style = np.asarray(self.style, dtype=np.float64)
            if self.style.ndim != 2 or self.style.shape[0] != self.prototypes.shape[1]:
                raise ValueError("style must be a (d_x, k) matrix, got shape "
                                 f"{self.style.shape}")

    def parent_matrix(self) -> np.ndarray:
        """Binary (|T|, |S|) matrix of the designated parent tags."""
        out = np.zeros((self.space.n_target, self.space.n_inexact))
        for t_name, tags in self.parents.items():
            t = self.space.index(t_name) - self.space.n_inexact
            for s_name in tags:
                out[t, self.space.index(s_name)] = 1.0
        return out

    def or_rule(self, y_s: np.ndarray) -> np.ndarray:
        """Noise-free target labels for tag rows ``y_s``."""
        linked = self.parent_matrix()
        return ((np.atleast_2d(y_s) @ linked.T) > 0.0).astype(np.float64)

    def tag_marginals(self) -> np.ndarray:
        return self.pattern_probs @ self.patterns

    def target_marginals(self) -> np.ndarray:
        clean = self.pattern_probs @ self.or_rule(self.patterns)
        return clean * (1.0 - self.flip_rate) + (1.0 - clean) * self.flip_rate

    def analytic_conditional(self) -> np.ndarray:
        """Exact P(tag_i = 1 | tag_j = 1) from the pattern table."""
        p_joint = (self.patterns.T * self.pattern_probs) @ self.patterns
        p_one = np.diag(p_joint)
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = p_joint / p_one[None, :]
        return np.where(p_one[None, :] > 0.0, cond, 0.0)

    def sample_labels(self, rng: np.random.Generator, n: int) -> tuple:
        """Draw (tag rows, target rows) from the joint, flips included."""
        picks = rng.choice(self.patterns.shape[0], size=n, p=self.pattern_probs)
        y_s = self.patterns[picks]
        y_t = self.or_rule(y_s)
        if self.space.n_target > 0 and self.flip_rate > 0.0:
            flips = rng.random(y_t.shape) < self.flip_rate
            y_t = np.where(flips, 1.0 - y_t, y_t)
        return y_s, y_t

    def pattern_index(self, y_s: np.ndarray) -> np.ndarray:
        """Row index of each tag vector in the pattern table (LSB first)."""
        powers = 2 ** np.arange(self.space.n_inexact)
        return (np.atleast_2d(y_s) @ powers).astype(int)

    def render(self, rng: np.random.Generator, y_s: np.ndarray,
               y_t: np.ndarray) -> np.ndarray:
        """Instances as prototype sums over every active class plus an
        optional pattern-specific offset, plus label-independent variation."""
        y_all = np.hstack([y_s, y_t])
        x = y_all @ self.prototypes
        if self.interactions is not None:
            x = x + self.interactions[self.pattern_index(y_s)]
        if self.style is not None:
            # shared low-rank variation, same in every class; a model that
            # identifies this subspace can explain most of the spread away
            u = rng.standard_normal((x.shape[0], self.style.shape[1]))
            x = x + u @ self.style.T
        if self.noise_scale > 0.0:
            x = x + self.noise_scale * rng.standard_normal(x.shape)
        return x


@dataclass
class DatasetBundle:
    d_l: list
    d_u: list
    test: list
    space: LabelSpace
    d_e: list = field(default_factory=list)
    planted: PlantedModel | None = None
    train_truth: tuple | None = None   # (y_s, y_t) arrays for the labeled split


def _pattern_weights(config: PlantedConfig) -> np.ndarray:
    bits = _pattern_bits(config.n_inexact)
    sizes = bits.sum(axis=1).astype(int)
    table = list(config.size_weights)
    while len(table) <= config.n_inexact:
        table.append(table[-1] * config.size_tail_decay)
    weights = np.array([table[k] for k in sizes])

    parents = _parent_map(config)
    space = _label_space(config)
    for tags in parents.values():
        cols = [space.index(t) for t in tags]
        both = bits[:, cols].sum(axis=1) == len(cols)
        weights = np.where(both, weights * config.pair_boost, weights)
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("size_weights leave no pattern with positive mass")
    return weights / total


def make_planted_model(config: PlantedConfig, rng: np.random.Generator) -> PlantedModel:
    space = _label_space(config)
    prototypes = rng.standard_normal((space.n_classes, config.d_x))
    # scaling the per-class signatures down shifts the information into the
    # pattern offsets below, so reading labels means knowing the clusters
    prototypes[:space.n_inexact] *= config.tag_scale
    prototypes[space.n_inexact:] *= config.target_scale
    interactions = None
    if config.interaction_scale > 0.0:
        # pattern-specific offsets make the label-to-instance map nonlinear,
        # so a classifier has to see a pattern's cluster to place it
        interactions = config.interaction_scale * rng.standard_normal(
            (2 ** config.n_inexact, config.d_x))
    style = None
    if config.style_dim > 0:
        # orthonormal columns keep the per-direction spread exactly
        # style_scale, independent of how many directions there are
        raw = rng.standard_normal((config.d_x, config.style_dim))
        q, _ = np.linalg.qr(raw)
        style = config.style_scale * q
    return PlantedModel(
        space=space,
        prototypes=prototypes,
        pattern_probs=_pattern_weights(config),
        parents=_parent_map(config),
        noise_scale=config.noise_scale,
        flip_rate=config.flip_rate,
        interactions=interactions,
        style=style,
    )


def truth_graph(model: PlantedModel) -> LabelGraph:
    """Label graph with the analytic tag conditionals and the true parent links."""
    return link_targets(model.analytic_conditional(), model.parents, model.space)


def generate_planted(config: PlantedConfig, seed: int) -> tuple:
    """Sample a full bundle plus its ground-truth graph. Deterministic per seed."""
    rng = substream(seed, "data")
    model = make_planted_model(config, rng)

    n_total = config.n_labeled + config.n_unlabeled + config.n_test
    y_s, y_t = model.sample_labels(rng, n_total)
    x = model.render(rng, y_s, y_t)

    a = config.n_labeled
    b = a + config.n_unlabeled
    d_l = [Instance(x=x[i], y_s=y_s[i]) for i in range(a)]
    d_u = [Instance(x=x[i]) for i in range(a, b)]
    test = [Instance(x=x[i], y_s=y_s[i], y_t=y_t[i]) for i in range(b, n_total)]

    bundle = DatasetBundle(d_l=d_l, d_u=d_u, test=test, space=model.space,
                           planted=model, train_truth=(y_s[:a], y_t[:a]))
    return bundle, truth_graph(model)


def build_estimated_labeled(d_l: list, graph: LabelGraph) -> list:
    """Give every labeled instance an estimated target vector via the OR rule."""
    return [Instance(x=inst.x, y_s=inst.y_s,
                     y_t=estimate_target_prior(inst.y_s, graph))
            for inst in d_l]


def training_arrays(bundle: DatasetBundle) -> tuple:
    """(x_labeled, y_s_labeled, x_unlabeled) matrices for the optimizer."""
    x_l = np.array([inst.x for inst in bundle.d_l])
    y_s = np.array([inst.y_s for inst in bundle.d_l])
    x_u = (np.array([inst.x for inst in bundle.d_u])
           if bundle.d_u else np.zeros((0, x_l.shape[1])))
    return x_l, y_s, x_u


def _instance_to_json(inst: Instance) -> str:
    row = {"x": inst.x.tolist()}
    if inst.y_s is not None:
        row["y_s"] = inst.y_s.tolist()
    if inst.y_t is not None:
        row["y_t"] = inst.y_t.tolist()
    return json.dumps(row)


def _instance_from_json(line: str, where: str, lineno: int) -> Instance:
    try:
        row = json.loads(line)
        x = np.array(row["x"], dtype=np.float64)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{where} line {lineno}: malformed instance "
                         f"({exc})") from exc
    y_s = np.array(row["y_s"], dtype=np.float64) if "y_s" in row else None
    y_t = np.array(row["y_t"], dtype=np.float64) if "y_t" in row else None
    return Instance(x=x, y_s=y_s, y_t=y_t)


def _write_jsonl(path, instances: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(_instance_to_json(inst) + "\n")


def _read_jsonl(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                out.append(_instance_from_json(line, str(path), lineno))
    return out


def save_bundle(directory, bundle: DatasetBundle) -> None:
    """Write the bundle as JSON-lines shards plus one metadata file."""
    os.makedirs(directory, exist_ok=True)
    _write_jsonl(os.path.join(directory, "d_l.jsonl"), bundle.d_l)
    _write_jsonl(os.path.join(directory, "d_u.jsonl"), bundle.d_u)
    _write_jsonl(os.path.join(directory, "test.jsonl"), bundle.test)
    if bundle.d_e:
        _write_jsonl(os.path.join(directory, "d_e.jsonl"), bundle.d_e)

    meta = {
        "space": {"inexact": list(bundle.space.inexact),
                  "target": list(bundle.space.target)},
        "planted": None,
        "train_truth": None,
    }
    if bundle.planted is not None:
        m = bundle.planted
        meta["planted"] = {
            "prototypes": m.prototypes.tolist(),
            "pattern_probs": m.pattern_probs.tolist(),
            "parents": {k: list(v) for k, v in m.parents.items()},
            "noise_scale": m.noise_scale,
            "flip_rate": m.flip_rate,
            "interactions": (None if m.interactions is None
                             else m.interactions.tolist()),
            "style": None if m.style is None else m.style.tolist(),
        }
    if bundle.train_truth is not None:
        meta["train_truth"] = {"y_s": bundle.train_truth[0].tolist(),
                               "y_t": bundle.train_truth[1].tolist()}
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh)


def load_bundle(directory) -> DatasetBundle:
    with open(os.path.join(directory, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    space = LabelSpace(inexact=tuple(meta["space"]["inexact"]),
                       target=tuple(meta["space"]["target"]))
    planted = None
    if meta["planted"] is not None:
        p = meta["planted"]
        stored = p.get("interactions")
        stored_style = p.get("style")
        planted = PlantedModel(
            space=space,
            prototypes=np.array(p["prototypes"], dtype=np.float64),
            pattern_probs=np.array(p["pattern_probs"], dtype=np.float64),
            parents={k: list(v) for k, v in p["parents"].items()},
            noise_scale=float(p["noise_scale"]),
            flip_rate=float(p["flip_rate"]),
            interactions=(None if stored is None
                          else np.array(stored, dtype=np.float64)),
            style=(None if stored_style is None
                   else np.array(stored_style, dtype=np.float64)),
        )
    train_truth = None
    if meta["train_truth"] is not None:
        train_truth = (np.array(meta["train_truth"]["y_s"], dtype=np.float64),
                       np.array(meta["train_truth"]["y_t"], dtype=np.float64))

    d_e_path = os.path.join(directory, "d_e.jsonl")
    return DatasetBundle(
        d_l=_read_jsonl(os.path.join(directory, "d_l.jsonl")),
        d_u=_read_jsonl(os.path.join(directory, "d_u.jsonl")),
        test=_read_jsonl(os.path.join(directory, "test.jsonl")),
        d_e=_read_jsonl(d_e_path) if os.path.exists(d_e_path) else [],
        space=space,
        planted=planted,
        train_truth=train_truth,
    )
