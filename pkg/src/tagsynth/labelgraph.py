"""Class-relation graph: tag co-occurrence statistics plus curated target links.

The graph has one node per class. Inexact (tag) classes are wired by the
conditional co-occurrence probability estimated from the labeled pool;
target classes attach to their related tags with weight-1 symmetric links.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class UnknownClassError(KeyError):
    """A class name is not part of the label space."""


class GraphError(ValueError):
    """Graph construction or usage contract violation."""


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class names: inexact (tag) classes first, then target classes."""

    inexact: tuple[str, ...]
    target: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "inexact", tuple(self.inexact))
        object.__setattr__(self, "target", tuple(self.target))
        if not self.inexact:
            raise GraphError("label space needs at least one inexact class")
        names = self.inexact + self.target
        if len(set(names)) != len(names):
            raise GraphError("class names must be unique and the two sets disjoint")

    @property
    def n_inexact(self) -> int:
        return len(self.inexact)

    @property
    def n_target(self) -> int:
        return len(self.target)

    @property
    def n_classes(self) -> int:
        return len(self.inexact) + len(self.target)

    def classes(self) -> tuple[str, ...]:
        return self.inexact + self.target

    def index(self, name: str) -> int:
        try:
            return self.classes().index(name)
        except ValueError:
            raise UnknownClassError(name) from None


@dataclass
class CooccurrenceCounts:
    """Pair counts M[i, j] = #instances with both tags, totals N[j] = #with tag j."""

    pairs: np.ndarray
    totals: np.ndarray


def _as_label_matrix(rows, width: int, what: str) -> np.ndarray:
    mat = np.asarray(rows, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != width:
        raise GraphError(f"{what} must be (n, {width}), got shape {mat.shape}")
    if not np.isin(mat, (0.0, 1.0)).all():
        raise GraphError(f"{what} entries must be 0 or 1")
    return mat


def count_cooccurrence(rows: Sequence, space: LabelSpace) -> CooccurrenceCounts:
    """Count tag pairs over labeled instances; rows are 0/1 vectors over tags."""
    rows = list(rows)
    if not rows:
        raise GraphError("cannot count co-occurrence over zero instances")
    mat = _as_label_matrix(rows, space.n_inexact, "tag label rows")
    pairs = mat.T @ mat
    return CooccurrenceCounts(pairs=pairs, totals=np.diag(pairs).copy())


def conditional_adjacency(counts: CooccurrenceCounts,
                          threshold: float | None = None) -> np.ndarray:
    """A[i, j] = P(tag i | tag j) = M[i, j] / N[j]; columns with N[j] = 0 are 0.

    ``threshold`` optionally binarizes the block at >= threshold. Off by
    default; the raw conditional probabilities are the reference behavior.
    """
    totals = counts.totals.astype(np.float64)
    out = np.zeros_like(counts.pairs, dtype=np.float64)
    seen = totals > 0
    out[:, seen] = counts.pairs[:, seen] / totals[seen][None, :]
    if threshold is not None:
        out = (out >= threshold).astype(np.float64)
    return out


@dataclass
class LabelGraph:
    """Adjacency and node embeddings over the full class set (tags then targets)."""

    space: LabelSpace
    adjacency: np.ndarray
    embeddings: np.ndarray
    relations: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        w = self.space.n_classes
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.adjacency.shape != (w, w):
            raise GraphError(f"adjacency must be ({w}, {w}), got {self.adjacency.shape}")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != w:
            raise GraphError(f"embeddings must have {w} rows, got {self.embeddings.shape}")

    @property
    def target_link_block(self) -> np.ndarray:
        s = self.space.n_inexact
        return self.adjacency[s:, :s]


def one_hot_embeddings(space: LabelSpace) -> np.ndarray:
    return np.eye(space.n_classes)


def link_targets(s_block: np.ndarray, relations: Mapping[str, Sequence[str]],
                 space: LabelSpace, embeddings: np.ndarray | None = None) -> LabelGraph:
    """Assemble the full graph: tag block as given, weight-1 symmetric links
    between each target and its related tags, zeros elsewhere."""
    s = space.n_inexact
    w = space.n_classes
    s_block = np.asarray(s_block, dtype=np.float64)
    if s_block.shape != (s, s):
        raise GraphError(f"tag block must be ({s}, {s}), got {s_block.shape}")
    adjacency = np.zeros((w, w))
    adjacency[:s, :s] = s_block
    cleaned: dict[str, tuple[str, ...]] = {}
    for target_name, related in relations.items():
        if target_name not in space.target:
            raise UnknownClassError(target_name)
        t_idx = space.index(target_name)
        related_names = []
        for tag_name in related:
            if tag_name not in space.inexact:
                raise UnknownClassError(tag_name)
            s_idx = space.index(tag_name)
            adjacency[t_idx, s_idx] = 1.0
            adjacency[s_idx, t_idx] = 1.0
            related_names.append(tag_name)
        cleaned[target_name] = tuple(sorted(set(related_names)))
    if embeddings is None:
        embeddings = one_hot_embeddings(space)
    return LabelGraph(space=space, adjacency=adjacency,
                      embeddings=embeddings, relations=cleaned)


def estimate_target_prior(y_s: np.ndarray, graph: LabelGraph) -> np.ndarray:
    """OR rule: target i is on iff some active tag j has a weight-1 link to i."""
    y_s = np.asarray(y_s, dtype=np.float64)
    if y_s.shape != (graph.space.n_inexact,):
        raise GraphError(
            f"tag vector must have shape ({graph.space.n_inexact},), got {y_s.shape}"
        )
    return estimate_target_prior_batch(y_s[None, :], graph)[0]


def estimate_target_prior_batch(rows: np.ndarray, graph: LabelGraph) -> np.ndarray:
    """Vectorized OR rule over a (n, n_inexact) batch of tag vectors."""
    rows = _as_label_matrix(rows, graph.space.n_inexact, "tag label rows")
    block = graph.target_link_block
    if not np.isin(block, (0.0, 1.0)).all():
        raise GraphError("target links must be exactly binary for the OR-rule prior")
    linked = block == 1.0
    return (rows @ linked.T.astype(np.float64) > 0.0).astype(np.float64)


def normalize_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Row-normalized (A + I): every row sums to one."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise GraphError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0):
        raise GraphError("adjacency weights must be nonnegative")
    with_self = a + np.eye(a.shape[0])
    return with_self / with_self.sum(axis=1, keepdims=True)


def weighted_full_graph(whole_labels: Sequence, space: LabelSpace) -> LabelGraph:
    """Ground-truth diagnostic graph: conditional co-occurrence over ALL classes.

    ``whole_labels`` is a sequence of (y_s, y_t) pairs; both parts required.
    """
    rows = []
    for i, pair in enumerate(whole_labels):
        y_s, y_t = pair
        if y_t is None:
            raise GraphError(f"instance {i} is missing ground-truth target labels")
        rows.append(np.concatenate([np.asarray(y_s, float), np.asarray(y_t, float)]))
    if not rows:
        raise GraphError("cannot build a graph from zero instances")
    mat = _as_label_matrix(rows, space.n_classes, "full label rows")
    pairs = mat.T @ mat
    totals = np.diag(pairs).copy()
    out = np.zeros_like(pairs)
    seen = totals > 0
    out[:, seen] = pairs[:, seen] / totals[seen][None, :]
    return LabelGraph(space=space, adjacency=out,
                      embeddings=one_hot_embeddings(space), relations={})


def zero_graph(space: LabelSpace,
               relations: Mapping[str, Sequence[str]] | None = None) -> LabelGraph:
    """All-zero adjacency with one-hot embeddings: classes never mix."""
    adjacency = np.zeros((space.n_classes, space.n_classes))
    cleaned = {t: tuple(sorted(set(r))) for t, r in (relations or {}).items()}
    return LabelGraph(space=space, adjacency=adjacency,
                      embeddings=one_hot_embeddings(space), relations=cleaned)


# -- serialization -------------------------------------------------------------


def graph_to_dict(graph: LabelGraph) -> dict:
    if np.array_equal(graph.embeddings, one_hot_embeddings(graph.space)):
        embeddings = "one-hot"
    else:
        embeddings = graph.embeddings.reshape(-1).tolist()
    return {
        "inexact_classes": list(graph.space.inexact),
        "target_classes": list(graph.space.target),
        "adjacency": graph.adjacency.reshape(-1).tolist(),
        "embeddings": embeddings,
        "relations": {t: list(r) for t, r in graph.relations.items()},
    }


def graph_from_dict(payload: Mapping) -> LabelGraph:
    space = LabelSpace(tuple(payload["inexact_classes"]), tuple(payload["target_classes"]))
    w = space.n_classes
    adjacency = np.asarray(payload["adjacency"], dtype=np.float64).reshape(w, w)
    raw = payload.get("embeddings", "one-hot")
    if isinstance(raw, str):
        if raw != "one-hot":
            raise GraphError(f"unknown embeddings spec: {raw!r}")
        embeddings = one_hot_embeddings(space)
    else:
        flat = np.asarray(raw, dtype=np.float64).reshape(-1)
        if flat.size % w != 0:
            raise GraphError(f"embeddings length {flat.size} is not a multiple of {w}")
        embeddings = flat.reshape(w, flat.size // w)
    relations = {t: tuple(r) for t, r in payload.get("relations", {}).items()}
    for t, related in relations.items():
        if t not in space.target:
            raise UnknownClassError(t)
        for name in related:
            if name not in space.inexact:
                raise UnknownClassError(name)
    return LabelGraph(space=space, adjacency=adjacency,
                      embeddings=embeddings, relations=relations)


def save_graph(graph: LabelGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(graph)))


def load_graph(path: str | Path) -> LabelGraph:
    return graph_from_dict(json.loads(Path(path).read_text()))
