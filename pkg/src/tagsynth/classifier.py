"""Graph-aware multi-label classifier.

A shared extractor maps an instance to a feature vector; a GCN over the
label graph synthesizes one weight vector per class from the node
embeddings; per-class probabilities are sigmoids of the dot products.
With a zero adjacency the GCN rows never mix and the model reduces to
independent per-class heads, which is exactly how the "independent"
architecture variant is built.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .labelgraph import LabelGraph, normalize_adjacency
from .nets import Mlp, glorot, init_mlp


@dataclass
class ClassifierParams:
    extractor: Mlp
    gcn_weights: list[Tensor]

    def parameters(self, prefix: str = "classifier") -> list[Parameter]:
        out = self.extractor.parameters(f"{prefix}/extractor")
        out.extend(
            Parameter(f"{prefix}/gcn/{i}", w) for i, w in enumerate(self.gcn_weights)
        )
        return out

    def detached(self) -> "ClassifierParams":
        return ClassifierParams(
            extractor=self.extractor.detached(),
            gcn_weights=[w.detach() for w in self.gcn_weights],
        )


@dataclass
class Prediction:
    """Per-class probabilities, split into tag and target blocks."""

    tag_probs: Tensor
    target_probs: Tensor


def init_classifier(rng: np.random.Generator, input_dim: int, embed_dim: int,
                    extractor_hidden: tuple[int, ...], feature_dim: int,
                    gcn_hidden: tuple[int, ...],
                    activation: str = "tanh") -> ClassifierParams:
    extractor = init_mlp(rng, [input_dim, *extractor_hidden, feature_dim], activation)
    dims = [embed_dim, *gcn_hidden, feature_dim]
    gcn_weights = [
        Tensor(glorot(rng, dims[i], dims[i + 1]), requires_grad=True)
        for i in range(len(dims) - 1)
    ]
    return ClassifierParams(extractor=extractor, gcn_weights=gcn_weights)


def extract_features(x, params: ClassifierParams) -> Tensor:
    """Instance features h = extractor(x); x is a (n, d) batch."""
    return params.extractor(x)


def synthesize_classifiers(graph: LabelGraph, params: ClassifierParams) -> Tensor:
    """Per-class weight matrix (n_classes, feature_dim) from the GCN.

    Each layer is h <- f(rownorm(A + I) @ h @ W) with LeakyReLU(0.2) on
    hidden layers and a linear last layer.
    """
    if graph.embeddings.shape[1] != params.gcn_weights[0].values.shape[0]:
        raise ShapeError(
            f"embedding dim {graph.embeddings.shape[1]} does not match first "
            f"GCN weight {params.gcn_weights[0].values.shape}"
        )
    norm = Tensor(normalize_adjacency(graph.adjacency))
    h = Tensor(graph.embeddings)
    last = len(params.gcn_weights) - 1
    for i, w in enumerate(params.gcn_weights):
        h = ad.matmul(norm, ad.matmul(h, w))
        if i < last:
            h = ad.leaky_relu(h, 0.2)
    return h


def classify(x, graph: LabelGraph, params: ClassifierParams) -> Prediction:
    """Sigmoid probabilities per class, clamped strictly inside (0, 1)."""
    features = extract_features(x, params)
    weights = synthesize_classifiers(graph, params)
    logits = ad.matmul(features, ad.transpose(weights))
    probs = ad.clamp(ad.sigmoid(logits), ad.PROB_EPS, 1.0 - ad.PROB_EPS)
    s = graph.space.n_inexact
    return Prediction(
        tag_probs=ad.slice_cols(probs, 0, s),
        target_probs=ad.slice_cols(probs, s, graph.space.n_classes),
    )


def loss_supervised(x, y_s, graph: LabelGraph, params: ClassifierParams) -> Tensor:
    """Mean binary cross-entropy over tag classes only; targets get no term."""
    y_s = np.asarray(y_s, dtype=np.float64)
    if y_s.ndim != 2:
        raise ShapeError(f"y_s must be a (n, n_inexact) batch, got shape {y_s.shape}")
    pred = classify(x, graph, params)
    n = y_s.shape[0]
    return ad.binary_cross_entropy(pred.tag_probs, y_s) * (1.0 / n)
