"""Metrics, downstream benchmarks, baselines, ablations, and sweeps.

Ranking metrics are hand-rolled (stable sorts, Mann-Whitney ties at one half)
so they can be checked against brute-force definitions. The experiment
helpers wire the generative pipeline to a freshly trained downstream
classifier and report per-class and macro scores over the target classes.
"""

import csv
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .classifier import classify, init_classifier
from .data import (
    DatasetBundle,
    PlantedConfig,
    build_estimated_labeled,
    generate_planted,
    training_arrays,
)
from .generative import GenConfig, encode, init_model, sample_labeled
from .labelgraph import (
    LabelGraph,
    LabelSpace,
    conditional_adjacency,
    count_cooccurrence,
    link_targets,
    weighted_full_graph,
    zero_graph,
)
from .rng import substream
from .training import (
    Adam,
    TrainConfig,
    TrainData,
    init_train_state,
    run_training,
)

ALPHA_GRID = (0.01, 0.1, 1.0, 10.0)
BETA_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
SWEEP_VARIABLES = ("size_of_ds", "size_of_dl", "alpha", "beta")
ABLATION_VARIANTS = ("full", "addes-cnn", "addes-w")


def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks k that hold a positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    n_pos = labels.sum()
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, scores.shape[0] + 1)
    return float(np.sum((hits / ranks) * ranked) / n_pos)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks in ascending score order, ties given their mean rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty_like(scores)
    i = 0
    n = scores.shape[0]
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties at half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC AUC needs both a positive and a negative")
    ranks = _average_ranks(scores)
    u = ranks[labels == 1.0].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_metrics(scores: np.ndarray, labels: np.ndarray,
                  class_names) -> tuple:
    """Per-class AP/AUC plus macro means; degenerate classes are skipped."""
    per_ap = {}
    per_auc = {}
    for c, name in enumerate(class_names):
        col = labels[:, c]
        if col.sum() == 0:
            warnings.warn(f"class {name!r} has no positives; skipped in "
                          f"macro averages")
            continue
        per_ap[name] = average_precision(scores[:, c], col)
        if col.sum() < col.shape[0]:
            per_auc[name] = roc_auc(scores[:, c], col)
        else:
            warnings.warn(f"class {name!r} has no negatives; skipped in "
                          f"macro AUC")
    if not per_ap:
        raise ValueError("every class was degenerate; no metrics to average")
    macro_ap = float(np.mean(list(per_ap.values())))
    macro_auc = float(np.mean(list(per_auc.values()))) if per_auc else float("nan")
    return per_ap, macro_ap, per_auc, macro_auc


@dataclass
class MetricReport:
    per_class_ap: dict
    map: float
    per_class_auc: dict
    auc: float
    seed: int
    config_hash: str = ""

    def __post_init__(self):
        values = ([self.map] + list(self.per_class_ap.values())
                  + list(self.per_class_auc.values()))
        if not np.isnan(self.auc):
            values.append(self.auc)
        for v in values:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"metric value {v} outside [0, 1]")


@dataclass(frozen=True)
class DownstreamConfig:
    """A small, fresh classifier fitted on complete labels."""

    epochs: int = 40
    batch_size: int = 64
    lr: float = 3e-3
    extractor_hidden: tuple = (64,)
    feature_dim: int = 32
    gcn_hidden: tuple = ()
    activation: str = "tanh"


def _as_triples(train_set) -> tuple:
    xs, ys, yt = [], [], []
    for item in train_set:
        if isinstance(item, tuple):
            x, y_s, y_t = item
        else:
            x, y_s, y_t = item.x, item.y_s, item.y_t
        if y_s is None or y_t is None:
            raise ValueError("downstream training needs complete labels")
        xs.append(x)
        ys.append(y_s)
        yt.append(y_t)
    return np.array(xs), np.array(ys), np.array(yt)


def _test_arrays(test_set) -> tuple:
    x = np.array([inst.x for inst in test_set])
    y_t = np.array([inst.y_t for inst in test_set])
    return x, y_t


def _fit_classifier(x, y_all, graph, seed, config: DownstreamConfig):
    rng = substream(seed, "init")
    clf = init_classifier(rng, x.shape[1], graph.embeddings.shape[1],
                          config.extractor_hidden, config.feature_dim,
                          config.gcn_hidden, activation=config.activation)
    opt = Adam(config.lr)
    params = clf.parameters()
    order_rng = substream(seed, "training")
    n = x.shape[0]
    for _ in range(config.epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            for p in params:
                p.tensor.zero_grad()
            with Tape() as tape:
                pred = classify(x[idx], graph, clf)
                probs = ad.concat([pred.tag_probs, pred.target_probs], axis=1)
                loss = ad.binary_cross_entropy(probs, y_all[idx]) * (1.0 / idx.shape[0])
                tape.backward(loss)
            opt.step(params)
    return clf


def train_downstream(train_set, test_set, graph: LabelGraph, arch: str,
                     seed: int, config: DownstreamConfig = DownstreamConfig(),
                     config_hash: str = "") -> MetricReport:
    """Fit a fresh classifier on complete labels and score the test targets."""
    if arch not in ("independent", "graph-aware"):
        raise ValueError(f"unknown architecture {arch!r}")
    if len(train_set) == 0:
        raise ValueError("downstream training set is empty")
    x, y_s, y_t = _as_triples(train_set)
    clf_graph = zero_graph(graph.space) if arch == "independent" else graph
    clf = _fit_classifier(x, np.hstack([y_s, y_t]), clf_graph, seed, config)

    x_test, y_t_test = _test_arrays(test_set)
    pred = classify(x_test, clf_graph, clf)
    per_ap, macro_ap, per_auc, macro_auc = macro_metrics(
        pred.target_probs.values, y_t_test, graph.space.target)
    return MetricReport(per_ap, macro_ap, per_auc, macro_auc, seed, config_hash)


def _fit_entropy_classifier(d_e, d_u, space: LabelSpace, seed: int, lam: float,
                            config: DownstreamConfig):
    """Fit the entropy-regularized baseline; returns (classifier, graph, x_u)."""
    x, y_s, y_t = _as_triples(d_e)
    y_all = np.hstack([y_s, y_t])
    x_u = np.array([inst.x for inst in d_u])
    graph = zero_graph(space)
    rng = substream(seed, "init")
    clf = init_classifier(rng, x.shape[1], graph.embeddings.shape[1],
                          config.extractor_hidden, config.feature_dim,
                          config.gcn_hidden, activation=config.activation)
    opt = Adam(config.lr)
    params = clf.parameters()
    order_rng = substream(seed, "training")
    # drawing unlabeled batches from their own stream keeps the labeled batch
    # order identical to the plain baseline, so lambda = 0 reduces to it exactly
    u_rng = substream(seed, "entropy-baseline")
    n = x.shape[0]
    for _ in range(config.epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            idx_u = u_rng.choice(x_u.shape[0], size=min(config.batch_size,
                                                        x_u.shape[0]),
                                 replace=False)
            for p in params:
                p.tensor.zero_grad()
            with Tape() as tape:
                pred = classify(x[idx], graph, clf)
                probs = ad.concat([pred.tag_probs, pred.target_probs], axis=1)
                loss = ad.binary_cross_entropy(probs, y_all[idx]) * (1.0 / idx.shape[0])
                if lam > 0.0:
                    pred_u = classify(x_u[idx_u], graph, clf)
                    probs_u = ad.concat([pred_u.tag_probs, pred_u.target_probs],
                                        axis=1)
                    ent = ad.bernoulli_entropy(probs_u) * (1.0 / idx_u.shape[0])
                    loss = loss + lam * ent
                tape.backward(loss)
            opt.step(params)
    return clf, graph, x_u


def mean_prediction_entropy(clf, graph: LabelGraph, x: np.ndarray) -> float:
    """Average Bernoulli entropy of all class probabilities over ``x``."""
    pred = classify(x, graph, clf)
    probs = ad.concat([pred.tag_probs, pred.target_probs], axis=1)
    return ad.bernoulli_entropy(probs).item() / x.shape[0]


def baseline_entropy_reg(d_e, d_u, test_set, space: LabelSpace, seed: int,
                         lam: float = 0.1,
                         config: DownstreamConfig = DownstreamConfig(),
                         config_hash: str = "") -> MetricReport:
    """Independent classifier on D_e plus entropy regularization over D_u."""
    if len(d_u) == 0:
        raise ValueError("the entropy baseline needs unlabeled data")
    clf, graph, _ = _fit_entropy_classifier(d_e, d_u, space, seed, lam, config)
    x_test, y_t_test = _test_arrays(test_set)
    pred = classify(x_test, graph, clf)
    per_ap, macro_ap, per_auc, macro_auc = macro_metrics(
        pred.target_probs.values, y_t_test, space.target)
    return MetricReport(per_ap, macro_ap, per_auc, macro_auc, seed, config_hash)


def estimated_graph(bundle: DatasetBundle, relations: dict) -> LabelGraph:
    """The pipeline's own graph: counted tag conditionals plus known links."""
    y_s = np.array([inst.y_s for inst in bundle.d_l])
    counts = count_cooccurrence(y_s, bundle.space)
    return link_targets(conditional_adjacency(counts), relations, bundle.space)


@dataclass
class PipelineResult:
    variant: str
    state: object
    clf_graph: LabelGraph      # what the generator's classifier saw
    prior_graph: LabelGraph    # binary links driving OR-rule priors
    d_e: list


def run_pipeline(bundle: DatasetBundle, relations: dict, gen_config: GenConfig,
                 train_config: TrainConfig,
                 variant: str = "full") -> PipelineResult:
    """Train one generator variant on the bundle and prepare D_e."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    est = estimated_graph(bundle, relations)
    if variant == "full":
        clf_graph, prior_graph = est, None
    elif variant == "addes-cnn":
        clf_graph, prior_graph = zero_graph(bundle.space), est
    else:
        if bundle.train_truth is None:
            raise ValueError("the weighted-graph variant needs ground-truth "
                             "target labels for the labeled split")
        y_s, y_t = bundle.train_truth
        pairs = list(zip(y_s, y_t))
        clf_graph = weighted_full_graph(pairs, bundle.space)
        prior_graph = est

    x_l, y_s_l, x_u = training_arrays(bundle)
    data = TrainData(x_l, y_s_l, x_u)
    params = init_model(substream(train_config.seed, "init"), x_l.shape[1],
                        bundle.space, embed_dim=bundle.space.n_classes,
                        config=gen_config)
    state = init_train_state(params, clf_graph, data, gen_config, train_config,
                             prior_graph=prior_graph)
    run_training(state, data)
    d_e = build_estimated_labeled(bundle.d_l, prior_graph or clf_graph)
    return PipelineResult(variant, state, clf_graph, prior_graph, d_e)


def synthesize(result: PipelineResult, n_s: int, seed: int) -> list:
    """Draw a synthetic labeled set from a trained pipeline."""
    rng = substream(seed, "generation")
    return sample_labeled(n_s, result.clf_graph, result.state.params,
                          result.state.gen_config, rng,
                          label_model=result.state.label_model,
                          prior_graph=result.prior_graph)


def select_synthetic_size(result: PipelineResult, ds_grid, seed: int,
                          downstream: DownstreamConfig = DownstreamConfig(),
                          holdout_fraction: float = 0.2) -> tuple:
    """Pick |D_s| by validation mAP on a held-out slice of D_e.

    The holdout is scored against the estimated labels, never the test set.
    Returns (best size, {size: validation mAP}).
    """
    d_e = result.d_e
    n_hold = max(1, int(round(holdout_fraction * len(d_e))))
    rng = substream(seed, "data")
    perm = rng.permutation(len(d_e))
    hold = [d_e[i] for i in perm[:n_hold]]
    fit = [d_e[i] for i in perm[n_hold:]]
    scores = {}
    for n_s in ds_grid:
        d_s = synthesize(result, n_s, seed) if n_s > 0 else []
        report = train_downstream(fit + d_s, hold, result.clf_graph,
                                  arch="graph-aware", seed=seed,
                                  config=downstream)
        scores[n_s] = report.map
    best = max(scores, key=lambda k: (scores[k], -k))
    return best, scores


def augmented_report(result: PipelineResult, bundle: DatasetBundle, n_s: int,
                     seed: int,
                     downstream: DownstreamConfig = DownstreamConfig(),
                     arch: str = "graph-aware",
                     config_hash: str = "") -> MetricReport:
    """Score the downstream classifier on test after training on D_e with
    ``n_s`` synthetic instances added; ``n_s = 0`` is the no-augmentation row."""
    d_s = synthesize(result, n_s, seed) if n_s > 0 else []
    return train_downstream(result.d_e + d_s, bundle.test, result.clf_graph,
                            arch=arch, seed=seed, config=downstream,
                            config_hash=config_hash)


def run_ablation(variant: str, bundle: DatasetBundle, relations: dict,
                 gen_config: GenConfig, train_config: TrainConfig, n_s: int,
                 downstream: DownstreamConfig = DownstreamConfig(),
                 config_hash: str = "") -> MetricReport:
    """One ablation variant end to end: train, synthesize, score downstream."""
    result = run_pipeline(bundle, relations, gen_config, train_config, variant)
    arch = "independent" if variant == "addes-cnn" else "graph-aware"
    return augmented_report(result, bundle, n_s, train_config.seed,
                            downstream=downstream, arch=arch,
                            config_hash=config_hash)


def encode_mean(params, x: np.ndarray) -> np.ndarray:
    mu, _ = encode(x, params)
    return mu.values


def linear_probe_scores(z_train: np.ndarray, y_train: np.ndarray,
                        z_test: np.ndarray, ridge: float = 1e-3) -> np.ndarray:
    """Closed-form ridge regression from latent codes to labels."""
    a = np.hstack([z_train, np.ones((z_train.shape[0], 1))])
    gram = a.T @ a + ridge * np.eye(a.shape[1])
    weights = np.linalg.solve(gram, a.T @ y_train)
    return np.hstack([z_test, np.ones((z_test.shape[0], 1))]) @ weights


def disentanglement_probe(result: PipelineResult,
                          bundle: DatasetBundle) -> tuple:
    """Macro tag AUC of a z-probe vs the classifier reading x directly."""
    x_l = np.array([inst.x for inst in bundle.d_l])
    y_l = np.array([inst.y_s for inst in bundle.d_l])
    x_test = np.array([inst.x for inst in bundle.test])
    y_test = np.array([inst.y_s for inst in bundle.test])

    params = result.state.params
    probe = linear_probe_scores(encode_mean(params, x_l), y_l,
                                encode_mean(params, x_test))
    _, _, _, probe_auc = macro_metrics(probe, y_test, bundle.space.inexact)
    pred = classify(x_test, result.clf_graph, params.classifier)
    _, _, _, clf_auc = macro_metrics(pred.tag_probs.values, y_test,
                                     bundle.space.inexact)
    return probe_auc, clf_auc


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    grid: tuple
    seeds: tuple

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ValueError(f"variable must be one of {SWEEP_VARIABLES}")
        if len(self.grid) == 0:
            raise ValueError("sweep grid is empty")
        if len(self.seeds) == 0:
            raise ValueError("sweep needs at least one seed")


def _report_row(variant: str, variable: str, value, seed: int,
                report: MetricReport, space: LabelSpace) -> dict:
    row = {"variant": variant, "variable": variable, "value": value,
           "seed": seed, "map": report.map, "auc": report.auc}
    for name in space.target:
        row[f"ap_{name}"] = report.per_class_ap.get(name, float("nan"))
        row[f"auc_{name}"] = report.per_class_auc.get(name, float("nan"))
    return row


def run_sweep(spec: SweepSpec, planted_config: PlantedConfig,
              gen_config: GenConfig, train_config: TrainConfig,
              n_s_default: int = 500,
              downstream: DownstreamConfig = DownstreamConfig(),
              csv_path=None) -> list:
    """One full pipeline run per (grid value, seed); rows ready for CSV."""
    rows = []
    if spec.variable == "size_of_ds":
        # the generator does not depend on |D_s|; train once per seed
        for seed in spec.seeds:
            bundle, _ = generate_planted(planted_config, seed)
            tc = replace(train_config, seed=seed)
            result = run_pipeline(bundle, bundle.planted.parents, gen_config, tc)
            for value in spec.grid:
                report = augmented_report(result, bundle, int(value), seed,
                                          downstream=downstream)
                rows.append(_report_row("full", spec.variable, value, seed,
                                        report, bundle.space))
        rows.sort(key=lambda r: (spec.grid.index(r["value"]),
                                 spec.seeds.index(r["seed"])))
    else:
        for value in spec.grid:
            pc, gc = planted_config, gen_config
            if spec.variable == "size_of_dl":
                pc = replace(planted_config, n_labeled=int(value))
            elif spec.variable == "alpha":
                gc = replace(gen_config, alpha=float(value))
            else:
                gc = replace(gen_config, beta=float(value))
            for seed in spec.seeds:
                bundle, _ = generate_planted(pc, seed)
                tc = replace(train_config, seed=seed)
                result = run_pipeline(bundle, bundle.planted.parents, gc, tc)
                report = augmented_report(result, bundle, n_s_default, seed,
                                          downstream=downstream)
                rows.append(_report_row("full", spec.variable, value, seed,
                                        report, bundle.space))
    if csv_path is not None:
        write_sweep_csv(csv_path, rows)
    return rows


def write_sweep_csv(path, rows: list) -> None:
    if not rows:
        raise ValueError("no sweep rows to write")
    columns = list(rows[0].keys())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def write_curve(path, xs, ys) -> None:
    """Two plain columns per line, ready for any plotting tool."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in zip(xs, ys):
            fh.write(f"{x} {y}\n")


def mean_curve(rows: list) -> tuple:
    """Collapse sweep rows to (values, mean mAP per value)."""
    values = []
    for row in rows:
        if row["value"] not in values:
            values.append(row["value"])
    means = [float(np.mean([r["map"] for r in rows if r["value"] == v]))
             for v in values]
    return values, means
