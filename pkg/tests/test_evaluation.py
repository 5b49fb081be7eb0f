import csv
import math

import numpy as np
import pytest

from helpers import brute_force_average_precision, brute_force_roc_auc
from tagsynth.data import PlantedConfig, generate_planted
from tagsynth.evaluation import (
    DownstreamConfig,
    MetricReport,
    SweepSpec,
    augmented_report,
    average_precision,
    baseline_entropy_reg,
    disentanglement_probe,
    estimated_graph,
    macro_metrics,
    mean_curve,
    roc_auc,
    run_ablation,
    run_pipeline,
    run_sweep,
    select_synthetic_size,
    synthesize,
    train_downstream,
    write_curve,
    write_sweep_csv,
)
from tagsynth.generative import GenConfig
from tagsynth.labelgraph import zero_graph
from tagsynth.training import TrainConfig

MICRO_PLANTED = PlantedConfig(n_inexact=4, n_target=2, d_x=8, n_labeled=40,
                              n_unlabeled=60, n_test=40, parents_per_target=2)
MICRO_GEN = GenConfig(latent_dim=4, encoder_hidden=(16,), decoder_hidden=(16,),
                      extractor_hidden=(16,), feature_dim=8, gcn_hidden=())
MICRO_TRAIN = TrainConfig(batch_size=16, pretrain_classifier_epochs=1,
                          pretrain_autoencoder_epochs=1, joint_epochs=2,
                          early_stop_patience=0)
MICRO_DOWN = DownstreamConfig(epochs=8, batch_size=32, extractor_hidden=(16,),
                              feature_dim=8)


def micro_pipeline(seed=0):
    bundle, _ = generate_planted(MICRO_PLANTED, seed)
    tc = TrainConfig(batch_size=16, seed=seed, pretrain_classifier_epochs=1,
                     pretrain_autoencoder_epochs=1, joint_epochs=2,
                     early_stop_patience=0)
    result = run_pipeline(bundle, bundle.planted.parents, MICRO_GEN, tc)
    return bundle, result


def test_average_precision_fixtures():
    assert average_precision([0.9, 0.8, 0.7], [0, 1, 0]) == 0.5
    assert average_precision([0.9, 0.8, 0.7], [1, 1, 0]) == 1.0
    assert average_precision([0.1, 0.2, 0.9], [1, 1, 0]) == pytest.approx(
        (1.0 / 2 + 2.0 / 3) / 2)
    with pytest.raises(ValueError):
        average_precision([0.5, 0.5], [0, 0])


def test_average_precision_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = 10
        scores = np.round(rng.random(n), 1)  # coarse grid forces ties
        labels = (rng.random(n) < 0.4).astype(float)
        if labels.sum() == 0:
            labels[rng.integers(n)] = 1.0
        assert average_precision(scores, labels) == pytest.approx(
            brute_force_average_precision(scores, labels), abs=1e-12)


def test_roc_auc_fixtures():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5
    assert roc_auc([0.1, 0.9], [1, 0]) == 0.0
    with pytest.raises(ValueError):
        roc_auc([0.5, 0.6], [1, 1])


def test_roc_auc_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = 20
        scores = np.round(rng.random(n), 1)
        labels = (rng.random(n) < 0.5).astype(float)
        if labels.sum() == 0:
            labels[0] = 1.0
        if labels.sum() == n:
            labels[0] = 0.0
        assert roc_auc(scores, labels) == pytest.approx(
            brute_force_roc_auc(scores, labels), abs=1e-12)


def test_metrics_invariant_under_monotone_transform():
    rng = np.random.default_rng(2)
    scores = rng.random(15)
    labels = (rng.random(15) < 0.5).astype(float)
    labels[0], labels[1] = 1.0, 0.0
    squashed = 1.0 / (1.0 + np.exp(-(3.0 * scores + 1.0)))
    assert average_precision(scores, labels) == pytest.approx(
        average_precision(squashed, labels), abs=1e-12)
    assert roc_auc(scores, labels) == pytest.approx(
        roc_auc(squashed, labels), abs=1e-12)


def test_macro_metrics_skips_degenerate_classes():
    scores = np.array([[0.9, 0.4], [0.2, 0.6], [0.7, 0.5]])
    labels = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    with pytest.warns(UserWarning, match="no positives"):
        per_ap, macro_ap, per_auc, _ = macro_metrics(scores, labels, ("a", "b"))
    assert set(per_ap) == {"a"}
    assert macro_ap == per_ap["a"]
    all_pos = np.array([[1.0], [1.0]])
    with pytest.warns(UserWarning, match="no negatives"):
        per_ap, _, per_auc, macro_auc = macro_metrics(
            np.array([[0.5], [0.6]]), all_pos, ("c",))
    assert per_ap["c"] == 1.0 and per_auc == {} and math.isnan(macro_auc)


def test_metric_report_rejects_out_of_range():
    with pytest.raises(ValueError):
        MetricReport({"t": 1.2}, 1.2, {"t": 0.5}, 0.5, seed=0)


def test_downstream_separates_noiseless_planted_data():
    config = PlantedConfig(n_inexact=4, n_target=2, d_x=16, n_labeled=0,
                           n_unlabeled=0, n_test=120, noise_scale=0.0,
                           flip_rate=0.0)
    bundle, graph = generate_planted(config, seed=3)
    triples = [(i.x, i.y_s, i.y_t) for i in bundle.test]
    report = train_downstream(triples, bundle.test, graph, "graph-aware",
                              seed=3, config=MICRO_DOWN)
    assert report.map >= 0.99


def test_downstream_is_deterministic_and_validates():
    bundle, graph = generate_planted(MICRO_PLANTED, seed=4)
    triples = [(i.x, i.y_s, i.y_t) for i in bundle.test]
    a = train_downstream(triples, bundle.test, graph, "graph-aware", seed=4,
                         config=MICRO_DOWN)
    b = train_downstream(triples, bundle.test, graph, "graph-aware", seed=4,
                         config=MICRO_DOWN)
    assert a.map == b.map and a.auc == b.auc
    with pytest.raises(ValueError):
        train_downstream([], bundle.test, graph, "graph-aware", seed=4)
    with pytest.raises(ValueError):
        train_downstream(triples, bundle.test, graph, "resnet", seed=4)


def test_architectures_coincide_on_zero_graph():
    bundle, _ = generate_planted(MICRO_PLANTED, seed=5)
    triples = [(i.x, i.y_s, i.y_t) for i in bundle.test]
    blank = zero_graph(bundle.space)
    a = train_downstream(triples, bundle.test, blank, "graph-aware", seed=5,
                         config=MICRO_DOWN)
    b = train_downstream(triples, bundle.test, blank, "independent", seed=5,
                         config=MICRO_DOWN)
    assert abs(a.map - b.map) < 1e-6
    assert a.map == b.map  # identical computation, not merely close


def test_entropy_baseline_reduces_to_plain_at_lambda_zero():
    bundle, graph = generate_planted(MICRO_PLANTED, seed=6)
    d_e = [type(i)(x=i.x, y_s=i.y_s, y_t=i.y_t) for i in bundle.test[:20]]
    plain = train_downstream(d_e, bundle.test, graph, "independent", seed=6,
                             config=MICRO_DOWN)
    reg0 = baseline_entropy_reg(d_e, bundle.d_u, bundle.test, bundle.space,
                                seed=6, lam=0.0, config=MICRO_DOWN)
    assert reg0.map == plain.map and reg0.auc == plain.auc
    with pytest.raises(ValueError):
        baseline_entropy_reg(d_e, [], bundle.test, bundle.space, seed=6)


def test_entropy_regularization_lowers_unlabeled_entropy():
    from tagsynth.evaluation import _fit_entropy_classifier, mean_prediction_entropy

    config = PlantedConfig(n_inexact=4, n_target=2, d_x=8, n_labeled=0,
                           n_unlabeled=150, n_test=60)
    bundle, _ = generate_planted(config, seed=7)
    d_e = bundle.test[:30]
    down = DownstreamConfig(epochs=25, batch_size=32, extractor_hidden=(16,),
                            feature_dim=8)

    def fit_and_entropy(lam):
        clf, graph, x_u = _fit_entropy_classifier(d_e, bundle.d_u,
                                                  bundle.space, seed=7,
                                                  lam=lam, config=down)
        return mean_prediction_entropy(clf, graph, x_u)

    assert fit_and_entropy(0.1) < fit_and_entropy(0.0)


def test_pipeline_variants_run_and_validate():
    bundle, _ = generate_planted(MICRO_PLANTED, seed=8)
    for variant in ("full", "addes-cnn", "addes-w"):
        result = run_pipeline(bundle, bundle.planted.parents, MICRO_GEN,
                              TrainConfig(batch_size=16, seed=8,
                                          pretrain_classifier_epochs=1,
                                          pretrain_autoencoder_epochs=1,
                                          joint_epochs=1),
                              variant=variant)
        assert result.variant == variant
        assert len(result.d_e) == len(bundle.d_l)
    with pytest.raises(ValueError):
        run_pipeline(bundle, bundle.planted.parents, MICRO_GEN, MICRO_TRAIN,
                     variant="half")
    bundle.train_truth = None
    with pytest.raises(ValueError):
        run_pipeline(bundle, bundle.planted.parents, MICRO_GEN, MICRO_TRAIN,
                     variant="addes-w")


def test_synthesize_and_size_selection():
    bundle, result = micro_pipeline(seed=9)
    d_s = synthesize(result, 12, seed=9)
    assert len(d_s) == 12
    again = synthesize(result, 12, seed=9)
    for (x1, s1, t1), (x2, s2, t2) in zip(d_s, again):
        assert np.array_equal(x1, x2) and np.array_equal(s1, s2)

    grid = (0, 10)
    best, scores = select_synthetic_size(result, grid, seed=9,
                                         downstream=MICRO_DOWN)
    assert best in grid and set(scores) == set(grid)
    for v in scores.values():
        assert 0.0 <= v <= 1.0


def test_augmented_report_zero_equals_plain_training():
    bundle, result = micro_pipeline(seed=10)
    zero = augmented_report(result, bundle, 0, seed=10, downstream=MICRO_DOWN)
    plain = train_downstream(result.d_e, bundle.test, result.clf_graph,
                             "graph-aware", seed=10, config=MICRO_DOWN)
    assert zero.map == plain.map and zero.auc == plain.auc


def test_run_ablation_reports():
    bundle, _ = generate_planted(MICRO_PLANTED, seed=11)
    for variant in ("full", "addes-cnn", "addes-w"):
        report = run_ablation(variant, bundle, bundle.planted.parents,
                              MICRO_GEN,
                              TrainConfig(batch_size=16, seed=11,
                                          pretrain_classifier_epochs=1,
                                          pretrain_autoencoder_epochs=1,
                                          joint_epochs=1),
                              n_s=10, downstream=MICRO_DOWN)
        assert 0.0 <= report.map <= 1.0


def test_disentanglement_probe_outputs():
    bundle, result = micro_pipeline(seed=12)
    probe_auc, clf_auc = disentanglement_probe(result, bundle)
    assert 0.0 <= probe_auc <= 1.0 and 0.0 <= clf_auc <= 1.0


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec(variable="gamma", grid=(1,), seeds=(0,))
    with pytest.raises(ValueError):
        SweepSpec(variable="alpha", grid=(), seeds=(0,))
    with pytest.raises(ValueError):
        SweepSpec(variable="alpha", grid=(0.1,), seeds=())


def test_run_sweep_size_of_ds(tmp_path):
    spec = SweepSpec(variable="size_of_ds", grid=(0, 10), seeds=(0, 1))
    csv_path = tmp_path / "sweep.csv"
    rows = run_sweep(spec, MICRO_PLANTED, MICRO_GEN, MICRO_TRAIN,
                     downstream=MICRO_DOWN, csv_path=csv_path)
    assert len(rows) == 4
    for row in rows:
        assert 0.0 <= row["map"] <= 1.0
        assert 0.0 <= row["auc"] <= 1.0
    with open(csv_path, newline="") as fh:
        parsed = list(csv.DictReader(fh))
    assert len(parsed) == 4
    assert parsed[0]["variant"] == "full"
    assert {r["value"] for r in parsed} == {"0", "10"}

    # the zero row is the plain no-augmentation anchor for that seed
    bundle, _ = generate_planted(MICRO_PLANTED, 0)
    tc = TrainConfig(batch_size=16, seed=0, pretrain_classifier_epochs=1,
                     pretrain_autoencoder_epochs=1, joint_epochs=2,
                     early_stop_patience=0)
    result = run_pipeline(bundle, bundle.planted.parents, MICRO_GEN, tc)
    anchor = train_downstream(result.d_e, bundle.test, result.clf_graph,
                              "graph-aware", seed=0, config=MICRO_DOWN)
    zero_row = [r for r in rows if r["value"] == 0 and r["seed"] == 0][0]
    assert zero_row["map"] == anchor.map


def test_run_sweep_alpha_variable():
    spec = SweepSpec(variable="alpha", grid=(0.1,), seeds=(0,))
    rows = run_sweep(spec, MICRO_PLANTED, MICRO_GEN, MICRO_TRAIN,
                     n_s_default=10, downstream=MICRO_DOWN)
    assert len(rows) == 1
    assert rows[0]["variable"] == "alpha" and rows[0]["value"] == 0.1


def test_curve_helpers(tmp_path):
    rows = [{"value": 0, "map": 0.5}, {"value": 0, "map": 0.7},
            {"value": 10, "map": 0.8}]
    values, means = mean_curve(rows)
    assert values == [0, 10]
    assert means[0] == pytest.approx(0.6) and means[1] == pytest.approx(0.8)
    path = tmp_path / "curve.txt"
    write_curve(path, values, means)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split() == ["0", "0.6"]
    with pytest.raises(ValueError):
        write_sweep_csv(tmp_path / "e.csv", [])


def test_estimated_graph_uses_counts():
    bundle, _ = generate_planted(MICRO_PLANTED, seed=13)
    graph = estimated_graph(bundle, bundle.planted.parents)
    assert graph.adjacency.shape == (6, 6)
    assert np.allclose(np.diag(graph.adjacency)[:4], 1.0)
    linked = graph.target_link_block
    assert np.array_equal(linked, bundle.planted.parent_matrix())
