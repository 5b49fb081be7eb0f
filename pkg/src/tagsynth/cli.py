"""Command line entry point: one subcommand per pipeline stage.

Every run is pinned by a JSON config document plus ``--set`` overrides;
each command records the config hash next to its outputs so an artifact
can always be traced back to the exact settings that produced it.

Exit codes: 0 success, 2 configuration or validation problem, 3 runtime
or numeric failure.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .config import (
    RunConfig,
    apply_overrides,
    config_hash,
    load_config,
    to_dict,
    with_seed,
)
from .data import (
    Instance,
    _write_jsonl,
    build_estimated_labeled,
    generate_planted,
    load_bundle,
    save_bundle,
    training_arrays,
)
from .evaluation import (
    ABLATION_VARIANTS,
    SweepSpec,
    baseline_entropy_reg,
    estimated_graph,
    mean_curve,
    run_ablation,
    run_sweep,
    train_downstream,
    write_curve,
)
from .generative import init_model, sample_labeled
from .labelgraph import (
    GraphError,
    UnknownClassError,
    conditional_adjacency,
    count_cooccurrence,
    link_targets,
    load_graph,
    save_graph,
)
from .rng import substream
from .training import (
    ConfigError,
    TrainData,
    init_train_state,
    load_generator,
    run_training,
    save_checkpoint,
    write_history_csv,
)

VALIDATION_ERRORS = (ConfigError, UnknownClassError, GraphError, ValueError,
                     KeyError, FileNotFoundError, NotADirectoryError,
                     json.JSONDecodeError)


def _record_run(config: RunConfig, command: str, outputs: list) -> None:
    os.makedirs(config.out_dir, exist_ok=True)
    payload = {"command": command, "config_hash": config_hash(config),
               "seed": config.seed, "outputs": sorted(outputs),
               "config": to_dict(config)}
    path = os.path.join(config.out_dir, f"run-{command}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _data_dir(config: RunConfig, args) -> str:
    return args.data if args.data else os.path.join(config.out_dir, "data")


def cmd_synth_data(config: RunConfig, args) -> int:
    bundle, _ = generate_planted(config.data, config.seed)
    directory = _data_dir(config, args)
    save_bundle(directory, bundle)
    _record_run(config, "synth-data", [directory])
    print(f"wrote {directory}: |D_l|={len(bundle.d_l)} "
          f"|D_u|={len(bundle.d_u)} |test|={len(bundle.test)} "
          f"config={config_hash(config)[:12]}")
    return 0


def _load_relations(args, bundle) -> dict:
    if args.relations:
        with open(args.relations, encoding="utf-8") as fh:
            relations = json.load(fh)
        if not isinstance(relations, dict):
            raise ConfigError("relations file must map target names to "
                              "lists of tag names")
        return relations
    if bundle.planted is not None:
        return bundle.planted.parents
    raise ConfigError("no --relations file given and the dataset metadata "
                      "carries no known label links")


def cmd_build_graph(config: RunConfig, args) -> int:
    bundle = load_bundle(_data_dir(config, args))
    relations = _load_relations(args, bundle)
    y_s = np.array([inst.y_s for inst in bundle.d_l])
    counts = count_cooccurrence(y_s, bundle.space)
    graph = link_targets(conditional_adjacency(counts), relations,
                         bundle.space)
    path = args.graph or os.path.join(config.out_dir, "graph.json")
    save_graph(graph, path)
    _record_run(config, "build-graph", [path])
    print(f"wrote {path}: {graph.adjacency.shape[0]} classes, "
          f"{int(np.count_nonzero(graph.adjacency))} nonzero edges")
    return 0


def cmd_train(config: RunConfig, args) -> int:
    bundle = load_bundle(_data_dir(config, args))
    graph_path = args.graph or os.path.join(config.out_dir, "graph.json")
    graph = load_graph(graph_path)
    x_l, y_s_l, x_u = training_arrays(bundle)
    data = TrainData(x_l, y_s_l, x_u)
    params = init_model(substream(config.seed, "init"), x_l.shape[1],
                        bundle.space, embed_dim=bundle.space.n_classes,
                        config=config.gen)
    state = init_train_state(params, graph, data, config.gen, config.train)
    run_training(state, data)
    ckpt_path = os.path.join(config.out_dir, "checkpoint.json")
    log_path = os.path.join(config.out_dir, "training_log.csv")
    save_checkpoint(ckpt_path, state)
    write_history_csv(log_path, state.history)
    _record_run(config, "train", [ckpt_path, log_path])
    best = state.best_val if state.best_val is not None else float("nan")
    print(f"trained {len(state.history)} epochs, best validation loss "
          f"{best:.6f}; wrote {ckpt_path}")
    return 0


def _load_trained_model(config: RunConfig, args, graph):
    params = init_model(substream(config.seed, "init"), config.data.d_x,
                        graph.space, embed_dim=graph.space.n_classes,
                        config=config.gen)
    ckpt_path = args.checkpoint or os.path.join(config.out_dir,
                                                "checkpoint.json")
    label_model = load_generator(ckpt_path, params)
    return params, label_model


def cmd_generate(config: RunConfig, args) -> int:
    if args.n is not None and args.n <= 0:
        raise ConfigError(f"--n must be positive, got {args.n}")
    n_s = args.n if args.n is not None else max(config.n_synthetic, 1)
    graph_path = args.graph or os.path.join(config.out_dir, "graph.json")
    graph = load_graph(graph_path)
    params, label_model = _load_trained_model(config, args, graph)
    triples = sample_labeled(n_s, graph, params, config.gen,
                             substream(config.seed, "generation"),
                             label_model=label_model)
    path = args.out_file or os.path.join(config.out_dir, "synthetic.jsonl")
    instances = [Instance(x=x, y_s=y_s, y_t=y_t) for x, y_s, y_t in triples]
    _write_jsonl(path, instances)
    _record_run(config, "generate", [path])
    print(f"wrote {path}: {n_s} synthetic instances")
    return 0


def _report_rows(reports: dict, class_names) -> list:
    rows = []
    for name, (n_s, report) in reports.items():
        row = {"row": name, "n_s": n_s, "map": report.map,
               "auc": report.auc, "seed": report.seed,
               "config_hash": report.config_hash}
        for cls in class_names:
            row[f"ap_{cls}"] = report.per_class_ap.get(cls, float("nan"))
        rows.append(row)
    return rows


def _write_rows(path, rows: list) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def cmd_evaluate(config: RunConfig, args) -> int:
    bundle = load_bundle(_data_dir(config, args))
    graph_path = args.graph or os.path.join(config.out_dir, "graph.json")
    graph = load_graph(graph_path)
    params, label_model = _load_trained_model(config, args, graph)
    d_e = build_estimated_labeled(bundle.d_l, graph)
    n_s = args.n if args.n is not None else config.n_synthetic
    if n_s < 0:
        raise ConfigError(f"--n must be nonnegative, got {n_s}")
    digest = config_hash(config)

    d_s = []
    if n_s > 0:
        triples = sample_labeled(n_s, graph, params, config.gen,
                                 substream(config.seed, "generation"),
                                 label_model=label_model)
        d_s = triples
    baseline = train_downstream(d_e, bundle.test, graph, "graph-aware",
                                config.seed, config.downstream, digest)
    augmented = train_downstream(d_e + d_s, bundle.test, graph, "graph-aware",
                                 config.seed, config.downstream, digest)
    entropy = baseline_entropy_reg(d_e, bundle.d_u, bundle.test, bundle.space,
                                   config.seed, config=config.downstream,
                                   config_hash=digest)
    rows = _report_rows({"d_e-only": (0, baseline),
                         "augmented": (n_s, augmented),
                         "entropy-reg": (0, entropy)},
                        bundle.space.target)
    path = os.path.join(config.out_dir, "evaluation.csv")
    _write_rows(path, rows)
    _record_run(config, "evaluate", [path])
    for row in rows:
        print(f"{row['row']}: n_s={row['n_s']} map={row['map']:.4f} "
              f"auc={row['auc']:.4f}")
    return 0


def cmd_sweep(config: RunConfig, args) -> int:
    spec = SweepSpec(config.sweep_variable, config.sweep_grid,
                     config.sweep_seeds)
    csv_path = os.path.join(config.out_dir, "sweep.csv")
    os.makedirs(config.out_dir, exist_ok=True)
    rows = run_sweep(spec, config.data, config.gen, config.train,
                     n_s_default=config.n_synthetic,
                     downstream=config.downstream, csv_path=csv_path)
    curve_path = os.path.join(config.out_dir, "sweep_curve.txt")
    values, means = mean_curve(rows)
    write_curve(curve_path, values, means)
    _record_run(config, "sweep", [csv_path, curve_path])
    print(f"wrote {csv_path}: {len(rows)} rows over "
          f"{len(spec.grid)} values x {len(spec.seeds)} seeds")
    return 0


def cmd_ablate(config: RunConfig, args) -> int:
    bundle, _ = generate_planted(config.data, config.seed)
    digest = config_hash(config)
    reports = {}
    for variant in ABLATION_VARIANTS:
        report = run_ablation(variant, bundle, bundle.planted.parents,
                              config.gen, config.train,
                              n_s=config.n_synthetic,
                              downstream=config.downstream,
                              config_hash=digest)
        reports[variant] = (config.n_synthetic, report)
    rows = _report_rows(reports, bundle.space.target)
    path = os.path.join(config.out_dir, "ablation.csv")
    os.makedirs(config.out_dir, exist_ok=True)
    _write_rows(path, rows)
    _record_run(config, "ablate", [path])
    for row in rows:
        print(f"{row['row']}: map={row['map']:.4f} auc={row['auc']:.4f}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tagsynth",
        description="Train a label-conditioned generator on inexactly "
                    "labeled data and benchmark synthetic augmentation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--set", dest="overrides", action="append",
                       default=[], metavar="PATH=VALUE",
                       help="override a config field by dotted path")
        p.add_argument("--out", help="output directory (overrides config)")
        if name in ("build-graph", "train", "evaluate", "synth-data"):
            p.add_argument("--data", help="dataset directory")
        if name == "build-graph":
            p.add_argument("--relations",
                           help="JSON file mapping targets to linked tags")
            p.add_argument("--graph", help="output graph path")
        if name in ("train", "generate", "evaluate"):
            p.add_argument("--graph", help="graph JSON path")
        if name in ("generate", "evaluate"):
            p.add_argument("--checkpoint", help="trained checkpoint path")
            p.add_argument("--n", type=int,
                           help="synthetic instances to draw")
        if name == "generate":
            p.add_argument("--out-file", help="output JSONL path")
    return parser


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.overrides:
        config = apply_overrides(config, args.overrides)
    if args.out:
        config = replace(config, out_dir=args.out)
    return with_seed(config, config.seed)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _resolve_config(args)
        return COMMANDS[args.command](config, args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports all
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
