#!/usr/bin/env python3
"""Command-line entry point for the geodesic prototype pipeline.

Each sub-command reads and writes files so stages can be run and checked one
at a time. Configuration precedence: dataclass defaults < ``--config`` YAML <
explicit flags < ``--set section.key=value``.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from jsonschema import ValidationError

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from common.io_loader import (  # noqa: E402
    BagRecord,
    read_bags_ndjson,
    read_checkpoint_json,
    write_bags_ndjson,
    write_checkpoint_json,
)
from src.cluster import refresh_manifold, write_partition, write_prototypes  # noqa: E402
from src.config import (  # noqa: E402
    LINKAGES,
    OBJECTIVES,
    POOLINGS,
    PROTOTYPE_MODES,
    PipelineConfig,
    SynthConfig,
    load_pipeline_config,
    parse_overrides,
)
from src.dataio import (  # noqa: E402
    LabeledFeatureSet,
    gen_interleaved_manifolds,
    load_feature_table,
    save_feature_table,
    split_by_group,
)
from src.encoder import extract_embeddings, model_from_payload, model_to_payload, train_encoder  # noqa: E402
from src.errors import ManifoldError  # noqa: E402
from src.experiment import (  # noqa: E402
    ablate_prototypes,
    metrics_frame,
    run_experiment,
    write_ablation_csv,
    write_metrics_csv,
    write_predictions_csv,
)
from src.graph import build_knn_graph, connected_components, geodesic_all_pairs, write_edge_list  # noqa: E402
from src.metrics import evaluate  # noqa: E402
from src.mil import (  # noqa: E402
    MilBag,
    bags_for_set,
    classifier_from_payload,
    classifier_to_payload,
    predict_slides,
    slide_truth,
    train_mil,
)
from src.run_log import RunLog  # noqa: E402

_DEFAULTS = PipelineConfig()


def _default(section: str, key: str) -> Any:
    holder = _DEFAULTS.encoder.loss if section == "loss" else getattr(_DEFAULTS, section)
    return getattr(holder, key)


def _opt(parser: argparse.ArgumentParser, flag: str, section: str, key: str, text: str, **kwargs: Any) -> None:
    """A flag that overrides ``section.key``; unset flags leave the YAML value alone."""

    parser.add_argument(flag, dest=f"{section}__{key}", default=None, help=f"{text} (default: {_default(section, key)})", **kwargs)


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Dict[str, Any]]:
    out: Dict[str, Dict[str, Any]] = {}
    for dest, value in vars(args).items():
        if "__" in dest and value is not None:
            section, key = dest.split("__", 1)
            out.setdefault(section, {})[key] = value
    return out


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = _flag_overrides(args)
    for section, values in parse_overrides(args.set or []).items():
        overrides.setdefault(section, {}).update(values)
    return load_pipeline_config(args.config, overrides)


def _run_log(args: argparse.Namespace, cfg: PipelineConfig) -> RunLog:
    return RunLog(name="manifold", log_dir=args.log_dir or cfg.experiment.log_dir, quiet=args.quiet)


def _echo_config(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    if not args.quiet:
        print("# effective configuration")
        print(cfg.to_yaml().rstrip())


def _synthesize(sc: SynthConfig) -> LabeledFeatureSet:
    return gen_interleaved_manifolds(
        n_per_class=sc.n_per_class,
        noise=sc.noise,
        turns=sc.turns,
        seed=sc.seed,
        groups_per_class=sc.groups_per_class,
        height=sc.height,
        lift_dim=sc.lift_dim,
    )


def _train_test(args: argparse.Namespace, cfg: PipelineConfig) -> Tuple[LabeledFeatureSet, LabeledFeatureSet]:
    data = load_feature_table(args.features) if args.features else _synthesize(cfg.synth)
    return split_by_group(data, cfg.synth.train_fraction, cfg.synth.seed)


def _bags_from_records(records: List[BagRecord]) -> List[MilBag]:
    return [MilBag(bag_vector=np.asarray(r.bag, dtype=float), slide_id=r.slide_id, label=r.label) for r in records]


def cmd_synth(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    data = _synthesize(cfg.synth)
    save_feature_table(data, args.out)
    print(f"Wrote {data.size} rows ({len(data.groups())} slides, D={data.dim}):", args.out)


def cmd_graph_dump(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    data = load_feature_table(args.features)
    points = data.features if args.label is None else data.features[data.class_indices(args.label)]
    graph = build_knn_graph(points, cfg.encoder.k)
    write_edge_list(graph, args.out)
    components = connected_components(graph)
    print(f"nodes={graph.node_count} edges={len(graph.edges())} components={int(components.max()) + 1}")
    if args.geodesics:
        matrix = geodesic_all_pairs(graph, n_jobs=cfg.encoder.n_jobs)
        Path(args.geodesics).parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(matrix.dist).to_csv(args.geodesics, index=False, header=False)
    print("Wrote edge list:", args.out)


def cmd_cluster_dump(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    enc = cfg.encoder
    data = load_feature_table(args.features)
    points = data.features
    if args.checkpoint:
        points = extract_embeddings(model_from_payload(read_checkpoint_json(args.checkpoint, "encoder")), data)
    state = refresh_manifold(
        data,
        points,
        k=enc.k,
        n=enc.n,
        linkage=enc.linkage,
        clustering="kmeans" if enc.objective == "cosine" else "agglomerative",
        prototype_mode=enc.prototype_mode,
        global_graph=enc.global_graph,
        n_jobs=enc.n_jobs,
        seed=enc.seed,
    )
    write_partition(state, args.out_partition)
    write_prototypes(state, args.out_prototypes)
    summary = state.summary()
    print(f"prototypes={summary['prototypes']} per_class={summary['per_class']} components={summary['components']}")


def cmd_train_encoder(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    _echo_config(args, cfg)
    data = load_feature_table(args.features)
    model, history = train_encoder(data, cfg.encoder, _run_log(args, cfg))
    write_checkpoint_json(args.checkpoint, model_to_payload(model, {"config": asdict(cfg.encoder)}))
    history.write_csv(args.history)
    print(f"Wrote encoder ({model.parameter_count} parameters):", args.checkpoint)


def cmd_embed(args: argparse.Namespace) -> None:
    data = load_feature_table(args.features)
    model = model_from_payload(read_checkpoint_json(args.checkpoint, "encoder"))
    save_feature_table(data.with_features(extract_embeddings(model, data)), args.out)
    print(f"Wrote {data.size} embeddings (D'={model.embed_dim}):", args.out)


def cmd_bags(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    embedded = load_feature_table(args.features)
    bags = bags_for_set(embedded, cfg.mil)
    count = write_bags_ndjson(
        args.out, (BagRecord(slide_id=b.slide_id, label=b.label, bag=b.bag_vector.tolist()) for b in bags)
    )
    print(f"Wrote {count} bags:", args.out)


def cmd_train_mil(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    _echo_config(args, cfg)
    bags = _bags_from_records(read_bags_ndjson(args.bags))
    classifier = train_mil(bags, cfg.mil, _run_log(args, cfg))
    write_checkpoint_json(args.checkpoint, classifier_to_payload(classifier, {"config": asdict(cfg.mil)}))
    print("Wrote bag classifier:", args.checkpoint)


def cmd_eval(args: argparse.Namespace) -> None:
    bags = _bags_from_records(read_bags_ndjson(args.bags))
    classifier = classifier_from_payload(read_checkpoint_json(args.checkpoint, "mil"))
    truth = slide_truth(bags)
    predictions = predict_slides(classifier, bags)
    metrics = evaluate(predictions, truth)
    write_predictions_csv(predictions, truth, args.predictions)
    if args.metrics:
        Path(args.metrics).parent.mkdir(parents=True, exist_ok=True)
        metrics_frame([metrics], "eval").to_csv(args.metrics, index=False, float_format="%.6f")
    print(" ".join(f"{name}={value:.4f}" for name, value in metrics.as_dict().items()))


def cmd_pipeline(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    _echo_config(args, cfg)
    train, test = _train_test(args, cfg)
    result = run_experiment(
        train, test, cfg.encoder, cfg.mil, cfg.experiment.variant, cfg.experiment.repeats, _run_log(args, cfg)
    )
    write_metrics_csv(result, args.metrics)
    if args.history:
        result.history.write_csv(args.history)
    if args.predictions:
        write_predictions_csv(result.predictions[0], result.truth, args.predictions)
    print(" ".join(f"mean_{name}={value:.4f}" for name, value in result.mean.as_dict().items()))


def cmd_ablate_prototypes(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    _echo_config(args, cfg)
    train, test = _train_test(args, cfg)
    rows = ablate_prototypes(train, test, cfg.encoder, cfg.mil, cfg.experiment.repeats, _run_log(args, cfg))
    write_ablation_csv(rows, args.out)
    for row in rows:
        print(f"{row.strategy}: prototypes={row.prototypes} accuracy={row.metrics.accuracy:.4f}")


def _common() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", default=None, help="YAML configuration file (default: built-in defaults)")
    parent.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config value (repeatable)"
    )
    parent.add_argument("--log-dir", default=None, help="directory for the JSONL run log (default: no file)")
    parent.add_argument("--quiet", action="store_true", help="suppress progress and config echo (default: off)")
    return parent


def _encoder_flags(parser: argparse.ArgumentParser, objective: bool = True) -> None:
    _opt(parser, "--k", "encoder", "k", "neighbours per node in the kNN graph", type=int)
    _opt(parser, "--n", "encoder", "n", "sub-classes per class", type=int)
    _opt(parser, "--linkage", "encoder", "linkage", "agglomerative linkage", choices=LINKAGES)
    _opt(parser, "--lr", "encoder", "lr", "stage-1 learning rate", type=float)
    _opt(parser, "--lr-decay", "encoder", "lr_decay", "time-based learning-rate decay", type=float)
    _opt(parser, "--batch-size", "encoder", "batch_size", "stage-1 mini-batch size", type=int)
    _opt(parser, "--epochs", "encoder", "epochs", "stage-1 epochs", type=int)
    _opt(parser, "--refresh-every", "encoder", "refresh_every", "epochs between prototype refreshes", type=int)
    _opt(parser, "--hidden-dims", "encoder", "hidden_dims", "trunk layer widths", type=int, nargs="+")
    _opt(parser, "--embed-dim", "encoder", "embed_dim", "embedding dimension D'", type=int)
    if objective:
        _opt(parser, "--loss", "encoder", "objective", "stage-1 objective", choices=OBJECTIVES)
    _opt(parser, "--prototype-mode", "encoder", "prototype_mode", "prototype strategy", choices=PROTOTYPE_MODES)
    _opt(parser, "--global-graph", "encoder", "global_graph", "one kNN graph over all classes", action="store_const", const=True)
    _opt(parser, "--n-jobs", "encoder", "n_jobs", "worker threads for refresh and repeats", type=int)
    _opt(parser, "--seed", "encoder", "seed", "stage-1 seed", type=int)
    _opt(parser, "--margin", "loss", "margin", "inter-subclass margin", type=float)
    _opt(parser, "--no-clamp", "loss", "inter_clamp", "disable the hinge on the inter loss", action="store_const", const=False)
    _opt(parser, "--temperature", "loss", "temperature", "cosine baseline temperature", type=float)


def _bag_flags(parser: argparse.ArgumentParser) -> None:
    _opt(parser, "--bags-per-slide", "mil", "bags_per_slide", "bags drawn per slide", type=int)
    _opt(parser, "--patches-per-bag", "mil", "patches_per_bag", "patch embeddings per bag", type=int)
    _opt(parser, "--pooling", "mil", "pooling", "bag vector pooling", choices=POOLINGS)
    _opt(parser, "--mil-seed", "mil", "seed", "bagging and stage-2 seed", type=int)


def _mil_flags(parser: argparse.ArgumentParser) -> None:
    _opt(parser, "--hidden", "mil", "classifier_hidden", "bag classifier hidden width", type=int)
    _opt(parser, "--mil-lr", "mil", "lr", "stage-2 learning rate", type=float)
    _opt(parser, "--mil-decay", "mil", "decay", "stage-2 learning-rate decay", type=float)
    _opt(parser, "--mil-epochs", "mil", "epochs", "stage-2 epochs", type=int)
    _opt(parser, "--mil-batch-size", "mil", "batch_size", "stage-2 mini-batch size", type=int)


def _data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--features", default=None, help="feature CSV split by slide (default: synthesize from [synth])")
    _opt(parser, "--data-seed", "synth", "seed", "seed for synthesis and the slide split", type=int)
    _opt(parser, "--train-fraction", "synth", "train_fraction", "fraction of slides used for training", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Geodesic prototype learning with MIL slide classification.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    common = _common()

    synth = sub.add_parser("synth", parents=[common], help="write the interleaved-manifold benchmark")
    _opt(synth, "--n", "synth", "n_per_class", "points per class", type=int)
    _opt(synth, "--noise", "synth", "noise", "Gaussian noise scale", type=float)
    _opt(synth, "--turns", "synth", "turns", "spiral turns", type=float)
    _opt(synth, "--groups", "synth", "groups_per_class", "slides per class", type=int)
    _opt(synth, "--lift-dim", "synth", "lift_dim", "rotate into this many dimensions", type=int)
    _opt(synth, "--seed", "synth", "seed", "generator seed", type=int)
    synth.add_argument("--out", required=True, help="output feature CSV")
    synth.set_defaults(func=cmd_synth)

    graph = sub.add_parser("graph-dump", parents=[common], help="write the kNN edge list (and geodesics)")
    graph.add_argument("--features", required=True, help="feature CSV")
    graph.add_argument("--label", type=int, default=None, help="restrict to one class (default: all rows)")
    _opt(graph, "--k", "encoder", "k", "neighbours per node", type=int)
    _opt(graph, "--n-jobs", "encoder", "n_jobs", "Dijkstra worker threads", type=int)
    graph.add_argument("--out", required=True, help="edge list CSV u,v,w")
    graph.add_argument("--geodesics", default=None, help="also write the geodesic matrix CSV (default: skip)")
    graph.set_defaults(func=cmd_graph_dump)

    cluster = sub.add_parser("cluster-dump", parents=[common], help="write sub-class partition and prototypes")
    cluster.add_argument("--features", required=True, help="feature CSV")
    cluster.add_argument("--checkpoint", default=None, help="encoder checkpoint to embed with first (default: raw features)")
    _encoder_flags(cluster)
    cluster.add_argument("--out-partition", required=True, help="CSV row_index,class,subclass")
    cluster.add_argument("--out-prototypes", required=True, help="CSV class,subclass,f0..")
    cluster.set_defaults(func=cmd_cluster_dump)

    train = sub.add_parser("train-encoder", parents=[common], help="stage 1: train the two-headed encoder")
    train.add_argument("--features", required=True, help="training feature CSV")
    _encoder_flags(train)
    train.add_argument("--checkpoint", required=True, help="output encoder checkpoint (JSON)")
    train.add_argument("--history", required=True, help="output per-epoch history CSV")
    train.set_defaults(func=cmd_train_encoder)

    embed = sub.add_parser("embed", parents=[common], help="write embeddings as a feature CSV")
    embed.add_argument("--features", required=True, help="feature CSV")
    embed.add_argument("--checkpoint", required=True, help="encoder checkpoint")
    embed.add_argument("--out", required=True, help="output embedding CSV")
    embed.set_defaults(func=cmd_embed)

    bags = sub.add_parser("bags", parents=[common], help="sample bags per slide from an embedding CSV")
    bags.add_argument("--features", required=True, help="embedding CSV")
    _bag_flags(bags)
    bags.add_argument("--out", required=True, help="output bags NDJSON")
    bags.set_defaults(func=cmd_bags)

    train_mil_cmd = sub.add_parser("train-mil", parents=[common], help="stage 2: train the bag classifier")
    train_mil_cmd.add_argument("--bags", required=True, help="bags NDJSON")
    _mil_flags(train_mil_cmd)
    _opt(train_mil_cmd, "--mil-seed", "mil", "seed", "stage-2 seed", type=int)
    train_mil_cmd.add_argument("--checkpoint", required=True, help="output classifier checkpoint (JSON)")
    train_mil_cmd.set_defaults(func=cmd_train_mil)

    evaluate_cmd = sub.add_parser("eval", parents=[common], help="majority-vote slide predictions and metrics")
    evaluate_cmd.add_argument("--bags", required=True, help="bags NDJSON")
    evaluate_cmd.add_argument("--checkpoint", required=True, help="classifier checkpoint")
    evaluate_cmd.add_argument("--predictions", required=True, help="output predictions CSV")
    evaluate_cmd.add_argument("--metrics", default=None, help="output metrics CSV (default: print only)")
    evaluate_cmd.set_defaults(func=cmd_eval)

    pipeline = sub.add_parser("pipeline", parents=[common], help="encoder + repeated bag classifier, mean metrics")
    _data_flags(pipeline)
    _encoder_flags(pipeline, objective=False)
    _bag_flags(pipeline)
    _mil_flags(pipeline)
    _opt(pipeline, "--variant", "experiment", "variant", "stage-1 objective for the run", choices=OBJECTIVES)
    _opt(pipeline, "--repeats", "experiment", "repeats", "stage-2 repetitions averaged", type=int)
    pipeline.add_argument("--metrics", required=True, help="output metrics CSV (per run + mean)")
    pipeline.add_argument("--history", default=None, help="output stage-1 history CSV (default: skip)")
    pipeline.add_argument("--predictions", default=None, help="output first-run predictions CSV (default: skip)")
    pipeline.set_defaults(func=cmd_pipeline)

    ablate = sub.add_parser("ablate-prototypes", parents=[common], help="global vs local vs global+local prototypes")
    _data_flags(ablate)
    _encoder_flags(ablate, objective=False)
    _bag_flags(ablate)
    _mil_flags(ablate)
    _opt(ablate, "--repeats", "experiment", "repeats", "stage-2 repetitions averaged", type=int)
    ablate.add_argument("--out", required=True, help="output ablation CSV")
    ablate.set_defaults(func=cmd_ablate_prototypes)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ManifoldError as exc:
        print(f"[{args.cmd}] error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        print(f"[{args.cmd}] error: schema violation: {exc.message}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"[{args.cmd}] error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
