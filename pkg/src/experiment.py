"""End-to-end runs: stage-1 encoder once, stage-2 bag classifier repeated with shifted seeds."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd
from joblib import Parallel, delayed

from .config import OBJECTIVES, MilConfig, TrainConfig
from .dataio import LabeledFeatureSet
from .encoder import EncoderModel, TrainHistory, extract_embeddings, train_encoder
from .errors import ConfigError
from .metrics import METRIC_NAMES, Metrics, evaluate, mean_metrics
from .mil import SlidePrediction, bags_for_set, predict_slides, slide_truth, train_mil
from .run_log import NULL_LOG, RunLog

PathLike = Union[str, Path]

# (row label, prototype mode) in report order
ABLATION_STRATEGIES = (("global", "global"), ("local", "local"), ("global+local", "hierarchical"))


@dataclass
class ExperimentResult:
    variant: str
    runs: List[Metrics]
    mean: Metrics
    history: TrainHistory
    model: EncoderModel
    predictions: List[List[SlidePrediction]] = field(default_factory=list)
    truth: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class AblationRow:
    strategy: str
    prototypes: int
    metrics: Metrics


def _one_repeat(
    train_embedded: LabeledFeatureSet,
    test_embedded: LabeledFeatureSet,
    mil_cfg: MilConfig,
    repeat: int,
    log: RunLog,
) -> Tuple[Metrics, List[SlidePrediction], Mapping[str, int]]:
    cfg = replace(mil_cfg, seed=mil_cfg.seed + repeat)
    classifier = train_mil(bags_for_set(train_embedded, cfg), cfg, log)
    test_bags = bags_for_set(test_embedded, cfg)
    truth = slide_truth(test_bags)
    predictions = predict_slides(classifier, test_bags)
    metrics = evaluate(predictions, truth)
    log.event("run", repeat=repeat, **metrics.as_dict())
    return metrics, predictions, truth


def run_experiment(
    train_set: LabeledFeatureSet,
    test_set: LabeledFeatureSet,
    encoder_cfg: TrainConfig,
    mil_cfg: MilConfig,
    variant: str = "geodesic",
    repeats: int = 10,
    log: RunLog = NULL_LOG,
) -> ExperimentResult:
    """Mean slide metrics over ``repeats`` bag-classifier runs on one trained encoder.

    ``variant`` picks the stage-1 objective; repeat ``r`` uses ``mil.seed + r``.
    """

    if variant not in OBJECTIVES:
        raise ConfigError(f"variant must be one of {OBJECTIVES} (got {variant!r})")
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1 (got {repeats})")
    mil_cfg.validate()
    cfg = replace(encoder_cfg, objective=variant)
    model, history = train_encoder(train_set, cfg, log)
    train_embedded = train_set.with_features(extract_embeddings(model, train_set))
    test_embedded = test_set.with_features(extract_embeddings(model, test_set))
    jobs = (delayed(_one_repeat)(train_embedded, test_embedded, mil_cfg, r, log) for r in range(repeats))
    if cfg.n_jobs == 1:
        outcomes = [fn(*args, **kwargs) for fn, args, kwargs in jobs]
    else:
        outcomes = Parallel(n_jobs=cfg.n_jobs, prefer="threads")(jobs)
    runs = [metrics for metrics, _, _ in outcomes]
    mean = mean_metrics(runs)
    log.event("experiment", variant=variant, repeats=repeats, **mean.as_dict())
    return ExperimentResult(
        variant=variant,
        runs=runs,
        mean=mean,
        history=history,
        model=model,
        predictions=[predictions for _, predictions, _ in outcomes],
        truth=outcomes[0][2],
    )


def ablate_prototypes(
    train_set: LabeledFeatureSet,
    test_set: LabeledFeatureSet,
    encoder_cfg: TrainConfig,
    mil_cfg: MilConfig,
    repeats: int = 10,
    log: RunLog = NULL_LOG,
) -> List[AblationRow]:
    """One geodesic pipeline per prototype strategy: global (n=1), local (n), and both."""

    classes = len(train_set.classes)
    rows: List[AblationRow] = []
    for label, mode in ABLATION_STRATEGIES:
        cfg = replace(encoder_cfg, prototype_mode=mode)
        per_class = cfg.subclasses + (1 if mode == "hierarchical" else 0)
        log.event("ablation", strategy=label, prototypes=classes * per_class)
        result = run_experiment(train_set, test_set, cfg, mil_cfg, "geodesic", repeats, log)
        rows.append(AblationRow(strategy=label, prototypes=classes * per_class, metrics=result.mean))
    return rows


def _write_frame(frame: pd.DataFrame, path: PathLike) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(p, index=False, float_format="%.6f")


def write_predictions_csv(predictions: Sequence[SlidePrediction], truth: Mapping[str, int], path: PathLike) -> None:
    frame = pd.DataFrame(
        [
            {
                "slide_id": p.slide_id,
                "true_label": truth[p.slide_id],
                "predicted_label": p.final_label,
                "vote_fraction": p.vote_fraction,
            }
            for p in predictions
        ],
        columns=["slide_id", "true_label", "predicted_label", "vote_fraction"],
    )
    _write_frame(frame, path)


def metrics_frame(runs: Sequence[Metrics], variant: str, mean: Optional[Metrics] = None) -> pd.DataFrame:
    """One row per run plus a trailing ``mean`` row."""

    records = [{"run": str(index), "variant": variant, **run.as_dict()} for index, run in enumerate(runs)]
    records.append({"run": "mean", "variant": variant, **(mean or mean_metrics(runs)).as_dict()})
    return pd.DataFrame(records, columns=["run", "variant", *METRIC_NAMES])


def write_metrics_csv(result: ExperimentResult, path: PathLike) -> None:
    _write_frame(metrics_frame(result.runs, result.variant, result.mean), path)


def write_ablation_csv(rows: Sequence[AblationRow], path: PathLike) -> None:
    frame = pd.DataFrame(
        [{"strategy": row.strategy, "prototypes": row.prototypes, **row.metrics.as_dict()} for row in rows],
        columns=["strategy", "prototypes", *METRIC_NAMES],
    )
    _write_frame(frame, path)


__all__ = [
    "ABLATION_STRATEGIES",
    "ExperimentResult",
    "AblationRow",
    "run_experiment",
    "ablate_prototypes",
    "write_predictions_csv",
    "metrics_frame",
    "write_metrics_csv",
    "write_ablation_csv",
]
