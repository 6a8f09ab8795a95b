"""Geodesic prototype learning with multiple-instance slide classification."""

from .cluster import ManifoldState, PrototypeSet, SubclassPartition, agglomerate, refresh_manifold
from .config import LossConfig, MilConfig, PipelineConfig, TrainConfig, load_pipeline_config
from .dataio import LabeledFeatureSet, gen_interleaved_manifolds, load_feature_table, split_by_group
from .encoder import EncoderModel, extract_embeddings, train_encoder
from .errors import AssignmentError, ConfigError, DataError, ManifoldError, NumericError
from .experiment import ablate_prototypes, run_experiment
from .graph import GeodesicMatrix, NeighborGraph, build_knn_graph, geodesic_all_pairs
from .losses import Batch, LossValue, cosine_prototype_loss, cross_entropy, hausdorff, manifold_loss, total_loss
from .metrics import Metrics, evaluate
from .mil import MilBag, MilClassifier, make_bags, predict_slide, train_mil

__all__ = [
    "ManifoldState",
    "PrototypeSet",
    "SubclassPartition",
    "agglomerate",
    "refresh_manifold",
    "LossConfig",
    "MilConfig",
    "PipelineConfig",
    "TrainConfig",
    "load_pipeline_config",
    "LabeledFeatureSet",
    "gen_interleaved_manifolds",
    "load_feature_table",
    "split_by_group",
    "EncoderModel",
    "extract_embeddings",
    "train_encoder",
    "AssignmentError",
    "ConfigError",
    "DataError",
    "ManifoldError",
    "NumericError",
    "ablate_prototypes",
    "run_experiment",
    "GeodesicMatrix",
    "NeighborGraph",
    "build_knn_graph",
    "geodesic_all_pairs",
    "Batch",
    "LossValue",
    "cosine_prototype_loss",
    "cross_entropy",
    "hausdorff",
    "manifold_loss",
    "total_loss",
    "Metrics",
    "evaluate",
    "MilBag",
    "MilClassifier",
    "make_bags",
    "predict_slide",
    "train_mil",
]
