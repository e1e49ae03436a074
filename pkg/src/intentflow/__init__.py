"""Four-task lifecycle for intent systems over embedding vectors.

The package trains a contrastive representation, classifies known
intents by nearest centroid, flags out-of-distribution queries with a
Mahalanobis score, clusters the flagged pool into candidate new intents,
and retrains on a replay mix so old and new intents share one model.

Modules
-------
data        datasets, catalogs, splits, interchange formats
encoder     projection network with inverted dropout
scl         supervised-contrastive pre-training loop
baseline    cross-entropy fine-tuning baseline
centroid    nearest-centroid model with shared covariance
detection   threshold calibration and IND/OOD partitioning
discovery   k-means clustering and pseudo-label minting
continual   replay construction, retraining, final evaluation
metrics     F1 / AUROC / AUPR / FPR@TPR / NMI / ARI / clustering ACC
workflow    disk-artifact pipeline shared by the CLI
"""

from .baseline import (LinearHead, ce_grad, ce_loss, fc_classify,
                       fc_classify_batch, ft_train)
from .centroid import CentroidModel, fit, mahalanobis
from .continual import (ReplaySet, build_replay_set, evaluate_continual,
                        map_discovered_predictions, retrain)
from .data import (Dataset, LabelCatalog, Sample, SplitBundle,
                   generate_synthetic, load_embedding_matrix, load_jsonl,
                   load_labels, make_splits, save_embedding_matrix,
                   save_jsonl, save_labels, segment_intents)
from .detection import (DetectionCalibration, calibrate, judge, partition,
                        score, score_batch)
from .discovery import ClusteringResult, assign_pseudo_labels, kmeans
from .encoder import ProjectionEncoder, l2_normalize, mean_pool
from .metrics import (MetricsReport, ari, aupr, clustering_acc, fpr_at_tpr,
                      micro_macro_f1, nmi, roc_auroc)
from .scl import SclConfig, TrainRecord, pretrain, scl_grad, scl_loss
from .workflow import (ConfigError, PrerequisiteError, WorkflowConfig,
                       load_config, run_stage, run_workflow)

__all__ = [
    "Sample", "Dataset", "LabelCatalog", "SplitBundle",
    "load_jsonl", "save_jsonl", "load_embedding_matrix",
    "save_embedding_matrix", "load_labels", "save_labels",
    "segment_intents", "make_splits", "generate_synthetic",
    "ProjectionEncoder", "l2_normalize", "mean_pool",
    "SclConfig", "TrainRecord", "scl_loss", "scl_grad", "pretrain",
    "LinearHead", "ce_loss", "ce_grad", "ft_train",
    "fc_classify", "fc_classify_batch",
    "CentroidModel", "fit", "mahalanobis",
    "DetectionCalibration", "score", "score_batch", "calibrate", "judge",
    "partition",
    "ClusteringResult", "kmeans", "assign_pseudo_labels",
    "ReplaySet", "build_replay_set", "retrain",
    "map_discovered_predictions", "evaluate_continual",
    "MetricsReport", "micro_macro_f1", "roc_auroc", "aupr", "fpr_at_tpr",
    "nmi", "ari", "clustering_acc",
    "WorkflowConfig", "load_config", "run_workflow", "run_stage",
    "ConfigError", "PrerequisiteError",
]
