"""Metric-learning engine over frozen text embeddings.

Trains a projection head and classification head with adaptive density
discrimination objectives (focal weighting, optional inferential infusion
of implied-meaning embeddings) and ships the matching latent-space
diagnostic suite.
"""

from .data import (
    Dataset,
    DatasetError,
    EmbeddedSample,
    SplitPair,
    SyntheticSpec,
    dump_dataset,
    generate_synthetic,
    load_dataset,
    split,
    validate,
)
from .clusters import (
    ClusterError,
    ClusterIndex,
    NeighborhoodBatch,
    build_index,
    dump_index,
    kmeans,
    load_index,
    sample_batch,
    select_imposters,
    select_seed,
)
from .objective import (
    BatchStats,
    ObjectiveConfig,
    ace_loss,
    add_loss,
    batch_stats,
    combined_loss,
    grad_check,
    p_add,
    p_add_inf,
)
from .model import (
    ClassificationHead,
    Metrics,
    ProjectionHead,
    TrainConfig,
    TrainedModel,
    classify,
    evaluate,
    load_checkpoint,
    predict,
    predict_batch,
    predict_nearest_cluster,
    project,
    save_checkpoint,
    train,
)
from .analysis import (
    LabeledPointSet,
    acld,
    ald,
    dump_latent,
    implicit_implied_silhouette,
    motivation_report,
    relative_explicit_distance,
    silhouette,
)

__version__ = "0.1.0"
