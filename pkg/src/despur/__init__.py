"""Detect, name, and retrain away spurious-background failure modes.

The pipeline trains a linear head on frozen embeddings, mines the rows it
misclassifies, attributes each failure to an uncommon background by cosine
against prompt embeddings, synthesizes targeted training rows for the
worst (class, background) pairs, and retrains the head with a weighted
loss, per model or once for a whole model family.
"""

from .interchange import (
    FeatureSet,
    merge_feature_sets,
    read_feature_set,
    write_feature_set,
)
from .linear_head import (
    DivergenceError,
    LinearHead,
    TrainConfig,
    WeightedSets,
    evaluate,
    gradient,
    read_head,
    train_head,
    weighted_loss,
    write_head,
)
from .failure_mining import (
    DebugPartition,
    Failure,
    failure_iou,
    mine_failures,
    similarity_matrix,
    split_seed_heldout,
)
from .textualizer import (
    AttributionReport,
    BackgroundCatalog,
    attribute_background,
    build_attribution_report,
    build_catalog,
    dedup_backgrounds,
    parse_background_response,
    top_k_backgrounds,
)
from .synthesis import (
    GenerationRequest,
    build_requests,
    generate_debug_train,
    random_debug_train,
)
from .collective import (
    CategoryMember,
    ModelCategory,
    collective_debug_type2,
    pool_failures_type1,
    relative_accuracy,
)
from .seeds import derive_seed

__version__ = "0.1.0"
