"""Multi-modal KG entity alignment with progressive modality freezing.

Pipeline: per-modality encoders produce entity embeddings; relevance scores
derived from cross-KG cosine similarity progressively freeze features that
carry no alignment signal; the remaining features fuse into a joint
embedding trained with cross-KG and cross-modality contrastive losses.
"""

from .autodiff import (
    DiffTensor,
    Tape,
    constant,
    cosine_similarity_matrix,
    finite_difference_check,
    parameter,
)
from .data import (
    MODALITIES,
    AlignmentSeedSet,
    MultiModalKG,
    SyntheticSpec,
    build_bag_features,
    generate_synthetic_pair,
    load_kg_pair,
    split_seeds,
    write_kg_pair,
)
from .encoders import (
    EncoderParams,
    encode_all,
    encode_dense,
    encode_structure,
    init_encoder_pair,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    LoadError,
    MMAlignError,
    NumericError,
    ValidationError,
)
from .inference import (
    MatchResult,
    MetricsReport,
    RankingResult,
    evaluate,
    greedy_match,
    greedy_match_sims,
    hits_at_n,
    mean_reciprocal_rank,
    rank_all,
)
from .integration import (
    IntegrationOptions,
    ModalityState,
    ThresholdSchedule,
    apply_freezing,
    freeze_mask,
    fuse_modalities,
    integrate_epoch,
    relevance_scores,
)
from .objectives import LossConfig, cross_kg_loss, cross_modality_loss, total_loss
from .training import (
    OptimizerState,
    TrainConfig,
    TrainHistory,
    lr_schedule,
    optimizer_step,
    probation_update,
    train,
)

__version__ = "0.1.0"
