"""Desk-scale lab for hidden-unit-clustering speech representation learning."""

from .corpus import (
    CorpusConfig,
    InsufficientMaterialError,
    SignalSequence,
    Triplet,
    TripletSet,
    gen_corpus,
    make_abx_triplets,
)
from .encoder import EncoderArch, EncoderParams, SignalTooShortError, backward, encode, init_params
from .objective import (
    AdamState,
    CPCConfig,
    EarlyStopper,
    NonFiniteGradientError,
    TrainConfig,
    TrainResult,
    UtteranceTooShortError,
    adam_step,
    cpc_loss,
    huc_loss,
    optimizer_step,
    reg_loss,
    train_cpc,
    train_huc,
)
from .cluster import (
    Codebook,
    NoKneeError,
    PseudoLabels,
    SamplingPlan,
    assign_labels,
    kmeans,
    knee_point,
    mean_normalize,
    sample_utterances,
    select_farthest,
    select_nearest,
    utterance_mean,
)
from .dimreduce import BoostConfig, Forest, feature_importance, project_top_d, train_gbdt
from .evaluate import (
    AbxReport,
    BootstrapResult,
    ProbeConfig,
    SignalTransform,
    UedReport,
    abx_score,
    bootstrap_ci,
    cluster_purity,
    dedup,
    dtw_angular,
    levenshtein,
    linear_probe,
    ued,
)
from .pipeline import (
    ConfigError,
    MissingDependencyError,
    PipelineConfig,
    build_config,
    config_hash,
    emit_report,
    parse_config,
    run_all,
    run_stage,
)

__version__ = "0.1.0"
