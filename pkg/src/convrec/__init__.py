"""Conversational item recommendation with graph encoders and retrieval.

The package splits into data handling (corpus, graphs), numerics (autodiff,
optim), model components (encoders, retrieval, preference), the recommender
itself (training, evaluation, ablation), synthetic corpora for validation,
and a command-line front end (cli).
"""

from . import autodiff
from .autodiff import Tensor, finite_diff_check
from .corpus import (
    Conversation,
    EntityVocab,
    Mention,
    RecExample,
    Sentiment,
    Speaker,
    Split,
    Utterance,
    Vocab,
    WordVocab,
    derive_examples,
    load_corpus,
    load_entity_vocab,
    split_view,
)
from .encoders import (
    GcnParams,
    RgcnParams,
    encode_items,
    gcn_forward,
    init_gcn_params,
    init_rgcn_params,
    rgcn_forward,
)
from .errors import (
    ConfigurationError,
    ConvRecError,
    LeakageError,
    MissingArtifactError,
    NumericError,
    ParseError,
    ShapeError,
    StateError,
    ValidationError,
)
from .graphs import (
    InteractionGraph,
    NormalizedAdjacency,
    TypedGraph,
    WordGraph,
    build_interaction_graph,
    load_item_kg,
    load_word_graph,
    normalize_adjacency,
)
from .optim import (
    AdamConfig,
    AdamState,
    ParamStore,
    adam_step,
    clip_gradients,
    load_checkpoint,
    save_checkpoint,
)
from .preference import (
    AttentionParams,
    UserRep,
    attention_pool,
    build_user_representation,
    gate_fuse,
    gather_context,
    init_attention_params,
)
from .recommender import (
    Artifacts,
    MetricsReport,
    Model,
    TrainConfig,
    TrainResult,
    ablate,
    aggregate_metrics,
    build_artifacts,
    evaluate,
    rank_items,
    rec_loss,
    score_all,
    train,
)
from .retrieval import Bm25Index, RetrievalResult, bm25_score, build_index, retrieve

__version__ = "0.1.0"

__all__ = [
    "AdamConfig",
    "AdamState",
    "Artifacts",
    "AttentionParams",
    "Bm25Index",
    "ConfigurationError",
    "Conversation",
    "ConvRecError",
    "EntityVocab",
    "GcnParams",
    "InteractionGraph",
    "LeakageError",
    "Mention",
    "MetricsReport",
    "MissingArtifactError",
    "Model",
    "NormalizedAdjacency",
    "NumericError",
    "ParamStore",
    "ParseError",
    "RecExample",
    "RetrievalResult",
    "RgcnParams",
    "Sentiment",
    "ShapeError",
    "Speaker",
    "Split",
    "StateError",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "TypedGraph",
    "UserRep",
    "Utterance",
    "ValidationError",
    "Vocab",
    "WordGraph",
    "WordVocab",
    "ablate",
    "aggregate_metrics",
    "adam_step",
    "attention_pool",
    "autodiff",
    "bm25_score",
    "build_artifacts",
    "build_interaction_graph",
    "build_index",
    "build_user_representation",
    "clip_gradients",
    "derive_examples",
    "encode_items",
    "evaluate",
    "finite_diff_check",
    "gate_fuse",
    "gather_context",
    "gcn_forward",
    "init_attention_params",
    "init_gcn_params",
    "init_rgcn_params",
    "load_checkpoint",
    "load_corpus",
    "load_entity_vocab",
    "load_item_kg",
    "load_word_graph",
    "normalize_adjacency",
    "rank_items",
    "rec_loss",
    "retrieve",
    "rgcn_forward",
    "save_checkpoint",
    "score_all",
    "split_view",
    "train",
]
