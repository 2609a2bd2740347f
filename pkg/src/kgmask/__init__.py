"""Knowledge-graph-masked zero-shot answer ranking.

Three independently trained embedding-alignment spaces (answers, relations,
support entities) score candidates by temperature-scaled compatibility; the
relation and entity spaces retrieve top-k candidates whose knowledge-graph
neighbors form a target set, and answers inside that set receive an additive
mask score before the final ranking. Everything operates on precomputed
feature vectors and plain-text triple/embedding files.
"""

from .data import (
    AnswerSplit,
    Dataset,
    Sample,
    SynthSpec,
    gen_synthetic,
    load_dataset,
    save_dataset,
    split_stats,
    standard_split,
    top_k_answers,
    zero_shot_split,
)
from .embeddings import (
    EmbeddingTable,
    Lemmatizer,
    load_embeddings,
    med,
    normalize_token,
    phrase_vector,
    resolve_concept,
)
from .errors import ParseError
from .evaluation import EvalReport, evaluate, mean_report, metrics, mode_pool, rank_of_gold
from .kg import KnowledgeGraph, Triple, load_triples, save_triples, target_set
from .masking import (
    HARD_MASK,
    SOFT_MASK,
    MaskConfig,
    Prediction,
    candidate_entities,
    candidate_relations,
    masked_scores,
    predict,
)
from .spaces import (
    Featurizer,
    FusionModel,
    SpaceBundle,
    SpaceModel,
    TrainConfig,
    fuse,
    grad,
    load_checkpoint,
    loss,
    lr_schedule,
    pmc_prob,
    predict_unmasked,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AnswerSplit", "Dataset", "EmbeddingTable", "EvalReport", "Featurizer",
    "FusionModel", "HARD_MASK", "KnowledgeGraph", "Lemmatizer", "MaskConfig",
    "ParseError", "Prediction", "SOFT_MASK", "Sample", "SpaceBundle",
    "SpaceModel", "SynthSpec", "TrainConfig", "Triple", "candidate_entities",
    "candidate_relations", "evaluate", "fuse", "gen_synthetic", "grad",
    "load_checkpoint", "load_dataset", "load_embeddings", "load_triples",
    "loss", "lr_schedule", "masked_scores", "mean_report", "med", "metrics",
    "mode_pool", "normalize_token", "phrase_vector", "pmc_prob", "predict",
    "predict_unmasked", "rank_of_gold", "resolve_concept", "save_checkpoint",
    "save_dataset", "save_triples", "split_stats", "standard_split",
    "target_set", "top_k_answers", "train", "zero_shot_split",
]
