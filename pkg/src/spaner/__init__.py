"""Shared-prompt multimodal embedding alignment."""

from .checkpoint import load_model, model_config, read_parameters, save_model, snapshot
from .data import (KShotSplit, LabeledEmbeddings, ModalitySpec, SyntheticSpec,
                   gen_synthetic, kshot_split, kshot_split_paired,
                   read_embeddings, semantic_modality, write_embeddings)
from .errors import (ConfigError, DataError, DimensionError, FormatError,
                     LineageError, NumericError, SpanerError)
from .evaluation import (ConfusionMatrix, KShotRow, KShotTable, Projection2D,
                         RetrievalReport, confusion_matrix, embed_all,
                         kshot_experiment, pca_project_2d, retrieval_accuracy,
                         retrieve_topk, top_confusions)
from .extension import ExtensionConfig, assert_frozen_unchanged, extend
from .losses import ContrastiveConfig, contrastive_loss
from .model import (Adam, BranchOutput, CrossAttentionAligner, ProjectionHead,
                    SharedPrompt, SpanerModel, StepLosses, TrainConfig,
                    TrainHistory, aligner_forward, fit, forward, init_model,
                    pooled_embedding, training_step)
from .tensor import (GradCheckResult, Parameter, Rng, Tensor, grad_check,
                     no_grad)

__all__ = [
    "Adam", "BranchOutput", "ConfigError", "ConfusionMatrix",
    "ContrastiveConfig", "CrossAttentionAligner", "DataError",
    "DimensionError", "ExtensionConfig", "FormatError", "GradCheckResult",
    "KShotRow", "KShotSplit", "KShotTable", "LabeledEmbeddings",
    "LineageError", "ModalitySpec", "NumericError", "Parameter",
    "Projection2D", "ProjectionHead", "RetrievalReport", "Rng", "SharedPrompt",
    "SpanerError", "SpanerModel", "StepLosses", "SyntheticSpec", "Tensor",
    "TrainConfig", "TrainHistory", "aligner_forward", "assert_frozen_unchanged",
    "confusion_matrix", "contrastive_loss", "embed_all", "extend", "fit",
    "forward", "gen_synthetic", "grad_check", "init_model", "kshot_experiment",
    "kshot_split", "kshot_split_paired", "load_model", "model_config",
    "no_grad", "pca_project_2d", "pooled_embedding", "read_embeddings",
    "read_parameters", "retrieval_accuracy", "retrieve_topk", "save_model",
    "semantic_modality", "snapshot", "top_confusions", "training_step",
    "write_embeddings",
]
