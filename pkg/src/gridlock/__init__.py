"""Concept-bottleneck sequence models for interpretable control-command prediction."""

from .concepts import (
    ConceptScoreMatrix,
    ConceptSet,
    apply_template,
    concept_scores,
    dedup_concepts,
    subset_concepts,
    top_k_concepts,
)
from .data import DriveSequence, SyntheticSpec, generate_synthetic, read_sequence, write_sequence
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, fit, split_dataset

__version__ = "0.1.0"
