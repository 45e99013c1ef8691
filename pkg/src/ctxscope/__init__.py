"""Context-awareness diagnostics for small decoder-only chat models."""

from .errors import CtxScopeError
from .tokenizer import (DEFAULT_TOKENIZER, AnnotatedSequence, Conversation, Role, TemplateSpec, TokenizerSpec, Turn,
                        conversation, detokenize, load_template, read_conversations, render, role_mask, tokenize,
                        write_conversations)
from .model import AttentionRecord, Model, ModelConfig, TrainParams, forward, generate, init_weights, loss_sft, train
from .steering import HeadSelection, SteeringSpec, select_heads, steer_row, steer_rows, sweep_alpha
from .probe import allocation, allocation_delta, layer_agreement
from .nih import NihCase, NihReport, build_case, build_grid, recall, run_nih
from .annotate import DependencyRecord, dataset_stats, dependency_score, preprocess, score_dataset
from .qa import QaCase, containment, run_qa, truncate_first_sentence
from .pipeline import PipelineConfig, RunManifest, SyntheticSpec, compare, run_indicator, run_vanilla

__version__ = "0.1.0"

__all__ = [
    "CtxScopeError", "DEFAULT_TOKENIZER", "AnnotatedSequence", "Conversation", "Role", "TemplateSpec",
    "TokenizerSpec", "Turn", "conversation", "detokenize", "load_template", "read_conversations", "render",
    "role_mask", "tokenize", "write_conversations", "AttentionRecord", "Model", "ModelConfig", "TrainParams",
    "forward", "generate", "init_weights", "loss_sft", "train", "HeadSelection", "SteeringSpec", "select_heads",
    "steer_row", "steer_rows", "sweep_alpha", "allocation", "allocation_delta", "layer_agreement", "NihCase",
    "NihReport", "build_case", "build_grid", "recall", "run_nih", "DependencyRecord", "dataset_stats",
    "dependency_score", "preprocess", "score_dataset", "QaCase", "containment", "run_qa",
    "truncate_first_sentence", "PipelineConfig", "RunManifest", "SyntheticSpec", "compare", "run_indicator",
    "run_vanilla",
]
