"""Referring image-sequence segmentation with prompt-driven propagation."""

__version__ = "0.1.0"

from .config import RunConfig
from .errors import CheckpointError, NumericError, SequenceIOError, ValidationError
from .model import ReferringSequenceSegmenter, predict_masks
from .synthetic import ImageSequence, ObjectSpec, PromptSet, SceneSpec, generate_sequence, sample_scene

__all__ = [
    "RunConfig",
    "ReferringSequenceSegmenter",
    "predict_masks",
    "ImageSequence",
    "ObjectSpec",
    "PromptSet",
    "SceneSpec",
    "generate_sequence",
    "sample_scene",
    "ValidationError",
    "SequenceIOError",
    "CheckpointError",
    "NumericError",
]
