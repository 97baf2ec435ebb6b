"""Mutual-conditioning multi-person pose pipeline with a COCO-style
evaluation stack, dataset tooling, and a seeded synthetic benchmark."""

__version__ = "0.1.0"

from .coco_io import (
    AnnotationSet,
    Category,
    ImageInfo,
    Instance,
    ParseError,
    Prediction,
    PredictionSet,
    ReferentialIntegrityError,
    RleMask,
    parse_annotation_set,
    parse_prediction_set,
    rle_decode,
    rle_encode,
    rle_from_coco_string,
    rle_to_coco_string,
    serialize_annotation_set,
    serialize_prediction_set,
)
from .evaluator import EvalOptions, EvalReport, SimilarityKind, evaluate, oks
from .geometry import BlackoutRaster, bbox_iou, iou_max, mask_iou
from .loop_engine import LoopResult, PromptPolicy, StageConfig, run_loop
from .model_stages import CorruptionProfile, StageSet, oracle_stage_set
from .synthetic_world import Scene, WorldConfig, generate_scene, make_dataset

__all__ = [name for name in dir() if not name.startswith("_")]
