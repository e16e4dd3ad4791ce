"""Tools for building crash-video conditioning data and toy guided diffusion."""
from .annotation import (
    AnnotationError, BoundingBox, CrashType, ObjectLabel, VideoAnnotation,
    map_dada_to_crash_type, parse_annotation, serialize_annotation, validate_annotation,
)
from .conditioning import NULL, ConditionSet, MaskPlan, apply_mask, sample_mask_plan
from .curation import ShotChangeDetector, UpsizingFilter, estimate_upsizing_factor, segment_clips
from .fusion import TrackFuser, fuse, run_fusion
from .metrics import iou, psnr, ssim, video_metric
from .raster import ControlFrameRasterizer, rasterize_frame, rasterize_sequence

__version__ = "0.1.0"

__all__ = [
    "NULL", "AnnotationError", "BoundingBox", "ConditionSet", "ControlFrameRasterizer", "CrashType",
    "MaskPlan", "ShotChangeDetector", "TrackFuser", "UpsizingFilter",
    "ObjectLabel", "VideoAnnotation", "apply_mask", "estimate_upsizing_factor", "fuse",
    "iou", "map_dada_to_crash_type", "parse_annotation", "psnr", "rasterize_frame",
    "rasterize_sequence", "run_fusion", "sample_mask_plan", "segment_clips",
    "serialize_annotation", "ssim", "validate_annotation", "video_metric",
]
