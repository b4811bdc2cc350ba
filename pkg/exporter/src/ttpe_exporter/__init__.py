"""Encode real image trajectories into TTPE containers."""

from .encoders import ENCODER_IDS, EncoderError, get_encoder
from .export import (ExportError, ExportJob, export, export_baseline_prompt,
                     subsample_indices)

__all__ = [
    "ENCODER_IDS",
    "EncoderError",
    "ExportError",
    "ExportJob",
    "export",
    "export_baseline_prompt",
    "get_encoder",
    "subsample_indices",
]

__version__ = "0.1.0"
