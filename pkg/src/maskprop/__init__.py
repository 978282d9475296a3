"""Semi-supervised video object segmentation by adversarially trained mask propagation."""

from .core import (
    MaskTrack,
    ReferenceSegmentation,
    TrainConfig,
    VideoSequence,
    WindowBatch,
    make_reference,
    validate_sequence,
)

__version__ = "0.1.0"
