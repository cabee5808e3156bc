"""Pose-invariant audio-visual target speaker extraction toolkit."""

__version__ = "0.1.0"

from .dsp import Waveform, mix_at_snr, read_wav, sdr, si_sdr, stoi, write_wav
from .geometry import (
    FaceMesh,
    LandmarkSet,
    PoseParams,
    UVMap,
    UVTopology,
    compose_geometry,
    invert_pose,
    pose_invariant_shape,
    self_align,
)
from .model import ExtractionModel, ModelConfig, VisualStreamPair, apply_region_mask

__all__ = [
    "ExtractionModel",
    "FaceMesh",
    "LandmarkSet",
    "ModelConfig",
    "PoseParams",
    "UVMap",
    "UVTopology",
    "VisualStreamPair",
    "Waveform",
    "apply_region_mask",
    "compose_geometry",
    "invert_pose",
    "mix_at_snr",
    "pose_invariant_shape",
    "read_wav",
    "sdr",
    "self_align",
    "si_sdr",
    "stoi",
    "write_wav",
    "__version__",
]
