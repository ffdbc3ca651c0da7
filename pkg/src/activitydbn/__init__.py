"""Joint activity and spatial-context recognition with a beam-pruned DBN."""

from .model import (
    ADMISSIBLE,
    Building,
    BuildingMap,
    Environment,
    Frame,
    GpsFix,
    GridLocation,
    JointState,
    LabelSpan,
    ModelParams,
    MotionState,
    MsbObservation,
    PolarVelocity,
)
from .inference import BeamConfig, forward_backward, forward_filter, viterbi_decode

__all__ = [
    "ADMISSIBLE",
    "BeamConfig",
    "Building",
    "BuildingMap",
    "Environment",
    "Frame",
    "GpsFix",
    "GridLocation",
    "JointState",
    "LabelSpan",
    "ModelParams",
    "MotionState",
    "MsbObservation",
    "PolarVelocity",
    "forward_backward",
    "forward_filter",
    "viterbi_decode",
]
