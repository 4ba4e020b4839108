"""Contact-aware human motion forecasting on point-cloud scenes.

Modules:
    geom: distance and contact maps, contact points, spatial index, scene sampling.
    dct: truncated DCT codec with replicate-last padding.
    autodiff: reverse-mode tensors, Adam and the CAMF checkpoint format.
    nets: GRU encoders, point-voxel encoder, contact and motion networks.
    train: losses, metrics, training stages and evaluation.
    refine: two-stage temporal refinement against observed point clouds.
    io, synth, cli: file formats, synthetic data and the command line.
"""
from .errors import (DegenerateRotationError, EmptyRegionError, InvalidInputError,
                     InvalidParameterError, ParseError, ShapeError)
from .geom import (MotionSequence, Pose, SceneCloud, build_spatial_index, contact_sequence,
                   distance_map, extract_contact_points, normalize_to_contact,
                   sample_scene_points)

__version__ = "0.1.0"

__all__ = [
    "DegenerateRotationError", "EmptyRegionError", "InvalidInputError", "InvalidParameterError",
    "ParseError", "ShapeError", "MotionSequence", "Pose", "SceneCloud", "build_spatial_index",
    "contact_sequence", "distance_map", "extract_contact_points", "normalize_to_contact",
    "sample_scene_points",
]
