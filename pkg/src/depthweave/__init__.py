"""Temporal depth-map upsampling with a hybrid depth + color camera.

A low-rate depth stream and a synchronized high-rate color stream go
in; the missing depth frames and the 3-D scene flow that generated them
come out of one joint nonlinear least-squares solve. The same solve
doubles as a standalone RGB-D scene-flow estimator.
"""

from .core import (
    CameraIntrinsics,
    CameraRig,
    ColorImage,
    DepthMap,
    EnergyWeights,
    FlowField2D,
    NeighborGraph,
    PointCloud,
    RigidTransform,
    SceneFlowState,
    robust_kernel,
    validate,
)
from .flow2d import FlowParams
from .reconstruct import (
    IntervalResult,
    PipelineParams,
    estimate_scene_flow,
    reconstruct_interval,
    upsample_sequence,
)
from .solver import SolverParams, solve_pyramid
from .synth import SceneSpec, generate

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CameraRig",
    "ColorImage",
    "DepthMap",
    "EnergyWeights",
    "FlowField2D",
    "FlowParams",
    "IntervalResult",
    "NeighborGraph",
    "PipelineParams",
    "PointCloud",
    "RigidTransform",
    "SceneFlowState",
    "SceneSpec",
    "SolverParams",
    "estimate_scene_flow",
    "generate",
    "reconstruct_interval",
    "robust_kernel",
    "solve_pyramid",
    "upsample_sequence",
    "validate",
]
