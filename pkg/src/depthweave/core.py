"""Shared domain types: camera models, rasters, point clouds, solver state.

Everything here is plain data plus constructor validation; the algorithms
live in the other modules. All types except :class:`SceneFlowState` are
treated as immutable after construction and are safe to share across
workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class DepthweaveError(Exception):
    """Base class for all errors raised by this package."""


class InputError(DepthweaveError):
    """Invalid input data: dimension mismatch, bad values, missing files."""


class BehindCameraError(InputError):
    """A point with non-positive depth was handed to a projection."""


class ConfigError(DepthweaveError):
    """Malformed or unknown configuration key/value."""


class ParseError(DepthweaveError):
    """A file did not match its declared binary/text format."""


class SolverFault(DepthweaveError):
    """The numerical solver produced non-finite values or got stuck."""


class SceneError(InputError):
    """A synthetic scene specification is internally inconsistent."""


def robust_kernel(r, eps):
    """Smooth absolute value sqrt(r^2 + eps^2).

    Even in ``r``, bounded below by ``eps``, and monotonically
    non-decreasing in ``|r|``. Works elementwise on arrays.
    """
    r = np.asarray(r, dtype=float)
    out = np.sqrt(r * r + eps * eps)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise InputError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image resized by ``factor`` in each dimension."""
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=max(1, int(np.ceil(self.width * factor))),
            height=max(1, int(np.ceil(self.height * factor))),
        )


@dataclass(frozen=True)
class RigidTransform:
    """3x3 rotation plus translation (meters), applied as R @ p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        err = np.linalg.norm(R.T @ R - np.eye(3))
        if err >= 1e-6:
            raise InputError(f"rotation is not orthonormal (||R^T R - I|| = {err:.3e})")
        if np.linalg.det(R) < 0:
            raise InputError("rotation has determinant -1 (reflection)")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array or a single 3-vector."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class CameraRig:
    """Two calibrated cameras: depth sensor and color camera.

    ``depth_to_color`` maps depth-camera coordinates into the color
    camera's frame; composing it with the color projection gives the
    cross-camera mapping used throughout the pipeline.
    """

    depth_intrinsics: CameraIntrinsics
    color_intrinsics: CameraIntrinsics
    depth_to_color: RigidTransform

    @staticmethod
    def mono(intr: CameraIntrinsics) -> "CameraRig":
        """A rig whose two cameras coincide (already-registered data)."""
        return CameraRig(intr, intr, RigidTransform.identity())

    def aligned(self) -> "CameraRig":
        """The rig seen from the color camera after depth alignment."""
        return CameraRig.mono(self.color_intrinsics)


class DepthMap:
    """Raster of per-pixel depth in meters with a validity mask.

    Invalid pixels carry the sentinel 0 and are excluded from every
    energy and metric.
    """

    def __init__(self, depth: np.ndarray, valid: np.ndarray | None = None):
        depth = np.asarray(depth, dtype=np.float64)
        if depth.ndim != 2:
            raise InputError(f"depth must be 2-D, got shape {depth.shape}")
        if valid is None:
            valid = depth > 0
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != depth.shape:
            raise InputError("depth and validity mask shapes differ")
        if np.any(depth[valid] <= 0) or not np.all(np.isfinite(depth[valid])):
            raise InputError("valid pixels must carry finite positive depth")
        self.depth = np.where(valid, depth, 0.0)
        self.valid = valid

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def copy(self) -> "DepthMap":
        return DepthMap(self.depth.copy(), self.valid.copy())


class ColorImage:
    """RGB raster in [0, 1] with a derived luma intensity channel."""

    def __init__(self, rgb: np.ndarray):
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise InputError(f"rgb must be (H, W, 3), got shape {rgb.shape}")
        if rgb.min() < -1e-12 or rgb.max() > 1 + 1e-12:
            raise InputError("rgb channels must lie in [0, 1]")
        self.rgb = np.clip(rgb, 0.0, 1.0)
        self.intensity = self.rgb @ LUMA_WEIGHTS

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @staticmethod
    def from_gray(gray: np.ndarray) -> "ColorImage":
        gray = np.asarray(gray, dtype=np.float64)
        return ColorImage(np.repeat(gray[:, :, None], 3, axis=2))


class FlowField2D:
    """Per-pixel 2-D displacement (u right, v down) in pixels."""

    def __init__(self, u: np.ndarray, v: np.ndarray, valid: np.ndarray | None = None):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if u.shape != v.shape or u.ndim != 2:
            raise InputError("u and v must be 2-D arrays of equal shape")
        if valid is None:
            valid = np.ones(u.shape, dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != u.shape:
            raise InputError("flow validity mask shape differs from u/v")
        self.u = u
        self.v = v
        self.valid = valid

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def copy(self) -> "FlowField2D":
        return FlowField2D(self.u.copy(), self.v.copy(), self.valid.copy())

    @staticmethod
    def zeros(height: int, width: int) -> "FlowField2D":
        return FlowField2D(np.zeros((height, width)), np.zeros((height, width)))


@dataclass
class NeighborGraph:
    """Weighted adjacency over a point cloud.

    ``edges`` holds undirected pairs (i, j) with i < j. Per edge the
    color / depth / topology coherence weights live in (0, 1] and the
    rest vector is the anchor-frame difference p_i - p_j.
    """

    edges: np.ndarray            # (E, 2) int
    w_color: np.ndarray          # (E,)
    w_depth: np.ndarray          # (E,)
    w_topo: np.ndarray           # (E,)
    rest_vectors: np.ndarray     # (E, 3)

    def __post_init__(self):
        E = len(self.edges)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(E, 2)
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise InputError("neighbor graph contains a self-edge")
        for name in ("w_color", "w_depth", "w_topo"):
            w = np.asarray(getattr(self, name), dtype=np.float64).reshape(E)
            if np.any(w <= 0) or np.any(w > 1 + 1e-12):
                raise InputError(f"{name} entries must lie in (0, 1]")
            setattr(self, name, w)
        self.rest_vectors = np.asarray(self.rest_vectors, dtype=np.float64).reshape(E, 3)

    @property
    def weights(self) -> np.ndarray:
        """Combined per-edge weight w_color * w_depth * w_topo."""
        return self.w_color * self.w_depth * self.w_topo

    def __len__(self) -> int:
        return len(self.edges)


class PointCloud:
    """3-D points with optional normals, pixel provenance and adjacency.

    ``pixel_of`` maps each point to the flat index of its source pixel in
    a ``grid_width`` x ``grid_height`` raster; normals and the neighbor
    graph start empty and are filled by the analysis stage.
    """

    def __init__(
        self,
        points: np.ndarray,
        pixel_of: np.ndarray,
        grid_width: int,
        grid_height: int,
        normals: np.ndarray | None = None,
        graph: NeighborGraph | None = None,
        degenerate: np.ndarray | None = None,
    ):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.pixel_of = np.asarray(pixel_of, dtype=np.int64).reshape(-1)
        if len(self.pixel_of) != len(self.points):
            raise InputError("pixel_of length differs from point count")
        if len(self.pixel_of) and (
            self.pixel_of.min() < 0 or self.pixel_of.max() >= grid_width * grid_height
        ):
            raise InputError("pixel_of references a pixel outside the source grid")
        self.grid_width = int(grid_width)
        self.grid_height = int(grid_height)
        if normals is not None:
            normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(self.points):
                raise InputError("normal count differs from point count")
            norms = np.linalg.norm(normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise InputError("normals must be unit length")
        self.normals = normals
        if graph is not None and len(graph) and graph.edges.max() >= len(self.points):
            raise InputError("graph references a point index that does not exist")
        self.graph = graph
        self.degenerate = degenerate

    def __len__(self) -> int:
        return len(self.points)

    @property
    def pixel_xy(self) -> tuple[np.ndarray, np.ndarray]:
        """Source pixel coordinates (x, y) of every point."""
        return self.pixel_of % self.grid_width, self.pixel_of // self.grid_width

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """Same provenance/graph with replaced coordinates (normals dropped)."""
        return PointCloud(
            points, self.pixel_of, self.grid_width, self.grid_height, graph=self.graph
        )


@dataclass
class SceneFlowState:
    """The full unknown vector of the joint solve.

    The anchor cloud is the fixed geometry at step 0. For steps
    s = 1..g, ``positions[s-1]`` holds the per-point coordinates and
    ``rotations[s-1]`` the per-point local rotations; ``flows[s]`` is
    the 2-D motion field from color frame s to s+1 for s = 0..g-1.
    """

    g: int
    anchor: PointCloud
    positions: np.ndarray          # (g, N, 3)
    rotations: np.ndarray          # (g, N, 3, 3)
    flows: list = field(default_factory=list)

    def copy(self) -> "SceneFlowState":
        return SceneFlowState(
            g=self.g,
            anchor=self.anchor,
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            flows=[f.copy() for f in self.flows],
        )

    @staticmethod
    def initial(anchor: PointCloud, g: int, flows: list) -> "SceneFlowState":
        """State with all steps at the anchor and identity rotations."""
        n = len(anchor)
        positions = np.repeat(anchor.points[None, :, :], g, axis=0)
        rotations = np.broadcast_to(np.eye(3), (g, n, 3, 3)).copy()
        return SceneFlowState(g=g, anchor=anchor, positions=positions,
                              rotations=rotations, flows=list(flows))


def validate(state: SceneFlowState) -> list[str]:
    """Check every structural invariant of a solver state.

    Returns a list of human-readable violations (empty when the state is
    well formed); violations are data, not exceptions.
    """
    out = []
    n = len(state.anchor)
    if state.positions.shape != (state.g, n, 3):
        out.append(
            f"positions: expected shape {(state.g, n, 3)}, got {state.positions.shape}"
        )
    if state.rotations.shape[:2] != (state.g, n):
        out.append(
            f"rotations: expected leading shape {(state.g, n)}, got {state.rotations.shape[:2]}"
        )
    else:
        R = state.rotations
        err = np.linalg.norm(
            np.einsum("snij,snik->snjk", R, R) - np.eye(3), axis=(2, 3)
        )
        dets = np.linalg.det(R)
        bad = np.argwhere((err > 1e-6) | (np.abs(dets - 1.0) > 1e-6))
        for s, i in bad:
            out.append(f"rotations[s={s + 1}][{i}]: not orthonormal with det +1")
    if len(state.flows) != state.g:
        out.append(f"flows: expected {state.g} fields, got {len(state.flows)}")
    for s, f in enumerate(state.flows):
        if f.u.shape != state.flows[0].u.shape:
            out.append(f"flows[{s}]: shape {f.u.shape} differs from flows[0]")
    if not np.all(np.isfinite(state.positions)):
        out.append("positions: contains non-finite values")
    return out


@dataclass
class EnergyWeights:
    """Term weights and kernel constants for the joint energy.

    Defaults are the reference operating point; all entries must stay
    strictly positive.
    """

    lambda_opti: float = 1.0
    lambda_point: float = 0.2
    lambda_plane: float = 0.8
    lambda_proj: float = 1.0
    lambda_iso: float = 3.0
    lambda_reg: float = 0.8
    lambda_short: float = 0.5
    epsilon: float = 1e-4
    d_a: float = 10.0
    sigma_c: float = 1.0
    sigma_d: float = 0.015
    sigma_t: float = 0.015
    sigma_1: float = 1.0
    sigma_2: float = 20.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not (value > 0):
                raise InputError(f"energy weight {name} must be strictly positive")
