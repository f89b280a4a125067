"""Synthetic hybrid-camera scenes with analytic ground truth.

Textured rigid rectangles move in front of the camera; every frame is
rasterized by ray casting with an exact z-buffer, and ground-truth
depth, 2-D flow and 3-D motion come straight from the analytic rigid
motions rather than from any estimator. Four archetypes isolate the
hard mechanisms: data terms (translating plane), local rotation
(rotating plane), occlusion (a block passing over background) and
topology change (two touching blocks separating).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import project_points
from .core import (
    CameraIntrinsics,
    CameraRig,
    ColorImage,
    DepthMap,
    FlowField2D,
    SceneError,
)
from .so3 import rotation_exp

SCENE_NAMES = (
    "translating-plane",
    "rotating-plane",
    "two-block-occlusion",
    "separating-blocks",
)


@dataclass
class SceneSpec:
    """Parameters of one synthetic capture."""

    scene: str = "translating-plane"
    g: int = 4
    frames: int = 9
    resolution: int = 128
    velocity: tuple | None = None          # meters per color frame
    angular_velocity: float | None = None  # radians per color frame
    seed: int = 7

    def __post_init__(self):
        if self.scene not in SCENE_NAMES:
            raise SceneError(f"unknown scene {self.scene!r}; pick one of {SCENE_NAMES}")
        if self.g < 1 or self.frames < 2:
            raise SceneError("need g >= 1 and at least two frames")
        if (self.frames - 1) % self.g != 0:
            raise SceneError(
                f"frames-1 ({self.frames - 1}) must be a multiple of g ({self.g})"
            )


@dataclass
class _Rect:
    """A textured rectangle under rigid motion."""

    center: np.ndarray
    axis_a: np.ndarray
    axis_b: np.ndarray
    half_a: float
    half_b: float
    velocity: np.ndarray
    omega: np.ndarray                 # angular velocity vector (rad/frame)
    tex_seed: int
    tint: np.ndarray                  # rgb multipliers
    tex_cell: float = 0.1             # coarsest texture lattice (meters)
    keep_inside: bool = False         # corners must stay in the image
    must_cover: bool = False          # must cover the full image alone

    def pose(self, t: float):
        R = rotation_exp(self.omega * t)
        return (
            self.center + self.velocity * t,
            R @ self.axis_a,
            R @ self.axis_b,
        )

    def move_point(self, x: np.ndarray, t0: float, t1: float) -> np.ndarray:
        """Rigidly carry world points from time t0 to t1."""
        c0 = self.center + self.velocity * t0
        c1 = self.center + self.velocity * t1
        R = rotation_exp(self.omega * t1) @ rotation_exp(self.omega * t0).T
        return (x - c0) @ R.T + c1


def _hash_noise(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    v = np.sin(ix * 12.9898 + iy * 78.233 + seed * 37.719) * 43758.5453
    return v - np.floor(v)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def value_noise(
    a: np.ndarray, b: np.ndarray, seed: int, base_cell: float = 0.1
) -> np.ndarray:
    """Band-limited procedural texture in [0, 1] over local coordinates.

    ``base_cell`` is the coarsest lattice spacing; octaves halve it so
    the finest detail stays well above the sampling rate the caller
    chose it for.
    """
    out = np.zeros_like(a)
    total = 0.0
    cells = (
        (base_cell, 0.55),
        (base_cell * 0.5, 0.3),
        (base_cell * 0.25, 0.15),
    )
    for octave, (cell, wgt) in enumerate(cells):
        xa = a / cell
        xb = b / cell
        ix = np.floor(xa)
        iy = np.floor(xb)
        fx = _smoothstep(xa - ix)
        fy = _smoothstep(xb - iy)
        s = seed * 101 + octave * 13
        n00 = _hash_noise(ix, iy, s)
        n10 = _hash_noise(ix + 1, iy, s)
        n01 = _hash_noise(ix, iy + 1, s)
        n11 = _hash_noise(ix + 1, iy + 1, s)
        val = (1 - fy) * ((1 - fx) * n00 + fx * n10) + fy * ((1 - fx) * n01 + fx * n11)
        out += wgt * val
        total += wgt
    return out / total


@dataclass
class SynthDataset:
    """All frames, inputs and analytic ground truth of one capture."""

    spec: SceneSpec
    rig: CameraRig
    colors: list                      # frames ColorImage
    gt_depths: list                   # frames DepthMap
    input_depths: list                # every g-th tick
    gt_flows: list                    # frames-1 FlowField2D (t -> t+1)
    gt_sceneflow: list                # frames-1 (H, W, 3) float arrays
    prim_ids: list                    # frames (H, W) int32, -1 = no hit
    covered: list                     # frames (H, W) bool, >1 surface behind pixel

    @property
    def g(self) -> int:
        return self.spec.g


def default_rig(resolution: int) -> CameraRig:
    f = resolution * 1.6
    intr = CameraIntrinsics(
        fx=f, fy=f, cx=resolution / 2.0, cy=resolution / 2.0,
        width=resolution, height=resolution,
    )
    return CameraRig.mono(intr)


def _tilted_axes(tilt_y: float):
    R = rotation_exp(np.array([0.0, tilt_y, 0.0]))
    return R @ np.array([1.0, 0.0, 0.0]), R @ np.array([0.0, 1.0, 0.0])


def _build_prims(spec: SceneSpec, intr: CameraIntrinsics) -> list[_Rect]:
    def cell(z):
        # coarsest lattice ~20 px at the primitive's depth; the finest
        # octave then sits near 5 px, safely above the sampling rate
        return 20.0 * z / intr.fx

    v = np.array(spec.velocity) if spec.velocity is not None else None
    w = spec.angular_velocity
    if spec.scene == "translating-plane":
        ax, ay = _tilted_axes(0.35)
        return [
            _Rect(
                center=np.array([0.0, 0.0, 2.05]),
                axis_a=ax, axis_b=ay, half_a=2.2, half_b=2.2,
                velocity=v if v is not None else np.array([0.05, 0.0, 0.03]),
                omega=np.zeros(3),
                tex_seed=spec.seed, tint=np.array([1.0, 0.9, 0.75]),
                tex_cell=cell(2.05), must_cover=True,
            )
        ]
    if spec.scene == "rotating-plane":
        ax, ay = _tilted_axes(0.25)
        return [
            _Rect(
                center=np.array([0.0, 0.0, 2.2]),
                axis_a=ax, axis_b=ay, half_a=3.0, half_b=3.0,
                velocity=v if v is not None else np.zeros(3),
                omega=np.array([0.0, w if w is not None else 0.015, 0.0]),
                tex_seed=spec.seed + 1, tint=np.array([0.8, 1.0, 0.85]),
                tex_cell=cell(2.2), must_cover=True,
            )
        ]
    if spec.scene == "two-block-occlusion":
        return [
            _Rect(
                center=np.array([0.0, 0.0, 2.4]),
                axis_a=np.array([1.0, 0.0, 0.0]), axis_b=np.array([0.0, 1.0, 0.0]),
                half_a=3.0, half_b=3.0,
                velocity=np.zeros(3), omega=np.zeros(3),
                tex_seed=spec.seed + 2, tint=np.array([0.75, 0.85, 1.0]),
                tex_cell=cell(2.4), must_cover=True,
            ),
            _Rect(
                center=np.array([-0.17, 0.02, 1.7]),
                axis_a=np.array([1.0, 0.0, 0.0]), axis_b=np.array([0.0, 1.0, 0.0]),
                half_a=0.21, half_b=0.21,
                velocity=v if v is not None else np.array([0.055, 0.0, 0.0]),
                omega=np.zeros(3),
                tex_seed=spec.seed + 3, tint=np.array([1.0, 0.7, 0.6]),
                tex_cell=cell(1.7), keep_inside=True,
            ),
        ]
    # separating-blocks
    vel = v if v is not None else np.array([0.03, 0.0, 0.0])
    return [
        _Rect(
            center=np.array([0.0, 0.0, 2.4]),
            axis_a=np.array([1.0, 0.0, 0.0]), axis_b=np.array([0.0, 1.0, 0.0]),
            half_a=3.0, half_b=3.0,
            velocity=np.zeros(3), omega=np.zeros(3),
            tex_seed=spec.seed + 4, tint=np.array([0.8, 0.8, 0.9]),
            tex_cell=cell(2.4), must_cover=True,
        ),
        _Rect(
            center=np.array([-0.2, 0.0, 1.8]),
            axis_a=np.array([1.0, 0.0, 0.0]), axis_b=np.array([0.0, 1.0, 0.0]),
            half_a=0.2, half_b=0.26,
            velocity=-vel, omega=np.zeros(3),
            tex_seed=spec.seed + 5, tint=np.array([1.0, 0.75, 0.55]),
            tex_cell=cell(1.8), keep_inside=True,
        ),
        _Rect(
            center=np.array([0.2, 0.0, 1.8]),
            axis_a=np.array([1.0, 0.0, 0.0]), axis_b=np.array([0.0, 1.0, 0.0]),
            half_a=0.2, half_b=0.26,
            velocity=vel, omega=np.zeros(3),
            tex_seed=spec.seed + 6, tint=np.array([0.6, 1.0, 0.7]),
            tex_cell=cell(1.8), keep_inside=True,
        ),
    ]


def _raycast(prims: list[_Rect], t: float, intr: CameraIntrinsics):
    """Intersect every pixel ray with every rectangle at time t."""
    h, w = intr.height, intr.width
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs = np.stack(
        [(xs - intr.cx) / intr.fx, (ys - intr.cy) / intr.fy, np.ones_like(xs)], axis=2
    )
    depth = np.full((h, w), np.inf)
    pid = np.full((h, w), -1, dtype=np.int32)
    hits = np.zeros((h, w), dtype=np.int32)
    local_a = np.zeros((h, w))
    local_b = np.zeros((h, w))
    for k, prim in enumerate(prims):
        c, ea, eb = prim.pose(t)
        n = np.cross(ea, eb)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ray = (c @ n) / denom
        ok = (np.abs(denom) > 1e-12) & (t_ray > 0.05)
        hit = dirs * t_ray[..., None]
        rel = hit - c
        a = rel @ ea
        b = rel @ eb
        inside = ok & (np.abs(a) <= prim.half_a) & (np.abs(b) <= prim.half_b)
        z = hit[..., 2]
        hits += inside
        closer = inside & (z < depth)
        depth[closer] = z[closer]
        pid[closer] = k
        local_a[closer] = a[closer]
        local_b[closer] = b[closer]
    return depth, pid, hits, local_a, local_b


def generate(spec: SceneSpec, rig: CameraRig | None = None) -> SynthDataset:
    """Rasterize a scene and derive its analytic ground truth.

    Deterministic for a given spec and seed. Raises
    :class:`~depthweave.core.SceneError` when motion carries a tracked
    block out of the image or uncovers empty pixels on a scene that must
    stay fully covered.
    """
    rig = rig or default_rig(spec.resolution)
    intr = rig.color_intrinsics
    prims = _build_prims(spec, intr)
    h, w = intr.height, intr.width
    colors, gt_depths, prim_ids, covered = [], [], [], []
    hit_pts = []
    for t in range(spec.frames):
        depth, pid, hits, la, lb = _raycast(prims, float(t), intr)
        valid = pid >= 0
        for k, prim in enumerate(prims):
            if prim.must_cover and not np.all(valid):
                raise SceneError(
                    f"scene {spec.scene!r} leaves uncovered pixels at frame {t}"
                )
            if prim.keep_inside:
                c, ea, eb = prim.pose(float(t))
                corners = np.array(
                    [
                        c + sa * prim.half_a * ea + sb * prim.half_b * eb
                        for sa in (-1, 1)
                        for sb in (-1, 1)
                    ]
                )
                px, py, front = project_points(corners, intr)
                if not np.all(front) or px.min() < 1 or px.max() > w - 2 or (
                    py.min() < 1 or py.max() > h - 2
                ):
                    raise SceneError(
                        f"block {k} of scene {spec.scene!r} leaves the frame at t={t}"
                    )
        rgb = np.zeros((h, w, 3))
        for k, prim in enumerate(prims):
            sel = pid == k
            if not sel.any():
                continue
            tex = 0.15 + 0.8 * value_noise(la[sel], lb[sel], prim.tex_seed, prim.tex_cell)
            rgb[sel] = tex[:, None] * prim.tint[None, :]
        colors.append(ColorImage(np.clip(rgb, 0.0, 1.0)))
        gt_depths.append(DepthMap(np.where(valid, depth, 0.0), valid))
        prim_ids.append(pid)
        covered.append(hits > 1)
        xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        pts = np.stack(
            [
                depth * (xs - intr.cx) / intr.fx,
                depth * (ys - intr.cy) / intr.fy,
                depth,
            ],
            axis=2,
        )
        hit_pts.append(np.where(valid[..., None], pts, 0.0))

    gt_flows, gt_sceneflow = [], []
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    for t in range(spec.frames - 1):
        pid = prim_ids[t]
        valid = pid >= 0
        moved = hit_pts[t].copy()
        for k, prim in enumerate(prims):
            sel = pid == k
            if sel.any():
                moved[sel] = prim.move_point(hit_pts[t][sel], float(t), float(t + 1))
        px, py, front = project_points(moved.reshape(-1, 3), intr)
        u = (px.reshape(h, w) - xs) * valid
        v = (py.reshape(h, w) - ys) * valid
        gt_flows.append(FlowField2D(u, v, valid & front.reshape(h, w)))
        sf = (moved - hit_pts[t]) * valid[..., None]
        gt_sceneflow.append(sf)

    input_depths = [gt_depths[t] for t in range(0, spec.frames, spec.g)]
    return SynthDataset(
        spec=spec,
        rig=rig,
        colors=colors,
        gt_depths=gt_depths,
        input_depths=input_depths,
        gt_flows=gt_flows,
        gt_sceneflow=gt_sceneflow,
        prim_ids=prim_ids,
        covered=covered,
    )
