"""Pinhole projection, unprojection and depth-to-color alignment."""

from __future__ import annotations

import numpy as np

from .core import (
    BehindCameraError,
    CameraIntrinsics,
    CameraRig,
    DepthMap,
    InputError,
    PointCloud,
)

Z_MIN = 1e-9


def unproject(depth: DepthMap, intr: CameraIntrinsics) -> PointCloud:
    """Lift every valid depth pixel to a 3-D point.

    Pixel (x, y) with depth d maps to (d*(x-cx)/fx, d*(y-cy)/fy, d).
    Provenance is recorded per point; normals and the neighbor graph are
    left empty for the analysis stage.
    """
    if (depth.width, depth.height) != (intr.width, intr.height):
        raise InputError(
            f"depth map {depth.width}x{depth.height} does not match intrinsics "
            f"{intr.width}x{intr.height}"
        )
    ys, xs = np.nonzero(depth.valid)
    d = depth.depth[ys, xs]
    points = np.stack(
        [d * (xs - intr.cx) / intr.fx, d * (ys - intr.cy) / intr.fy, d], axis=1
    )
    pixel_of = ys * depth.width + xs
    return PointCloud(points, pixel_of, depth.width, depth.height)


def project_points(points: np.ndarray, intr: CameraIntrinsics):
    """Vectorized pinhole projection of an (N, 3) array.

    Returns (x, y, in_front) where ``in_front`` flags points with
    positive depth; coordinates for flagged-out points are unusable.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    in_front = z > Z_MIN
    zs = np.where(in_front, z, 1.0)
    x = intr.fx * p[:, 0] / zs + intr.cx
    y = intr.fy * p[:, 1] / zs + intr.cy
    return x, y, in_front


def project(point: np.ndarray, intr: CameraIntrinsics) -> tuple[float, float]:
    """Project one 3-D point to continuous pixel coordinates."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if p[2] <= Z_MIN:
        raise BehindCameraError(f"cannot project point with depth {p[2]}")
    return (
        float(intr.fx * p[0] / p[2] + intr.cx),
        float(intr.fy * p[1] / p[2] + intr.cy),
    )


def projection_jacobian(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """d(pixel)/d(point) for each of N points: an (N, 2, 3) array."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = np.where(p[:, 2] > Z_MIN, p[:, 2], 1.0)
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * p[:, 0] / (z * z)
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * p[:, 1] / (z * z)
    return J


def psi(point: np.ndarray, rig: CameraRig) -> tuple[float, float]:
    """Map a depth-camera point into color-camera pixel coordinates."""
    q = rig.depth_to_color.apply(np.asarray(point, dtype=np.float64).reshape(3))
    return project(q, rig.color_intrinsics)


def psi_points(points: np.ndarray, rig: CameraRig):
    """Vectorized version of :func:`psi` returning (x, y, in_front)."""
    q = rig.depth_to_color.apply(points)
    return project_points(q, rig.color_intrinsics)


def psi_jacobian(points: np.ndarray, rig: CameraRig) -> np.ndarray:
    """d(color pixel)/d(depth-frame point), an (N, 2, 3) array."""
    q = rig.depth_to_color.apply(points)
    return projection_jacobian(q, rig.color_intrinsics) @ rig.depth_to_color.rotation


def splat_depth(
    points: np.ndarray, intr: CameraIntrinsics, width: int, height: int
) -> DepthMap:
    """Forward-splat points to the nearest pixel, keeping the smallest z.

    Points behind the camera or landing outside the raster are dropped;
    uncovered pixels come out invalid.
    """
    x, y, in_front = project_points(points, intr)
    z = np.asarray(points, dtype=np.float64).reshape(-1, 3)[:, 2]
    ix = np.round(x).astype(np.int64)
    iy = np.round(y).astype(np.int64)
    ok = in_front & (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
    buf = np.full((height, width), np.inf)
    np.minimum.at(buf, (iy[ok], ix[ok]), z[ok])
    covered = np.isfinite(buf)
    return DepthMap(np.where(covered, buf, 0.0), covered)


def align_depth_to_color(depth: DepthMap, rig: CameraRig) -> DepthMap:
    """Resample a depth map onto the color camera's pixel grid.

    Each valid source point is transformed into the color frame and
    forward-splatted with z-buffering; pixels no source point covers are
    invalid. Inverse warping is not an option here because the depth in
    the target grid is exactly what is being produced.
    """
    cloud = unproject(depth, rig.depth_intrinsics)
    moved = rig.depth_to_color.apply(cloud.points)
    intr = rig.color_intrinsics
    return splat_depth(moved, intr, intr.width, intr.height)
