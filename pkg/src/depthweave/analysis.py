"""Geometric preprocessing for the joint solve.

Normal estimation, the weighted pixel-adjacency graph, closest-point
correspondences, per-pixel occlusion weights, and detection of
topological changes (objects separating) via warped edge lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    CameraRig,
    ColorImage,
    DepthMap,
    EnergyWeights,
    FlowField2D,
    InputError,
    NeighborGraph,
    PointCloud,
)
from .flow2d import accumulate_flow, bilinear_sample, divergence

# depth slack when deciding whether a warped point is hidden behind the
# rest of the warped cloud
_OCCLUSION_Z_MARGIN = 0.02


@dataclass
class Correspondence:
    """One source point matched to its nearest target point."""

    source_index: int
    target_point: np.ndarray
    target_normal: np.ndarray
    distance: float


class Correspondences:
    """Array-backed list of closest-point matches."""

    def __init__(self, source_indices, target_points, target_normals, distances):
        self.source_indices = np.asarray(source_indices, dtype=np.int64)
        self.target_points = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
        self.target_normals = np.asarray(target_normals, dtype=np.float64).reshape(-1, 3)
        self.distances = np.asarray(distances, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.source_indices)

    def __getitem__(self, i: int) -> Correspondence:
        return Correspondence(
            source_index=int(self.source_indices[i]),
            target_point=self.target_points[i],
            target_normal=self.target_normals[i],
            distance=float(self.distances[i]),
        )


@dataclass
class OcclusionField:
    """Per-pixel confidence that the flow target is actually visible."""

    weight: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if np.any(w <= 0) or np.any(w > 1 + 1e-12):
            raise InputError("occlusion weights must lie in (0, 1]")
        self.weight = w


def estimate_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    """Per-point normals from the covariance of the k nearest neighbors.

    The normal is the smallest-eigenvalue direction, oriented toward the
    camera at the origin (n . p < 0). Rank-deficient neighborhoods fall
    back to the view direction and are flagged in ``cloud.degenerate``.
    """
    if k < 3:
        raise InputError("normal estimation needs k >= 3")
    n = len(cloud)
    if n < k + 1:
        raise InputError(f"normal estimation needs at least {k + 1} points, got {n}")
    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k + 1)
    nbrs = cloud.points[idx]                      # (n, k+1, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    degenerate = evals[:, 1] <= 1e-8 * np.maximum(evals[:, 2], 1e-300)
    view = -cloud.points / np.maximum(
        np.linalg.norm(cloud.points, axis=1, keepdims=True), 1e-12
    )
    normals = np.where(degenerate[:, None], view, normals)
    # orient toward the camera
    flip = np.einsum("ni,ni->n", normals, cloud.points) > 0
    normals[flip] *= -1.0
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    return PointCloud(
        cloud.points,
        cloud.pixel_of,
        cloud.grid_width,
        cloud.grid_height,
        normals=normals,
        graph=cloud.graph,
        degenerate=degenerate,
    )


def index_map(cloud: PointCloud) -> np.ndarray:
    """Raster of point indices on the cloud's source grid (-1 = no point)."""
    m = np.full((cloud.grid_height, cloud.grid_width), -1, dtype=np.int64)
    px, py = cloud.pixel_xy
    m[py, px] = np.arange(len(cloud))
    return m


def build_neighbor_graph(
    cloud: PointCloud, image: ColorImage, weights: EnergyWeights
) -> NeighborGraph:
    """8-connected pixel adjacency with coherence weights.

    Depth coherence is exp(-||p_i - p_j||^2 / sigma_d^2), color
    coherence exp(-(I_i - I_j)^2 / sigma_c^2) on [0, 1] luma; the
    topology weight starts at 1 until :func:`detect_topology_changes`
    updates it. Rest vectors p_i - p_j are stored per edge.
    """
    imap = index_map(cloud)
    h, w = imap.shape
    pairs = []
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        src_y = slice(max(0, -dy), h - max(0, dy))
        src_x = slice(max(0, -dx), w - max(0, dx))
        dst_y = slice(max(0, dy), h - max(0, -dy))
        dst_x = slice(max(0, dx), w - max(0, -dx))
        a = imap[src_y, src_x].ravel()
        b = imap[dst_y, dst_x].ravel()
        ok = (a >= 0) & (b >= 0)
        pairs.append(np.stack([a[ok], b[ok]], axis=1))
    edges = np.concatenate(pairs, axis=0) if pairs else np.zeros((0, 2), np.int64)
    edges = np.sort(edges, axis=1)
    if len(edges):
        edges = np.unique(edges, axis=0)
    pi = cloud.points[edges[:, 0]]
    pj = cloud.points[edges[:, 1]]
    rest = pi - pj
    d2 = np.sum(rest * rest, axis=1)
    w_depth = np.exp(-d2 / (weights.sigma_d**2))
    lum = image.intensity.ravel()
    di = lum[cloud.pixel_of[edges[:, 0]]] - lum[cloud.pixel_of[edges[:, 1]]]
    w_color = np.exp(-(di * di) / (weights.sigma_c**2))
    tiny = np.finfo(np.float64).tiny
    return NeighborGraph(
        edges=edges,
        w_color=np.maximum(w_color, tiny),
        w_depth=np.maximum(w_depth, tiny),
        w_topo=np.ones(len(edges)),
        rest_vectors=rest,
    )


def closest_points(
    source: PointCloud, target: PointCloud, max_distance: float | None = None
) -> Correspondences:
    """Exact nearest-neighbor matches from source points into the target.

    Ties (identical distances) resolve to the lowest target index.
    Matches farther than ``max_distance`` are dropped when a gate is
    given.
    """
    if len(target) == 0:
        raise InputError("closest_points needs a non-empty target cloud")
    if target.normals is None:
        raise InputError("target cloud needs normals (run estimate_normals first)")
    tree = cKDTree(target.points)
    k = min(4, len(target))
    dist, idx = tree.query(source.points, k=k)
    if k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    tie = dist == dist[:, :1]
    chosen = np.where(tie, idx, np.iinfo(np.int64).max).min(axis=1)
    d = dist[:, 0]
    keep = np.ones(len(source), dtype=bool)
    if max_distance is not None:
        keep = d <= max_distance
    src = np.nonzero(keep)[0]
    return Correspondences(
        source_indices=src,
        target_points=target.points[chosen[keep]],
        target_normals=target.normals[chosen[keep]],
        distances=d[keep],
    )


def occlusion_weights(
    flow_s: FlowField2D,
    I_s: ColorImage,
    I_s1: ColorImage,
    weights: EnergyWeights,
) -> OcclusionField:
    """Visibility confidence from flow divergence and color constancy.

    Per pixel: exp(-div^2 / sigma_1^2) * exp(-dI^2 / sigma_2^2) with the
    color difference taken on a 0-255 intensity scale and the target
    intensity sampled bilinearly at x + v. Targets outside the image get
    the smallest positive weight (fully occluded).
    """
    if (flow_s.width, flow_s.height) != (I_s.width, I_s.height):
        raise InputError("flow and image sizes differ")
    div = divergence(flow_s)
    h, w = flow_s.u.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    tgt, inb = bilinear_sample(I_s1.intensity * 255.0, gx + flow_s.u, gy + flow_s.v)
    d_int = tgt - I_s.intensity * 255.0
    o = np.exp(-(div * div) / (weights.sigma_1**2)) * np.exp(
        -(d_int * d_int) / (weights.sigma_2**2)
    )
    tiny = np.finfo(np.float64).tiny
    o = np.where(inb, np.maximum(o, tiny), tiny)
    return OcclusionField(weight=o)


def lift_flow_to_points(cloud: PointCloud, flow: FlowField2D, rig: CameraRig):
    """Displace cloud points by a 2-D flow at constant depth.

    Each point's source pixel moves by the flow; the new pixel is lifted
    back to 3-D with the color intrinsics using the point's own depth.
    Returns (positions, moved_ok) where ``moved_ok`` is False for points
    whose flow sample is invalid.
    """
    px, py = cloud.pixel_xy
    fu = flow.u[py, px]
    fv = flow.v[py, px]
    ok = flow.valid[py, px]
    d = cloud.points[:, 2]
    intr = rig.color_intrinsics
    x = px + fu
    y = py + fv
    pts = np.stack([d * (x - intr.cx) / intr.fx, d * (y - intr.cy) / intr.fy, d], axis=1)
    pts = np.where(ok[:, None], pts, cloud.points)
    return pts, ok


def warped_cloud_positions(
    M_k: PointCloud,
    flows: list[FlowField2D],
    D_k1: DepthMap,
    rig: CameraRig,
    weights: EnergyWeights,
    solver_params=None,
):
    """Motion-warped and geometry-refined positions of the anchor cloud.

    Accumulates the interval's flows, lifts them to 3-D at the anchor
    depth, then refines the tentative positions against the cloud of the
    next captured depth map with the point/plane/local-rigidity terms.
    Returns (refined_positions, exempt) where ``exempt`` flags points
    with no usable counterpart (left the image, hidden behind the warped
    cloud, or landing on invalid depth).
    """
    from . import camera
    from .solver import SolverParams, refine_geometry

    params = solver_params or SolverParams()
    fv = accumulate_flow(flows)
    tentative, moved_ok = lift_flow_to_points(M_k, fv, rig)

    target = unproject_normals(D_k1, rig, k=min(16, max(3, len(M_k) // 4)))
    try:
        refined = refine_geometry(M_k, tentative, target, weights, params)
    except Exception:
        refined = tentative

    # exemption: no counterpart in the next depth frame
    intr = rig.color_intrinsics
    q = rig.depth_to_color.apply(refined)
    x, y, in_front = camera.project_points(q, intr)
    ix = np.round(x).astype(np.int64)
    iy = np.round(y).astype(np.int64)
    inside = in_front & (ix >= 0) & (ix < intr.width) & (iy >= 0) & (iy < intr.height)
    ixc = np.clip(ix, 0, intr.width - 1)
    iyc = np.clip(iy, 0, intr.height - 1)
    zbuf = np.full((intr.height, intr.width), np.inf)
    np.minimum.at(zbuf, (iyc[inside], ixc[inside]), q[inside, 2])
    hidden = inside & (q[:, 2] > zbuf[iyc, ixc] + _OCCLUSION_Z_MARGIN)
    on_hole = inside & ~D_k1.valid[iyc, ixc]
    exempt = ~moved_ok | ~inside | hidden | on_hole
    return refined, exempt


def unproject_normals(depth: DepthMap, rig: CameraRig, k: int = 16) -> PointCloud:
    """Unproject an aligned depth map and estimate normals in one go."""
    from .camera import unproject

    cloud = unproject(depth, rig.color_intrinsics)
    if len(cloud) >= k + 1:
        cloud = estimate_normals(cloud, k=k)
    return cloud


def topology_weights(
    graph: NeighborGraph,
    refined_positions: np.ndarray,
    exempt: np.ndarray,
    sigma_t: float,
    point_indices: np.ndarray | None = None,
) -> np.ndarray:
    """Per-edge weights from edge-length change under the warped cloud.

    ``point_indices`` maps the graph's point ids into rows of
    ``refined_positions`` (identity when omitted). Edges with an exempt
    endpoint keep weight 1.
    """
    ai = graph.edges[:, 0]
    bi = graph.edges[:, 1]
    if point_indices is not None:
        ai = point_indices[ai]
        bi = point_indices[bi]
    new_len = np.linalg.norm(refined_positions[ai] - refined_positions[bi], axis=1)
    old_len = np.linalg.norm(graph.rest_vectors, axis=1)
    dl = new_len - old_len
    w_t = np.exp(-(dl * dl) / (sigma_t**2))
    w_t = np.maximum(w_t, np.finfo(np.float64).tiny)
    w_t[exempt[ai] | exempt[bi]] = 1.0
    return w_t


def detect_topology_changes(
    M_k: PointCloud,
    flows: list[FlowField2D],
    D_k1: DepthMap,
    rig: CameraRig,
    weights: EnergyWeights,
    solver_params=None,
) -> NeighborGraph:
    """Update the graph's topology weights from warped edge lengths.

    Edges that stretch between the anchor cloud and its motion-warped,
    geometry-refined counterpart mark separating surfaces and get their
    weight pulled toward 0; edges with an endpoint that has no
    counterpart (occluded or out of frame) keep weight 1.
    """
    if M_k.graph is None:
        raise InputError("anchor cloud needs a neighbor graph before topology detection")
    refined, exempt = warped_cloud_positions(M_k, flows, D_k1, rig, weights, solver_params)
    w_t = topology_weights(M_k.graph, refined, exempt, weights.sigma_t)
    g = M_k.graph
    return NeighborGraph(
        edges=g.edges,
        w_color=g.w_color,
        w_depth=g.w_depth,
        w_topo=w_t,
        rest_vectors=g.rest_vectors,
    )
