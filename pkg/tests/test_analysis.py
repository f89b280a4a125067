"""Normals, neighbor graphs, correspondences, occlusion, topology."""

import numpy as np
import pytest

from depthweave.analysis import (
    build_neighbor_graph,
    closest_points,
    detect_topology_changes,
    estimate_normals,
    occlusion_weights,
    topology_weights,
)
from depthweave.camera import unproject
from depthweave.core import (
    CameraIntrinsics,
    CameraRig,
    ColorImage,
    DepthMap,
    EnergyWeights,
    FlowField2D,
    InputError,
    PointCloud,
)
from depthweave import synth


def _grid_cloud(z=2.0, n=12, spacing=0.05):
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    pts = np.stack(
        [spacing * (xs - n / 2).ravel(), spacing * (ys - n / 2).ravel(),
         np.full(n * n, z)],
        axis=1,
    )
    return PointCloud(pts, np.arange(n * n), n, n)


def test_normals_on_plane_point_at_camera():
    cloud = estimate_normals(_grid_cloud(), k=8)
    assert np.abs(cloud.normals - np.array([0.0, 0.0, -1.0])).max() < 1e-6
    assert not cloud.degenerate.any()


def test_normals_on_sphere_are_radial():
    center = np.array([0.0, 0.0, 2.0])
    radius = 0.5
    # dense, even cap facing the camera (golden-angle spiral)
    n = 3000
    k = np.arange(n)
    phi = k * 2.399963229728653
    z = -1.0 + 0.5 * k / n          # cap: z in [-1, -0.5]
    r = np.sqrt(1 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    pts = center + radius * dirs
    cloud = PointCloud(pts, np.arange(n), n, 1)
    est = estimate_normals(cloud, k=12)
    radial = dirs
    cos = np.abs(np.einsum("ni,ni->n", est.normals, radial))
    angles = np.degrees(np.arccos(np.clip(cos, -1, 1)))
    assert np.percentile(angles, 95) < 2.0


def test_normals_degenerate_collinear():
    # a line of points: rank-1 neighborhoods
    t = np.linspace(0, 1, 30)
    pts = np.stack([t, np.zeros(30), np.full(30, 2.0)], axis=1)
    cloud = PointCloud(pts, np.arange(30), 30, 1)
    est = estimate_normals(cloud, k=4)
    assert est.degenerate.all()
    view = -pts / np.linalg.norm(pts, axis=1, keepdims=True)
    assert np.abs(est.normals - view).max() < 1e-9
    with pytest.raises(InputError):
        estimate_normals(cloud, k=2)


def test_neighbor_graph_weights_and_connectivity():
    w = EnergyWeights()
    cloud = _grid_cloud(n=6, spacing=w.sigma_d)  # edge length = sigma_d
    img = ColorImage(np.full((6, 6, 3), 0.5))
    graph = build_neighbor_graph(cloud, img, w)
    # interior pixel has exactly 8 incident edges
    imap = np.arange(36).reshape(6, 6)
    center = imap[3, 3]
    incident = np.count_nonzero((graph.edges == center).any(axis=1))
    assert incident == 8
    # axis-aligned edge at distance sigma_d: w_d = exp(-1)
    lengths = np.linalg.norm(graph.rest_vectors, axis=1)
    axis_edges = np.isclose(lengths, w.sigma_d)
    assert np.allclose(graph.w_depth[axis_edges], np.exp(-1.0), atol=1e-6)
    # same color everywhere: w_c = 1
    assert np.allclose(graph.w_color, 1.0)
    assert np.allclose(graph.w_topo, 1.0)


def test_neighbor_graph_coincident_points():
    pts = np.zeros((2, 3))
    pts[:, 2] = 2.0
    cloud = PointCloud(pts, [0, 1], 2, 1)
    img = ColorImage(np.full((1, 2, 3), 0.3))
    g = build_neighbor_graph(cloud, img, EnergyWeights())
    assert len(g) == 1
    assert g.w_depth[0] == 1.0 and g.w_color[0] == 1.0


def _with_normals(cloud):
    n = np.zeros((len(cloud), 3))
    n[:, 2] = -1.0
    return PointCloud(
        cloud.points, cloud.pixel_of, cloud.grid_width, cloud.grid_height, normals=n
    )


def test_closest_points_identity_and_small_shift():
    target = _with_normals(_grid_cloud(n=8, spacing=0.1))
    corr = closest_points(target, target)
    assert np.array_equal(corr.source_indices, np.arange(len(target)))
    assert np.allclose(corr.distances, 0.0)
    assert np.allclose(corr.target_points, target.points)
    shifted = PointCloud(
        target.points + [0.001, 0, 0], target.pixel_of, 8, 8
    )
    corr2 = closest_points(shifted, target)
    assert np.allclose(corr2.distances, 0.001)
    assert np.allclose(corr2.target_points, target.points)


def test_closest_points_matches_brute_force():
    rng = np.random.default_rng(9)
    src_pts = rng.random((500, 3))
    tgt_pts = rng.random((400, 3))
    normals = np.zeros((400, 3))
    normals[:, 2] = 1.0
    src = PointCloud(src_pts, np.arange(500), 500, 1)
    tgt = PointCloud(tgt_pts, np.arange(400), 400, 1, normals=normals)
    corr = closest_points(src, tgt)
    # oracle: O(n^2) scan
    d2 = ((src_pts[:, None, :] - tgt_pts[None, :, :]) ** 2).sum(axis=2)
    best = d2.argmin(axis=1)
    assert np.allclose(corr.target_points, tgt_pts[best])
    assert np.allclose(corr.distances, np.sqrt(d2[np.arange(500), best]))


def test_closest_points_tie_breaks_to_lowest_index():
    tgt_pts = np.array([[1.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    normals = np.tile([0, 0, 1.0], (3, 1))
    tgt = PointCloud(tgt_pts, np.arange(3), 3, 1, normals=normals)
    src = PointCloud(np.array([[1.0, 0, 0]]), [0], 1, 1)
    corr = closest_points(src, tgt)
    assert np.allclose(corr.target_points[0], tgt_pts[0])
    with pytest.raises(InputError):
        closest_points(src, PointCloud(np.zeros((0, 3)), [], 1, 1))


def test_closest_points_gate_drops_far_matches():
    tgt = _with_normals(_grid_cloud(n=4, spacing=0.1))
    src_pts = tgt.points.copy()
    src_pts[0] += [5.0, 0, 0]
    src = PointCloud(src_pts, tgt.pixel_of, 4, 4)
    corr = closest_points(src, tgt, max_distance=0.2)
    assert len(corr) == len(tgt) - 1
    assert 0 not in corr.source_indices


def test_occlusion_weights_frozen_cases():
    w = EnergyWeights()
    img = ColorImage(np.full((8, 8, 3), 0.5))
    zero = FlowField2D.zeros(8, 8)
    o = occlusion_weights(zero, img, img, w)
    assert np.allclose(o.weight, 1.0)
    # divergence = sigma_1 with zero color difference: exp(-1)
    xs = np.arange(8, dtype=float)[None, :].repeat(8, 0)
    f = FlowField2D(w.sigma_1 * (xs - 4.0), np.zeros((8, 8)))
    o2 = occlusion_weights(f, img, img, w)
    interior = o2.weight[2:-2, 2:-2]
    # interior samples stay on the constant image: only divergence acts
    assert np.allclose(interior, np.exp(-1.0), atol=1e-6)
    # intensity step of 20/255 at sigma_2 = 20: exp(-1)
    img2 = ColorImage(np.full((8, 8, 3), 0.5 + 20.0 / 255.0 / 0.114 * 0.114))
    g1 = ColorImage(np.full((8, 8, 3), 100 / 255.0))
    g2 = ColorImage(np.full((8, 8, 3), 120 / 255.0))
    o3 = occlusion_weights(zero, g1, g2, w)
    assert np.allclose(o3.weight, np.exp(-1.0), atol=1e-4)


def test_occlusion_out_of_bounds_is_minimum_weight():
    w = EnergyWeights()
    img = ColorImage(np.full((6, 6, 3), 0.5))
    f = FlowField2D(np.full((6, 6), 100.0), np.zeros((6, 6)))
    o = occlusion_weights(f, img, img, w)
    assert np.all(o.weight <= np.finfo(np.float64).tiny * 2)
    assert np.all(o.weight > 0)


def _separating_setup(res=64, g=4):
    ds = synth.generate(
        synth.SceneSpec(scene="separating-blocks", g=g, frames=g + 1, resolution=res)
    )
    rig = ds.rig.aligned()
    w = EnergyWeights()
    anchor = unproject(ds.input_depths[0], rig.color_intrinsics)
    graph = build_neighbor_graph(anchor, ds.colors[0], w)
    anchor.graph = graph
    return ds, rig, w, anchor


def test_topology_weights_rigid_motion_stays_one():
    w = EnergyWeights()
    cloud = _grid_cloud(n=10, spacing=0.02)
    img = ColorImage(np.full((10, 10, 3), 0.5))
    graph = build_neighbor_graph(cloud, img, w)
    from depthweave.so3 import rotation_exp

    R = rotation_exp(np.array([0.2, 0.1, -0.3]))
    moved = cloud.points @ R.T + np.array([0.1, -0.05, 0.2])
    w_t = topology_weights(graph, moved, np.zeros(len(cloud), bool), w.sigma_t)
    assert np.abs(w_t - 1.0).max() < 1e-3


def test_topology_weights_stretch_and_exemption():
    w = EnergyWeights()
    cloud = _grid_cloud(n=6, spacing=0.01)
    img = ColorImage(np.full((6, 6, 3), 0.5))
    graph = build_neighbor_graph(cloud, img, w)
    # stretch one axis-aligned edge by sigma_t
    lengths = np.linalg.norm(graph.rest_vectors, axis=1)
    e = int(np.argmax(np.isclose(lengths, 0.01)))
    i, j = graph.edges[e]
    moved = cloud.points.copy()
    direction = graph.rest_vectors[e] / lengths[e]
    moved[i] += direction * w.sigma_t
    exempt = np.zeros(len(cloud), bool)
    w_t = topology_weights(graph, moved, exempt, w.sigma_t)
    assert abs(w_t[e] - np.exp(-1.0)) < 5e-2
    # exempting an endpoint restores weight 1 exactly
    exempt[i] = True
    w_t2 = topology_weights(graph, moved, exempt, w.sigma_t)
    assert w_t2[e] == 1.0


def test_detect_topology_changes_on_separating_blocks():
    ds, rig, w, anchor = _separating_setup()
    flows = [
        ds.gt_flows[s] for s in range(ds.spec.g)
    ]  # ground-truth motion isolates the detector itself
    graph = detect_topology_changes(anchor, flows, ds.input_depths[1], rig, w)
    ids = ds.prim_ids[0].ravel()[anchor.pixel_of]
    a = ids[graph.edges[:, 0]]
    b = ids[graph.edges[:, 1]]
    crossing = ((a == 1) & (b == 2)) | ((a == 2) & (b == 1))
    interior = ((a == 1) & (b == 1)) | ((a == 2) & (b == 2))
    assert crossing.sum() > 0
    assert graph.w_topo[crossing].mean() < 0.5
    assert graph.w_topo[interior].mean() > 0.9
