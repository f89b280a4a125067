"""Domain types: constructor validation, kernel, state checking."""

import numpy as np
import pytest

from depthweave.core import (
    CameraIntrinsics,
    ColorImage,
    DepthMap,
    EnergyWeights,
    FlowField2D,
    InputError,
    NeighborGraph,
    PointCloud,
    RigidTransform,
    SceneFlowState,
    robust_kernel,
    validate,
)


def test_robust_kernel_frozen_values():
    assert robust_kernel(0.0, 1e-4) == 1e-4
    assert robust_kernel(3.0, 4.0) == 5.0
    # sqrt(1 + 1e-8) evaluated at extended precision
    assert abs(robust_kernel(1.0, 1e-4) - 1.0000000049999999) < 1e-9


def test_robust_kernel_properties():
    rng = np.random.default_rng(3)
    r = rng.normal(scale=5.0, size=200)
    eps = 1e-3
    vals = robust_kernel(r, eps)
    assert np.all(vals >= eps)
    assert np.allclose(vals, robust_kernel(-r, eps))
    ordered = robust_kernel(np.sort(np.abs(r)), eps)
    assert np.all(np.diff(ordered) >= 0)


def test_intrinsics_validation():
    CameraIntrinsics(fx=500, fy=500, cx=320, cy=240, width=640, height=480)
    with pytest.raises(InputError):
        CameraIntrinsics(fx=-1, fy=500, cx=320, cy=240, width=640, height=480)
    with pytest.raises(InputError):
        CameraIntrinsics(fx=500, fy=500, cx=700, cy=240, width=640, height=480)


def test_rigid_transform_rejects_non_rotation():
    with pytest.raises(InputError):
        RigidTransform(2 * np.eye(3), np.zeros(3))
    t = RigidTransform(np.eye(3), [1.0, 2.0, 3.0])
    assert np.allclose(t.apply([0, 0, 0]), [1, 2, 3])
    inv = t.inverse()
    assert np.allclose(inv.apply(t.apply([0.3, -0.2, 1.0])), [0.3, -0.2, 1.0])


def test_depth_map_sentinel_and_mask():
    d = np.array([[1.0, 0.0], [2.0, 3.0]])
    dm = DepthMap(d)
    assert dm.valid.tolist() == [[True, False], [True, True]]
    assert dm.depth[0, 1] == 0.0
    with pytest.raises(InputError):
        DepthMap(np.array([[-1.0]]), np.array([[True]]))


def test_color_image_intensity_is_luma():
    rgb = np.zeros((2, 2, 3))
    rgb[0, 0] = [1.0, 0.0, 0.0]
    rgb[0, 1] = [0.0, 1.0, 0.0]
    rgb[1, 0] = [0.0, 0.0, 1.0]
    img = ColorImage(rgb)
    assert np.isclose(img.intensity[0, 0], 0.299)
    assert np.isclose(img.intensity[0, 1], 0.587)
    assert np.isclose(img.intensity[1, 0], 0.114)
    with pytest.raises(InputError):
        ColorImage(rgb + 2.0)


def test_neighbor_graph_invariants():
    edges = np.array([[0, 1]])
    with pytest.raises(InputError):
        NeighborGraph(np.array([[1, 1]]), [1.0], [1.0], [1.0], np.zeros((1, 3)))
    with pytest.raises(InputError):
        NeighborGraph(edges, [0.0], [1.0], [1.0], np.zeros((1, 3)))
    g = NeighborGraph(edges, [0.5], [0.5], [1.0], np.ones((1, 3)))
    assert np.isclose(g.weights[0], 0.25)


def test_point_cloud_provenance_bounds():
    pts = np.array([[0.0, 0.0, 1.0]])
    with pytest.raises(InputError):
        PointCloud(pts, [99], grid_width=4, grid_height=4)
    c = PointCloud(pts, [5], 4, 4)
    px, py = c.pixel_xy
    assert (px[0], py[0]) == (1, 1)
    with pytest.raises(InputError):
        PointCloud(pts, [0], 4, 4, normals=np.array([[2.0, 0.0, 0.0]]))


def _tiny_state(n=4, g=2):
    rng = np.random.default_rng(0)
    pts = np.stack([rng.random(n), rng.random(n), 1 + rng.random(n)], axis=1)
    anchor = PointCloud(pts, np.arange(n), 4, 4)
    flows = [FlowField2D.zeros(4, 4) for _ in range(g)]
    return SceneFlowState.initial(anchor, g, flows)


def test_validate_clean_state_and_violations():
    state = _tiny_state()
    assert validate(state) == []
    bad = state.copy()
    bad.rotations[1, 2] *= 2.0
    msgs = validate(bad)
    assert len(msgs) == 1 and "s=2" in msgs[0] and "[2]" in msgs[0]
    shorter = state.copy()
    shorter.positions = shorter.positions[:, :-1, :]
    assert any("positions" in m for m in validate(shorter))


def test_energy_weights_defaults_are_reference_constants():
    w = EnergyWeights()
    assert w.lambda_opti == 1.0
    assert w.lambda_point == 0.2
    assert w.lambda_plane == 0.8
    assert w.lambda_proj == 1.0
    assert w.lambda_iso == 3.0
    assert w.lambda_reg == 0.8
    assert w.lambda_short == 0.5
    assert w.epsilon == 1e-4
    assert w.d_a == 10.0
    assert w.sigma_c == 1.0
    assert w.sigma_d == 0.015
    assert w.sigma_t == 0.015
    assert w.sigma_1 == 1.0
    assert w.sigma_2 == 20.0
    with pytest.raises(InputError):
        EnergyWeights(lambda_iso=0.0)
