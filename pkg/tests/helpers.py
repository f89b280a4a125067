"""Shared fixtures and oracles for the test suite."""

from __future__ import annotations

import numpy as np

from depthweave.analysis import Correspondences, OcclusionField
from depthweave.core import (
    CameraIntrinsics,
    CameraRig,
    ColorImage,
    EnergyWeights,
    FlowField2D,
    NeighborGraph,
    PointCloud,
    RigidTransform,
    SceneFlowState,
)
from depthweave.energy import EnergyInputs, StateLayout, apply_delta
from depthweave.so3 import rotation_exp


def random_rotation(rng) -> np.ndarray:
    return rotation_exp(rng.normal(size=3))


def random_rig(rng, width=16, height=16) -> CameraRig:
    intr = CameraIntrinsics(
        fx=20.0 + 5 * rng.random(),
        fy=20.0 + 5 * rng.random(),
        cx=width / 2 + rng.random(),
        cy=height / 2 + rng.random(),
        width=width,
        height=height,
    )
    rot = rotation_exp(0.05 * rng.normal(size=3))
    t = 0.02 * rng.normal(size=3)
    return CameraRig(intr, intr, RigidTransform(rot, t))


def smooth_random_image(rng, height, width) -> ColorImage:
    """Low-frequency random image so bilinear sampling is informative."""
    coarse = rng.random((height // 4 + 2, width // 4 + 2, 3))
    ys = np.linspace(0, coarse.shape[0] - 1.01, height)
    xs = np.linspace(0, coarse.shape[1] - 1.01, width)
    gx, gy = np.meshgrid(xs, ys)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    fx = (gx - x0)[..., None]
    fy = (gy - y0)[..., None]
    img = (
        (1 - fy) * ((1 - fx) * coarse[y0, x0] + fx * coarse[y0, x0 + 1])
        + fy * ((1 - fx) * coarse[y0 + 1, x0] + fx * coarse[y0 + 1, x0 + 1])
    )
    return ColorImage(np.clip(img, 0, 1))


def random_state(rng, n_points=30, g=2, width=16, height=16):
    """A random but well-posed solver state plus matching inputs."""
    # points in front of the camera, around 2 m away
    pts = np.stack(
        [
            0.8 * (rng.random(n_points) - 0.5),
            0.8 * (rng.random(n_points) - 0.5),
            1.8 + 0.4 * rng.random(n_points),
        ],
        axis=1,
    )
    pixel_of = rng.choice(width * height, size=n_points, replace=False)
    anchor = PointCloud(pts, pixel_of, width, height)
    positions = pts[None] + 0.01 * rng.normal(size=(g, n_points, 3))
    rotations = np.stack(
        [np.stack([random_rotation(rng) for _ in range(n_points)]) for _ in range(g)]
    )
    flows = []
    for _ in range(g):
        # keep warp targets comfortably off integer pixel boundaries
        u = 0.2 + 0.2 * rng.random((height, width))
        v = 0.2 + 0.2 * rng.random((height, width))
        valid = np.ones((height, width), dtype=bool)
        valid[:, -1] = False
        flows.append(FlowField2D(u, v, valid))
    state = SceneFlowState(
        g=g, anchor=anchor, positions=positions, rotations=rotations, flows=flows
    )

    images = [smooth_random_image(rng, height, width) for _ in range(g + 1)]
    rig = random_rig(rng, width, height)
    # random graph: a ring plus random chords
    edges = [(i, (i + 1) % n_points) for i in range(n_points)]
    edges += [
        tuple(sorted(rng.choice(n_points, size=2, replace=False)))
        for _ in range(n_points)
    ]
    edges = np.unique(np.sort(np.array(edges), axis=1), axis=0)
    e = len(edges)
    graph = NeighborGraph(
        edges=edges,
        w_color=0.4 + 0.6 * rng.random(e),
        w_depth=0.4 + 0.6 * rng.random(e),
        w_topo=0.4 + 0.6 * rng.random(e),
        rest_vectors=pts[edges[:, 0]] - pts[edges[:, 1]],
    )
    m = n_points - 4
    corr = Correspondences(
        source_indices=np.arange(m),
        target_points=pts[:m] + 0.05 * rng.normal(size=(m, 3)),
        target_normals=_unit(rng.normal(size=(m, 3))),
        distances=np.zeros(m),
    )
    occl = [
        OcclusionField(weight=0.2 + 0.8 * rng.random((height, width)))
        for _ in range(g)
    ]
    inputs = EnergyInputs(
        images=images, correspondences=corr, occlusions=occl, graph=graph, rig=rig
    )
    return state, inputs


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def numeric_jacobian(block_fn, state, columns, step=1e-5):
    """Central finite differences of a residual vector along given columns.

    ``block_fn(state)`` must return the residual vector; rotation columns
    are perturbed through the retraction, matching the solver's update
    rule.
    """
    layout = StateLayout.of(state)
    base = block_fn(state)
    out = np.zeros((len(base), len(columns)))
    for k, col in enumerate(columns):
        dx = np.zeros(layout.dim)
        dx[col] = step
        plus = block_fn(apply_delta(state, layout, dx, 1.0))
        minus = block_fn(apply_delta(state, layout, dx, -1.0))
        out[:, k] = (plus - minus) / (2 * step)
    return out


def max_relative_jacobian_error(block, block_fn, state, rng, extra_columns=64):
    """Compare a block's analytic Jacobian against finite differences.

    Checks every column the analytic Jacobian touches plus a random
    sample of untouched columns (which must differentiate to zero).
    """
    layout = StateLayout.of(state)
    J = block.jacobian.tocsc()
    touched = np.unique(J.indices) if J.nnz else np.array([], dtype=int)
    untouched = np.setdiff1d(
        rng.choice(layout.dim, size=min(extra_columns, layout.dim), replace=False),
        touched,
    )
    columns = np.concatenate([touched, untouched]).astype(int)
    num = numeric_jacobian(block_fn, state, columns)
    ana = np.asarray(J[:, columns].todense())
    scale = max(1.0, np.abs(num).max())
    return np.abs(ana - num).max() / scale


def default_weights() -> EnergyWeights:
    return EnergyWeights()
