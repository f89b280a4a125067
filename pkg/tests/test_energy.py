"""Energy terms: frozen analytic cases plus finite-difference Jacobians."""

import numpy as np
import pytest

from depthweave import energy
from depthweave.core import EnergyWeights, FlowField2D, PointCloud, SceneFlowState
from depthweave.energy import (
    EnergyInputs,
    StateLayout,
    apply_delta,
    total_energy,
)
from depthweave.so3 import rotation_exp

from helpers import max_relative_jacobian_error, random_state

RNG = np.random.default_rng(12345)


def _block_fn(term, inputs, w):
    def fn(state):
        blocks = energy.assemble_blocks(
            state, inputs, w, with_jacobian=False, terms=(term,)
        )
        return blocks[0].residuals

    return fn


@pytest.mark.parametrize("term", energy.TERM_NAMES)
def test_jacobian_matches_finite_differences(term):
    state, inputs = random_state(RNG, n_points=30, g=2)
    w = EnergyWeights()
    block = energy.assemble_blocks(state, inputs, w, terms=(term,))[0]
    err = max_relative_jacobian_error(block, _block_fn(term, inputs, w), state, RNG)
    assert err < 1e-4, f"{term}: max relative Jacobian error {err:.3e}"


def test_opti_floor_on_identical_images():
    state, inputs = random_state(RNG, n_points=10, g=2)
    for f in state.flows:
        f.u[:] = 0.0
        f.v[:] = 0.0
    inputs.images = [inputs.images[0]] * (state.g + 1)
    w = EnergyWeights()
    block = energy.e_opti(state, inputs.images, w)
    expected = np.sqrt(w.lambda_opti) * np.sqrt(w.epsilon)
    assert np.allclose(block.residuals, expected, atol=1e-9)


def test_point_and_plane_offsets():
    state, inputs = random_state(RNG, n_points=12, g=2)
    w = EnergyWeights()
    corr = inputs.correspondences
    # exact match: both terms sit at the kernel floor
    state.positions[state.g - 1][corr.source_indices] = corr.target_points
    floor_point = energy.e_point(state, corr, w).residuals
    floor_plane = energy.e_plane(state, corr, w).residuals
    assert np.allclose(floor_point, np.sqrt(w.lambda_point * w.epsilon), atol=1e-12)
    assert np.allclose(floor_plane, np.sqrt(w.lambda_plane * w.epsilon), atol=1e-12)
    # offset along the normal: both terms see 0.1
    state.positions[state.g - 1][corr.source_indices] = (
        corr.target_points + 0.1 * corr.target_normals
    )
    rho = np.sqrt(0.1**2 + w.epsilon**2)
    assert np.allclose(
        energy.e_point(state, corr, w).residuals,
        np.sqrt(w.lambda_point * rho),
        atol=1e-12,
    )
    assert np.allclose(
        energy.e_plane(state, corr, w).residuals,
        np.sqrt(w.lambda_plane * rho),
        atol=1e-12,
    )
    # offset perpendicular to the normal: plane term drops to the floor
    perp = np.cross(corr.target_normals, [0.0, 0.0, 1.0])
    perp /= np.linalg.norm(perp, axis=1, keepdims=True)
    state.positions[state.g - 1][corr.source_indices] = corr.target_points + 0.1 * perp
    assert np.allclose(
        energy.e_plane(state, corr, w).residuals,
        np.sqrt(w.lambda_plane) * np.sqrt(w.epsilon),
        atol=1e-9,
    )
    assert np.allclose(
        energy.e_point(state, corr, w).residuals,
        np.sqrt(w.lambda_point * rho),
        atol=1e-9,
    )


def test_proj_zero_for_static_scene_with_zero_flow():
    state, inputs = random_state(RNG, n_points=10, g=2)
    state.positions[:] = state.anchor.points[None]
    for f in state.flows:
        f.u[:] = 0.0
        f.v[:] = 0.0
    w = EnergyWeights()
    block = energy.e_proj(state, inputs.occlusions, inputs.rig, w)
    assert np.abs(block.residuals).max() < 1e-12


def test_iso_zero_under_exact_rigid_motion():
    state, inputs = random_state(RNG, n_points=15, g=2)
    w = EnergyWeights()
    R = rotation_exp(np.array([0.1, -0.2, 0.3]))
    t = np.array([0.05, -0.02, 0.1])
    for s in range(state.g):
        state.positions[s] = state.anchor.points @ R.T + t
        state.rotations[s] = R[None].repeat(len(state.anchor), axis=0)
    block = energy.e_iso(state, inputs.graph, w)
    assert np.abs(block.residuals).max() < 1e-9
    # identity case
    state.positions[:] = state.anchor.points[None]
    state.rotations[:] = np.eye(3)
    assert np.abs(energy.e_iso(state, inputs.graph, w).residuals).max() < 1e-12


def test_iso_uniform_scale_residual():
    state, inputs = random_state(RNG, n_points=15, g=1)
    w = EnergyWeights()
    state.positions[0] = 1.1 * state.anchor.points
    state.rotations[:] = np.eye(3)
    block = energy.e_iso(state, inputs.graph, w)
    g = inputs.graph
    norms = np.linalg.norm(block.residuals.reshape(-1, 3), axis=1)
    ww = np.concatenate([g.weights, g.weights])
    rest = np.concatenate([g.rest_vectors, -g.rest_vectors])
    expected = np.sqrt(w.lambda_iso * ww) * 0.1 * np.linalg.norm(rest, axis=1)
    assert np.allclose(norms, expected, rtol=1e-9)


def test_reg_pi_rotation_energy():
    state, inputs = random_state(RNG, n_points=6, g=1)
    w = EnergyWeights()
    g = inputs.graph
    state.rotations[:] = np.eye(3)
    i, j = g.edges[0]
    state.rotations[0, j] = rotation_exp(np.array([0.0, 0.0, np.pi]))
    block = energy.e_reg(state, g, w)
    r2 = (block.residuals.reshape(len(g), 9) ** 2).sum(axis=1)
    # ||I - Rz(pi)||_F^2 = 8
    expected = w.lambda_reg * g.weights[0] * w.d_a * 8.0
    assert np.isclose(r2[0], expected, rtol=1e-12)
    state.rotations[0, j] = np.eye(3)
    assert np.abs(energy.e_reg(state, g, w).residuals).max() < 1e-15


def test_short_linear_and_analytic():
    state, inputs = random_state(RNG, n_points=5, g=2)
    w = EnergyWeights()
    state.positions[:] = state.anchor.points[None]
    assert np.abs(energy.e_short(state, w).residuals).max() < 1e-15
    # one point stepping 0.1 m per frame: energy lambda * 2 * 0.01
    state.positions[0, 0] = state.anchor.points[0] + [0.1, 0.0, 0.0]
    state.positions[1, 0] = state.anchor.points[0] + [0.2, 0.0, 0.0]
    block = energy.e_short(state, w)
    assert np.isclose(block.energy, w.lambda_short * 2 * 0.01, rtol=1e-12)


def test_total_energy_breakdown_sums_and_scaling():
    state, inputs = random_state(RNG, n_points=20, g=2)
    w = EnergyWeights()
    total, breakdown = total_energy(state, inputs, w)
    assert total >= 0
    assert np.isclose(total, sum(breakdown.values()), rtol=1e-12)
    # doubling a lambda doubles exactly that contribution
    w2 = EnergyWeights(lambda_iso=2 * w.lambda_iso)
    total2, breakdown2 = total_energy(state, inputs, w2)
    assert np.isclose(breakdown2["iso"], 2 * breakdown["iso"], rtol=1e-12)
    for term in ("opti", "point", "plane", "proj", "reg", "short"):
        assert np.isclose(breakdown2[term], breakdown[term], rtol=1e-12)


def test_sqrt_rho_limit_and_monotonicity():
    # as eps -> 0 the square-rooted kernel approaches sqrt(|r|)^2 = |r|
    r = np.linspace(-2, 2, 41)
    for eps in (1e-2, 1e-4, 1e-6):
        val = energy._sqrt_rho(r * r, eps) ** 2
        assert np.all(val >= np.abs(r) - 1e-12)
        assert np.abs(val - np.abs(r)).max() <= eps * (1 + 1e-9)
    mono = energy._sqrt_rho(np.sort(np.abs(r)) ** 2, 1e-4)
    assert np.all(np.diff(mono) >= 0)


def test_apply_delta_keeps_rotations_orthonormal():
    state, _ = random_state(RNG, n_points=8, g=2)
    layout = StateLayout.of(state)
    dx = RNG.normal(size=layout.dim)
    new = apply_delta(state, layout, dx, 0.5)
    RtR = np.einsum("snij,snik->snjk", new.rotations, new.rotations)
    assert np.abs(RtR - np.eye(3)).max() < 1e-12
