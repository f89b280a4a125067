"""Gauss-Newton / PCG solver over a multi-resolution pyramid.

The normal equations are never formed: each residual block keeps its
sparse Jacobian and J^T J is applied block by block inside a Jacobi-
preconditioned conjugate-gradient loop. An outer loop re-searches
closest points and occlusion weights, then sweeps the pyramid coarse to
fine with bilinear prolongation of flows and positions and copied
rotations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .camera import unproject
from .core import (
    CameraRig,
    ColorImage,
    DepthMap,
    EnergyWeights,
    FlowField2D,
    InputError,
    PointCloud,
    SceneFlowState,
    SolverFault,
)
from .energy import (
    EnergyInputs,
    StateLayout,
    apply_delta,
    assemble_blocks,
)
from .flow2d import (
    FlowParams,
    downsample2,
    estimate_flow,
    resize_bilinear,
    weighted_median_filter,
)

ALL_TERMS = ("opti", "point", "plane", "proj", "iso", "reg", "short")
GEOMETRY_TERMS = ("point", "plane", "iso")


@dataclass
class SolverParams:
    """Iteration budgets and safeguards of the joint solve."""

    levels: int = 3
    gn_iters_per_level: int = 5
    pcg_iters: int = 10
    icp_rounds: int = 3
    damping: float = 1e-6
    energy_tol: float = 1e-4

    def __post_init__(self):
        for name in ("levels", "gn_iters_per_level", "pcg_iters", "icp_rounds"):
            if getattr(self, name) < 1:
                raise InputError(f"solver parameter {name} must be >= 1")
        if self.damping < 0:
            raise InputError("damping must be >= 0")


def pcg(apply_A, b: np.ndarray, iters: int, precond: np.ndarray) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients for SPD operators.

    Runs at most ``iters`` iterations, stopping early once the residual
    drops below 1e-10 * ||b||. Non-finite values abort with a fault.
    """
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x
    tol = 1e-10 * bnorm
    z = r / precond
    p = z.copy()
    rz = float(r @ z)
    for it in range(iters):
        if np.linalg.norm(r) <= tol:
            break
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0:
            if pAp == 0.0:
                break
            raise SolverFault(
                f"PCG broke down at iteration {it}: p^T A p = {pAp}"
            )
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = r / precond
        rz_new = float(r @ z)
        if not np.isfinite(rz_new):
            raise SolverFault(f"PCG produced non-finite values at iteration {it}")
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def gauss_newton_step(
    state: SceneFlowState,
    blocks: list,
    params: SolverParams,
    energy_fn,
):
    """One damped Gauss-Newton update with backtracking.

    Solves (J^T J + damping * scale * I) dx = -J^T r block-wise with
    PCG, then halves the step up to 8 times if the energy went up,
    keeping the best trial. Returns (state, energy, info).
    """
    layout = StateLayout.of(state)
    dim = layout.dim
    grad = np.zeros(dim)
    diag = np.zeros(dim)
    e0 = 0.0
    jacobians = []
    for b in blocks:
        if b.jacobian is None:
            raise InputError(f"block {b.term} was assembled without a Jacobian")
        e0 += b.energy
        grad += b.jacobian.T @ b.residuals
        J = b.jacobian
        if J.nnz:
            diag += np.bincount(J.indices, weights=J.data * J.data, minlength=dim)
        jacobians.append(J)
    nz = diag[diag > 0]
    scale = float(nz.mean()) if len(nz) else 1.0
    lam = params.damping * scale if params.damping > 0 else 0.0
    # keep the preconditioner positive even for untouched unknowns
    floor = max(lam, 1e-12 * max(scale, 1.0))
    precond = np.maximum(diag + lam, floor)

    def apply_A(p):
        out = lam * p
        for J in jacobians:
            out += J.T @ (J @ p)
        return out

    dx = pcg(apply_A, -grad, params.pcg_iters, precond)
    if not np.all(np.isfinite(dx)):
        raise SolverFault("Gauss-Newton update contains non-finite values")

    best_state, best_e, best_scale = None, np.inf, 0.0
    step = 1.0
    for halving in range(9):
        trial = apply_delta(state, layout, dx, step)
        e_t = float(energy_fn(trial))
        if e_t < best_e:
            best_state, best_e, best_scale = trial, e_t, step
        if e_t <= e0:
            break
        step *= 0.5
    if best_e <= e0 and best_state is not None:
        return best_state, best_e, {
            "step_scale": best_scale, "rejected": False, "energy_before": e0,
        }
    return state, e0, {"step_scale": 0.0, "rejected": True, "energy_before": e0}


@dataclass
class SceneFlowProblem:
    """Inputs of one interval solve, already in the color camera frame."""

    images: list                       # g+1 ColorImage
    anchor: PointCloud                 # geometry at step 0, with graph
    target: PointCloud                 # geometry at step g, with normals
    rig: CameraRig
    weights: EnergyWeights
    initial_flows: list | None = None  # optional g flow fields
    topo_positions: np.ndarray | None = None
    topo_exempt: np.ndarray | None = None
    correspondence_gate: float = 0.2
    normals_k: int = 16


@dataclass
class TraceRow:
    round: int
    level: int
    iteration: int
    breakdown: dict
    total: float


@dataclass
class SolveResult:
    state: SceneFlowState
    energy: float
    trace: list = field(default_factory=list)
    rejected_steps: int = 0


@dataclass
class _Level:
    images: list
    anchor: PointCloud
    target: PointCloud
    rig: CameraRig
    graph: object
    sel: np.ndarray | None       # indices into the finer level's cloud
    full_indices: np.ndarray     # indices into the level-0 cloud


def _downsample_image(img: ColorImage) -> ColorImage:
    rgb = np.stack([downsample2(img.rgb[..., c]) for c in range(3)], axis=2)
    return ColorImage(np.clip(rgb, 0.0, 1.0))


def _subsample_cloud(cloud: PointCloud):
    """Keep points at even pixels; remap provenance to the halved grid."""
    px, py = cloud.pixel_xy
    sel = np.nonzero((px % 2 == 0) & (py % 2 == 0))[0]
    gw = (cloud.grid_width + 1) // 2
    gh = (cloud.grid_height + 1) // 2
    pixel_of = (py[sel] // 2) * gw + (px[sel] // 2)
    sub = PointCloud(cloud.points[sel], pixel_of, gw, gh)
    if cloud.normals is not None:
        sub = PointCloud(cloud.points[sel], pixel_of, gw, gh, normals=cloud.normals[sel])
    return sub, sel


def _restrict_flow(flow: FlowField2D) -> FlowField2D:
    return FlowField2D(
        flow.u[::2, ::2] * 0.5, flow.v[::2, ::2] * 0.5, flow.valid[::2, ::2]
    )


def build_levels(problem: SceneFlowProblem, n_levels: int) -> list[_Level]:
    """Image/cloud/graph pyramid, index 0 = finest."""
    w = problem.weights
    levels = []
    images = list(problem.images)
    anchor = problem.anchor
    target = problem.target
    rig = problem.rig
    full_idx = np.arange(len(anchor))
    sel = None
    for lv in range(n_levels):
        graph = analysis.build_neighbor_graph(anchor, images[0], w)
        if problem.topo_positions is not None:
            w_t = analysis.topology_weights(
                graph,
                problem.topo_positions,
                problem.topo_exempt,
                w.sigma_t,
                point_indices=full_idx,
            )
            graph = type(graph)(
                edges=graph.edges,
                w_color=graph.w_color,
                w_depth=graph.w_depth,
                w_topo=w_t,
                rest_vectors=graph.rest_vectors,
            )
        levels.append(
            _Level(
                images=images,
                anchor=anchor,
                target=target,
                rig=rig,
                graph=graph,
                sel=sel,
                full_indices=full_idx,
            )
        )
        if lv == n_levels - 1:
            break
        if min(images[0].height, images[0].width) < 32 or len(anchor) < 32:
            break
        images = [_downsample_image(im) for im in images]
        anchor, sel = _subsample_cloud(anchor)
        target, _ = _subsample_cloud(target)
        full_idx = full_idx[sel]
        rig = CameraRig(
            rig.depth_intrinsics.scaled(0.5),
            rig.color_intrinsics.scaled(0.5),
            rig.depth_to_color,
        )
    return levels


def _restrict_state(state: SceneFlowState, level: _Level) -> SceneFlowState:
    """Project a finer state onto the next coarser level's unknowns."""
    sel = level.sel
    flows = [_restrict_flow(f) for f in state.flows]
    return SceneFlowState(
        g=state.g,
        anchor=level.anchor,
        positions=state.positions[:, sel, :].copy(),
        rotations=state.rotations[:, sel, :, :].copy(),
        flows=flows,
    )


def prolong_point_field(
    values: np.ndarray, coarse_anchor: PointCloud, fine_anchor: PointCloud
) -> np.ndarray:
    """Bilinear interpolation of per-point vectors up one grid level.

    Values live on the coarse cloud's pixel grid; each fine point reads
    the interpolated value at half its pixel coordinates, renormalizing
    over the coarse pixels that actually carry a point. Constant fields
    prolong to the same constant exactly.
    """
    gh, gw = coarse_anchor.grid_height, coarse_anchor.grid_width
    cmap = analysis.index_map(coarse_anchor)
    has = cmap >= 0
    lead = values.shape[:-2]
    grid = np.zeros(lead + (gh, gw, values.shape[-1]))
    cpx, cpy = coarse_anchor.pixel_xy
    grid[..., cpy, cpx, :] = values

    fpx, fpy = fine_anchor.pixel_xy
    cx = fpx / 2.0
    cy = fpy / 2.0
    x0 = np.clip(np.floor(cx).astype(np.int64), 0, gw - 1)
    y0 = np.clip(np.floor(cy).astype(np.int64), 0, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    fx = cx - x0
    fy = cy - y0
    wts = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=0
    )
    masks = np.stack(
        [has[y0, x0], has[y0, x1], has[y1, x0], has[y1, x1]], axis=0
    ).astype(float)
    wts = wts * masks
    wsum = wts.sum(axis=0)
    vals = np.stack(
        [
            grid[..., y0, x0, :],
            grid[..., y0, x1, :],
            grid[..., y1, x0, :],
            grid[..., y1, x1, :],
        ],
        axis=0,
    )
    interp = np.einsum("kn,k...nc->...nc", wts, vals)
    ok = wsum > 1e-12
    safe = np.where(ok, wsum, 1.0)
    interp = interp / safe[..., None]
    return np.where(ok[..., None], interp, 0.0)


def _coarse_parents(coarse_anchor: PointCloud, fine_anchor: PointCloud) -> np.ndarray:
    """Nearest coarse point index for every fine point (-1 when none)."""
    gh, gw = coarse_anchor.grid_height, coarse_anchor.grid_width
    cmap = analysis.index_map(coarse_anchor)
    fpx, fpy = fine_anchor.pixel_xy
    rx = np.clip(np.round(fpx / 2.0).astype(np.int64), 0, gw - 1)
    ry = np.clip(np.round(fpy / 2.0).astype(np.int64), 0, gh - 1)
    parent = cmap[ry, rx]
    fx0 = np.clip(np.floor(fpx / 2.0).astype(np.int64), 0, gw - 1)
    fy0 = np.clip(np.floor(fpy / 2.0).astype(np.int64), 0, gh - 1)
    return np.where(parent >= 0, parent, cmap[fy0, fx0])


def _prolong_correction(
    coarse_new: SceneFlowState,
    coarse_ref: SceneFlowState,
    coarse_level: _Level,
    fine_level: _Level,
    fine_state: SceneFlowState,
    with_flows: bool = True,
) -> SceneFlowState:
    """Apply the coarse level's improvement to the finer state.

    Position and flow corrections are interpolated bilinearly (flow
    values doubled); rotation deltas are copied from the nearest coarse
    parent and composed onto the fine rotations. Working with
    corrections keeps whatever fine detail the finer level already has.
    """
    g = coarse_new.g
    fine = fine_state.copy()
    if with_flows:
        h_f = fine_level.images[0].height
        w_f = fine_level.images[0].width
        for s in range(g):
            du = resize_bilinear(
                coarse_new.flows[s].u - coarse_ref.flows[s].u, h_f, w_f
            )
            dv = resize_bilinear(
                coarse_new.flows[s].v - coarse_ref.flows[s].v, h_f, w_f
            )
            fine.flows[s].u += 2.0 * du
            fine.flows[s].v += 2.0 * dv
    dpos = prolong_point_field(
        coarse_new.positions - coarse_ref.positions,
        coarse_level.anchor,
        fine_level.anchor,
    )
    fine.positions = fine.positions + dpos
    parent = _coarse_parents(coarse_level.anchor, fine_level.anchor)
    good = parent >= 0
    delta = coarse_new.rotations @ coarse_ref.rotations.transpose(0, 1, 3, 2)
    fine.rotations[:, good, :, :] = (
        delta[:, parent[good], :, :] @ fine.rotations[:, good, :, :]
    )
    return fine


def _level_inputs(
    level: _Level, state: SceneFlowState, weights: EnergyWeights, gate: float
) -> EnergyInputs:
    """Closest points from the current final-step positions plus occlusions."""
    query = level.anchor.with_points(state.positions[state.g - 1])
    corr = analysis.closest_points(query, level.target, max_distance=gate)
    occl = [
        analysis.occlusion_weights(
            state.flows[s], level.images[s], level.images[s + 1], weights
        )
        for s in range(state.g)
    ]
    return EnergyInputs(
        images=level.images,
        correspondences=corr,
        occlusions=occl,
        graph=level.graph,
        rig=level.rig,
    )


def _run_gn(
    state: SceneFlowState,
    inputs: EnergyInputs,
    weights: EnergyWeights,
    params: SolverParams,
    terms,
    trace: list,
    rnd: int,
    level_id: int,
):
    """Fixed-correspondence Gauss-Newton iterations at one level."""

    def energy_fn(st):
        blocks = assemble_blocks(st, inputs, weights, with_jacobian=False, terms=terms)
        return sum(b.energy for b in blocks)

    rejected = 0
    prev = None
    for it in range(params.gn_iters_per_level):
        blocks = assemble_blocks(state, inputs, weights, with_jacobian=True, terms=terms)
        state, e, info = gauss_newton_step(state, blocks, params, energy_fn)
        trace.append(
            TraceRow(
                round=rnd,
                level=level_id,
                iteration=it,
                breakdown={b.term: b.energy for b in blocks},
                total=e,
            )
        )
        if info["rejected"]:
            rejected += 1
            break
        if prev is not None and prev - e <= params.energy_tol * max(prev, 1e-30):
            prev = e
            break
        prev = e
    return state, prev if prev is not None else e, rejected


def _initial_state(
    anchor: PointCloud, g: int, flows: list, rig: CameraRig
) -> SceneFlowState:
    """Start positions by lifting the accumulated flow at constant depth.

    Gets each step within a small correction of the answer so the fixed
    iteration budget is spent on refinement, not on gross motion.
    """
    from .flow2d import accumulate_flow

    state = SceneFlowState.initial(anchor, g, flows)
    for s in range(g):
        acc = accumulate_flow(flows[: s + 1])
        pts, ok = analysis.lift_flow_to_points(anchor, acc, rig)
        state.positions[s] = np.where(ok[:, None], pts, anchor.points)
    return state


def solve_pyramid(
    problem: SceneFlowProblem,
    params: SolverParams | None = None,
    flow_params: FlowParams | None = None,
    terms=ALL_TERMS,
) -> SolveResult:
    """Joint solve for positions, rotations and flows over the pyramid.

    Each outer round re-searches closest points and occlusion weights,
    then runs the Gauss-Newton budget at every level from coarsest to
    finest with prolongation in between. The best fine-level state seen
    is returned together with the full energy trace.
    """
    params = params or SolverParams()
    weights = problem.weights
    g = len(problem.images) - 1
    if g < 1:
        raise InputError("need at least two color images")
    if problem.initial_flows is not None:
        flows = [f.copy() for f in problem.initial_flows]
    else:
        flows = [
            estimate_flow(problem.images[s], problem.images[s + 1], flow_params)
            for s in range(g)
        ]
    levels = build_levels(problem, params.levels)
    n_levels = len(levels)

    states: list = [None] * n_levels
    states[0] = _initial_state(levels[0].anchor, g, flows, problem.rig)
    for lv in range(1, n_levels):
        states[lv] = _restrict_state(states[lv - 1], levels[lv])

    trace: list[TraceRow] = []
    best_state = None
    best_energy = np.inf
    rejected = 0
    prev_round_energy = None
    for rnd in range(params.icp_rounds):
        fine_energy = None
        refs = [st.copy() for st in states]
        for lv in range(n_levels - 1, -1, -1):
            inputs = _level_inputs(levels[lv], states[lv], weights, problem.correspondence_gate)
            states[lv], e, rej = _run_gn(
                states[lv], inputs, weights, params, terms, trace, rnd, lv
            )
            rejected += rej
            if lv > 0:
                # carry everything this level gained during the round,
                # including corrections it inherited from coarser levels
                states[lv - 1] = _prolong_correction(
                    states[lv],
                    refs[lv],
                    levels[lv],
                    levels[lv - 1],
                    states[lv - 1],
                    with_flows=False,
                )
            else:
                fine_energy = e
        # edge-aware median keeps the flow fields from wandering off the
        # smooth optimum pixel by pixel while the geometry catches up
        median_radius = (flow_params or FlowParams()).median_radius
        for lv in range(n_levels):
            for s in range(g):
                states[lv].flows[s] = weighted_median_filter(
                    states[lv].flows[s], levels[lv].images[s], median_radius
                )
        inputs0 = _level_inputs(levels[0], states[0], weights, problem.correspondence_gate)
        blocks0 = assemble_blocks(
            states[0], inputs0, weights, with_jacobian=False, terms=terms
        )
        fine_energy = sum(b.energy for b in blocks0)
        if fine_energy is not None and fine_energy < best_energy:
            best_energy = fine_energy
            best_state = states[0].copy()
        if prev_round_energy is not None and fine_energy is not None:
            if prev_round_energy - fine_energy <= params.energy_tol * max(
                prev_round_energy, 1e-30
            ):
                break
        prev_round_energy = fine_energy
    if best_state is None:
        best_state = states[0]
        best_energy = fine_energy if fine_energy is not None else np.inf
    return SolveResult(
        state=best_state, energy=best_energy, trace=trace, rejected_steps=rejected
    )


def refine_geometry(
    anchor: PointCloud,
    initial_positions: np.ndarray,
    target: PointCloud,
    weights: EnergyWeights,
    params: SolverParams,
    gate: float = 0.2,
) -> np.ndarray:
    """Pull tentative positions onto the target with the geometry terms.

    Runs the point/plane/local-rigidity subset at the coarsest pyramid
    scale and interpolates the resulting displacement back to every
    point. Used to clean up motion-warped clouds before measuring edge
    stretch.
    """
    cloud = anchor
    positions = np.asarray(initial_positions, dtype=float)
    indices = np.arange(len(anchor))
    for _ in range(max(0, params.levels - 1)):
        if len(cloud) < 64:
            break
        cloud, sel = _subsample_cloud(cloud)
        indices = indices[sel]
    coarse_pos = positions[indices]
    coarse_cloud = PointCloud(
        anchor.points[indices], cloud.pixel_of, cloud.grid_width, cloud.grid_height
    )
    dummy_image = ColorImage(np.zeros((cloud.grid_height, cloud.grid_width, 3)))
    graph = analysis.build_neighbor_graph(coarse_cloud, dummy_image, weights)
    state = SceneFlowState(
        g=1,
        anchor=coarse_cloud,
        positions=coarse_pos[None, :, :].copy(),
        rotations=np.broadcast_to(np.eye(3), (1, len(coarse_cloud), 3, 3)).copy(),
        flows=[FlowField2D.zeros(1, 1)],
    )
    inputs = EnergyInputs(graph=graph)

    def energy_fn(st):
        blocks = assemble_blocks(
            st, inputs, weights, with_jacobian=False, terms=GEOMETRY_TERMS
        )
        return sum(b.energy for b in blocks)

    for _ in range(2):
        query = coarse_cloud.with_points(state.positions[0])
        inputs.correspondences = analysis.closest_points(
            query, target, max_distance=gate
        )
        for _ in range(params.gn_iters_per_level):
            blocks = assemble_blocks(
                state, inputs, weights, with_jacobian=True, terms=GEOMETRY_TERMS
            )
            state, _, info = gauss_newton_step(state, blocks, params, energy_fn)
            if info["rejected"]:
                break

    # spread the coarse displacement back over the full cloud
    refined = positions.copy()
    coarse_disp = state.positions[0] - anchor.points[indices]
    tent_disp = positions[indices] - anchor.points[indices]
    correction = coarse_disp - tent_disp
    full_corr = _interpolate_point_field(
        cloud, correction, anchor, indices
    )
    refined += full_corr
    return refined


def _interpolate_point_field(
    coarse_cloud: PointCloud,
    values: np.ndarray,
    fine_cloud: PointCloud,
    coarse_to_fine: np.ndarray,
) -> np.ndarray:
    """Bilinear spread of per-coarse-point vectors to every fine point."""
    gh, gw = coarse_cloud.grid_height, coarse_cloud.grid_width
    grid = np.zeros((gh, gw, values.shape[1]))
    has = np.zeros((gh, gw), dtype=bool)
    cpx, cpy = coarse_cloud.pixel_xy
    grid[cpy, cpx] = values
    has[cpy, cpx] = True
    fpx, fpy = fine_cloud.pixel_xy
    factor = 2 ** max(
        0, int(round(np.log2(max(fine_cloud.grid_width // gw, 1))))
    )
    cx = fpx / factor
    cy = fpy / factor
    x0 = np.clip(np.floor(cx).astype(np.int64), 0, gw - 1)
    y0 = np.clip(np.floor(cy).astype(np.int64), 0, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    fx = (cx - x0)[:, None]
    fy = (cy - y0)[:, None]
    wts = [
        (1 - fx) * (1 - fy) * has[y0, x0][:, None],
        fx * (1 - fy) * has[y0, x1][:, None],
        (1 - fx) * fy * has[y1, x0][:, None],
        fx * fy * has[y1, x1][:, None],
    ]
    vals = [grid[y0, x0], grid[y0, x1], grid[y1, x0], grid[y1, x1]]
    num = sum(w * v for w, v in zip(wts, vals))
    den = sum(w for w in wts)
    out = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
    return out


def make_problem(
    D_a: DepthMap,
    D_b: DepthMap,
    images: list[ColorImage],
    rig: CameraRig,
    weights: EnergyWeights,
    flow_params: FlowParams | None = None,
    solver_params: SolverParams | None = None,
    gate: float = 0.2,
    normals_k: int = 16,
    detect_topology: bool = True,
) -> SceneFlowProblem:
    """Assemble a solve problem from aligned depth maps and color frames."""
    rig_aligned = rig.aligned()
    anchor = unproject(D_a, rig_aligned.color_intrinsics)
    if len(anchor) == 0:
        raise InputError("anchor depth map has no valid pixels")
    target = analysis.unproject_normals(D_b, rig_aligned, k=min(normals_k, max(3, len(anchor) - 1)))
    g = len(images) - 1
    flows = [
        estimate_flow(images[s], images[s + 1], flow_params) for s in range(g)
    ]
    topo_positions = topo_exempt = None
    if detect_topology:
        try:
            topo_positions, topo_exempt = analysis.warped_cloud_positions(
                anchor, flows, D_b, rig_aligned, weights, solver_params
            )
        except Exception:
            topo_positions = topo_exempt = None
    return SceneFlowProblem(
        images=images,
        anchor=anchor,
        target=target,
        rig=rig_aligned,
        weights=weights,
        initial_flows=flows,
        topo_positions=topo_positions,
        topo_exempt=topo_exempt,
        correspondence_gate=gate,
        normals_k=normals_k,
    )
