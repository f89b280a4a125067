"""Residual and Jacobian assembly for the joint motion energy.

Each term produces a :class:`ResidualBlock` whose squared residuals sum
to the term's energy contribution. Robust (smooth-L1) terms enter the
least-squares form as square-rooted kernel values, so Gauss-Newton sees
sum-of-squares everywhere. Rotations are addressed through axis-angle
increments applied on the left of the current estimate; Jacobians are
taken at zero increment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .analysis import Correspondences, OcclusionField
from .camera import Z_MIN, psi_jacobian, psi_points
from .core import (
    CameraRig,
    ColorImage,
    EnergyWeights,
    InputError,
    NeighborGraph,
    SceneFlowState,
)
from .flow2d import bicubic_sample_with_grad
from .so3 import rotation_exp

TERM_NAMES = ("opti", "point", "plane", "proj", "iso", "reg", "short")


@dataclass
class StateLayout:
    """Flat indexing of the unknown vector.

    Order: positions (g blocks of N points x 3), rotation increments
    (same shape), then per-step flow fields (H x W x 2, u before v).
    """

    g: int
    n_points: int
    width: int
    height: int

    @property
    def pos_offset(self) -> int:
        return 0

    @property
    def rot_offset(self) -> int:
        return 3 * self.g * self.n_points

    @property
    def flow_offset(self) -> int:
        return 6 * self.g * self.n_points

    @property
    def dim(self) -> int:
        return self.flow_offset + 2 * self.g * self.width * self.height

    def pos_base(self, s: int, point_idx: np.ndarray) -> np.ndarray:
        """Column of the x-component of position (s, i); s in [1, g]."""
        return self.pos_offset + ((s - 1) * self.n_points + point_idx) * 3

    def rot_base(self, s: int, point_idx: np.ndarray) -> np.ndarray:
        return self.rot_offset + ((s - 1) * self.n_points + point_idx) * 3

    def flow_base(self, s: int, pixel_idx: np.ndarray) -> np.ndarray:
        """Column of the u-component of flow step s at a flat pixel index."""
        return self.flow_offset + (s * self.width * self.height + pixel_idx) * 2

    @staticmethod
    def of(state: SceneFlowState) -> "StateLayout":
        if not state.flows:
            raise InputError("state carries no flow fields")
        return StateLayout(
            g=state.g,
            n_points=len(state.anchor),
            width=state.flows[0].width,
            height=state.flows[0].height,
        )


@dataclass
class ResidualBlock:
    """Residual vector of one energy term plus its sparse Jacobian."""

    term: str
    residuals: np.ndarray
    jacobian: sp.csr_matrix | None = None
    flagged: int = 0

    @property
    def energy(self) -> float:
        return float(self.residuals @ self.residuals)

    def __post_init__(self):
        if self.jacobian is not None and self.jacobian.shape[0] != len(self.residuals):
            raise InputError("jacobian row count differs from residual count")


@dataclass
class EnergyInputs:
    """Everything the terms need besides the state itself."""

    images: list = field(default_factory=list)
    correspondences: Correspondences | None = None
    occlusions: list | None = None
    graph: NeighborGraph | None = None
    rig: CameraRig | None = None


def _csr(rows, cols, vals, nrows, ncols) -> sp.csr_matrix:
    return sp.csr_matrix(
        (np.asarray(vals, float), (np.asarray(rows), np.asarray(cols))),
        shape=(nrows, ncols),
    )


def _csr_uniform(indices: np.ndarray, data: np.ndarray, nnz_per_row: int, ncols: int):
    """CSR with a fixed entry count per row, built without sorting.

    ``indices`` and ``data`` are row-major (nrows * nnz_per_row,."""
    indices = np.ascontiguousarray(indices, dtype=np.int32).ravel()
    data = np.ascontiguousarray(data, dtype=np.float64).ravel()
    nrows = len(data) // max(nnz_per_row, 1) if nnz_per_row else 0
    indptr = np.arange(nrows + 1, dtype=np.int32) * nnz_per_row
    return sp.csr_matrix((data, indices, indptr), shape=(nrows, ncols))


def _vstack(blocks: list, ncols: int) -> sp.csr_matrix:
    blocks = [b for b in blocks if b.shape[0] > 0]
    if not blocks:
        return sp.csr_matrix((0, ncols))
    if len(blocks) == 1:
        return blocks[0]
    return sp.vstack(blocks, format="csr")


def _sqrt_rho(r2: np.ndarray, eps: float) -> np.ndarray:
    """sqrt(kernel) for squared arguments: (r^2 + eps^2)^(1/4)."""
    return np.power(r2 + eps * eps, 0.25)


# brightness residuals run on a 0-255 intensity scale; the reference
# term weights only balance against the pixel-squared projection term
# at gray-level magnitudes
INTENSITY_SCALE = 255.0


def e_opti(
    state: SceneFlowState,
    images: list[ColorImage],
    w: EnergyWeights,
    with_jacobian: bool = True,
) -> ResidualBlock:
    """Brightness-constancy term on every flow step.

    One residual per valid flow pixel: sqrt(lambda * kernel(dI)) where
    dI compares the next intensity image sampled at x + v against the
    current one, on a 0-255 scale. Sampling is bicubic (smooth enough
    not to bias the flow toward integer displacements) and the Jacobian
    is the interpolant's exact derivative.
    """
    if len(images) != state.g + 1:
        raise InputError(f"need {state.g + 1} images for g={state.g}, got {len(images)}")
    layout = StateLayout.of(state)
    lam = w.lambda_opti
    res_parts, jac_parts = [], []
    for s in range(state.g):
        flow = state.flows[s]
        ys, xs = np.nonzero(flow.valid)
        cur = images[s].intensity[ys, xs] * INTENSITY_SCALE
        tx = xs + flow.u[ys, xs]
        ty = ys + flow.v[ys, xs]
        val, gx, gy, _ = bicubic_sample_with_grad(
            images[s + 1].intensity * INTENSITY_SCALE, tx, ty
        )
        diff = val - cur
        rho_sqrt = _sqrt_rho(diff * diff, w.epsilon)
        res = np.sqrt(lam) * rho_sqrt
        res_parts.append(res)
        if with_jacobian:
            # d sqrt(rho) / d diff = diff / (2 rho^(3/2))
            scale = np.sqrt(lam) * diff / (2.0 * rho_sqrt**3)
            base = layout.flow_base(s, ys * layout.width + xs)
            m = len(res)
            indices = np.stack([base, base + 1], axis=1)
            data = np.stack([scale * gx, scale * gy], axis=1)
            jac_parts.append(_csr_uniform(indices, data, 2, layout.dim))
    residuals = np.concatenate(res_parts) if res_parts else np.zeros(0)
    jac = _vstack(jac_parts, layout.dim) if with_jacobian else None
    return ResidualBlock("opti", residuals, jac)


def _closest_point_block(
    state, corr, w, term, with_jacobian
) -> ResidualBlock:
    layout = StateLayout.of(state)
    lam = w.lambda_point if term == "point" else w.lambda_plane
    if corr is None or len(corr) == 0:
        jac = _csr([], [], [], 0, layout.dim) if with_jacobian else None
        return ResidualBlock(term, np.zeros(0), jac)
    p = state.positions[state.g - 1][corr.source_indices]
    d = p - corr.target_points
    if term == "point":
        arg2 = np.sum(d * d, axis=1)
        grad_arg = d                       # d(arg)/dp where arg = ||d||, via r2 form
    else:
        t = np.einsum("ni,ni->n", corr.target_normals, d)
        arg2 = t * t
        grad_arg = t[:, None] * corr.target_normals
    rho_sqrt = _sqrt_rho(arg2, w.epsilon)
    res = np.sqrt(lam) * rho_sqrt
    jac = None
    if with_jacobian:
        # d (arg2 + eps^2)^(1/4) / dp = grad_arg / (2 rho^(3/2))
        scale = np.sqrt(lam) / (2.0 * rho_sqrt**3)
        data = scale[:, None] * grad_arg
        base = layout.pos_base(state.g, corr.source_indices)
        indices = base[:, None] + np.arange(3)[None, :]
        jac = _csr_uniform(indices, data, 3, layout.dim)
    return ResidualBlock(term, res, jac)


def e_point(state, correspondences, w, with_jacobian: bool = True) -> ResidualBlock:
    """Robust distance from each final-step point to its closest target."""
    return _closest_point_block(state, correspondences, w, "point", with_jacobian)


def e_plane(state, correspondences, w, with_jacobian: bool = True) -> ResidualBlock:
    """Robust distance to the target's tangent plane at the closest point."""
    return _closest_point_block(state, correspondences, w, "plane", with_jacobian)


def e_proj(
    state: SceneFlowState,
    occlusions: list[OcclusionField],
    rig: CameraRig,
    w: EnergyWeights,
    with_jacobian: bool = True,
) -> ResidualBlock:
    """Consistency between projected 3-D displacement and 2-D flow.

    Per step s and point i, a 2-vector residual
    sqrt(lambda * O) * (proj(p_{s+1}) - proj(p_s) - v_s) sampled at the
    point's source pixel. Points behind the camera contribute zero and
    are counted in ``flagged``.
    """
    if occlusions is None or len(occlusions) != state.g:
        raise InputError(f"need one occlusion field per step ({state.g})")
    layout = StateLayout.of(state)
    n = layout.n_points
    anchor = state.anchor
    pix = anchor.pixel_of
    res_parts, jac_parts = [], []
    flagged = 0
    for s in range(state.g):
        pa = anchor.points if s == 0 else state.positions[s - 1]
        pb = state.positions[s]
        xa, ya, fa = psi_points(pa, rig)
        xb, yb, fb = psi_points(pb, rig)
        ok = fa & fb
        flagged += int(np.count_nonzero(~ok))
        o = occlusions[s].weight.ravel()[pix]
        sw = np.sqrt(w.lambda_proj * o) * ok
        flow = state.flows[s]
        ru = sw * (xb - xa - flow.u.ravel()[pix])
        rv = sw * (yb - ya - flow.v.ravel()[pix])
        res_parts.append(np.stack([ru, rv], axis=1).ravel())
        if with_jacobian:
            nnz = 7 if s >= 1 else 4
            indices = np.empty((n, 2, nnz), dtype=np.int64)
            data = np.empty((n, 2, nnz))
            Jb = psi_jacobian(pb, rig) * sw[:, None, None]
            base_b = layout.pos_base(s + 1, np.arange(n))
            indices[:, :, 0:3] = (base_b[:, None] + np.arange(3))[:, None, :]
            data[:, :, 0:3] = Jb
            col = 3
            if s >= 1:
                Ja = psi_jacobian(pa, rig) * (-sw[:, None, None])
                base_a = layout.pos_base(s, np.arange(n))
                indices[:, :, 3:6] = (base_a[:, None] + np.arange(3))[:, None, :]
                data[:, :, 3:6] = Ja
                col = 6
            fb_base = layout.flow_base(s, pix)
            indices[:, 0, col] = fb_base
            indices[:, 1, col] = fb_base + 1
            data[:, :, col] = -sw[:, None]
            jac_parts.append(_csr_uniform(indices, data, nnz, layout.dim))
    residuals = np.concatenate(res_parts) if res_parts else np.zeros(0)
    jac = _vstack(jac_parts, layout.dim) if with_jacobian else None
    return ResidualBlock("proj", residuals, jac, flagged=flagged)


def e_iso(
    state: SceneFlowState,
    graph: NeighborGraph,
    w: EnergyWeights,
    with_jacobian: bool = True,
) -> ResidualBlock:
    """Local-rigidity term: neighborhoods move like their point's rotation.

    Per step and per directed edge (i, j), the 3-vector residual
    sqrt(lambda * w_ij) * ((p_i - p_j) - R_i (p0_i - p0_j)).
    """
    if graph is None or len(graph) == 0:
        layout = StateLayout.of(state)
        jac = _csr([], [], [], 0, layout.dim) if with_jacobian else None
        return ResidualBlock("iso", np.zeros(0), jac)
    layout = StateLayout.of(state)
    first = np.concatenate([graph.edges[:, 0], graph.edges[:, 1]])
    second = np.concatenate([graph.edges[:, 1], graph.edges[:, 0]])
    rest = np.concatenate([graph.rest_vectors, -graph.rest_vectors])
    sw = np.sqrt(w.lambda_iso * np.concatenate([graph.weights, graph.weights]))
    m = len(first)
    comp = np.arange(3)
    res_parts, jac_parts = [], []
    for s in range(1, state.g + 1):
        P = state.positions[s - 1]
        R = state.rotations[s - 1]
        q = np.einsum("eij,ej->ei", R[first], rest)
        r = sw[:, None] * ((P[first] - P[second]) - q)
        res_parts.append(r.ravel())
        if with_jacobian:
            # per component row: +sw p_first, -sw p_second, sw * skew(q) row
            indices = np.empty((m, 3, 5), dtype=np.int64)
            data = np.empty((m, 3, 5))
            indices[:, :, 0] = layout.pos_base(s, first)[:, None] + comp
            indices[:, :, 1] = layout.pos_base(s, second)[:, None] + comp
            indices[:, :, 2:5] = (layout.rot_base(s, first)[:, None] + comp)[:, None, :]
            data[:, :, 0] = sw[:, None]
            data[:, :, 1] = -sw[:, None]
            swq = sw[:, None] * q
            data[:, 0, 2] = 0.0
            data[:, 0, 3] = -swq[:, 2]
            data[:, 0, 4] = swq[:, 1]
            data[:, 1, 2] = swq[:, 2]
            data[:, 1, 3] = 0.0
            data[:, 1, 4] = -swq[:, 0]
            data[:, 2, 2] = -swq[:, 1]
            data[:, 2, 3] = swq[:, 0]
            data[:, 2, 4] = 0.0
            jac_parts.append(_csr_uniform(indices, data, 5, layout.dim))
    residuals = np.concatenate(res_parts)
    jac = _vstack(jac_parts, layout.dim) if with_jacobian else None
    return ResidualBlock("iso", residuals, jac)


def e_reg(
    state: SceneFlowState,
    graph: NeighborGraph,
    w: EnergyWeights,
    with_jacobian: bool = True,
) -> ResidualBlock:
    """Smoothness of the rotation field across edges (Frobenius difference)."""
    if graph is None or len(graph) == 0:
        layout = StateLayout.of(state)
        jac = _csr([], [], [], 0, layout.dim) if with_jacobian else None
        return ResidualBlock("reg", np.zeros(0), jac)
    layout = StateLayout.of(state)
    ei = graph.edges[:, 0]
    ej = graph.edges[:, 1]
    sw = np.sqrt(w.lambda_reg * graph.weights * w.d_a)
    m = len(ei)
    comp = np.arange(3)
    res_parts, jac_parts = [], []
    for s in range(1, state.g + 1):
        R = state.rotations[s - 1]
        diff = R[ei] - R[ej]
        res_parts.append((sw[:, None, None] * diff).reshape(m, 9).ravel())
        if with_jacobian:
            # vec entry (row index 3u+n) differentiates to signed rows of
            # R: d vec(exp(d) R)[u, n] / d_k = (skew(e_k) R)[u, n]
            indices = np.empty((m, 9, 6), dtype=np.int64)
            data = np.empty((m, 3, 3, 6))
            ci = (layout.rot_base(s, ei)[:, None] + comp)[:, None, :]
            cj = (layout.rot_base(s, ej)[:, None] + comp)[:, None, :]
            indices[:, :, 0:3] = ci
            indices[:, :, 3:6] = cj
            for sign, Re, sl in ((1.0, R[ei], slice(0, 3)), (-1.0, R[ej], slice(3, 6))):
                c = sign * sw[:, None, None] * Re    # (m, 3, 3): rows of R scaled
                blk = data[:, :, :, sl]
                blk[:, 0, :, 0] = 0.0
                blk[:, 0, :, 1] = c[:, 2, :]
                blk[:, 0, :, 2] = -c[:, 1, :]
                blk[:, 1, :, 0] = -c[:, 2, :]
                blk[:, 1, :, 1] = 0.0
                blk[:, 1, :, 2] = c[:, 0, :]
                blk[:, 2, :, 0] = c[:, 1, :]
                blk[:, 2, :, 1] = -c[:, 0, :]
                blk[:, 2, :, 2] = 0.0
            jac_parts.append(
                _csr_uniform(indices, data.reshape(m, 9, 6), 6, layout.dim)
            )
    residuals = np.concatenate(res_parts)
    jac = _vstack(jac_parts, layout.dim) if with_jacobian else None
    return ResidualBlock("reg", residuals, jac)


def e_short(
    state: SceneFlowState, w: EnergyWeights, with_jacobian: bool = True
) -> ResidualBlock:
    """Shortest-path prior: consecutive positions stay close."""
    layout = StateLayout.of(state)
    n = layout.n_points
    sq = np.sqrt(w.lambda_short)
    res_parts, jac_parts = [], []
    for s in range(1, state.g + 1):
        prev = state.anchor.points if s == 1 else state.positions[s - 2]
        r = sq * (state.positions[s - 1] - prev)
        res_parts.append(r.ravel())
        if with_jacobian:
            cols = (layout.pos_base(s, np.arange(n))[:, None] + np.arange(3)).ravel()
            if s == 1:
                jac_parts.append(
                    _csr_uniform(cols, np.full(3 * n, sq), 1, layout.dim)
                )
            else:
                cols_prev = (
                    layout.pos_base(s - 1, np.arange(n))[:, None] + np.arange(3)
                ).ravel()
                indices = np.stack([cols, cols_prev], axis=1)
                data = np.stack(
                    [np.full(3 * n, sq), np.full(3 * n, -sq)], axis=1
                )
                jac_parts.append(_csr_uniform(indices, data, 2, layout.dim))
    residuals = np.concatenate(res_parts)
    jac = _vstack(jac_parts, layout.dim) if with_jacobian else None
    return ResidualBlock("short", residuals, jac)


def assemble_blocks(
    state: SceneFlowState,
    inputs: EnergyInputs,
    w: EnergyWeights,
    with_jacobian: bool = True,
    terms: tuple[str, ...] = TERM_NAMES,
) -> list[ResidualBlock]:
    """Build the requested residual blocks at the current state."""
    out = []
    for term in terms:
        if term == "opti":
            out.append(e_opti(state, inputs.images, w, with_jacobian))
        elif term == "point":
            out.append(e_point(state, inputs.correspondences, w, with_jacobian))
        elif term == "plane":
            out.append(e_plane(state, inputs.correspondences, w, with_jacobian))
        elif term == "proj":
            out.append(e_proj(state, inputs.occlusions, inputs.rig, w, with_jacobian))
        elif term == "iso":
            out.append(e_iso(state, inputs.graph, w, with_jacobian))
        elif term == "reg":
            out.append(e_reg(state, inputs.graph, w, with_jacobian))
        elif term == "short":
            out.append(e_short(state, w, with_jacobian))
        else:
            raise InputError(f"unknown energy term {term!r}")
    return out


def total_energy(
    state: SceneFlowState,
    inputs: EnergyInputs,
    w: EnergyWeights,
    terms: tuple[str, ...] = TERM_NAMES,
):
    """Total energy and per-term breakdown at the current state."""
    blocks = assemble_blocks(state, inputs, w, with_jacobian=False, terms=terms)
    breakdown = {b.term: b.energy for b in blocks}
    return sum(breakdown.values()), breakdown


def apply_delta(
    state: SceneFlowState, layout: StateLayout, dx: np.ndarray, scale: float = 1.0
) -> SceneFlowState:
    """Move a state along an update direction.

    Positions and flows update additively; rotations are retracted with
    the exponential of the scaled axis-angle increment.
    """
    g, n = layout.g, layout.n_points
    new = state.copy()
    d_pos = dx[: layout.rot_offset].reshape(g, n, 3)
    d_rot = dx[layout.rot_offset : layout.flow_offset].reshape(g, n, 3)
    new.positions = state.positions + scale * d_pos
    new.rotations = rotation_exp(scale * d_rot) @ state.rotations
    hw = layout.height * layout.width
    for s in range(g):
        seg = dx[layout.flow_offset + 2 * s * hw : layout.flow_offset + 2 * (s + 1) * hw]
        duv = seg.reshape(layout.height, layout.width, 2)
        new.flows[s].u += scale * duv[..., 0]
        new.flows[s].v += scale * duv[..., 1]
    return new
