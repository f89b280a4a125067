"""File formats, dataset ingestion, error metrics and configuration.

Binary formats are defined byte-for-byte so round trips are exactly
reproducible: grayscale PFM for depth, Middlebury-style .flo for 2-D
flow, P6 PPM for color, and a small SF3D container for per-pixel 3-D
displacements.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    CameraIntrinsics,
    CameraRig,
    ColorImage,
    ConfigError,
    DepthMap,
    EnergyWeights,
    FlowField2D,
    InputError,
    ParseError,
    RigidTransform,
)
from .flow2d import FlowParams
from .reconstruct import PipelineParams
from .solver import SolverParams

FLO_MAGIC = 202021.25
FLO_INVALID = 1e10
SF3D_MAGIC = b"SF3D"


# ---------------------------------------------------------------------------
# PFM (grayscale, little-endian rows bottom-to-top)

def write_pfm(path, depth: DepthMap) -> None:
    """Grayscale PFM; invalid pixels are stored as 0."""
    path = Path(path)
    data = np.where(depth.valid, depth.depth, 0.0).astype("<f4")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{depth.width} {depth.height}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).tobytes())


def read_pfm(path) -> DepthMap:
    """Read a grayscale PFM; non-positive values map to invalid pixels."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        nl1 = raw.index(b"\n")
        nl2 = raw.index(b"\n", nl1 + 1)
        nl3 = raw.index(b"\n", nl2 + 1)
    except ValueError as exc:
        raise ParseError(f"{path}: truncated PFM header") from exc
    header = raw[:nl1].strip()
    if header != b"Pf":
        raise ParseError(f"{path}: expected grayscale PFM magic 'Pf', got {header!r}")
    try:
        w, h = (int(v) for v in raw[nl1 + 1 : nl2].split())
        scale = float(raw[nl2 + 1 : nl3])
    except ValueError as exc:
        raise ParseError(f"{path}: malformed PFM dimensions/scale") from exc
    payload = raw[nl3 + 1 :]
    expected = w * h * 4
    if len(payload) < expected:
        raise ParseError(
            f"{path}: truncated PFM payload at byte {nl3 + 1 + len(payload)}: "
            f"expected {expected} data bytes, got {len(payload)}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload[:expected], dtype=dtype).reshape(h, w)
    data = np.flipud(data).astype(np.float64)
    valid = data > 0
    return DepthMap(np.where(valid, data, 0.0), valid)


# ---------------------------------------------------------------------------
# Middlebury .flo

def write_flo(path, flow: FlowField2D) -> None:
    """Interleaved float32 (u, v); invalid pixels carry the 1e10 sentinel."""
    path = Path(path)
    h, w = flow.u.shape
    uv = np.empty((h, w, 2), dtype="<f4")
    uv[..., 0] = np.where(flow.valid, flow.u, FLO_INVALID)
    uv[..., 1] = np.where(flow.valid, flow.v, FLO_INVALID)
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(uv.tobytes())


def read_flo(path) -> FlowField2D:
    """Read a .flo file; magnitudes above 1e9 map to invalid pixels."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise ParseError(f"{path}: too short for a .flo header ({len(raw)} bytes)")
    (magic,) = struct.unpack("<f", raw[:4])
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise ParseError(f"{path}: wrong .flo magic {magic!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    expected = w * h * 2 * 4
    if len(raw) - 12 < expected:
        raise ParseError(
            f"{path}: truncated .flo payload: expected {expected} bytes, "
            f"got {len(raw) - 12}"
        )
    uv = np.frombuffer(raw[12 : 12 + expected], dtype="<f4").reshape(h, w, 2)
    u = uv[..., 0].astype(np.float64)
    v = uv[..., 1].astype(np.float64)
    valid = (np.abs(u) < 1e9) & (np.abs(v) < 1e9) & np.isfinite(u) & np.isfinite(v)
    return FlowField2D(np.where(valid, u, 0.0), np.where(valid, v, 0.0), valid)


# ---------------------------------------------------------------------------
# SF3D: per-pixel 3-D displacements for the g steps of one interval

def write_sf3d(path, frames: list[np.ndarray]) -> None:
    """Frames are (H, W, 3) float arrays; NaN rows mark invalid pixels."""
    path = Path(path)
    if not frames:
        raise InputError("SF3D needs at least one displacement frame")
    h, w, _ = frames[0].shape
    with open(path, "wb") as f:
        f.write(SF3D_MAGIC)
        f.write(struct.pack("<III", w, h, len(frames)))
        for fr in frames:
            if fr.shape != (h, w, 3):
                raise InputError("all SF3D frames must share one shape")
            f.write(np.ascontiguousarray(fr, dtype="<f4").tobytes())


def read_sf3d(path) -> list[np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != SF3D_MAGIC:
        raise ParseError(f"{path}: missing SF3D magic")
    w, h, g = struct.unpack("<III", raw[4:16])
    expected = g * h * w * 3 * 4
    if len(raw) - 16 < expected:
        raise ParseError(
            f"{path}: truncated SF3D payload: expected {expected} bytes, got {len(raw) - 16}"
        )
    data = np.frombuffer(raw[16 : 16 + expected], dtype="<f4")
    return [
        data[i * h * w * 3 : (i + 1) * h * w * 3].reshape(h, w, 3).astype(np.float32)
        for i in range(g)
    ]


# ---------------------------------------------------------------------------
# P6 PPM color images (+ optional PNG through Pillow)

def write_ppm(path, image: ColorImage) -> None:
    path = Path(path)
    data = np.clip(np.round(image.rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{image.width} {image.height}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> ColorImage:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(b"P6"):
        raise ParseError(f"{path}: not a binary PPM (P6)")
    # header: magic, width, height, maxval, single whitespace, then data
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    try:
        w, h, maxval = (int(v) for v in fields)
    except ValueError as exc:
        raise ParseError(f"{path}: malformed PPM header") from exc
    pos += 1
    expected = w * h * 3
    payload = raw[pos : pos + expected]
    if len(payload) < expected:
        raise ParseError(
            f"{path}: truncated PPM payload: expected {expected} bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return ColorImage(data.astype(np.float64) / float(maxval))


def read_image(path) -> ColorImage:
    """Read PPM natively or PNG via Pillow when available."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as exc:
        raise InputError(
            f"{path}: only PPM is supported without Pillow installed"
        ) from exc
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return ColorImage(arr)


def read_dpt(path) -> DepthMap:
    """Sintel-style .dpt depth: float magic, int32 w/h, float32 rows."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise ParseError(f"{path}: too short for a .dpt header")
    (magic,) = struct.unpack("<f", raw[:4])
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise ParseError(f"{path}: wrong .dpt magic {magic!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    expected = w * h * 4
    if len(raw) - 12 < expected:
        raise ParseError(f"{path}: truncated .dpt payload")
    data = np.frombuffer(raw[12 : 12 + expected], dtype="<f4").reshape(h, w)
    data = data.astype(np.float64)
    valid = np.isfinite(data) & (data > 0)
    return DepthMap(np.where(valid, data, 0.0), valid)


# ---------------------------------------------------------------------------
# Metrics

@dataclass
class MetricsReport:
    """Flow/depth error statistics over jointly valid pixels."""

    epe: float | None = None
    aae: float | None = None
    rmse_flow: float | None = None
    rmse_depth: float | None = None
    valid_pixel_count: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {k: v for k, v in vars(self).items() if v is not None}, sort_keys=True
        )


def _joint_flow_mask(est: FlowField2D, gt: FlowField2D) -> np.ndarray:
    if est.u.shape != gt.u.shape:
        raise InputError("flow fields have different sizes")
    mask = est.valid & gt.valid
    if not mask.any():
        raise InputError("metric undefined: no jointly valid pixels")
    return mask


def metric_epe(est: FlowField2D, gt: FlowField2D) -> float:
    """Mean endpoint error in pixels."""
    m = _joint_flow_mask(est, gt)
    du = est.u[m] - gt.u[m]
    dv = est.v[m] - gt.v[m]
    return float(np.mean(np.sqrt(du * du + dv * dv)))


def metric_aae(est: FlowField2D, gt: FlowField2D) -> float:
    """Mean angle in degrees between space-time vectors (u, v, 1)."""
    m = _joint_flow_mask(est, gt)
    a = np.stack([est.u[m], est.v[m], np.ones(m.sum())], axis=1)
    b = np.stack([gt.u[m], gt.v[m], np.ones(m.sum())], axis=1)
    dot = np.einsum("ni,ni->n", a, b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    cos = np.clip(dot / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(cos))))


def metric_rmse_flow(est: FlowField2D, gt: FlowField2D) -> float:
    """Root-mean-square endpoint error in pixels."""
    m = _joint_flow_mask(est, gt)
    du = est.u[m] - gt.u[m]
    dv = est.v[m] - gt.v[m]
    return float(np.sqrt(np.mean(du * du + dv * dv)))


def metric_rmse_depth(est: DepthMap, gt: DepthMap) -> float:
    """RMSE over jointly valid pixels, in the maps' native depth units."""
    if est.depth.shape != gt.depth.shape:
        raise InputError("depth maps have different sizes")
    m = est.valid & gt.valid
    if not m.any():
        raise InputError("metric undefined: no jointly valid pixels")
    d = est.depth[m] - gt.depth[m]
    return float(np.sqrt(np.mean(d * d)))


def flow_report(est: FlowField2D, gt: FlowField2D) -> MetricsReport:
    m = _joint_flow_mask(est, gt)
    return MetricsReport(
        epe=metric_epe(est, gt),
        aae=metric_aae(est, gt),
        rmse_flow=metric_rmse_flow(est, gt),
        valid_pixel_count=int(m.sum()),
    )


def depth_report(est: DepthMap, gt: DepthMap) -> MetricsReport:
    m = est.valid & gt.valid
    return MetricsReport(
        rmse_depth=metric_rmse_depth(est, gt),
        valid_pixel_count=int(m.sum()),
    )


# ---------------------------------------------------------------------------
# Configuration

@dataclass
class AppConfig:
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    solver: SolverParams = field(default_factory=SolverParams)
    flow: FlowParams = field(default_factory=FlowParams)
    pipeline: PipelineParams = field(default_factory=PipelineParams)
    rig: CameraRig | None = None


_WEIGHT_KEYS = {
    "lambda_opti", "lambda_point", "lambda_plane", "lambda_proj",
    "lambda_iso", "lambda_reg", "lambda_short", "epsilon", "d_a",
    "sigma_c", "sigma_d", "sigma_t", "sigma_1", "sigma_2",
}
_SOLVER_KEYS = {
    "levels", "gn_iters_per_level", "pcg_iters", "icp_rounds",
    "damping", "energy_tol",
}
_FLOW_KEYS = {
    "flow_levels": "pyramid_levels",
    "flow_warps_per_level": "warps_per_level",
    "flow_alpha": "alpha",
    "flow_median_radius": "median_radius",
}
_PIPELINE_KEYS = {
    "correspondence_gate", "normals_k", "bilateral_radius",
    "bilateral_sigma_space", "bilateral_sigma_color", "depth_scale",
    "crop", "threads",
}


def _parse_intrinsics(obj: dict, where: str) -> CameraIntrinsics:
    required = {"fx", "fy", "cx", "cy", "width", "height"}
    unknown = set(obj) - required
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {where}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"missing key {sorted(missing)[0]!r} in {where}")
    return CameraIntrinsics(
        fx=float(obj["fx"]), fy=float(obj["fy"]),
        cx=float(obj["cx"]), cy=float(obj["cy"]),
        width=int(obj["width"]), height=int(obj["height"]),
    )


def parse_calibration(obj: dict) -> CameraRig:
    required = {"depth_intrinsics", "color_intrinsics", "depth_to_color"}
    unknown = set(obj) - required
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in calibration")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"missing key {sorted(missing)[0]!r} in calibration")
    tr = obj["depth_to_color"]
    unknown = set(tr) - {"rotation", "translation"}
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in depth_to_color")
    rot = np.asarray(tr["rotation"], dtype=float).reshape(3, 3)
    t = np.asarray(tr["translation"], dtype=float).reshape(3)
    return CameraRig(
        depth_intrinsics=_parse_intrinsics(obj["depth_intrinsics"], "depth_intrinsics"),
        color_intrinsics=_parse_intrinsics(obj["color_intrinsics"], "color_intrinsics"),
        depth_to_color=RigidTransform(rot, t),
    )


def rig_to_json(rig: CameraRig) -> dict:
    def intr(i: CameraIntrinsics) -> dict:
        return {
            "fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy,
            "width": i.width, "height": i.height,
        }

    return {
        "depth_intrinsics": intr(rig.depth_intrinsics),
        "color_intrinsics": intr(rig.color_intrinsics),
        "depth_to_color": {
            "rotation": rig.depth_to_color.rotation.reshape(-1).tolist(),
            "translation": rig.depth_to_color.translation.tolist(),
        },
    }


def config_from_dict(obj: dict) -> AppConfig:
    """Build a full configuration; unknown keys are a hard error."""
    if not isinstance(obj, dict):
        raise ConfigError("configuration root must be a JSON object")
    cfg = AppConfig()
    wkw, skw, fkw, pkw = {}, {}, {}, {}
    for key, value in obj.items():
        if key in _WEIGHT_KEYS:
            _expect_number(key, value)
            wkw[key] = float(value)
        elif key in _SOLVER_KEYS:
            _expect_number(key, value)
            skw[key] = type(getattr(SolverParams(), key))(value)
        elif key in _FLOW_KEYS:
            _expect_number(key, value)
            fkw[_FLOW_KEYS[key]] = type(getattr(FlowParams(), _FLOW_KEYS[key]))(value)
        elif key in _PIPELINE_KEYS:
            if key == "crop":
                if value is not None:
                    if not (isinstance(value, (list, tuple)) and len(value) == 4):
                        raise ConfigError("config key 'crop' must be [x, y, width, height]")
                    value = tuple(int(v) for v in value)
                pkw[key] = value
            else:
                _expect_number(key, value)
                pkw[key] = type(getattr(PipelineParams(), key))(value)
        elif key == "calibration":
            cfg.rig = parse_calibration(value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg.weights = EnergyWeights(**wkw)
    cfg.solver = SolverParams(**skw)
    cfg.flow = FlowParams(**fkw)
    cfg.pipeline = PipelineParams(**pkw)
    return cfg


def _expect_number(key: str, value) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config key {key!r} must be a number, got {value!r}")


def load_config(path) -> AppConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise InputError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(obj)


# ---------------------------------------------------------------------------
# Dataset layout

@dataclass
class DatasetLayout:
    """On-disk capture: color at every tick, depth every g-th tick."""

    root: Path
    color_files: list
    depth_files: dict            # tick -> path
    g: int
    rig: CameraRig

    @property
    def n_frames(self) -> int:
        return len(self.color_files)


def scan_dataset(root) -> DatasetLayout:
    root = Path(root)
    color_dir = root / "color"
    depth_dir = root / "depth"
    calib = root / "calib.json"
    if not color_dir.is_dir():
        raise InputError(f"missing color directory: {color_dir}")
    if not depth_dir.is_dir():
        raise InputError(f"missing depth directory: {depth_dir}")
    if not calib.is_file():
        raise InputError(f"missing calibration file: {calib}")
    try:
        rig = parse_calibration(json.loads(calib.read_text()))
    except json.JSONDecodeError as exc:
        raise InputError(f"corrupt calibration file {calib}: {exc}") from exc
    colors = sorted(color_dir.glob("frame_*.*"))
    if not colors:
        raise InputError(f"no color frames found under {color_dir}")
    indices = [int(p.stem.split("_")[1]) for p in colors]
    if indices != list(range(len(indices))):
        raise InputError(f"color frames under {color_dir} are not contiguous from 0")
    depth_files = {}
    for p in sorted(depth_dir.glob("frame_*.pfm")):
        depth_files[int(p.stem.split("_")[1])] = p
    if len(depth_files) < 2:
        raise InputError(f"need at least two depth frames under {depth_dir}")
    ticks = sorted(depth_files)
    if ticks[0] != 0:
        raise InputError("depth frames must start at tick 0")
    g = ticks[1] - ticks[0]
    if g < 1 or any(t != i * g for i, t in enumerate(ticks)):
        raise InputError("depth frames are not evenly spaced")
    if ticks[-1] != len(colors) - 1:
        raise InputError(
            f"last depth tick {ticks[-1]} does not match last color frame "
            f"{len(colors) - 1}"
        )
    return DatasetLayout(
        root=root, color_files=colors, depth_files=depth_files, g=g, rig=rig
    )


def write_dataset(dataset, root) -> None:
    """Write a synthetic capture in the standard layout plus ground truth."""
    root = Path(root)
    (root / "color").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    (root / "gt_depth").mkdir(exist_ok=True)
    (root / "gt_flow").mkdir(exist_ok=True)
    (root / "gt_sceneflow").mkdir(exist_ok=True)
    for t, img in enumerate(dataset.colors):
        write_ppm(root / "color" / f"frame_{t:06d}.ppm", img)
    for t, dm in enumerate(dataset.gt_depths):
        write_pfm(root / "gt_depth" / f"frame_{t:06d}.pfm", dm)
        if t % dataset.g == 0:
            write_pfm(root / "depth" / f"frame_{t:06d}.pfm", dm)
    for t, fl in enumerate(dataset.gt_flows):
        write_flo(root / "gt_flow" / f"frame_{t:06d}.flo", fl)
    for t, sf in enumerate(dataset.gt_sceneflow):
        frame = sf.astype(np.float32).copy()
        frame[~dataset.gt_depths[t].valid] = np.nan
        write_sf3d(root / "gt_sceneflow" / f"frame_{t:06d}.sf3d", [frame])
    (root / "calib.json").write_text(json.dumps(rig_to_json(dataset.rig), indent=2))
