"""Pyramidal variational optical flow plus flow-field utilities.

The estimator is a coarse-to-fine Horn-Schunck scheme with a robustly
weighted data term and incremental warping; it provides the motion
initialization and drives topology detection. Also here: edge-aware
weighted median filtering, flow divergence and flow accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve, gaussian_filter

from .core import ColorImage, FlowField2D, InputError

# Classic weighted 8-neighbor average used by the smoothness update.
_AVG_KERNEL = np.array([[1.0, 2.0, 1.0], [2.0, 0.0, 2.0], [1.0, 2.0, 1.0]]) / 12.0

# Gray-level scale at which the data term switches from quadratic to
# absolute-value behavior (intensities are handled on a 0-255 scale).
_DATA_EPS = 1.0


@dataclass
class FlowParams:
    """Tuning knobs of the flow estimator."""

    pyramid_levels: int = 4
    warps_per_level: int = 3
    alpha: float = 20.0
    median_radius: int = 2

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise InputError("pyramid_levels must be >= 1")
        if self.median_radius < 1:
            raise InputError("median_radius must be >= 1")


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample ``img`` at continuous (x, y) with edge clamping.

    Returns (values, in_bounds); in_bounds is True where the sample
    point lies inside the image rectangle [0, W-1] x [0, H-1].
    """
    h, w = img.shape[:2]
    in_bounds = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(h - 2, 0))
    fx = xc - x0
    fy = yc - y0
    i00 = img[y0, x0]
    i01 = img[y0, np.minimum(x0 + 1, w - 1)]
    i10 = img[np.minimum(y0 + 1, h - 1), x0]
    i11 = img[np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)]
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    val = (1 - fy) * ((1 - fx) * i00 + fx * i01) + fy * ((1 - fx) * i10 + fx * i11)
    return val, in_bounds


def bilinear_sample_with_grad(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample with the analytic gradient of the bilinear interpolant.

    The returned (gx, gy) are exact derivatives of the sampled value
    with respect to x and y inside the image; outside, the clamped
    interpolant is flat and the gradient is zero.
    """
    h, w = img.shape
    in_bounds = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(h - 2, 0))
    fx = xc - x0
    fy = yc - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    val = (1 - fy) * ((1 - fx) * i00 + fx * i01) + fy * ((1 - fx) * i10 + fx * i11)
    gx = ((1 - fy) * (i01 - i00) + fy * (i11 - i10)) * in_bounds
    gy = ((1 - fx) * (i10 - i00) + fx * (i11 - i01)) * in_bounds
    return val, gx, gy, in_bounds


def _catmull_rom_weights(f: np.ndarray):
    """4-tap Catmull-Rom weights and their derivatives for fraction f."""
    f2 = f * f
    f3 = f2 * f
    w0 = -0.5 * f3 + f2 - 0.5 * f
    w1 = 1.5 * f3 - 2.5 * f2 + 1.0
    w2 = -1.5 * f3 + 2.0 * f2 + 0.5 * f
    w3 = 0.5 * f3 - 0.5 * f2
    d0 = -1.5 * f2 + 2.0 * f - 0.5
    d1 = 4.5 * f2 - 5.0 * f
    d2 = -4.5 * f2 + 4.0 * f + 0.5
    d3 = 1.5 * f2 - f
    return (w0, w1, w2, w3), (d0, d1, d2, d3)


def bicubic_sample_with_grad(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Catmull-Rom sampling with the interpolant's analytic gradient.

    C1-smooth inside the image, so the returned (gx, gy) are the true
    derivatives of the sampled value; samples beyond the border clamp
    to edge pixels with zero gradient outside.
    """
    h, w = img.shape
    in_bounds = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x0 = np.minimum(x0, w - 1)
    y0 = np.minimum(y0, h - 1)
    fx = xc - x0
    fy = yc - y0
    (wx, dwx) = _catmull_rom_weights(fx)
    (wy, dwy) = _catmull_rom_weights(fy)
    cols = [np.clip(x0 + k, 0, w - 1) for k in (-1, 0, 1, 2)]
    rows = [np.clip(y0 + k, 0, h - 1) for k in (-1, 0, 1, 2)]
    val = np.zeros_like(fx)
    gx = np.zeros_like(fx)
    gy = np.zeros_like(fx)
    for j in range(4):
        row_val = np.zeros_like(fx)
        row_dx = np.zeros_like(fx)
        for i in range(4):
            pix = img[rows[j], cols[i]]
            row_val += wx[i] * pix
            row_dx += dwx[i] * pix
        val += wy[j] * row_val
        gx += wy[j] * row_dx
        gy += dwy[j] * row_val
    gx *= in_bounds
    gy *= in_bounds
    return val, gx, gy, in_bounds


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a 2-D array with bilinear interpolation (pixel centers aligned)."""
    h, w = arr.shape
    ys = (np.arange(height) + 0.5) * (h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (w / width) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    val, _ = bilinear_sample(arr, gx, gy)
    return val


def downsample2(arr: np.ndarray) -> np.ndarray:
    """Halve each dimension: 5x5 Gaussian prefilter then every 2nd pixel."""
    return gaussian_filter(arr, sigma=1.0, truncate=2.0, mode="nearest")[::2, ::2]


def _image_pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        if min(pyr[-1].shape) < 16:
            break
        pyr.append(downsample2(pyr[-1]))
    return pyr


def _grad(img: np.ndarray):
    gy, gx = np.gradient(img)
    return gx, gy


def estimate_flow(
    I_a: ColorImage, I_b: ColorImage, params: FlowParams | None = None
) -> FlowField2D:
    """Dense 2-D motion from image a to image b.

    Minimizes a robust brightness-constancy data term plus quadratic
    smoothness, coarse-to-fine with incremental warping; the result is
    cleaned by an edge-aware weighted median filter. Pixels whose warp
    target leaves the image are marked invalid.
    """
    if (I_a.width, I_a.height) != (I_b.width, I_b.height):
        raise InputError("flow input images must have equal size")
    params = params or FlowParams()
    a_full = I_a.intensity * 255.0
    b_full = I_b.intensity * 255.0
    pyr_a = _image_pyramid(a_full, params.pyramid_levels)
    pyr_b = _image_pyramid(b_full, params.pyramid_levels)

    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for level in range(len(pyr_a) - 1, -1, -1):
        a, b = pyr_a[level], pyr_b[level]
        if u.shape != a.shape:
            u = resize_bilinear(u, *a.shape) * 2.0
            v = resize_bilinear(v, *a.shape) * 2.0
        u, v = _solve_level(a, b, u, v, params)
        if level > 0:
            u, v = _median2(u, v, radius=1)
    h, w = a_full.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    tx, ty = gx + u, gy + v
    valid = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    flow = FlowField2D(u, v, valid)
    return weighted_median_filter(flow, I_a, params.median_radius)


def _solve_level(a, b, u, v, params: FlowParams, sweeps: int = 30):
    """Incremental robust Horn-Schunck at one pyramid level."""
    h, w = a.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    bx_img, by_img = _grad(b)
    ax, ay = _grad(a)
    alpha = params.alpha
    for _ in range(params.warps_per_level):
        u0, v0 = u.copy(), v.copy()
        bw, inb = bilinear_sample(b, gx + u0, gy + v0)
        bx, _ = bilinear_sample(bx_img, gx + u0, gy + v0)
        by, _ = bilinear_sample(by_img, gx + u0, gy + v0)
        Ix = 0.5 * (ax + bx) * inb
        Iy = 0.5 * (ay + by) * inb
        It = (bw - a) * inb
        # constant part of the linearized residual, so that the update
        # below can work with total flow instead of increments
        c = It - Ix * u0 - Iy * v0
        for sweep in range(sweeps):
            r = c + Ix * u + Iy * v
            wdat = _DATA_EPS / np.sqrt(r * r + _DATA_EPS * _DATA_EPS)
            ubar = convolve(u, _AVG_KERNEL, mode="nearest")
            vbar = convolve(v, _AVG_KERNEL, mode="nearest")
            t = (c + Ix * ubar + Iy * vbar) * wdat
            denom = alpha + wdat * (Ix * Ix + Iy * Iy)
            u = ubar - Ix * t / denom
            v = vbar - Iy * t / denom
    return u, v


def _median2(u, v, radius):
    """Plain (unweighted) median on both flow components."""
    guide = ColorImage(np.zeros((u.shape[0], u.shape[1], 3)))
    f = weighted_median_filter(FlowField2D(u, v), guide, radius)
    return f.u, f.v


def weighted_median_filter(
    flow: FlowField2D, guide: ColorImage, radius: int, sigma_color: float = 1.0
) -> FlowField2D:
    """Edge-aware median of u and v over a (2r+1)^2 window.

    Neighbor weights are exp(-||rgb_i - rgb_j||^2 / sigma_color^2) from
    the guide image; invalid and out-of-image neighbors get weight 0.
    Pixels with no weighted support keep their values; validity is
    unchanged.
    """
    if (flow.width, flow.height) != (guide.width, guide.height):
        raise InputError("flow and guide image sizes differ")
    h, w = flow.u.shape
    offsets = [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
    ]
    k = len(offsets)
    vals_u = np.zeros((k, h, w))
    vals_v = np.zeros((k, h, w))
    wts = np.zeros((k, h, w))
    center_rgb = guide.rgb
    for n, (dy, dx) in enumerate(offsets):
        src_y = slice(max(0, dy), h + min(0, dy))
        src_x = slice(max(0, dx), w + min(0, dx))
        dst_y = slice(max(0, -dy), h + min(0, -dy))
        dst_x = slice(max(0, -dx), w + min(0, -dx))
        vals_u[n][dst_y, dst_x] = flow.u[src_y, src_x]
        vals_v[n][dst_y, dst_x] = flow.v[src_y, src_x]
        diff = center_rgb[dst_y, dst_x] - guide.rgb[src_y, src_x]
        wgt = np.exp(-np.sum(diff * diff, axis=2) / (sigma_color * sigma_color))
        wts[n][dst_y, dst_x] = wgt * flow.valid[src_y, src_x]
    u_out = _weighted_median(vals_u, wts, flow.u)
    v_out = _weighted_median(vals_v, wts, flow.v)
    return FlowField2D(u_out, v_out, flow.valid.copy())


def _weighted_median(vals: np.ndarray, wts: np.ndarray, fallback: np.ndarray):
    """Per-pixel weighted median along axis 0, fallback where weightless."""
    order = np.argsort(vals, axis=0, kind="stable")
    sv = np.take_along_axis(vals, order, axis=0)
    sw = np.take_along_axis(wts, order, axis=0)
    cum = np.cumsum(sw, axis=0)
    total = cum[-1]
    half = 0.5 * total
    idx = np.argmax(cum >= half[None, :, :], axis=0)
    out = np.take_along_axis(sv, idx[None, :, :], axis=0)[0]
    return np.where(total > 0, out, fallback)


def divergence(flow: FlowField2D) -> np.ndarray:
    """du/dx + dv/dy, central differences inside, one-sided at borders."""
    if flow.width < 2 or flow.height < 2:
        raise InputError("divergence needs at least a 2x2 field")
    return np.gradient(flow.u, axis=1) + np.gradient(flow.v, axis=0)


def accumulate_flow(flows: list[FlowField2D]) -> FlowField2D:
    """Compose consecutive flows by backward warping.

    The running total at pixel x grows by the next flow sampled at
    x + total(x) (bilinear); samples leaving the image invalidate the
    pixel.
    """
    if not flows:
        raise InputError("cannot accumulate an empty flow list")
    h, w = flows[0].u.shape
    for f in flows:
        if f.u.shape != (h, w):
            raise InputError("accumulated flows must share one size")
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    au = flows[0].u.copy()
    av = flows[0].v.copy()
    valid = flows[0].valid.copy()
    for f in flows[1:]:
        sx, sy = gx + au, gy + av
        du, inb = bilinear_sample(f.u, sx, sy)
        dv, _ = bilinear_sample(f.v, sx, sy)
        au += du
        av += dv
        valid &= inb
    return FlowField2D(au, av, valid)
