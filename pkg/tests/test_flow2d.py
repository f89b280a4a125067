"""Optical flow estimation, weighted median, divergence, accumulation."""

import numpy as np
import pytest

from depthweave.core import ColorImage, FlowField2D, InputError
from depthweave.evalio import metric_epe
from depthweave.flow2d import (
    FlowParams,
    accumulate_flow,
    bilinear_sample,
    divergence,
    estimate_flow,
    weighted_median_filter,
)
from depthweave.synth import value_noise


def _textured(width, height, seed=0, cell=8.0):
    xs, ys = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    tex = value_noise(xs, ys, seed, base_cell=cell * 4)
    return ColorImage(np.repeat((0.1 + 0.8 * tex)[..., None], 3, axis=2))


def _shifted(img: ColorImage, dx: int) -> ColorImage:
    return ColorImage(np.roll(img.rgb, dx, axis=1))


def test_static_scene_flow_is_zero():
    img = _textured(48, 40)
    flow = estimate_flow(img, img, FlowParams())
    epe = metric_epe(flow, FlowField2D.zeros(40, 48))
    assert epe < 0.05


def test_integer_shift_recovered():
    img = _textured(64, 48, seed=3)
    flow = estimate_flow(img, _shifted(img, 2), FlowParams())
    inner = flow.u[8:-8, 8:-8]
    assert 1.8 <= inner.mean() <= 2.2
    assert np.abs(flow.v[8:-8, 8:-8]).mean() < 0.2


def test_flat_images_give_near_zero_flow():
    img = ColorImage(np.full((32, 32, 3), 0.5))
    flow = estimate_flow(img, img, FlowParams())
    mag = np.hypot(flow.u, flow.v)
    assert mag.max() < 0.1


def test_flow_size_mismatch_rejected():
    with pytest.raises(InputError):
        estimate_flow(_textured(16, 16), _textured(20, 16))


def test_weighted_median_constant_and_outlier():
    guide = _textured(24, 20, seed=5)
    const = FlowField2D(np.full((20, 24), 1.5), np.full((20, 24), -0.5))
    out = weighted_median_filter(const, guide, radius=2)
    assert np.array_equal(out.u, const.u) and np.array_equal(out.v, const.v)
    spiky = const.copy()
    spiky.u[10, 12] = 40.0
    cleaned = weighted_median_filter(spiky, guide, radius=2)
    assert cleaned.u[10, 12] == 1.5


def test_weighted_median_preserves_color_edge():
    h, w = 20, 24
    rgb = np.zeros((h, w, 3))
    rgb[:, : w // 2] = [0.9, 0.1, 0.1]
    rgb[:, w // 2 :] = [0.1, 0.1, 0.9]
    guide = ColorImage(rgb)
    u = np.where(np.arange(w)[None, :] < w // 2, 3.0, -3.0).repeat(h, 0).reshape(h, w)
    flow = FlowField2D(u.astype(float), np.zeros((h, w)))
    out = weighted_median_filter(flow, guide, radius=2)
    left = out.u[:, : w // 2]
    right = out.u[:, w // 2 :]
    assert np.abs(left - 3.0).max() < 1e-6
    assert np.abs(right + 3.0).max() < 1e-6


def test_weighted_median_idempotent_on_piecewise_constant():
    h, w = 16, 16
    rgb = np.zeros((h, w, 3))
    rgb[:, : w // 2] = 0.8
    guide = ColorImage(rgb)
    u = np.where(np.arange(w)[None, :] < w // 2, 2.0, 5.0) * np.ones((h, w))
    flow = FlowField2D(u, -u)
    once = weighted_median_filter(flow, guide, radius=2)
    twice = weighted_median_filter(once, guide, radius=2)
    assert np.array_equal(once.u, twice.u)
    assert np.array_equal(once.v, twice.v)


def test_divergence_constant_zero_and_expansion():
    const = FlowField2D(np.full((8, 9), 2.0), np.full((8, 9), -1.0))
    assert np.abs(divergence(const)).max() == 0.0
    xs, ys = np.meshgrid(np.arange(9, dtype=float), np.arange(8, dtype=float))
    expansion = FlowField2D(xs, ys)
    div = divergence(expansion)
    assert np.allclose(div, 2.0)


def test_divergence_matches_stencil_oracle():
    rng = np.random.default_rng(8)
    u = rng.random((10, 12))
    v = rng.random((10, 12))
    div = divergence(FlowField2D(u, v))
    h, w = u.shape
    # independent loop with the same stencil: central inside, one-sided edges
    expected = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if 0 < x < w - 1:
                dudx = (u[y, x + 1] - u[y, x - 1]) / 2
            elif x == 0:
                dudx = u[y, 1] - u[y, 0]
            else:
                dudx = u[y, w - 1] - u[y, w - 2]
            if 0 < y < h - 1:
                dvdy = (v[y + 1, x] - v[y - 1, x]) / 2
            elif y == 0:
                dvdy = v[1, x] - v[0, x]
            else:
                dvdy = v[h - 1, x] - v[h - 2, x]
            expected[y, x] = dudx + dvdy
    assert np.allclose(div, expected)


def test_accumulate_zero_and_translation():
    z = FlowField2D.zeros(10, 12)
    acc = accumulate_flow([z, z])
    assert np.abs(acc.u).max() == 0 and np.abs(acc.v).max() == 0
    one = FlowField2D(np.full((10, 12), 1.0), np.zeros((10, 12)))
    two = FlowField2D(np.full((10, 12), 2.0), np.zeros((10, 12)))
    acc = accumulate_flow([one, two])
    assert np.allclose(acc.u[acc.valid], 3.0)
    with pytest.raises(InputError):
        accumulate_flow([])


def test_accumulate_matches_analytic_rotation_composition():
    h, w = 40, 40
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    cx, cy = (w - 1) / 2, (h - 1) / 2

    def rot_flow(theta):
        c, s = np.cos(theta), np.sin(theta)
        nx = cx + c * (xs - cx) - s * (ys - cy)
        ny = cy + s * (xs - cx) + c * (ys - cy)
        return FlowField2D(nx - xs, ny - ys)

    th = 0.03
    acc = accumulate_flow([rot_flow(th), rot_flow(th)])
    direct = rot_flow(2 * th)
    m = acc.valid
    assert np.abs(acc.u[m] - direct.u[m]).max() < 0.05
    assert np.abs(acc.v[m] - direct.v[m]).max() < 0.05


def test_accumulate_is_associative_for_constant_flows():
    def const(uv):
        return FlowField2D(np.full((6, 6), uv[0]), np.full((6, 6), uv[1]))

    a, b, c = const((1, 0)), const((0.5, 0.25)), const((-0.25, 0.5))
    left = accumulate_flow([accumulate_flow([a, b]), c])
    right = accumulate_flow([a, accumulate_flow([b, c])])
    m = left.valid & right.valid
    assert np.array_equal(left.u[m], right.u[m])
    assert np.array_equal(left.v[m], right.v[m])


def test_bilinear_sample_bounds():
    img = np.arange(12.0).reshape(3, 4)
    val, inb = bilinear_sample(img, np.array([0.5, -1.0]), np.array([0.5, 0.0]))
    assert inb.tolist() == [True, False]
    assert np.isclose(val[0], (0 + 1 + 4 + 5) / 4)
