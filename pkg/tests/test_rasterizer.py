import math

import numpy as np
import pytest
import torch

from endowave.camera import Camera
from endowave.gaussian4d import ConditionalGaussian3D, Primitive4D, condition_at_time, teash_eval
from endowave.rasterizer import (
    ALPHA_MIN, DILATION, Splat2D, project_gaussian, project_gaussians, rasterize, render,
    render_reference,
)
from endowave.flowsup import projected_flow

from conftest import random_scene, small_camera, xt_plane_quats

D = torch.float64


def grid_camera(size=32, focal=32.0):
    # Principal point on a pixel centre so on-axis primitives land exactly on a pixel.
    return Camera(focal, focal, size // 2, size // 2, size, size)


def cond(mean3, cov3, weight=1.0):
    return ConditionalGaussian3D(torch.as_tensor(np.asarray([mean3]), dtype=D),
                                 torch.as_tensor(np.asarray([cov3]), dtype=D),
                                 torch.tensor([weight], dtype=D), 0)


def test_axis_point_projects_to_principal_point(cam32):
    s = project_gaussian(cond([0.0, 0.0, 3.0], np.eye(3) * 0.01), 0.8, [1, 0, 0], cam32)
    np.testing.assert_allclose(s.mean2[0].numpy(), [cam32.cx, cam32.cy], atol=1e-12)
    assert float(s.depth[0]) == 3.0


@pytest.mark.parametrize("s,z", [(0.01, 2.0), (0.02, 5.0), (0.005, 1.0)])
def test_isotropic_footprint_against_numeric_jacobian(cam32, s, z):
    mean = np.array([0.0, 0.0, z])
    splat = project_gaussian(cond(mean, np.eye(3) * s * s), 0.8, [1, 1, 1], cam32)

    def proj(x):
        uv, _ = cam32.project(torch.as_tensor(x, dtype=D).reshape(1, 3))
        return uv[0].numpy()

    h = 1e-6
    J = np.stack([(proj(mean + h * e) - proj(mean - h * e)) / (2 * h) for e in np.eye(3)], 1)
    expected = J @ (np.eye(3) * s * s) @ J.T + DILATION * np.eye(2)
    np.testing.assert_allclose(splat.cov2[0].numpy(), expected, rtol=1e-2, atol=1e-9)
    assert float(splat.cov2[0, 0, 0]) == pytest.approx((cam32.fx * s / z) ** 2 + DILATION, rel=1e-2)


def test_behind_camera_is_culled(cam32):
    assert project_gaussian(cond([0.0, 0.0, -2.0], np.eye(3) * 0.01), 0.9, [1, 1, 1], cam32) is None
    assert project_gaussian(cond([0.0, 0.0, 0.01], np.eye(3) * 0.01), 0.9, [1, 1, 1], cam32) is None


def test_far_off_screen_is_culled(cam32):
    assert project_gaussian(cond([50.0, 0.0, 2.0], np.eye(3) * 1e-4), 0.9, [1, 1, 1], cam32) is None


def test_dilation_floor_on_footprint(rng, cam32):
    scene = random_scene(rng, 40)
    g = condition_at_time(scene, 0.5)
    _, cov2, _, front = project_gaussians(g.mean3, g.cov3, cam32)
    ev = torch.linalg.eigvalsh(cov2[front])
    assert bool((ev >= DILATION - 1e-12).all())


def single_on_axis(opacity=0.7, depth=3.0):
    return Primitive4D.create([[0.0, 0.0, depth]], 0.5, np.log([0.2, 0.2, 0.2, 0.5]),
                              opacity=opacity, sh_degree=1, n_freq=1,
                              sh_coeffs=np.random.default_rng(0).normal(scale=0.3, size=(1, 2, 4, 3)))


def test_single_primitive_centre_pixel():
    cam = grid_camera()
    p = single_on_axis()
    out = render(p, cam, 0.5)
    c = cam.height // 2
    assert float(out.alpha[c, c]) == pytest.approx(0.7, abs=1e-6)
    color = teash_eval(p, torch.tensor([[0.0, 0.0, 1.0]], dtype=D), 0.5)[0]
    np.testing.assert_allclose(out.rgb[c, c].numpy(), (0.7 * color).numpy(), atol=1e-6)
    assert float(out.depth[c, c]) == pytest.approx(0.7 * 3.0, abs=1e-6)


def test_uncovered_pixels_are_black():
    cam = grid_camera()
    p = Primitive4D.create([[0.0, 0.0, 3.0]], 0.5, np.log([0.01, 0.01, 0.01, 0.5]), opacity=0.9,
                           sh_degree=0, n_freq=0)
    out = render(p, cam, 0.5)
    assert float(out.alpha[0, 0]) == 0.0
    assert torch.count_nonzero(out.rgb[0, 0]) == 0 and float(out.depth[0, 0]) == 0.0


def make_splats(means, covs, opac, depth, color):
    n = len(means)
    return Splat2D(torch.as_tensor(means, dtype=D), torch.as_tensor(covs, dtype=D),
                   torch.as_tensor(depth, dtype=D), torch.as_tensor(opac, dtype=D),
                   torch.as_tensor(color, dtype=D), torch.zeros(n, 2, dtype=D), torch.arange(n))


def direct_pixel(splats, x, y):
    """Per-pixel front-to-back sum written out term by term."""
    order = sorted(range(splats.count), key=lambda i: (float(splats.depth[i]), i))
    T, acc, a_acc = 1.0, np.zeros(3), 0.0
    for i in order:
        d = np.array([x, y]) - splats.mean2[i].numpy()
        a = float(splats.effective_opacity[i]) * math.exp(
            -0.5 * d @ np.linalg.inv(splats.cov2[i].numpy()) @ d)
        if a < ALPHA_MIN:
            continue
        acc += a * T * splats.color[i].numpy()
        a_acc += a * T
        T *= 1 - a
        if T < 1e-4:
            break
    return acc, a_acc


def test_opaque_front_occludes_back():
    cov = [[4.0, 0.0], [0.0, 4.0]]
    # Back splat listed first so that ordering comes from depth, not input order.
    s = make_splats([[10.0, 12.0], [10.0, 12.0]], [cov, cov], [0.9, 1.0], [5.0, 2.0],
                    [[0, 0, 1], [1, 0, 0]])
    out = rasterize(s, 24, 24)
    np.testing.assert_array_equal(out.rgb[12, 10].numpy(), [1.0, 0.0, 0.0])
    assert float(out.alpha[12, 10]) == 1.0
    for (x, y) in [(10, 12), (13, 12), (10, 9), (16, 16)]:
        acc, a = direct_pixel(s, x, y)
        np.testing.assert_allclose(out.rgb[y, x].numpy(), acc, atol=1e-12)
        assert float(out.alpha[y, x]) == pytest.approx(a, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_tiled_render_matches_reference(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, int(rng.integers(1, 65)), sh_degree=1, n_freq=1)
    cam = small_camera(32)
    flow_pair = (0.3, 0.6, cam, cam.translated([0.05, -0.02, 0.0]))
    a = render(scene, cam, 0.45, flow_pair)
    b = render_reference(scene, cam, 0.45, flow_pair)
    for ch in ("rgb", "depth", "alpha", "flow"):
        assert torch.allclose(getattr(a, ch), getattr(b, ch), atol=1e-6, rtol=0), ch


def test_single_primitive_matches_reference_exactly():
    cam = grid_camera()
    p = single_on_axis()
    a, b = render(p, cam, 0.5), render_reference(p, cam, 0.5)
    for ch in ("rgb", "depth", "alpha"):
        assert torch.allclose(getattr(a, ch), getattr(b, ch), atol=1e-14, rtol=0)


def test_depth_ties_follow_index_order(rng):
    n = 12
    scene = random_scene(rng, n, sh_degree=0, n_freq=0, opacity=(0.5, 0.9))
    scene.mu_x[:, 2] = 3.0
    scene.log_scale[:, 3] = 3.0  # long temporal support: no drift in depth
    scene.rot_left[:] = torch.tensor([1.0, 0, 0, 0], dtype=D)
    scene.rot_right[:] = torch.tensor([1.0, 0, 0, 0], dtype=D)
    cam = small_camera(32)
    a, b = render(scene, cam, 0.5), render_reference(scene, cam, 0.5)
    assert torch.allclose(a.rgb, b.rgb, atol=1e-12, rtol=0)
    again = render(scene, cam, 0.5)
    assert torch.equal(a.rgb, again.rgb) and torch.equal(a.alpha, again.alpha)


def test_alpha_in_unit_interval_and_monotone_under_addition(rng):
    cam = small_camera(32)
    for _ in range(5):
        scene = random_scene(rng, 20, sh_degree=0, n_freq=0)
        base = render(scene, cam, 0.5).alpha
        assert bool((base >= 0).all()) and bool((base <= 1).all())
        extra = random_scene(rng, 1, sh_degree=0, n_freq=0)
        more = render(Primitive4D.cat([scene, extra]), cam, 0.5).alpha
        assert bool((more >= base - 1e-15).all())


def test_render_is_bit_identical_across_thread_counts(rng):
    scene = random_scene(rng, 60, sh_degree=2, n_freq=1)
    cam = small_camera(32)
    prev = torch.get_num_threads()
    try:
        torch.set_num_threads(1)
        a = render(scene, cam, 0.4, (0.4, 0.5, cam, cam))
        torch.set_num_threads(4)
        b = render(scene, cam, 0.4, (0.4, 0.5, cam, cam))
    finally:
        torch.set_num_threads(prev)
    for ch in ("rgb", "depth", "alpha", "flow"):
        assert torch.equal(getattr(a, ch), getattr(b, ch))


def test_tile_size_does_not_change_output(rng):
    scene = random_scene(rng, 30, sh_degree=1, n_freq=1)
    cam = small_camera(32)
    a = render(scene, cam, 0.5, tile_size=16)
    b = render(scene, cam, 0.5, tile_size=8)
    assert torch.allclose(a.rgb, b.rgb, atol=1e-14, rtol=0)


def moving_opaque_primitive(theta=-0.5):
    ql, qr = xt_plane_quats(theta)
    return Primitive4D.create([[0.0, 0.0, 3.0]], 0.5, np.log([0.15, 0.15, 0.15, 0.4]), ql, qr,
                              opacity=1.0, sh_degree=0, n_freq=0)


def test_composited_flow_at_projected_centre():
    cam = grid_camera()
    p = moving_opaque_primitive()
    t1, t2 = 0.5, 0.75
    out = render(p, cam, t1, (t1, t2, cam, cam))
    f, valid = projected_flow(p, cam, t1, cam, t2)
    c = cam.height // 2
    assert bool(valid[0]) and float(f[0, 0]) > 1.0
    np.testing.assert_allclose(out.flow[c, c].numpy(), f[0].numpy(), atol=0.05)


def test_normalized_composites(rng):
    cam = small_camera(32)
    scene = random_scene(rng, 10, sh_degree=0, n_freq=0)
    raw = render(scene, cam, 0.5, (0.5, 0.6, cam, cam))
    norm = render(scene, cam, 0.5, (0.5, 0.6, cam, cam), normalize=True)
    ok = raw.alpha > 1e-3
    assert torch.allclose(norm.depth[ok], raw.depth[ok] / raw.alpha[ok])
    assert torch.count_nonzero(norm.depth[~ok]) == 0
    assert torch.equal(norm.rgb, raw.rgb)
