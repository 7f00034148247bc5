import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from endowave.flowsup import (
    FloMagicError, FloTruncatedError, FlowField, consistency_mask, epe, flow_loss,
    projected_flow, read_flo, scene_flow, write_flo,
)
from endowave.gaussian4d import Primitive4D, velocity

from conftest import random_scene, small_camera, xt_plane_quats

GOLDEN = "5049454802000000010000000000803f0000000000000040000080bf"


def field(u, v, valid=None):
    u = np.asarray(u, dtype=np.float64)
    return FlowField(u, np.asarray(v, dtype=np.float64),
                     np.ones(u.shape, bool) if valid is None else valid)


def test_static_primitive_has_zero_scene_flow():
    p = Primitive4D.create([[0.1, 0.2, 3.0]], 0.5, np.log([0.2, 0.2, 0.2, 0.5]))
    assert torch.count_nonzero(scene_flow(p, 0.1, 0.9)) == 0


def test_scene_flow_equal_times_and_antisymmetry(rng):
    scene = random_scene(rng, 30)
    assert torch.count_nonzero(scene_flow(scene, 0.4, 0.4)) == 0
    assert torch.equal(scene_flow(scene, 0.2, 0.7), -scene_flow(scene, 0.7, 0.2))


def test_scene_flow_of_linear_trajectory(rng):
    scene = random_scene(rng, 20)
    expected = velocity(scene) * (0.9 - 0.15)
    assert torch.allclose(scene_flow(scene, 0.15, 0.9), expected, atol=1e-12, rtol=0)


def test_parallax_under_camera_translation():
    cam = small_camera(32)
    X = np.array([[0.3, -0.2, 2.5], [-0.4, 0.1, 4.0]])
    p = Primitive4D.create(X, 0.5, np.log([[0.1] * 4] * 2))
    dx = 0.07
    f, valid = projected_flow(p, cam, 0.2, cam.translated([dx, 0.0, 0.0]), 0.8)
    assert bool(valid.all())
    # Moving the camera by +dx shifts the image of a point at depth Z by -fx dx / Z.
    np.testing.assert_allclose(f[:, 0].numpy(), -cam.fx * dx / X[:, 2], atol=1e-12)
    np.testing.assert_allclose(f[:, 1].numpy(), 0.0, atol=1e-12)


def test_static_primitive_static_camera_has_zero_flow(cam32):
    p = Primitive4D.create([[0.1, 0.0, 3.0]], 0.5, np.log([0.2] * 4))
    f, valid = projected_flow(p, cam32, 0.0, cam32, 1.0)
    assert bool(valid[0]) and torch.count_nonzero(f) == 0


@pytest.mark.parametrize("theta", [0.4, -0.4])
def test_moving_primitive_flow_sign(cam32, theta):
    ql, qr = xt_plane_quats(theta)
    p = Primitive4D.create([[0.0, 0.0, 3.0]], 0.5, np.log([0.2, 0.2, 0.2, 0.5]), ql, qr)
    f, _ = projected_flow(p, cam32, 0.3, cam32, 0.7)
    assert np.sign(float(f[0, 0])) == np.sign(float(velocity(p)[0, 0])) != 0


def test_behind_camera_flow_is_invalid(cam32):
    p = Primitive4D.create([[0.0, 0.0, -1.0]], 0.5, np.log([0.2] * 4))
    f, valid = projected_flow(p, cam32, 0.3, cam32, 0.7)
    assert not bool(valid[0]) and torch.count_nonzero(f) == 0


def test_consistency_perfect_rigid_shift():
    H, W = 12, 16
    fwd = field(np.full((H, W), 2.0), np.full((H, W), -1.0))
    bwd = field(np.full((H, W), -2.0), np.full((H, W), 1.0))
    m = consistency_mask(fwd, bwd)
    ys, xs = np.mgrid[0:H, 0:W]
    inside = (xs + 2 <= W - 1) & (ys - 1 >= 0)
    np.testing.assert_array_equal(m, inside)


def test_consistency_rejects_one_sided_motion():
    fwd = field(np.full((8, 20), 5.0), np.zeros((8, 20)))
    bwd = field(np.zeros((8, 20)), np.zeros((8, 20)))
    assert not consistency_mask(fwd, bwd).any()


def test_consistency_out_of_bounds_target():
    fwd = field(np.full((6, 6), 10.0), np.zeros((6, 6)))
    bwd = field(np.full((6, 6), -10.0), np.zeros((6, 6)))
    assert not consistency_mask(fwd, bwd).any()


def test_consistency_shape_mismatch():
    with pytest.raises(ValueError):
        consistency_mask(field(np.zeros((4, 4)), np.zeros((4, 4))),
                         field(np.zeros((4, 5)), np.zeros((4, 5))))


def test_flow_loss_examples():
    a = field(np.zeros((5, 5)), np.zeros((5, 5)))
    assert float(flow_loss(a, a, np.ones((5, 5), bool))) == 0.0
    b = field(np.random.default_rng(0).random((5, 5)), np.zeros((5, 5)))
    assert float(flow_loss(a, b, np.zeros((5, 5), bool))) == 0.0
    c = field(np.zeros((5, 5)), np.zeros((5, 5)))
    c.u[2, 3], c.v[2, 3] = 3.0, 4.0
    mask = np.zeros((5, 5), bool)
    mask[2, 3] = True
    assert float(flow_loss(a, c, mask)) == pytest.approx(5.0, abs=1e-15)


@given(st.floats(0.0, 10.0), st.floats(0.0, 10.0))
def test_flow_loss_increases_with_single_deviation(d1, d2):
    lo, hi = sorted((d1, d2))
    base = field(np.zeros((4, 4)), np.zeros((4, 4)))
    mask = np.ones((4, 4), bool)

    def loss(d):
        g = field(np.zeros((4, 4)), np.zeros((4, 4)))
        g.u[1, 2] = d
        return float(flow_loss(base, g, mask))

    if hi > lo:
        assert loss(lo) < loss(hi)
    assert (loss(lo) == 0.0) == (lo == 0.0)


def test_flow_loss_gradient_is_finite_at_zero():
    r = torch.zeros(4, 4, 2, dtype=torch.float64, requires_grad=True)
    flow_loss(r, np.zeros((4, 4, 2)), np.ones((4, 4), bool)).backward()
    assert torch.isfinite(r.grad).all()


def test_epe_examples_and_loop_oracle():
    rng = np.random.default_rng(3)
    a = field(rng.normal(size=(9, 7)), rng.normal(size=(9, 7)))
    b = field(rng.normal(size=(9, 7)), rng.normal(size=(9, 7)))
    assert epe(a, a) == 0.0
    assert epe(a, field(a.u + 3, a.v + 4)) == pytest.approx(5.0)
    mask = rng.random((9, 7)) > 0.3
    total, n = 0.0, 0
    for y in range(9):
        for x in range(7):
            if mask[y, x]:
                total += ((a.u[y, x] - b.u[y, x]) ** 2 + (a.v[y, x] - b.v[y, x]) ** 2) ** 0.5
                n += 1
    assert epe(a, b, mask) == pytest.approx(total / n, abs=1e-9)
    assert np.isnan(epe(a, b, np.zeros((9, 7), bool)))


def test_flo_golden_bytes(tmp_path):
    path = tmp_path / "g.flo"
    write_flo(field([[1.0, 2.0]], [[0.0, -1.0]]), path)
    assert path.read_bytes().hex() == GOLDEN
    golden = read_flo(__file__.replace("test_flowsup.py", "fixtures/golden_2x1.flo"))
    np.testing.assert_array_equal(golden.u, [[1.0, 2.0]])
    np.testing.assert_array_equal(golden.v, [[0.0, -1.0]])
    assert golden.valid.all()


@settings(max_examples=20)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2 ** 31 - 1))
def test_flo_round_trip_is_bit_exact(tmp_path_factory, h, w, seed):
    rng = np.random.default_rng(seed)
    uv = rng.normal(scale=20, size=(h, w, 2)).astype(np.float32).astype(np.float64)
    f = FlowField(uv[..., 0], uv[..., 1], np.ones((h, w), bool))
    path = tmp_path_factory.mktemp("flo") / "r.flo"
    write_flo(f, path)
    back = read_flo(path)
    assert back.u.tobytes() == f.u.tobytes() and back.v.tobytes() == f.v.tobytes()
    write_flo(back, path.with_suffix(".b"))
    assert path.read_bytes() == path.with_suffix(".b").read_bytes()


def test_flo_invalid_marker(tmp_path):
    f = field(np.ones((2, 3)), np.ones((2, 3)), np.array([[True, False, True], [True, True, True]]))
    write_flo(f, tmp_path / "m.flo")
    back = read_flo(tmp_path / "m.flo")
    np.testing.assert_array_equal(back.valid, f.valid)


def test_flo_errors_are_distinct(tmp_path):
    bad = tmp_path / "bad.flo"
    bad.write_bytes(b"XXXX" + bytes(24))
    with pytest.raises(FloMagicError):
        read_flo(bad)
    short = tmp_path / "short.flo"
    short.write_bytes(bytes.fromhex(GOLDEN)[:-3])
    with pytest.raises(FloTruncatedError):
        read_flo(short)
    assert not issubclass(FloMagicError, FloTruncatedError)
    assert not issubclass(FloTruncatedError, FloMagicError)
