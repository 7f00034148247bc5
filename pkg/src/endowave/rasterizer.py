"""EWA splat projection and tiled front-to-back compositing of color, depth, alpha and flow."""

from dataclasses import dataclass
import math

import numpy as np
import torch

from .camera import DTYPE, NEAR_PLANE
from .gaussian4d import condition_at_time, position_at, teash_eval

TILE_SIZE = 16
DILATION = 0.3
ALPHA_MIN = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4
NORMALIZE_ALPHA_MIN = 1e-3


@dataclass
class Splat2D:
    """Batch of screen-space splats; ``index`` maps back to the source primitive."""

    mean2: torch.Tensor  # [M, 2]
    cov2: torch.Tensor  # [M, 2, 2]
    depth: torch.Tensor  # [M]
    effective_opacity: torch.Tensor  # [M]
    color: torch.Tensor  # [M, 3]
    flow2: torch.Tensor  # [M, 2]
    index: torch.Tensor  # [M] int64

    @property
    def count(self):
        return self.index.shape[0]

    def select(self, keep):
        return Splat2D(*(getattr(self, f)[keep] for f in
                         ("mean2", "cov2", "depth", "effective_opacity", "color", "flow2", "index")))


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # [H, W, 3]
    depth: torch.Tensor  # [H, W]
    alpha: torch.Tensor  # [H, W]
    flow: torch.Tensor  # [H, W, 2]
    mean2: torch.Tensor = None  # projected centres of all primitives [N, 2]
    visible: torch.Tensor = None  # [N] bool, survived culling
    active_pairs: int = 0
    active_checksum: int = 0

    def normalized(self):
        """Depth and flow divided by alpha where alpha > 1e-3 (visualization only)."""
        a = self.alpha
        ok = a > NORMALIZE_ALPHA_MIN
        denom = torch.where(ok, a, torch.ones_like(a))
        depth = torch.where(ok, self.depth / denom, torch.zeros_like(a))
        flow = torch.where(ok.unsqueeze(-1), self.flow / denom.unsqueeze(-1), torch.zeros_like(self.flow))
        return RenderOutput(self.rgb, depth, a, flow, self.mean2, self.visible,
                            self.active_pairs, self.active_checksum)


def projection_jacobian(pc, cam):
    """d(pixel)/d(camera point) at camera-space points pc [M, 3] -> [M, 2, 3]."""
    x, y, z = pc.unbind(-1)
    zero = torch.zeros_like(z)
    row0 = torch.stack([cam.fx / z, zero, -cam.fx * x / (z * z)], -1)
    row1 = torch.stack([zero, cam.fy / z, -cam.fy * y / (z * z)], -1)
    return torch.stack([row0, row1], -2)


def alpha_extent(cov2, opacity):
    """Half-widths of the box outside which opacity * gaussian < ALPHA_MIN.

    Returns (rx, ry, has_support); splats whose peak is below ALPHA_MIN have no support.
    """
    level = 2.0 * torch.log(torch.clamp_min(opacity / ALPHA_MIN, 1.0))
    has_support = opacity >= ALPHA_MIN
    rx = torch.sqrt(level * cov2[:, 0, 0])
    ry = torch.sqrt(level * cov2[:, 1, 1])
    return rx, ry, has_support


def project_gaussians(mean3, cov3, cam):
    """Batched EWA projection; returns (mean2, cov2, depth, in_front)."""
    R = torch.as_tensor(cam.R, dtype=DTYPE)
    pc = cam.to_camera(mean3)
    depth = pc[:, 2]
    in_front = depth > NEAR_PLANE
    safe = torch.where(in_front.unsqueeze(-1), pc, torch.ones_like(pc))
    mean2 = torch.stack([cam.fx * safe[:, 0] / safe[:, 2] + cam.cx,
                         cam.fy * safe[:, 1] / safe[:, 2] + cam.cy], -1)
    JW = projection_jacobian(safe, cam) @ R
    cov2 = JW @ cov3 @ JW.transpose(-1, -2)
    cov2 = 0.5 * (cov2 + cov2.transpose(-1, -2)) + DILATION * torch.eye(2, dtype=DTYPE)
    return mean2, cov2, depth, in_front


def in_viewport(mean2, cov2, opacity, cam):
    rx, ry, support = alpha_extent(cov2, opacity)
    mx, my = mean2[:, 0], mean2[:, 1]
    hit = (mx + rx >= 0) & (mx - rx <= cam.width - 1) & (my + ry >= 0) & (my - ry <= cam.height - 1)
    return hit & support


def project_gaussian(g, opacity, color, cam):
    """Single conditioned Gaussian -> Splat2D, or None when culled."""
    mean3 = g.mean3.reshape(1, 3)
    cov3 = g.cov3.reshape(1, 3, 3)
    mean2, cov2, depth, in_front = project_gaussians(mean3, cov3, cam)
    o_eff = (torch.as_tensor(opacity, dtype=DTYPE) * g.temporal_weight).reshape(1)
    if not bool(in_front[0]) or not bool(in_viewport(mean2, cov2, o_eff, cam)[0]):
        return None
    return Splat2D(mean2, cov2, depth, o_eff,
                   torch.as_tensor(color, dtype=DTYPE).reshape(1, 3),
                   torch.zeros(1, 2, dtype=DTYPE), torch.zeros(1, dtype=torch.int64))


def splat_flow(scene, flow_pair):
    """Projected centre displacement per primitive, zero where either endpoint is behind a camera."""
    t1, t2, cam1, cam2 = flow_pair
    p1, z1 = cam1.project(position_at(scene, t1))
    p2, z2 = cam2.project(position_at(scene, t2))
    ok = ((z1 > NEAR_PLANE) & (z2 > NEAR_PLANE)).unsqueeze(-1)
    return torch.where(ok, p2 - p1, torch.zeros_like(p1))


def prepare_splats(scene, cam, t, flow_pair=None):
    """Condition, shade and project a scene; returns (splats, mean2 of all, visible mask)."""
    g = condition_at_time(scene, t)
    o_eff = scene.opacity * g.temporal_weight
    center = torch.as_tensor(cam.center, dtype=DTYPE)
    view = g.mean3 - center
    dirs = view / torch.linalg.vector_norm(view, dim=-1, keepdim=True).clamp_min(1e-12)
    color = teash_eval(scene, dirs, t)
    mean2, cov2, depth, in_front = project_gaussians(g.mean3, g.cov3, cam)
    if flow_pair is not None:
        flow2 = splat_flow(scene, flow_pair)
    else:
        flow2 = torch.zeros_like(mean2)
    visible = in_front & in_viewport(mean2, cov2, o_eff, cam)
    visible = visible.detach()
    index = torch.arange(scene.count)
    splats = Splat2D(mean2, cov2, depth, o_eff, color, flow2, index).select(visible)
    return splats, mean2, visible


def conic(cov2):
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    return c / det, -b / det, a / det


def depth_order(splats):
    """Front-to-back order with (depth, primitive index) lexicographic tie-break."""
    depth = splats.depth.detach().numpy()
    index = splats.index.numpy()
    return np.lexsort((index, depth))


def rasterize(splats, width, height, tile_size=TILE_SIZE):
    """Tiled compositing.  Tiles are independent; each sees its splats in global depth order."""
    M = splats.count
    n_feat = 6
    tiles_x = math.ceil(width / tile_size)
    tiles_y = math.ceil(height / tile_size)

    if M > 0:
        order = depth_order(splats)
        s = splats.select(torch.as_tensor(order))
        ca, cb, cc = conic(s.cov2)
        feats = torch.cat([s.color, s.depth.unsqueeze(-1), s.flow2], -1)
        with torch.no_grad():
            rx, ry, _ = alpha_extent(s.cov2, s.effective_opacity)
            mx, my = s.mean2[:, 0], s.mean2[:, 1]
            x0 = torch.ceil(mx - rx).numpy() - 1
            x1 = torch.floor(mx + rx).numpy() + 1
            y0 = torch.ceil(my - ry).numpy() - 1
            y1 = torch.floor(my + ry).numpy() + 1
        prim_index = s.index.numpy()

    rows = []
    active_pairs = 0
    checksum = 0
    for ty in range(tiles_y):
        py0, py1 = ty * tile_size, min((ty + 1) * tile_size, height)
        row = []
        for tx in range(tiles_x):
            px0, px1 = tx * tile_size, min((tx + 1) * tile_size, width)
            h, w = py1 - py0, px1 - px0
            block = None
            if M > 0:
                hits = np.nonzero((x0 <= px1 - 1) & (x1 >= px0) & (y0 <= py1 - 1) & (y1 >= py0))[0]
                if len(hits):
                    block, pairs, csum = _composite_tile(
                        hits, s, ca, cb, cc, feats, prim_index, px0, px1, py0, py1, width)
                    active_pairs += pairs
                    checksum += csum
            if block is None:
                block = torch.zeros(h, w, n_feat + 1, dtype=DTYPE)
            row.append(block)
        rows.append(torch.cat(row, dim=1))
    fb = torch.cat(rows, dim=0)
    return RenderOutput(rgb=fb[..., 0:3], depth=fb[..., 3], alpha=fb[..., 6], flow=fb[..., 4:6],
                        active_pairs=active_pairs, active_checksum=checksum)


def _composite_tile(hits, s, ca, cb, cc, feats, prim_index, px0, px1, py0, py1, width):
    idx = torch.as_tensor(hits)
    ys, xs = torch.meshgrid(torch.arange(py0, py1, dtype=DTYPE),
                            torch.arange(px0, px1, dtype=DTYPE), indexing="ij")
    xs, ys = xs.reshape(1, -1), ys.reshape(1, -1)
    m = s.mean2[idx]
    dx = xs - m[:, 0:1]
    dy = ys - m[:, 1:2]
    power = -0.5 * (ca[idx, None] * dx * dx + 2.0 * cb[idx, None] * dx * dy + cc[idx, None] * dy * dy)
    alpha = s.effective_opacity[idx, None] * torch.exp(power)  # [n, P]
    keep = (alpha >= ALPHA_MIN).detach()
    alpha = torch.where(keep, alpha, torch.zeros_like(alpha))
    trans = torch.cumprod(1.0 - alpha, dim=0)
    trans = torch.cat([torch.ones_like(trans[:1]), trans[:-1]], dim=0)
    live = (trans >= TRANSMITTANCE_MIN).detach() & keep
    weight = torch.where(live, alpha * trans, torch.zeros_like(alpha))
    out = weight.transpose(0, 1) @ feats[idx]  # [P, 6]
    acc = weight.sum(0, keepdim=True).transpose(0, 1)
    block = torch.cat([out, acc], dim=1).reshape(py1 - py0, px1 - px0, -1)

    live_np = live.numpy()
    n_idx, p_idx = np.nonzero(live_np)
    gy = py0 + p_idx // (px1 - px0)
    gx = px0 + p_idx % (px1 - px0)
    pix = gy * width + gx
    csum = int(np.sum((pix.astype(np.int64) * 1_000_003 + prim_index[hits][n_idx]) % 2_147_483_647))
    return block, len(n_idx), csum


def render(scene, cam, t, flow_pair=None, normalize=False, tile_size=TILE_SIZE):
    """Render color, depth, alpha and flow of a 4D scene at time ``t``.

    ``flow_pair`` = (t1, t2, cam1, cam2) selects the per-splat displacement that is
    composited into the flow channel; without it the flow channel is zero.
    """
    splats, mean2, visible = prepare_splats(scene, cam, t, flow_pair)
    out = rasterize(splats, cam.width, cam.height, tile_size)
    out.mean2 = mean2
    out.visible = visible
    return out.normalized() if normalize else out


def render_reference(scene, cam, t, flow_pair=None, normalize=False):
    """Brute-force per-pixel compositing in numpy; test oracle for :func:`render`."""
    splats, mean2, visible = prepare_splats(scene, cam, t, flow_pair)
    with torch.no_grad():
        m = splats.mean2.numpy()
        cov = splats.cov2.numpy()
        opac = splats.effective_opacity.numpy()
        feats = torch.cat([splats.color, splats.depth.unsqueeze(-1), splats.flow2], -1).numpy()
        depth = splats.depth.numpy()
        index = splats.index.numpy()
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    ia, ib, ic = cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det

    H, W = cam.height, cam.width
    fb = np.zeros((H, W, 7))
    for y in range(H):
        for x in range(W):
            dx = x - m[:, 0]
            dy = y - m[:, 1]
            alpha = opac * np.exp(-0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy))
            T = 1.0
            acc = np.zeros(7)
            for i in np.lexsort((index, depth)):
                a = alpha[i]
                if a < ALPHA_MIN:
                    continue
                wgt = a * T
                acc[:6] += wgt * feats[i]
                acc[6] += wgt
                T *= 1.0 - a
                if T < TRANSMITTANCE_MIN:
                    break
            fb[y, x] = acc
    fb = torch.as_tensor(fb)
    out = RenderOutput(rgb=fb[..., 0:3], depth=fb[..., 3], alpha=fb[..., 6], flow=fb[..., 4:6],
                       mean2=mean2.detach(), visible=visible)
    return out.normalized() if normalize else out
