"""Scene flow, projected flow, forward-backward consistency, flow loss and .flo I/O."""

from dataclasses import dataclass
import struct

import numpy as np
import torch

from .camera import DTYPE, NEAR_PLANE
from .gaussian4d import position_at

FLO_MAGIC = 202021.25
FLO_MAGIC_BYTES = b"PIEH"
UNKNOWN_FLOW_THRESH = 1e9
CONSISTENCY_ALPHA = 0.01
CONSISTENCY_BETA = 0.5


class FloError(Exception):
    pass


class FloMagicError(FloError):
    pass


class FloTruncatedError(FloError):
    pass


@dataclass
class FlowField:
    u: np.ndarray  # [H, W]
    v: np.ndarray
    valid: np.ndarray  # bool [H, W]

    @classmethod
    def from_uv(cls, uv, valid=None):
        uv = np.asarray(uv, dtype=np.float64)
        if valid is None:
            valid = np.isfinite(uv).all(-1)
        return cls(uv[..., 0].copy(), uv[..., 1].copy(), np.asarray(valid, dtype=bool))

    @property
    def shape(self):
        return self.u.shape

    @property
    def uv(self):
        return np.stack([self.u, self.v], -1)


def scene_flow(p, t1, t2):
    return position_at(p, t2) - position_at(p, t1)


def projected_flow(p, cam1, t1, cam2, t2):
    """Pixel displacement of each primitive centre; returns (flow [N, 2], valid [N])."""
    q1, z1 = cam1.project(position_at(p, t1))
    q2, z2 = cam2.project(position_at(p, t2))
    valid = (z1 > NEAR_PLANE) & (z2 > NEAR_PLANE)
    return torch.where(valid.unsqueeze(-1), q2 - q1, torch.zeros_like(q1)), valid


def bilinear_sample(field_, x, y):
    """Sample [H, W, C] at float pixel coords; returns (values, in_bounds)."""
    H, W = field_.shape[:2]
    inside = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    xc = np.clip(x, 0, W - 1)
    yc = np.clip(y, 0, H - 1)
    x0 = np.clip(np.floor(xc).astype(int), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(yc).astype(int), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (xc - x0)[..., None]
    wy = (yc - y0)[..., None]
    top = field_[y0, x0] * (1 - wx) + field_[y0, x1] * wx
    bot = field_[y1, x0] * (1 - wx) + field_[y1, x1] * wx
    return top * (1 - wy) + bot * wy, inside


def consistency_mask(fwd, bwd, alpha=CONSISTENCY_ALPHA, beta=CONSISTENCY_BETA):
    """Forward-backward check: valid where |f + b(p + f)|^2 < alpha (|f|^2 + |b|^2) + beta."""
    if fwd.shape != bwd.shape:
        raise ValueError(f"flow shapes differ: {fwd.shape} vs {bwd.shape}")
    H, W = fwd.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    f = np.where(fwd.valid[..., None], fwd.uv, 0.0)
    b = np.where(bwd.valid[..., None], bwd.uv, 0.0)
    tx, ty = xs + f[..., 0], ys + f[..., 1]
    b_at, inside = bilinear_sample(b, tx, ty)
    b_valid, _ = bilinear_sample(bwd.valid.astype(np.float64)[..., None], tx, ty)
    lhs = np.sum((f + b_at) ** 2, -1)
    rhs = alpha * (np.sum(f ** 2, -1) + np.sum(b_at ** 2, -1)) + beta
    return (lhs < rhs) & inside & fwd.valid & (b_valid[..., 0] > 1.0 - 1e-9)


def flow_loss(rendered, pseudo_gt, mask):
    """Root-sum-square of masked per-pixel flow differences.

    ``rendered`` may be a torch tensor [H, W, 2] (differentiable) or a FlowField.
    """
    r = rendered if torch.is_tensor(rendered) else torch.as_tensor(rendered.uv, dtype=DTYPE)
    g = torch.as_tensor(pseudo_gt.uv if isinstance(pseudo_gt, FlowField) else pseudo_gt,
                        dtype=DTYPE)
    m = torch.as_tensor(np.asarray(mask, dtype=bool))
    if r.shape != g.shape or tuple(m.shape) != tuple(r.shape[:2]):
        raise ValueError("flow_loss inputs have mismatched dimensions")
    diff = torch.where(m.unsqueeze(-1), r - torch.nan_to_num(g), torch.zeros_like(r))
    # Rescale by the (detached) largest entry so tiny deviations do not underflow when squared.
    scale = diff.detach().abs().max() if diff.numel() else torch.zeros((), dtype=DTYPE)
    if float(scale) == 0.0:
        return torch.linalg.vector_norm(diff)
    return scale * torch.linalg.vector_norm(diff / scale)


def epe(a, b, mask=None):
    """Mean endpoint error over masked pixels (NaN when the mask is empty)."""
    ua = a.uv if isinstance(a, FlowField) else np.asarray(a)
    ub = b.uv if isinstance(b, FlowField) else np.asarray(b)
    m = np.ones(ua.shape[:2], bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        return float("nan")
    d = np.sqrt(np.sum((ua - ub) ** 2, -1))
    return float(d[m].mean())


def write_flo(field_, path):
    uv = field_.uv.astype("<f4")
    uv[~field_.valid] = np.float32(1e10)
    H, W = field_.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", W, H))
        fh.write(uv.tobytes(order="C"))


def read_flo(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != FLO_MAGIC_BYTES:
        raise FloMagicError(f"{path}: bad magic {data[:4]!r}, expected {FLO_MAGIC_BYTES!r}")
    if len(data) < 12:
        raise FloTruncatedError(f"{path}: truncated header")
    W, H = struct.unpack("<ii", data[4:12])
    if W < 0 or H < 0:
        raise FloError(f"{path}: negative dimensions {W}x{H}")
    need = 12 + 8 * W * H
    if len(data) < need:
        raise FloTruncatedError(f"{path}: payload has {len(data) - 12} bytes, expected {need - 12}")
    uv = np.frombuffer(data, dtype="<f4", count=2 * W * H, offset=12).reshape(H, W, 2)
    valid = np.all(np.abs(uv) <= UNKNOWN_FLOW_THRESH, axis=-1) & np.isfinite(uv).all(-1)
    return FlowField(uv[..., 0].astype(np.float64), uv[..., 1].astype(np.float64), valid)
