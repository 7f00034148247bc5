from dataclasses import dataclass, field

import numpy as np
import torch

DTYPE = torch.float64
NEAR_PLANE = 0.05


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; R, t map world points into camera coordinates (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-10):
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self):
        return -self.R.T @ self.t

    def to_camera(self, points):
        R = torch.as_tensor(self.R, dtype=DTYPE)
        t = torch.as_tensor(self.t, dtype=DTYPE)
        return points @ R.T + t

    def project(self, points):
        """World points [..., 3] -> (pixel coords [..., 2], camera depth [...])."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        u = self.fx * pc[..., 0] / z + self.cx
        v = self.fy * pc[..., 1] / z + self.cy
        return torch.stack([u, v], -1), z

    def backproject(self, u, v, depth):
        """Pixel coords and camera-z depth (numpy arrays) -> world points [..., 3]."""
        xc = (np.asarray(u) - self.cx) / self.fx * depth
        yc = (np.asarray(v) - self.cy) / self.fy * depth
        pc = np.stack([xc, yc, np.asarray(depth, dtype=np.float64)], -1)
        return (pc - self.t) @ self.R

    def translated(self, offset):
        """Same camera with its centre moved by a world-space offset."""
        center = self.center + np.asarray(offset, dtype=np.float64)
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      self.R, -self.R @ center)

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": self.R.reshape(-1).tolist(), "t": self.t.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]),
                   np.asarray(d.get("R", np.eye(3).reshape(-1)), dtype=np.float64).reshape(3, 3),
                   np.asarray(d.get("t", np.zeros(3)), dtype=np.float64))
