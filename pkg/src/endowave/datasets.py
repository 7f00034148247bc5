"""Frame bundles, on-disk dataset layout, synthetic scenes with analytic truth, and initialization."""

from dataclasses import dataclass, field
import json
import math
import os

import numpy as np
from PIL import Image
import torch

from .camera import DTYPE, Camera
from .flowsup import FlowField, read_flo, write_flo
from .gaussian4d import Primitive4D
from .rasterizer import Splat2D, project_gaussians, rasterize
from .sh import C0, num_coeffs

TEST_EVERY = 8


class DatasetError(Exception):
    pass


class EmptySceneError(DatasetError):
    pass


@dataclass
class FrameBundle:
    rgb: np.ndarray  # [H, W, 3] in [0, 1]
    depth: np.ndarray  # [H, W]
    depth_valid: np.ndarray  # bool [H, W]
    tool_mask: np.ndarray  # bool [H, W], True = tool (excluded)
    cam: Camera
    time: float
    index: int = 0

    def __post_init__(self):
        H, W = self.rgb.shape[:2]
        for name in ("depth", "depth_valid", "tool_mask"):
            if getattr(self, name).shape != (H, W):
                raise DatasetError(f"frame {self.index}: {name} shape "
                                   f"{getattr(self, name).shape} != {(H, W)}")
        if (self.cam.width, self.cam.height) != (W, H):
            raise DatasetError(f"frame {self.index}: camera size does not match image {W}x{H}")

    @property
    def valid_pixels(self):
        return ~self.tool_mask

    @property
    def depth_mask(self):
        return self.depth_valid & ~self.tool_mask & (self.depth > 0)


@dataclass
class Dataset:
    frames: list
    train: list
    test: list
    flows: dict = field(default_factory=dict)  # (i, j) -> FlowField, i -> j
    depth_scale: float = 1.0

    def __len__(self):
        return len(self.frames)

    def flow(self, i, j):
        return self.flows.get((i, j))


def split_indices(n):
    """Frames whose position is 7 (mod 8) are held out."""
    test = [i for i in range(n) if i % TEST_EVERY == TEST_EVERY - 1]
    train = [i for i in range(n) if i % TEST_EVERY != TEST_EVERY - 1]
    return train, test


# --- file formats -----------------------------------------------------------

def write_pfm(path, data):
    data = np.asarray(data, dtype="<f4")
    H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{W} {H}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise DatasetError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise DatasetError(f"{path}: bad PFM dimensions line")
        W, H = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        raw = fh.read()
    count = W * H * channels
    if len(raw) < 4 * count:
        raise DatasetError(f"{path}: truncated PFM payload")
    data = np.frombuffer(raw, dtype=dtype, count=count).reshape(H, W, channels)
    data = np.flipud(data).astype(np.float64)
    return data[..., 0] if channels == 1 else data


def write_png_rgb(path, rgb):
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(path)


def read_png_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask_png(path, valid):
    Image.fromarray(np.where(valid, 255, 0).astype(np.uint8), "L").save(path)


def read_mask_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_png16(path, values):
    arr = np.clip(np.round(values), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def read_png16(path):
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64)


# --- dataset directory ------------------------------------------------------

def _normalize_times(times):
    times = np.asarray(times, dtype=np.float64)
    lo, hi = times.min(), times.max()
    if hi - lo <= 0:
        return np.zeros_like(times)
    return (times - lo) / (hi - lo)


def load_dataset(root):
    """Read a dataset directory; see README for the layout."""
    pose_path = os.path.join(root, "poses.json")
    if not os.path.exists(pose_path):
        raise DatasetError(f"missing file: {pose_path}")
    try:
        with open(pose_path) as fh:
            poses = json.load(fh)
        intr = {k: poses[k] for k in ("fx", "fy", "cx", "cy", "width", "height")}
        entries = sorted(poses["frames"], key=lambda f: int(f["index"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"unreadable pose file {pose_path}: {exc}") from exc
    depth_scale = float(poses.get("depth_scale", 1.0))
    times = _normalize_times([float(f.get("time", f["index"])) for f in entries])

    frames = []
    for k, (entry, time) in enumerate(zip(entries, times)):
        idx = int(entry["index"])
        name = f"{idx:04d}"
        try:
            cam = Camera.from_dict({**intr, "R": entry["R"], "t": entry["t"]})
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"unreadable pose for frame {idx} in {pose_path}: {exc}") from exc
        img_path = os.path.join(root, "images", name + ".png")
        if not os.path.exists(img_path):
            raise DatasetError(f"missing file: {img_path}")
        rgb = read_png_rgb(img_path)
        pfm = os.path.join(root, "depth", name + ".pfm")
        png = os.path.join(root, "depth", name + ".png")
        if os.path.exists(pfm):
            depth = read_pfm(pfm)
        elif os.path.exists(png):
            depth = read_png16(png) * depth_scale
        else:
            raise DatasetError(f"missing file: {pfm}")
        mask_path = os.path.join(root, "masks", name + ".png")
        if not os.path.exists(mask_path):
            raise DatasetError(f"missing file: {mask_path}")
        valid = read_mask_png(mask_path)
        if depth.shape != rgb.shape[:2] or valid.shape != rgb.shape[:2]:
            raise DatasetError(
                f"dimension mismatch in frame {name}: image {rgb.shape[:2]}, "
                f"depth {depth.shape}, mask {valid.shape}")
        depth_valid = np.isfinite(depth) & (depth > 0)
        frames.append(FrameBundle(rgb, np.where(depth_valid, depth, 0.0), depth_valid,
                                  ~valid, cam, float(time), k))

    flows = {}
    flow_dir = os.path.join(root, "flow")
    if os.path.isdir(flow_dir):
        index_of = {int(e["index"]): k for k, e in enumerate(entries)}
        for k, entry in enumerate(entries):
            name = f"{int(entry['index']):04d}"
            for suffix, step in (("_fwd", 1), ("_bwd", -1)):
                path = os.path.join(flow_dir, name + suffix + ".flo")
                other = index_of.get(int(entry["index"]) + step)
                if os.path.exists(path) and other is not None:
                    flows[(k, other)] = read_flo(path)
    train, test = split_indices(len(frames))
    return Dataset(frames, train, test, flows, depth_scale)


def save_dataset(dataset, root):
    for sub in ("images", "depth", "masks", "flow"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    cam0 = dataset.frames[0].cam
    poses = {
        "fx": cam0.fx, "fy": cam0.fy, "cx": cam0.cx, "cy": cam0.cy,
        "width": cam0.width, "height": cam0.height,
        "depth_scale": dataset.depth_scale,
        "frames": [],
    }
    for k, fr in enumerate(dataset.frames):
        name = f"{k:04d}"
        write_png_rgb(os.path.join(root, "images", name + ".png"), fr.rgb)
        write_pfm(os.path.join(root, "depth", name + ".pfm"), np.where(fr.depth_valid, fr.depth, 0.0))
        write_mask_png(os.path.join(root, "masks", name + ".png"), ~fr.tool_mask)
        poses["frames"].append({"index": k, "time": fr.time,
                                "R": fr.cam.R.reshape(-1).tolist(), "t": fr.cam.t.tolist()})
    for (i, j), fl in sorted(dataset.flows.items()):
        if j == i + 1:
            write_flo(fl, os.path.join(root, "flow", f"{i:04d}_fwd.flo"))
        elif j == i - 1:
            write_flo(fl, os.path.join(root, "flow", f"{i:04d}_bwd.flo"))
    with open(os.path.join(root, "poses.json"), "w") as fh:
        json.dump(poses, fh, indent=1)


# --- synthetic scenes -------------------------------------------------------

@dataclass
class SyntheticSpec:
    width: int = 64
    height: int = 64
    n_frames: int = 16
    n_blobs: int = 6
    amplitude: float = 8.0  # pixels of motion over the sequence
    background_depth: float = 4.0


@dataclass
class Blob:
    center_px: tuple  # (u, v) at time 0
    depth: float
    sigma_px: tuple  # (su, sv)
    color: tuple
    opacity: float = 0.95
    linear_px: tuple = (0.0, 0.0)  # displacement over the full sequence
    sine_px: tuple = (0.0, 0.0)
    sine_freq: float = 0.5  # cycles per sequence
    sine_phase: float = 0.0

    def pixel_position(self, t):
        s = math.sin(2.0 * math.pi * self.sine_freq * t + self.sine_phase) - math.sin(self.sine_phase)
        return (self.center_px[0] + self.linear_px[0] * t + self.sine_px[0] * s,
                self.center_px[1] + self.linear_px[1] * t + self.sine_px[1] * s)


@dataclass
class SyntheticTruth:
    depth: list  # per-frame analytic depth
    blob_positions: np.ndarray  # [n_frames, n_blobs, 3] world centres
    blob_pixels: np.ndarray  # [n_frames, n_blobs, 2]
    blobs: list
    cam: Camera
    spec: SyntheticSpec
    times: np.ndarray

    def blob_flow(self, i, j):
        """Per-blob pixel displacement from frame i to frame j."""
        return self.blob_pixels[j] - self.blob_pixels[i]

    def dense_flow(self, i, j):
        _, _, _, flow = _render_blobs(self, i, flow_to=j)
        return FlowField.from_uv(flow, np.ones(flow.shape[:2], bool))


def background_color(u, v, width, height):
    x = u / width
    y = v / height
    r = 0.55 + 0.20 * np.sin(2.0 * np.pi * (0.7 * x + 0.2 * y) + 0.3)
    g = 0.35 + 0.15 * np.cos(2.0 * np.pi * (0.4 * x - 0.6 * y) + 1.1)
    b = 0.30 + 0.12 * np.sin(2.0 * np.pi * (0.5 * y) + 2.0)
    return np.stack([r, g, b], -1)


def random_blobs(rng, spec, cam):
    blobs = []
    margin = 12.0
    for _ in range(spec.n_blobs):
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        sine_dir = rng.normal(size=2)
        sine_dir /= np.linalg.norm(sine_dir)
        blobs.append(Blob(
            center_px=(float(rng.uniform(margin, spec.width - margin)),
                       float(rng.uniform(margin, spec.height - margin))),
            depth=float(rng.uniform(2.5, 3.5)),
            sigma_px=(float(rng.uniform(2.5, 4.5)), float(rng.uniform(2.5, 4.5))),
            color=tuple(float(c) for c in rng.uniform(0.1, 0.95, 3)),
            opacity=0.95,
            linear_px=tuple(float(c) for c in 0.6 * spec.amplitude * direction),
            sine_px=tuple(float(c) for c in 0.4 * spec.amplitude * sine_dir),
            sine_freq=0.5,
            sine_phase=float(rng.uniform(0, 2 * math.pi)),
        ))
    return blobs


def _blob_world(blob, cam, t):
    u, v = blob.pixel_position(t)
    return cam.backproject(u, v, blob.depth)


def _render_blobs(truth, i, flow_to=None):
    """Composite blobs over the background plane at frame i; returns (rgb, depth, alpha, flow)."""
    cam = truth.cam
    spec = truth.spec
    blobs = truth.blobs
    H, W = cam.height, cam.width
    vs, us = np.mgrid[0:H, 0:W].astype(np.float64)
    bg = background_color(us, vs, W, H)
    if not blobs:
        return bg, np.full((H, W), spec.background_depth), np.zeros((H, W)), np.zeros((H, W, 2))
    means = torch.as_tensor(truth.blob_positions[i], dtype=DTYPE)
    covs = []
    for b in blobs:
        s = np.array([b.sigma_px[0], b.sigma_px[1], 0.5 * (b.sigma_px[0] + b.sigma_px[1])])
        covs.append(np.diag((s * b.depth / cam.fx) ** 2))
    cov3 = torch.as_tensor(np.stack(covs), dtype=DTYPE)
    mean2, cov2, depth, _ = project_gaussians(means, cov3, cam)
    opac = torch.as_tensor([b.opacity for b in blobs], dtype=DTYPE)
    colors = torch.as_tensor([b.color for b in blobs], dtype=DTYPE)
    flow2 = torch.zeros(len(blobs), 2, dtype=DTYPE)
    if flow_to is not None:
        flow2 = torch.as_tensor(truth.blob_flow(i, flow_to), dtype=DTYPE)
    splats = Splat2D(mean2, cov2, depth, opac, colors, flow2, torch.arange(len(blobs)))
    out = rasterize(splats, W, H)
    alpha = out.alpha.numpy()
    rest = (1.0 - alpha)
    rgb = out.rgb.numpy() + rest[..., None] * bg
    dep = out.depth.numpy() + rest * spec.background_depth
    return rgb, dep, alpha, out.flow.numpy()


def synthetic_camera(spec):
    return Camera(float(spec.width), float(spec.width), (spec.width - 1) / 2.0,
                  (spec.height - 1) / 2.0, spec.width, spec.height)


def make_synthetic(seed, spec=SyntheticSpec(), blobs=None):
    """Deterministic synthetic dataset of moving Gaussian blobs over a textured plane.

    Returns (Dataset, SyntheticTruth).  Forward and backward flow between
    consecutive frames is included in ``dataset.flows``.
    """
    rng = np.random.default_rng(seed)
    cam = synthetic_camera(spec)
    if blobs is None:
        blobs = random_blobs(rng, spec, cam)
    times = _normalize_times(np.arange(spec.n_frames, dtype=np.float64))
    pixels = np.array([[b.pixel_position(t) for b in blobs] for t in times]).reshape(
        spec.n_frames, len(blobs), 2)
    world = np.array([[_blob_world(b, cam, t) for b in blobs] for t in times]).reshape(
        spec.n_frames, len(blobs), 3)
    truth = SyntheticTruth([], world, pixels, blobs, cam, spec, times)

    frames = []
    H, W = spec.height, spec.width
    for i, t in enumerate(times):
        rgb, dep, _, _ = _render_blobs(truth, i)
        truth.depth.append(dep)
        frames.append(FrameBundle(np.clip(rgb, 0.0, 1.0), dep, np.ones((H, W), bool),
                                  np.zeros((H, W), bool), cam, float(t), i))
    flows = {}
    for i in range(spec.n_frames - 1):
        flows[(i, i + 1)] = truth.dense_flow(i, i + 1)
        flows[(i + 1, i)] = truth.dense_flow(i + 1, i)
    train, test = split_indices(spec.n_frames)
    return Dataset(frames, train, test, flows), truth


# --- initialization ---------------------------------------------------------

@dataclass
class InitConfig:
    stride: int = 4
    sh_degree: int = 3
    n_freq: int = 2
    opacity: float = 0.1
    time_sigma: float = 0.25
    scale_factor: float = 1.0
    seed: int = 0


def init_scene(frame0, stride=None, defaults=InitConfig()):
    """Back-project a pixel grid of the first frame into 4D primitives."""
    from scipy.spatial import cKDTree

    stride = defaults.stride if stride is None else int(stride)
    H, W = frame0.depth.shape
    vs, us = np.mgrid[0:H:stride, 0:W:stride]
    vs, us = vs.ravel(), us.ravel()
    ok = frame0.depth_mask[vs, us]
    vs, us = vs[ok], us[ok]
    if len(vs) == 0:
        raise EmptySceneError("no valid, non-tool depth pixels to initialize from")
    depth = frame0.depth[vs, us]
    points = frame0.cam.backproject(us.astype(np.float64), vs.astype(np.float64), depth)
    footprint = stride * depth / frame0.cam.fx
    if len(points) >= 2:
        k = min(4, len(points))
        dist, _ = cKDTree(points).query(points, k=k)
        spacing = np.sqrt(np.mean(dist[:, 1:] ** 2, axis=1))
        spacing = np.clip(spacing, 0.25 * footprint, 4.0 * footprint)
    else:
        spacing = footprint
    scale = np.log(np.maximum(spacing * defaults.scale_factor, 1e-6))

    rng = np.random.default_rng(defaults.seed)
    n = len(points)
    log_scale = np.c_[np.repeat(scale[:, None], 3, 1), np.full(n, math.log(defaults.time_sigma))]
    sh = np.zeros((n, defaults.n_freq + 1, num_coeffs(defaults.sh_degree), 3))
    sh[:, 0, 0, :] = (frame0.rgb[vs, us] - 0.5) / C0
    return Primitive4D.create(points, rng.uniform(0.0, 1.0, n), log_scale,
                              opacity=defaults.opacity, sh_coeffs=sh,
                              sh_degree=defaults.sh_degree, n_freq=defaults.n_freq)
