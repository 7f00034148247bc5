"""Loss assembly, gradients, Adam, density control and the training loop."""

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
import csv
import json
import logging
import math
import os

import numpy as np
import torch

from . import metrics
from .datasets import InitConfig, init_scene
from .flowsup import consistency_mask, epe, flow_loss, CONSISTENCY_ALPHA, CONSISTENCY_BETA
from .gaussian4d import DTYPE, Primitive4D, cov4_of, normalize_quaternions_
from .rasterizer import render
from .rwavelet import BandWeights, design_filters, image_wavelet_loss
from .scene_io import save_scene

log = logging.getLogger(__name__)

LOSS_NAMES = ("rgb", "depth", "flow", "wavelet")
CSV_COLUMNS = ("iteration", "L_rgb", "L_depth", "L_flow", "L_wavelet",
               "psnr_holdout", "ssim_holdout", "epe_holdout")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(f"non-finite gradient for primitives {self.indices[:20]}")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class LossWeights:
    lambda_rgb: float = 1.0
    lambda_depth: float = 0.5
    lambda_flow: float = 0.02
    lambda_wavelet: float = 0.1
    bands: BandWeights = field(default_factory=BandWeights)

    def __post_init__(self):
        vals = [self.lambda_rgb, self.lambda_depth, self.lambda_flow, self.lambda_wavelet]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")

    def of(self, name):
        return getattr(self, "lambda_" + name)


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lambda_ssim: float = 0.2
    wavelet_q: int = 2
    wavelet_levels: int = 2


@dataclass
class FramePair:
    first: object  # FrameBundle rendered and supervised
    second: object  # FrameBundle giving the flow target time/camera
    flow: object = None  # FlowField first -> second
    flow_mask: np.ndarray = None

    @classmethod
    def build(cls, dataset, i, j, alpha=CONSISTENCY_ALPHA, beta=CONSISTENCY_BETA):
        first, second = dataset.frames[i], dataset.frames[j]
        fwd, bwd = dataset.flow(i, j), dataset.flow(j, i)
        mask = None
        if fwd is not None:
            mask = fwd.valid.copy() if bwd is None else consistency_mask(fwd, bwd, alpha, beta)
            mask &= ~first.tool_mask
        return cls(first, second, fwd, mask)


@dataclass
class LossResult:
    total: torch.Tensor
    components: dict  # name -> tensor
    render: object = None

    def floats(self):
        return {k: v.item() for k, v in self.components.items()}


# --- loss terms -------------------------------------------------------------

def _t(x):
    return torch.as_tensor(x, dtype=DTYPE) if not torch.is_tensor(x) else x


def rgb_loss(rendered, observed, mask=None, lambda_ssim=0.2):
    """(1 - l) * masked L1 + l * (1 - SSIM over masked window centres)."""
    r, o = _t(rendered), _t(observed)
    m = torch.ones(r.shape[:2], dtype=torch.bool) if mask is None else torch.as_tensor(np.asarray(mask, bool))
    if not bool(m.any()):
        return torch.zeros((), dtype=DTYPE)
    l1 = (r - o).abs()[m].mean()
    if lambda_ssim == 0.0:
        return l1
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - metrics.ssim_tensor(r, o, m.numpy()))


def depth_loss(rendered_depth, observed_depth, mask=None, alpha=None):
    """Masked mean |depth - observed|; ``alpha`` turns composited depth into a weighted mean."""
    d = _t(rendered_depth)
    if alpha is not None:
        d = d / _t(alpha).clamp_min(1e-3)
    o = _t(observed_depth)
    m = torch.ones(d.shape, dtype=torch.bool) if mask is None else torch.as_tensor(np.asarray(mask, bool))
    if not bool(m.any()):
        return torch.zeros((), dtype=DTYPE)
    return (d - o).abs()[m].mean()


_BANKS = {}


def filter_bank(q):
    if q not in _BANKS:
        _BANKS[q] = design_filters(q)
    return _BANKS[q]


def compute_losses(scene, pair, cfg=LossConfig(), need=LOSS_NAMES):
    """Render ``pair.first`` (with flow towards ``pair.second``) and evaluate each loss term."""
    fr = pair.first
    flow_pair = None
    if pair.second is not None:
        flow_pair = (fr.time, pair.second.time, fr.cam, pair.second.cam)
    out = render(scene, fr.cam, fr.time, flow_pair)
    valid = fr.valid_pixels
    zero = torch.zeros((), dtype=DTYPE)
    comps = {}
    comps["rgb"] = rgb_loss(out.rgb, fr.rgb, valid, cfg.lambda_ssim) if "rgb" in need else zero
    comps["depth"] = (depth_loss(out.depth, fr.depth, fr.depth_mask, alpha=out.alpha)
                      if "depth" in need else zero)
    if "flow" in need and pair.flow is not None and pair.flow_mask is not None:
        comps["flow"] = flow_loss(out.flow, pair.flow, pair.flow_mask)
    else:
        comps["flow"] = zero
    if "wavelet" in need:
        vm = torch.as_tensor(valid.astype(np.float64)).unsqueeze(-1)
        a = (out.rgb * vm).permute(2, 0, 1)
        b = (torch.as_tensor(fr.rgb, dtype=DTYPE) * vm).permute(2, 0, 1)
        comps["wavelet"] = image_wavelet_loss(a, b, filter_bank(cfg.wavelet_q),
                                              cfg.wavelet_levels, cfg.weights.bands)
    else:
        comps["wavelet"] = zero
    return out, comps


def total_loss(scene, pair, cfg=LossConfig()):
    """Weighted objective; terms with zero weight are reported but not differentiated."""
    w = cfg.weights
    need = tuple(n for n in LOSS_NAMES if w.of(n) > 0.0)
    out, comps = compute_losses(scene, pair, cfg, need=LOSS_NAMES)
    total = torch.zeros((), dtype=DTYPE)
    for name in need:
        total = total + w.of(name) * comps[name]
    return LossResult(total, comps, out)


# --- gradients --------------------------------------------------------------

def zeros_like_scene(scene):
    return scene.map(lambda v: torch.zeros_like(v))


def backward(scene, pair, cfg=LossConfig()):
    """Reverse-mode gradient of the total loss w.r.t. every primitive field.

    Returns (GradientSet as a Primitive4D of partials, LossResult).
    """
    params = scene.detach().requires_grad_()
    res = total_loss(params, pair, cfg)
    if res.render.mean2 is not None and res.render.mean2.requires_grad:
        res.render.mean2.retain_grad()
    if res.total.requires_grad:
        res.total.backward()
    grads = params.map(lambda v: v.grad if v.grad is not None else torch.zeros_like(v))
    check_finite(grads)
    return grads, res


def check_finite(grads):
    bad = torch.zeros(grads.count, dtype=torch.bool)
    for v in grads.as_dict().values():
        bad |= ~torch.isfinite(v.reshape(grads.count, -1)).all(-1)
    if bool(bad.any()):
        raise NonFiniteGradientError(torch.nonzero(bad).flatten().tolist())


def flatten(scene):
    return torch.cat([v.reshape(-1) for v in scene.as_dict().values()])


def unflatten(vec, like):
    out, i = {}, 0
    for k, v in like.as_dict().items():
        n = v.numel()
        out[k] = vec[i:i + n].reshape(v.shape)
        i += n
    return Primitive4D(**out)


# --- Adam -------------------------------------------------------------------

DEFAULT_LR = {
    "mu_x": 1.6e-4,
    "mu_t": 1e-3,
    "log_scale": 5e-3,
    "rot_left": 1e-3,
    "rot_right": 1e-3,
    "logit_opacity": 0.05,
    "sh_dc": 2.5e-3,
    "sh_rest": 2.5e-3 / 20.0,
    "phases": 2.5e-3,
}


@dataclass
class AdamHyper:
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    position_lr_final_ratio: float = 0.01
    spatial_scale: float = 1.0
    max_steps: int = 0  # length of the position lr decay; 0 disables decay


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, scene):
        return cls({k: torch.zeros_like(v) for k, v in scene.as_dict().items()},
                   {k: torch.zeros_like(v) for k, v in scene.as_dict().items()})

    def select(self, keep):
        return AdamState({k: v[keep] for k, v in self.m.items()},
                         {k: v[keep] for k, v in self.v.items()}, self.step)

    def extend(self, n_new):
        pad = lambda v: torch.cat([v, torch.zeros((n_new,) + v.shape[1:], dtype=v.dtype)])
        return AdamState({k: pad(v) for k, v in self.m.items()},
                         {k: pad(v) for k, v in self.v.items()}, self.step)


def position_lr(hyper, step):
    base = hyper.lr["mu_x"] * hyper.spatial_scale
    if hyper.max_steps <= 0:
        return base
    frac = min(max(step / hyper.max_steps, 0.0), 1.0)
    final = base * hyper.position_lr_final_ratio
    return math.exp((1 - frac) * math.log(base) + frac * math.log(final))


def _lr_tensor(name, v, hyper, step):
    if name == "mu_x":
        return position_lr(hyper, step)
    if name == "sh_coeffs":
        lr = torch.full_like(v, hyper.lr["sh_rest"])
        lr[:, 0, 0, :] = hyper.lr["sh_dc"]
        return lr
    return hyper.lr[name]


def optimizer_step(params, grads, state, hyper=AdamHyper()):
    """One Adam update in place; quaternions are renormalized afterwards."""
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.as_dict().items():
            g = getattr(grads, name)
            m = state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            v = state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            lr = _lr_tensor(name, p, hyper, state.step)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + hyper.eps))
    normalize_quaternions_(params)
    return params, state


# --- density control --------------------------------------------------------

@dataclass
class DensityConfig:
    start: int = 200
    stop: int = 1500
    every: int = 100
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    percent_dense: float = 0.01
    split_count: int = 2
    split_shrink: float = 1.6
    max_primitives: int = 512


@dataclass
class GradStats:
    accum: torch.Tensor
    denom: torch.Tensor

    @classmethod
    def zeros(cls, n):
        return cls(torch.zeros(n, dtype=DTYPE), torch.zeros(n, dtype=DTYPE))

    def add(self, mean2_grad, visible, width, height):
        g = mean2_grad.detach() * torch.tensor([0.5 * width, 0.5 * height], dtype=DTYPE)
        norm = torch.linalg.vector_norm(g, dim=-1)
        self.accum += torch.where(visible, norm, torch.zeros_like(norm))
        self.denom += visible.to(DTYPE)

    def mean(self):
        return self.accum / self.denom.clamp_min(1.0)


def density_control(scene, grad_stats, iteration, extent, cfg=DensityConfig(), rng=None, state=None):
    """Clone/split high-gradient primitives and prune transparent ones.

    Returns (scene, state, counts) where counts reports clone/split/prune numbers.
    """
    rng = np.random.default_rng(iteration) if rng is None else rng
    scene = scene.detach()
    n = scene.count
    avg = grad_stats.mean()
    big = torch.exp(scene.log_scale[:, :3]).max(-1).values > cfg.percent_dense * extent
    hot = avg >= cfg.grad_threshold
    room = max(cfg.max_primitives - n, 0)
    hot_idx = torch.nonzero(hot).flatten()
    if len(hot_idx) > 0:
        # Split adds split_count - 1 net primitives, clone adds one.
        order = hot_idx[torch.argsort(-avg[hot_idx], stable=True)]
        chosen, used = [], 0
        for i in order.tolist():
            cost = cfg.split_count - 1 if bool(big[i]) else 1
            if used + cost > room:
                continue
            chosen.append(i)
            used += cost
        hot = torch.zeros(n, dtype=torch.bool)
        hot[chosen] = True
    clone = hot & ~big
    split = hot & big

    parts = [scene]
    if bool(clone.any()):
        parts.append(scene[clone].detach())
    if bool(split.any()):
        parts.append(_split(scene[split], cfg, rng))
    grown = Primitive4D.cat(parts)
    n_new = grown.count - n
    keep = torch.ones(grown.count, dtype=torch.bool)
    keep[:n] = ~split
    keep &= grown.opacity >= cfg.prune_opacity
    result = grown[keep]
    if state is not None:
        state = state.extend(n_new).select(keep)
    counts = {"clone": int(clone.sum()), "split": int(split.sum()),
              "prune": int((~keep).sum()) - int(split.sum())}
    return result, state, counts


def _split(sub, cfg, rng):
    k = cfg.split_count
    rep = sub.map(lambda v: v.repeat_interleave(k, dim=0))
    cov = cov4_of(rep)
    chol = torch.linalg.cholesky(cov)
    eps = torch.as_tensor(rng.standard_normal((rep.count, 4)), dtype=DTYPE)
    offset = (chol @ eps.unsqueeze(-1)).squeeze(-1)
    rep.mu_x = rep.mu_x + offset[:, :3]
    rep.log_scale = rep.log_scale.clone()
    rep.log_scale[:, :3] -= math.log(cfg.split_shrink)
    return rep


# --- training loop ----------------------------------------------------------

@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 2000
    eval_every: int = 200
    loss: LossConfig = field(default_factory=LossConfig)
    adam: AdamHyper = field(default_factory=AdamHyper)
    density: DensityConfig = field(default_factory=DensityConfig)
    init: InitConfig = field(default_factory=InitConfig)
    consistency_alpha: float = CONSISTENCY_ALPHA
    consistency_beta: float = CONSISTENCY_BETA
    bidirectional_pairs: bool = True

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


def _from_dict(cls, d):
    kwargs = {}
    names = {f.name: f for f in fields(cls)}
    for k, v in d.items():
        if k not in names:
            raise KeyError(f"unknown config key {cls.__name__}.{k}")
        default = getattr(cls(), k) if k != "bands" else BandWeights()
        if is_dataclass(default) and isinstance(v, dict):
            kwargs[k] = _from_dict(type(default), v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


@dataclass
class FitResult:
    scene: Primitive4D
    rows: list
    final: dict
    counts: list = field(default_factory=list)


def scene_extent(scene):
    with torch.no_grad():
        c = scene.mu_x.mean(0)
        return float(torch.linalg.vector_norm(scene.mu_x - c, dim=-1).max()) * 1.1 + 1e-6


def training_pairs(dataset, bidirectional=True):
    train = set(dataset.train)
    pairs = []
    for i in sorted(train):
        if i + 1 in train:
            pairs.append((i, i + 1))
            if bidirectional:
                pairs.append((i + 1, i))
    return pairs


def holdout_pair(dataset, k):
    n = len(dataset.frames)
    j = k + 1 if k + 1 < n else k - 1
    return j


def evaluate(scene, dataset, indices=None):
    """Mean PSNR / SSIM / EPE over held-out frames (EPE NaN without reference flow)."""
    indices = dataset.test if indices is None else indices
    ps, ss, es = [], [], []
    with torch.no_grad():
        for k in indices:
            fr = dataset.frames[k]
            j = holdout_pair(dataset, k)
            other = dataset.frames[j]
            out = render(scene, fr.cam, fr.time, (fr.time, other.time, fr.cam, other.cam))
            rgb = out.rgb.clamp(0.0, 1.0).numpy()
            valid = fr.valid_pixels
            ps.append(metrics.psnr(rgb, fr.rgb, valid))
            ss.append(metrics.ssim(rgb, fr.rgb, valid))
            gt = dataset.flow(k, j)
            if gt is not None:
                es.append(epe(out.flow.numpy(), gt.uv, gt.valid & valid))
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
    return {"psnr": mean(ps), "ssim": mean(ss), "epe": mean(es)}


def configure_threads():
    n = os.environ.get("ENDOWAVE_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _fmt(x):
    return "inf" if x == math.inf else repr(float(x))


def fit(dataset, config=TrainConfig(), out_dir=None, scene=None):
    """Optimize a 4D scene on ``dataset``; writes checkpoints and metrics.csv into ``out_dir``."""
    configure_threads()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if len(dataset.frames) < 8:
        raise ValueError("fit needs at least 8 frames")
    if scene is None:
        scene = init_scene(dataset.frames[0], defaults=replace(config.init, seed=config.seed))
    scene = scene.detach()
    extent = scene_extent(scene)
    hyper = replace(config.adam, spatial_scale=extent * config.adam.spatial_scale,
                    max_steps=config.adam.max_steps or config.iterations)
    state = AdamState.zeros(scene)
    stats = GradStats.zeros(scene.count)
    pair_ids = training_pairs(dataset, config.bidirectional_pairs)
    if not pair_ids:
        raise ValueError("no consecutive training frame pairs")
    pairs = {ij: FramePair.build(dataset, *ij, config.consistency_alpha, config.consistency_beta)
             for ij in pair_ids}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(config.to_dict(), fh, indent=1, sort_keys=True)

    rows, counts_log = [], []
    window = {k: [] for k in LOSS_NAMES}
    csv_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    ckpt = os.path.join(out_dir, "checkpoint.ew4d") if out_dir else None

    def emit(it):
        m = evaluate(scene, dataset)
        row = {"iteration": it}
        for k in LOSS_NAMES:
            row["L_" + k] = float(np.mean(window[k])) if window[k] else float("nan")
            window[k].clear()
        row.update(psnr_holdout=m["psnr"], ssim_holdout=m["ssim"], epe_holdout=m["epe"])
        rows.append(row)
        log.info("iter %d: %s", it, {k: round(v, 5) for k, v in row.items() if k != "iteration"})
        if csv_path:
            _write_csv(csv_path, rows)
        if ckpt:
            save_scene(scene, ckpt)

    emit(0)
    for it in range(1, config.iterations + 1):
        ij = pair_ids[int(rng.integers(len(pair_ids)))]
        params = scene.requires_grad_()
        res = total_loss(params, pairs[ij], config.loss)
        if not math.isfinite(res.total.item()):
            raise TrainingDiverged(f"non-finite loss at iteration {it}; last good checkpoint: {ckpt}")
        mean2 = res.render.mean2
        if mean2.requires_grad:
            mean2.retain_grad()
        for v in params.as_dict().values():
            v.grad = None
        if res.total.requires_grad:
            res.total.backward()
        grads = params.map(lambda v: v.grad if v.grad is not None else torch.zeros_like(v))
        try:
            check_finite(grads)
        except NonFiniteGradientError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}; last good checkpoint: {ckpt}") from exc
        if mean2.grad is not None:
            cam = pairs[ij].first.cam
            stats.add(mean2.grad, res.render.visible, cam.width, cam.height)
        for k, v in res.floats().items():
            window[k].append(v)

        scene = scene.detach()
        scene, state = optimizer_step(scene, grads, state, hyper)

        d = config.density
        if d.start <= it <= d.stop and it % d.every == 0:
            scene, state, counts = density_control(scene, stats, it, extent, d, rng, state)
            counts_log.append({"iteration": it, "count": scene.count, **counts})
            stats = GradStats.zeros(scene.count)
        if it % config.eval_every == 0 or it == config.iterations:
            emit(it)

    if out_dir:
        save_scene(scene, os.path.join(out_dir, "scene.ew4d"))
    final = rows[-1] if rows else {}
    return FitResult(scene.detach(), rows, final, counts_log)


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r["iteration"]] + [_fmt(r[c]) for c in CSV_COLUMNS[1:]])
