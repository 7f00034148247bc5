"""PSNR and SSIM over masked pixels."""

import math

import numpy as np
import torch

DTYPE = torch.float64
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class UndefinedMetricError(ValueError):
    pass


def _as_hwc(x):
    x = torch.as_tensor(x, dtype=DTYPE)
    return x.unsqueeze(-1) if x.dim() == 2 else x


def _mask(mask, shape):
    if mask is None:
        return torch.ones(shape, dtype=torch.bool)
    return torch.as_tensor(np.asarray(mask, dtype=bool))


def psnr(a, b, mask=None):
    a, b = _as_hwc(a), _as_hwc(b)
    m = _mask(mask, a.shape[:2])
    if not bool(m.any()):
        raise UndefinedMetricError("PSNR over an empty mask")
    mse = float(((a - b) ** 2)[m].mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2.0
    g = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x, win):
    """Separable 'valid' filtering of [C, H, W] with a 1D window."""
    k = win.numel()
    c = x.shape[0]
    x = torch.nn.functional.conv2d(x.unsqueeze(0), win.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    x = torch.nn.functional.conv2d(x, win.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)
    return x.squeeze(0)


def ssim_map(a, b):
    """Per-channel SSIM at every full-window centre; returns [C, H-10, W-10]."""
    a = _as_hwc(a).permute(2, 0, 1)
    b = _as_hwc(b).permute(2, 0, 1)
    win = gaussian_window()
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a * mu_a
    sbb = _filter_valid(b * b, win) - mu_b * mu_b
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def center_mask(mask, shape):
    r = SSIM_WINDOW // 2
    m = _mask(mask, shape)
    return m[r:shape[0] - r, r:shape[1] - r]


def ssim_tensor(a, b, mask=None):
    """Differentiable SSIM averaged over channels and masked window centres."""
    a = _as_hwc(a)
    smap = ssim_map(a, b)
    cm = center_mask(mask, a.shape[:2])
    if not bool(cm.any()):
        raise UndefinedMetricError("SSIM over an empty mask")
    return smap[:, cm].mean()


def ssim(a, b, mask=None):
    with torch.no_grad():
        return float(ssim_tensor(a, b, mask))
