"""Rational-dilation wavelet filter bank, separable decomposition and loss."""

from dataclasses import dataclass, field
import math

import numpy as np
import torch

DTYPE = torch.float64
BANDS = ("LL", "LH", "HL", "HH")
MIN_LEVEL_SIZE = 8


class ContractViolation(ValueError):
    pass


@dataclass(frozen=True)
class RationalFilterBank:
    q: int
    a: float
    sigma: float
    radius: int
    h0: np.ndarray = field(repr=False)
    h1: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)

    @property
    def taps(self):
        return np.arange(-self.radius, self.radius + 1)

    def tap(self, name, t):
        return float(getattr(self, name)[t + self.radius])


def default_radius(q):
    sigma = q / (q + 1)
    return math.ceil(6.0 * max(sigma, 2.0 * sigma)) + q


def design_filters(q, radius=None):
    """Time-domain low-pass, derivative-of-Gaussian and modulated-Gaussian filters."""
    if int(q) != q or q < 1:
        raise ContractViolation(f"q must be a positive integer, got {q}")
    q = int(q)
    a = (q + 1) / q
    sigma = 1.0 / a
    radius = default_radius(q) if radius is None else int(radius)
    t = np.arange(-radius, radius + 1, dtype=np.float64)

    gauss = np.exp(-0.5 * (t / sigma) ** 2)
    h0 = gauss / gauss.sum()
    dog = -t * gauss
    h1 = dog / np.abs(dog).sum()
    mod = np.sin(np.pi * t / a) * np.exp(-0.5 * (t / (2.0 * sigma)) ** 2)
    g = mod / np.abs(mod).sum()
    return RationalFilterBank(q, a, sigma, radius, h0, h1, g)


def _reflect_index(n, lo, hi):
    """Indices lo..hi-1 mapped into [0, n) with mirror reflection (edge not repeated)."""
    idx = np.arange(lo, hi)
    period = 2 * (n - 1)
    idx = np.abs(np.mod(idx, period))
    return np.where(idx >= n, period - idx, idx)


def _convolve_axis(x, taps, axis):
    taps = np.asarray(taps, dtype=np.float64)
    r = len(taps) // 2
    n = x.shape[axis]
    if n <= r:
        raise ContractViolation(
            f"signal length {n} along axis {axis} is not larger than filter radius {r}"
        )
    idx = torch.as_tensor(_reflect_index(n, -r, n + r))
    xp = torch.index_select(x, axis, idx)

    def shifted(k):
        return xp.narrow(axis, r + k, n)

    center = taps[r]
    symmetric = np.array_equal(taps, taps[::-1])
    antisymmetric = np.array_equal(taps, -taps[::-1])
    out = shifted(0) * center if center != 0.0 else torch.zeros_like(shifted(0))
    # out[i] = sum_k taps[k] * x[i - k], folded so odd filters cancel constants exactly.
    for k in range(1, r + 1):
        if symmetric:
            out = out + taps[r + k] * (shifted(-k) + shifted(k))
        elif antisymmetric:
            out = out + taps[r + k] * (shifted(-k) - shifted(k))
        else:
            out = out + taps[r + k] * shifted(-k) + taps[r - k] * shifted(k)
    return out


def convolve_sep(image, row_filter, col_filter):
    """Centred convolution along rows (last axis), then along columns (second-to-last axis).

    Borders use mirror padding.
    """
    x = torch.as_tensor(image, dtype=DTYPE)
    if not torch.isfinite(x).all():
        raise ContractViolation("image contains non-finite values")
    x = _convolve_axis(x, row_filter, x.dim() - 1)
    return _convolve_axis(x, col_filter, x.dim() - 2)


def resampled_size(n, a):
    return math.ceil(n / a - 1e-12)


def _resample_axis(x, a, axis):
    n = x.shape[axis]
    m = resampled_size(n, a)
    pos = (np.arange(m) + 0.5) * a - 0.5
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, max(n - 2, 0))
    w = pos - i0
    shape = [1] * x.dim()
    shape[axis] = m
    w = torch.as_tensor(w, dtype=DTYPE).reshape(shape)
    lo = torch.index_select(x, axis, torch.as_tensor(i0))
    hi = torch.index_select(x, axis, torch.as_tensor(np.minimum(i0 + 1, n - 1)))
    return lo + w * (hi - lo)


def resample_rational(field_, a):
    """Linear resampling of the last two axes onto ceil(dim/a) half-sample-centred points.

    Samples beyond the last input interval are linearly extrapolated, so affine
    signals are reproduced exactly.
    """
    if not 1.0 < a <= 2.0:
        raise ContractViolation(f"resampling factor must lie in (1, 2], got {a}")
    x = torch.as_tensor(field_, dtype=DTYPE)
    x = _resample_axis(x, a, x.dim() - 1)
    return _resample_axis(x, a, x.dim() - 2)


def decompose_level(image, bank):
    x = torch.as_tensor(image, dtype=DTYPE)
    if min(x.shape[-2:]) < MIN_LEVEL_SIZE:
        raise ContractViolation(f"level input {tuple(x.shape[-2:])} is smaller than 8x8")
    last = x.dim() - 1
    rows = {name: _convolve_axis(x, getattr(bank, name), last) for name in ("h0", "h1", "g")}
    col = last - 1
    bands = {
        "LL": _convolve_axis(rows["h0"], bank.h0, col),
        "LH": _convolve_axis(rows["h0"], bank.h1, col),
        "HL": _convolve_axis(rows["h1"], bank.h0, col),
        "HH": _convolve_axis(rows["g"], bank.g, col),
    }
    return {k: resample_rational(v, bank.a) for k, v in bands.items()}


@dataclass
class WaveletPyramid:
    levels: list  # list of {band: tensor}

    def shapes(self):
        return [{k: tuple(v.shape) for k, v in lvl.items()} for lvl in self.levels]


def decompose(image, bank, levels):
    x = torch.as_tensor(image, dtype=DTYPE)
    out = []
    for j in range(levels):
        if min(x.shape[-2:]) < MIN_LEVEL_SIZE:
            raise ContractViolation(
                f"level {j} input {tuple(x.shape[-2:])} is smaller than 8x8; too many levels"
            )
        bands = decompose_level(x, bank)
        out.append(bands)
        x = bands["LL"]
    return WaveletPyramid(out)


@dataclass(frozen=True)
class BandWeights:
    LL: float = 1.0
    LH: float = 1.0
    HL: float = 1.0
    HH: float = 0.5

    def get(self, band):
        return getattr(self, band)


def wavelet_loss(pyr_a, pyr_b, weights=BandWeights()):
    """Weighted sum over levels and bands of per-channel L2 norms of band differences.

    Bands of shape [C, h, w] contribute one norm per channel; [h, w] bands one norm.
    """
    if pyr_a.shapes() != pyr_b.shapes():
        raise ContractViolation("pyramid shapes differ")
    total = torch.zeros((), dtype=DTYPE)
    for la, lb in zip(pyr_a.levels, pyr_b.levels):
        for band in BANDS:
            lam = weights.get(band)
            if lam == 0.0:
                continue
            diff = la[band] - lb[band]
            norms = torch.linalg.vector_norm(diff, dim=(-2, -1))
            total = total + lam * norms.sum()
    return total


def image_wavelet_loss(a, b, bank, levels=2, weights=BandWeights()):
    """Wavelet loss between two channel-first images [C, H, W]."""
    return wavelet_loss(decompose(a, bank, levels), decompose(b, bank, levels), weights)
