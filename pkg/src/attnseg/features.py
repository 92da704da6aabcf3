"""Classical engineered features: Gabor bank, Sobel, Canny, HOG and
color/intensity, plus annotation-guided masking.

Every extractor maps a float image in [0, 1] to a :class:`FeatureStack`
whose channels are normalized to [0, 1]. Grayscale inputs are ``(H, W)``,
RGB inputs ``(H, W, 3)``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from skimage.color import rgb2hsv

from .blocks import ConfigError

# Fixed channel order used by ``extract``.
EXTRACTOR_ORDER = ("gabor", "sobel", "canny", "hog", "color")

LUMA = np.array([0.299, 0.587, 0.114])

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

_FLAT_TOL = 1e-9


class InputError(ValueError):
    """Raised when an input image or mask violates its contract."""


@dataclass(frozen=True)
class GaborParams:
    orientations: tuple[float, ...] = (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4)
    wavelengths: tuple[float, ...] = (4.0, 8.0)
    # sigma = sigma_scale * wavelength unless ``sigma`` is set explicitly
    sigma: float | None = None
    sigma_scale: float = 0.56
    gamma: float = 0.5
    kernel_size: int = 9
    phase: float = 0.0
    include_imaginary: bool = False

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("Gabor kernel_size must be odd")
        if not self.orientations or not self.wavelengths:
            raise ConfigError("Gabor bank needs at least one orientation and wavelength")
        if any(w <= 1 for w in self.wavelengths):
            raise ConfigError("Gabor wavelengths must exceed 1 pixel")
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError("Gabor sigma must be positive")
        if self.sigma_scale <= 0 or self.gamma <= 0:
            raise ConfigError("Gabor sigma_scale and gamma must be positive")

    def sigma_for(self, wavelength: float) -> float:
        return self.sigma if self.sigma is not None else self.sigma_scale * wavelength

    @property
    def num_channels(self) -> int:
        per = 2 if self.include_imaginary else 1
        return per * len(self.orientations) * len(self.wavelengths)


@dataclass(frozen=True)
class CannyParams:
    gaussian_sigma: float = 1.4
    kernel_size: int = 5
    low_ratio: float = 0.1
    high_ratio: float = 0.3

    def __post_init__(self):
        if not 0 < self.low_ratio < self.high_ratio <= 1:
            raise ConfigError("Canny thresholds need 0 < low_ratio < high_ratio <= 1")
        if self.gaussian_sigma <= 0 or self.kernel_size % 2 == 0:
            raise ConfigError("Canny smoothing needs sigma > 0 and an odd kernel")


@dataclass(frozen=True)
class HOGParams:
    cell_size: int = 8
    bins: int = 9
    block_size: int = 2
    eps: float = 1e-6


@dataclass(frozen=True)
class ColorParams:
    std_window: int = 7


@dataclass
class FeatureStack:
    """Channel-first stack ``(C, H, W)`` with a name and provenance per channel."""

    data: np.ndarray
    names: list[str]
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise InputError(f"feature stack must be (C, H, W), got {self.data.shape}")
        if len(self.names) != self.data.shape[0]:
            raise InputError("one name per channel required")
        if not self.provenance:
            self.provenance = [""] * len(self.names)

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @staticmethod
    def concat(stacks: Sequence["FeatureStack"]) -> "FeatureStack":
        return FeatureStack(
            np.concatenate([s.data for s in stacks], axis=0),
            [n for s in stacks for n in s.names],
            [p for s in stacks for p in s.provenance],
        )


def params_hash(obj) -> str:
    payload = json.dumps(asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj,
                         sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def normalize01(channel: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a (numerically) constant channel becomes zeros."""
    lo, hi = float(channel.min()), float(channel.max())
    if hi - lo <= _FLAT_TOL * max(1.0, abs(hi), abs(lo)):
        return np.zeros_like(channel, dtype=np.float64)
    return (channel - lo) / (hi - lo)


def _as_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InputError(f"expected a single-channel image, got shape {img.shape}")
    return img


def to_gray(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InputError(f"expected an RGB image (H, W, 3), got {rgb.shape}")
    return rgb @ LUMA


def _stack(channels, names, extractor, params) -> FeatureStack:
    tag = f"{extractor}:{params_hash(params) if params is not None else '-'}"
    return FeatureStack(np.stack(channels), list(names), [tag] * len(names))


# --- Gabor -----------------------------------------------------------------

def gabor_kernel(wavelength: float, theta: float, p: GaborParams, imaginary: bool = False) -> np.ndarray:
    """Gabor kernel with its DC component removed so flat regions respond with 0.

    ``theta = 0`` responds to intensity variation along x (vertical stripes).
    """
    half = p.kernel_size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    xr = x * math.cos(theta) + y * math.sin(theta)
    yr = -x * math.sin(theta) + y * math.cos(theta)
    sigma = p.sigma_for(wavelength)
    envelope = np.exp(-(xr ** 2 + (p.gamma * yr) ** 2) / (2 * sigma ** 2))
    arg = 2 * math.pi * xr / wavelength + p.phase
    carrier = np.sin(arg) if imaginary else np.cos(arg)
    k = envelope * carrier
    return k - k.mean()


def gabor_responses(img, p: GaborParams = GaborParams()) -> tuple[np.ndarray, list[str]]:
    """Raw absolute Gabor responses, one per (orientation, wavelength[, part])."""
    img = _as_gray(img)
    out, names = [], []
    for theta in p.orientations:
        for lam in p.wavelengths:
            parts = [False, True] if p.include_imaginary else [False]
            for imag in parts:
                k = gabor_kernel(lam, theta, p, imaginary=imag)
                out.append(np.abs(ndimage.correlate(img, k, mode="reflect")))
                deg = round(math.degrees(theta))
                names.append(f"gabor_t{deg}_l{lam:g}" + ("_im" if imag else ""))
    return np.stack(out), names


def gabor_bank(img, p: GaborParams = GaborParams()) -> FeatureStack:
    raw, names = gabor_responses(img, p)
    return _stack([normalize01(c) for c in raw], names, "gabor", p)


# --- Sobel -----------------------------------------------------------------

def sobel_gradients(img) -> tuple[np.ndarray, np.ndarray]:
    """Raw (Gx, Gy) with reflection padding. Gx grows left to right, Gy top to bottom."""
    img = _as_gray(img)
    gx = ndimage.correlate(img, SOBEL_X, mode="reflect")
    gy = ndimage.correlate(img, SOBEL_Y, mode="reflect")
    return gx, gy


def sobel_edges(img) -> FeatureStack:
    gx, gy = sobel_gradients(img)
    mag = np.hypot(gx, gy)
    chans = [normalize01(np.abs(gx)), normalize01(np.abs(gy)), normalize01(mag)]
    return _stack(chans, ["sobel_gx", "sobel_gy", "sobel_mag"], "sobel", None)


# --- Canny -----------------------------------------------------------------

@dataclass
class CannyStages:
    smoothed: np.ndarray
    magnitude: np.ndarray
    angle: np.ndarray
    suppressed: np.ndarray
    strong: np.ndarray
    weak: np.ndarray
    edges: np.ndarray


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def non_max_suppression(mag: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Keep pixels that are maxima along the quantized gradient direction.

    Ties are broken asymmetrically (strict against the forward neighbour,
    non-strict against the backward one) so a plateau two pixels wide thins
    to one pixel.
    """
    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    deg = np.rad2deg(angle) % 180.0
    # direction index: 0 -> 0 deg, 1 -> 45, 2 -> 90, 3 -> 135
    sector = (np.floor((deg + 22.5) / 45.0).astype(int)) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        bwd = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        sel = sector == s
        keep |= sel & (mag > fwd) & (mag >= bwd)
    return np.where(keep & (mag > 0), mag, 0.0)


def canny_stages(img, p: CannyParams = CannyParams()) -> CannyStages:
    img = _as_gray(img)
    smoothed = ndimage.correlate(img, gaussian_kernel(p.kernel_size, p.gaussian_sigma), mode="reflect")
    gx = ndimage.correlate(smoothed, SOBEL_X, mode="reflect")
    gy = ndimage.correlate(smoothed, SOBEL_Y, mode="reflect")
    mag = np.hypot(gx, gy)
    angle = np.arctan2(gy, gx)
    suppressed = non_max_suppression(mag, angle)
    peak = float(mag.max())
    if peak <= _FLAT_TOL:
        empty = np.zeros_like(img, dtype=bool)
        return CannyStages(smoothed, mag, angle, suppressed, empty, empty, empty)
    strong = suppressed >= p.high_ratio * peak
    weak = (suppressed >= p.low_ratio * peak) & ~strong
    # hysteresis: keep 8-connected components of candidates containing a strong pixel
    labels, n = ndimage.label(strong | weak, structure=np.ones((3, 3), dtype=int))
    if n:
        has_strong = np.zeros(n + 1, dtype=bool)
        has_strong[np.unique(labels[strong])] = True
        has_strong[0] = False
        edges = has_strong[labels]
    else:
        edges = np.zeros_like(strong)
    return CannyStages(smoothed, mag, angle, suppressed, strong, weak, edges)


def canny_edges(img, p: CannyParams = CannyParams()) -> np.ndarray:
    """Binary edge map (bool, H x W)."""
    return canny_stages(img, p).edges


def canny_stack(img, p: CannyParams = CannyParams()) -> FeatureStack:
    return _stack([canny_edges(img, p).astype(np.float64)], ["canny"], "canny", p)


# --- HOG -------------------------------------------------------------------

def hog_cells(img, p: HOGParams = HOGParams()) -> np.ndarray:
    """Block-normalized cell histograms, shape (cells_y, cells_x, bins).

    Unsigned orientations in [0, 180) with bin centres at 0, 20, ... deg and
    linear vote interpolation between neighbouring bins. Each cell's value is
    the average of its normalized copies over all 2x2 blocks that contain it.
    """
    img = _as_gray(img)
    h, w = img.shape
    cs = p.cell_size
    if h % cs or w % cs:
        raise InputError(f"image {img.shape} not divisible by cell size {cs}")
    gx = ndimage.correlate1d(img, [-1.0, 0.0, 1.0], axis=1, mode="reflect")
    gy = ndimage.correlate1d(img, [-1.0, 0.0, 1.0], axis=0, mode="reflect")
    mag = np.hypot(gx, gy)
    ori = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    width = 180.0 / p.bins
    pos = ori / width
    lo = np.floor(pos).astype(int) % p.bins
    hi = (lo + 1) % p.bins
    frac = pos - np.floor(pos)
    ny, nx = h // cs, w // cs
    cell_idx = (np.arange(h)[:, None] // cs) * nx + (np.arange(w)[None, :] // cs)
    hist = np.zeros((ny * nx, p.bins))
    np.add.at(hist, (cell_idx.ravel(), lo.ravel()), (mag * (1 - frac)).ravel())
    np.add.at(hist, (cell_idx.ravel(), hi.ravel()), (mag * frac).ravel())
    hist = hist.reshape(ny, nx, p.bins)

    b = p.block_size
    if ny < b or nx < b:
        norm = np.sqrt((hist ** 2).sum(axis=2, keepdims=True) + p.eps ** 2)
        return hist / norm
    acc = np.zeros_like(hist)
    cnt = np.zeros((ny, nx, 1))
    for by in range(ny - b + 1):
        for bx in range(nx - b + 1):
            block = hist[by:by + b, bx:bx + b]
            normed = block / np.sqrt((block ** 2).sum() + p.eps ** 2)
            acc[by:by + b, bx:bx + b] += normed
            cnt[by:by + b, bx:bx + b] += 1
    return acc / cnt


def hog_map(img, p: HOGParams = HOGParams()) -> FeatureStack:
    """HOG channels upsampled to pixel resolution (nearest cell).

    Images whose sides are not multiples of the cell size are reflect-padded
    up to the next multiple and the result cropped back.
    """
    img = _as_gray(img)
    h, w = img.shape
    cs = p.cell_size
    ph, pw = (-h) % cs, (-w) % cs
    padded = np.pad(img, ((0, ph), (0, pw)), mode="reflect") if (ph or pw) else img
    cells = hog_cells(padded, p)
    full = np.repeat(np.repeat(cells, cs, axis=0), cs, axis=1)[:h, :w]
    chans = [np.clip(full[..., k], 0.0, 1.0) for k in range(p.bins)]
    names = [f"hog_{round(k * 180 / p.bins)}" for k in range(p.bins)]
    return _stack(chans, names, "hog", p)


# --- color / intensity -------------------------------------------------------

def color_intensity(rgb, p: ColorParams = ColorParams()) -> FeatureStack:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InputError(f"expected an RGB image (H, W, 3), got {rgb.shape}")
    hsv = rgb2hsv(rgb)
    gray = rgb @ LUMA
    mean = ndimage.uniform_filter(gray, p.std_window, mode="reflect")
    sq = ndimage.uniform_filter(gray ** 2, p.std_window, mode="reflect")
    std = np.sqrt(np.clip(sq - mean ** 2, 0.0, None))
    # hue, saturation and value are already in [0, 1]; only local std is rescaled
    chans = [hsv[..., 0], hsv[..., 1], hsv[..., 2], normalize01(std)]
    return _stack(chans, ["hue", "saturation", "value", "local_std"], "color", p)


# --- masking and orchestration ---------------------------------------------

def mask_guided(stack: FeatureStack, mask) -> FeatureStack:
    mask = np.asarray(mask)
    if mask.shape != stack.shape:
        raise InputError(f"mask shape {mask.shape} does not match stack {stack.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise InputError("mask must be binary (0/1)")
    return FeatureStack(stack.data * mask[None].astype(np.float64), list(stack.names), list(stack.provenance))


@dataclass(frozen=True)
class ExtractorParams:
    gabor: GaborParams = GaborParams()
    canny: CannyParams = CannyParams()
    hog: HOGParams = HOGParams()
    color: ColorParams = ColorParams()


def canonical_extractors(enabled: Iterable[str]) -> tuple[str, ...]:
    enabled = set(enabled)
    unknown = enabled - set(EXTRACTOR_ORDER)
    if unknown:
        raise ConfigError(f"unknown extractors: {sorted(unknown)}")
    if not enabled:
        raise ConfigError("at least one extractor must be enabled")
    return tuple(e for e in EXTRACTOR_ORDER if e in enabled)


def channel_count(enabled: Iterable[str], params: ExtractorParams = ExtractorParams()) -> int:
    sizes = {
        "gabor": params.gabor.num_channels,
        "sobel": 3,
        "canny": 1,
        "hog": params.hog.bins,
        "color": 4,
    }
    return sum(sizes[e] for e in canonical_extractors(enabled))


def extract(rgb, enabled: Iterable[str], mask=None,
            params: ExtractorParams = ExtractorParams()) -> FeatureStack:
    """Run the enabled extractors and concatenate in :data:`EXTRACTOR_ORDER`."""
    order = canonical_extractors(enabled)
    rgb = np.asarray(rgb, dtype=np.float64)
    gray = to_gray(rgb)
    run = {
        "gabor": lambda: gabor_bank(gray, params.gabor),
        "sobel": lambda: sobel_edges(gray),
        "canny": lambda: canny_stack(gray, params.canny),
        "hog": lambda: hog_map(gray, params.hog),
        "color": lambda: color_intensity(rgb, params.color),
    }
    stack = FeatureStack.concat([run[e]() for e in order])
    if mask is not None:
        stack = mask_guided(stack, mask)
    return stack
