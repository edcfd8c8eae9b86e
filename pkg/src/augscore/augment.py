"""Image augmentations with explicit magnitude maps and replayable records.

Images are numpy arrays of shape [H, W, C] with pixels in [0, 1].  Every
transform has a normalized magnitude m in [0, 1] and an explicit map from m
to its raw parameter; stochastic use draws a direction/value u in [-1, 1]
from a per-sample stream, grid use fixes u = +1 so a magnitude sweep is
deterministic.  Applying a transform yields an entry (id, magnitude, raw
params); replaying entries through ``apply_entry`` reruns the identical code
path, so records reproduce views bit for bit.

Geometry resamples bilinearly with half-pixel centers and edge clamping.
Every output is clamped back to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

TRANSFORM_IDS = ("crop_resize", "hflip", "brightness", "contrast", "saturation",
                 "hue", "grayscale", "gaussian_blur", "shear_x", "translate_x",
                 "posterize", "solarize")

# magnitude-parameterized transforms are identity at m = 0
MAGNITUDE_PARAMETERIZED = ("crop_resize", "brightness", "contrast", "saturation",
                           "hue", "gaussian_blur", "shear_x", "translate_x",
                           "posterize", "solarize")

_LUMA = np.array([0.299, 0.587, 0.114])


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"image must be [H,W,C] with C in (1,3), got {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image has non-finite pixels")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("pixels must lie in [0, 1]")
    return img.astype(np.float64) if img.dtype != np.float64 else img


@dataclass(frozen=True)
class AugEntry:
    """One applied transform: id, normalized magnitude, raw parameters."""
    transform_id: str
    magnitude: float
    params: tuple


@dataclass(frozen=True)
class AugRecord:
    """Ordered transform entries for one view; replays bit-exactly."""
    entries: tuple = ()


@dataclass(frozen=True)
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    record_a: AugRecord
    record_b: AugRecord
    source_index: int


@dataclass
class AugPolicy:
    """Stochastic view-sampling recipe (the SimCLR-style pipeline)."""
    view_size: int = 32
    crop_scale: tuple = (0.2, 1.0)
    crop_aspect: tuple = (3 / 4, 4 / 3)
    hflip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_strengths: tuple = (0.4, 0.4, 0.4, 0.1)
    grayscale_p: float = 0.2
    blur_p: float = 0.0

    def validate(self):
        for name, p in (("hflip_p", self.hflip_p), ("jitter_p", self.jitter_p),
                        ("grayscale_p", self.grayscale_p), ("blur_p", self.blur_p)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        sb, sc, ss, sh = self.jitter_strengths
        if not (0 <= sb <= 0.4 and 0 <= sc <= 0.4 and 0 <= ss <= 0.4 and 0 <= sh <= 0.1):
            raise ValueError("jitter strengths exceed the magnitude maps "
                             "(max 0.4, 0.4, 0.4, 0.1)")
        if not 0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0:
            raise ValueError(f"bad crop scale range {self.crop_scale}")
        if not 0 < self.crop_aspect[0] <= self.crop_aspect[1]:
            raise ValueError(f"bad crop aspect range {self.crop_aspect}")
        if self.view_size < 1:
            raise ValueError("view_size must be positive")
        return self


# ------------------------------------------------------------ pixel kernels

def _clamp01(img):
    return np.clip(img, 0.0, 1.0)


def _luma(img):
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ _LUMA


def _bilinear(img, ys, xs):
    """Sample img at float coords (edge clamp). ys: [H'], xs: [W']."""
    h, w = img.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    tl = img[y0[:, None], x0[None, :]]
    tr = img[y0[:, None], x1[None, :]]
    bl = img[y1[:, None], x0[None, :]]
    br = img[y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def _bilinear_grid(img, ycoords, xcoords):
    """Sample at per-pixel float coords [H',W'] (edge clamp)."""
    h, w = img.shape[:2]
    ys = np.clip(ycoords, 0.0, h - 1.0)
    xs = np.clip(xcoords, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    tl = img[y0, x0]
    tr = img[y0, x1]
    bl = img[y1, x0]
    br = img[y1, x1]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def _rgb_to_hsv(img):
    r, g, b = img[:, :, 0], img[:, :, 1], img[:, :, 2]
    mx = img.max(axis=2)
    mn = img.min(axis=2)
    diff = mx - mn
    safe = np.where(diff > 0, diff, 1.0)
    h = np.zeros_like(mx)
    is_r = (mx == r)
    is_g = (mx == g) & ~is_r
    is_b = ~(is_r | is_g)
    h = np.where(is_r, ((g - b) / safe) % 6.0, h)
    h = np.where(is_g, (b - r) / safe + 2.0, h)
    h = np.where(is_b, (r - g) / safe + 4.0, h)
    h = np.where(diff > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, diff / np.where(mx > 0, mx, 1.0), 0.0)
    return h, s, mx


def _hsv_to_rgb(h, s, v):
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=2)


def _require_color(img, tid):
    if img.shape[2] != 3:
        raise ValueError(f"{tid} requires a 3-channel image")


# ------------------------------------------------------ raw-parameter kernels

def _k_crop_resize(img, top, left, ch, cw, out_h, out_w):
    h, w = img.shape[:2]
    if ch == h and cw == w and out_h == h and out_w == w:
        return img.copy()
    ys = top + (np.arange(out_h) + 0.5) * (ch / out_h) - 0.5
    xs = left + (np.arange(out_w) + 0.5) * (cw / out_w) - 0.5
    return _clamp01(_bilinear(img, ys, xs))


def _k_hflip(img):
    return img[:, ::-1].copy()


def _k_brightness(img, factor):
    if factor == 1.0:
        return img.copy()
    return _clamp01(img * factor)


def _k_contrast(img, factor):
    if factor == 1.0:
        return img.copy()
    mean = _luma(img).mean()
    return _clamp01((img - mean) * factor + mean)


def _k_saturation(img, factor):
    if factor == 1.0:
        return img.copy()
    _require_color(img, "saturation")
    luma = _luma(img)[:, :, None]
    return _clamp01((img - luma) * factor + luma)


def _k_hue(img, turns):
    if turns == 0.0:
        return img.copy()
    _require_color(img, "hue")
    h, s, v = _rgb_to_hsv(img)
    return _clamp01(_hsv_to_rgb(h + turns, s, v))


def _k_grayscale(img):
    _require_color(img, "grayscale")
    luma = _luma(img)
    return np.repeat(luma[:, :, None], 3, axis=2)


def _k_gaussian_blur(img, sigma):
    if sigma <= 0.0:
        return img.copy()
    radius = int(math.ceil(2.0 * sigma))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    padded = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for k, tap in enumerate(taps):
        out += tap * padded[k:k + img.shape[0]]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for k, tap in enumerate(taps):
        out += tap * padded[:, k:k + img.shape[1]]
    return _clamp01(out)


def _k_shear_x(img, shear):
    if shear == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    cy = (h - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return _clamp01(_bilinear_grid(img, yy, xx - shear * (yy - cy)))


def _k_translate_x(img, shift):
    if shift == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return _clamp01(_bilinear_grid(img, yy, xx - shift))


def _k_posterize(img, bits):
    if bits >= 8:
        return img.copy()
    if bits < 1:
        raise ValueError(f"posterize bits must be >= 1, got {bits}")
    mask = (0xFF << (8 - int(bits))) & 0xFF
    q = np.floor(img * 255.0).astype(np.int64) & mask
    return _clamp01(q / 255.0)


def _k_solarize(img, threshold):
    if threshold >= 1.0:
        return img.copy()
    return _clamp01(np.where(img > threshold, 1.0 - img, img))


_KERNELS = {
    "crop_resize": _k_crop_resize, "hflip": _k_hflip, "brightness": _k_brightness,
    "contrast": _k_contrast, "saturation": _k_saturation, "hue": _k_hue,
    "grayscale": _k_grayscale, "gaussian_blur": _k_gaussian_blur,
    "shear_x": _k_shear_x, "translate_x": _k_translate_x,
    "posterize": _k_posterize, "solarize": _k_solarize,
}


def apply_entry(img: np.ndarray, entry: AugEntry) -> np.ndarray:
    """Replay one recorded entry from its raw parameters alone."""
    if entry.transform_id not in _KERNELS:
        raise ValueError(f"unknown transform {entry.transform_id!r}")
    return _KERNELS[entry.transform_id](img, *entry.params)


def apply_recorded(img: np.ndarray, record: AugRecord) -> np.ndarray:
    """Replay a full record; bit-identical to the original application."""
    out = check_image(img)
    for entry in record.entries:
        out = apply_entry(out, entry)
    return out


# ------------------------------------------------------------- magnitude maps

def _entry_for(img, tid: str, magnitude: float, u: float) -> AugEntry:
    """Map (magnitude, direction u) to raw parameters for one transform."""
    h, w = img.shape[:2]
    m = float(magnitude)
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"magnitude must be in [0,1], got {m}")
    eff = abs(m * u)
    if tid == "brightness":
        return AugEntry(tid, eff, (1.0 + 0.4 * m * u,))
    if tid == "contrast":
        return AugEntry(tid, eff, (1.0 + 0.4 * m * u,))
    if tid == "saturation":
        return AugEntry(tid, eff, (1.0 + 0.4 * m * u,))
    if tid == "hue":
        return AugEntry(tid, eff, (0.1 * m * u,))
    if tid == "shear_x":
        return AugEntry(tid, eff, (0.3 * m * u,))
    if tid == "translate_x":
        return AugEntry(tid, eff, (0.3 * m * u * w,))
    if tid == "gaussian_blur":
        return AugEntry(tid, m, (2.0 * m,))
    if tid == "posterize":
        return AugEntry(tid, m, (8 - int(math.floor(4.0 * m)),))
    if tid == "solarize":
        return AugEntry(tid, m, (1.0 - m,))
    if tid == "crop_resize":
        # grid semantics: centered crop of area fraction 1 - 0.8 m, square
        # aspect, resized back to the source resolution
        side_frac = math.sqrt(1.0 - 0.8 * m)
        ch = max(1, int(round(h * side_frac)))
        cw = max(1, int(round(w * side_frac)))
        top = (h - ch) // 2
        left = (w - cw) // 2
        return AugEntry(tid, m, (top, left, ch, cw, h, w))
    if tid == "hflip":
        return AugEntry(tid, 1.0, ())
    if tid == "grayscale":
        return AugEntry(tid, 1.0, ())
    raise ValueError(f"unknown transform {tid!r}")


def apply_transform(img: np.ndarray, tid: str, magnitude: float,
                    rng: Rng | None = None) -> tuple:
    """Apply one transform at the given magnitude.

    With ``rng`` the signed direction u is drawn uniformly from [-1, 1];
    without it the grid convention u = -1 applies (the attenuating edge of
    each signed range: darken, de-contrast, desaturate) and the result is
    deterministic.  Returns (image, entry).
    """
    img = check_image(img)
    u = rng.uniform(None, -1.0, 1.0) if rng is not None else -1.0
    entry = _entry_for(img, tid, magnitude, u)
    return apply_entry(img, entry), entry


def magnitude_grid(img: np.ndarray, id_x: str, id_y: str | None = None,
                   steps: int = 9) -> list:
    """Deterministic magnitude sweep(s) used by the observation analyses.

    1-D: [(m, image, record)] over m = linspace(0, 1, steps).  2-D: row-major
    [((m_i, m_j), image, record)] applying id_x at m_i then id_y at m_j.
    Signed transforms follow the fixed grid direction u = -1.
    """
    if steps < 1:
        raise ValueError("grid needs at least 1 step")
    img = check_image(img)
    mags = np.linspace(0.0, 1.0, steps)
    out = []
    if id_y is None:
        for m in mags:
            entry = _entry_for(img, id_x, float(m), -1.0)
            out.append((float(m), apply_entry(img, entry), AugRecord((entry,))))
        return out
    for mi in mags:
        e1 = _entry_for(img, id_x, float(mi), -1.0)
        first = apply_entry(img, e1)
        for mj in mags:
            e2 = _entry_for(first, id_y, float(mj), -1.0)
            out.append(((float(mi), float(mj)), apply_entry(first, e2),
                        AugRecord((e1, e2))))
    return out


# ------------------------------------------------------------- view sampling

def _sample_crop(img, policy: AugPolicy, rng: Rng) -> AugEntry:
    h, w = img.shape[:2]
    area = float(h * w)
    lo, hi = policy.crop_scale
    la, lb = math.log(policy.crop_aspect[0]), math.log(policy.crop_aspect[1])
    for _ in range(10):
        target = area * rng.uniform(None, lo, hi)
        aspect = math.exp(rng.uniform(None, la, lb))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = rng.randint(h - ch + 1)
            left = rng.randint(w - cw + 1)
            frac = (ch * cw) / area
            m = min(max((1.0 - frac) / 0.8, 0.0), 1.0)
            return AugEntry("crop_resize", m,
                            (top, left, ch, cw, policy.view_size, policy.view_size))
    # fallback: centered square crop (recorded like any other window)
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    m = min(max((1.0 - side * side / area) / 0.8, 0.0), 1.0)
    return AugEntry("crop_resize", m, (top, left, side, side,
                                       policy.view_size, policy.view_size))


def _sample_view(img, policy: AugPolicy, rng: Rng) -> tuple:
    entries = [_sample_crop(img, policy, rng)]
    out = apply_entry(img, entries[0])
    if rng.uniform() < policy.hflip_p:
        entries.append(AugEntry("hflip", 1.0, ()))
        out = apply_entry(out, entries[-1])
    if rng.uniform() < policy.jitter_p:
        sb, sc, ss, sh = policy.jitter_strengths
        for tid, strength, scale in (("brightness", sb, 0.4), ("contrast", sc, 0.4),
                                     ("saturation", ss, 0.4), ("hue", sh, 0.1)):
            if strength <= 0:
                continue
            u = rng.uniform(None, -1.0, 1.0)
            entry = _entry_for(out, tid, strength / scale, u)
            entries.append(entry)
            out = apply_entry(out, entry)
    if rng.uniform() < policy.grayscale_p:
        entries.append(AugEntry("grayscale", 1.0, ()))
        out = apply_entry(out, entries[-1])
    if rng.uniform() < policy.blur_p:
        m = rng.uniform(None, 0.05, 1.0)
        entry = _entry_for(out, "gaussian_blur", m, 1.0)
        entries.append(entry)
        out = apply_entry(out, entry)
    return out, AugRecord(tuple(entries))


def sample_view_pair(img: np.ndarray, source_index: int, epoch: int,
                     seed: int, policy: AugPolicy) -> ViewPair:
    """Two stochastic views of one source image.

    Per-view randomness comes from the stream (seed, epoch, source_index,
    view_index), so any view is reproducible in isolation.
    """
    img = check_image(img)
    policy.validate()
    va, ra = _sample_view(img, policy, Rng(seed, epoch, source_index, 0))
    vb, rb = _sample_view(img, policy, Rng(seed, epoch, source_index, 1))
    return ViewPair(view_a=va, view_b=vb, record_a=ra, record_b=rb,
                    source_index=source_index)
