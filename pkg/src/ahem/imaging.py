"""Image kernels and stochastic augmentation.

Images are float32 arrays of shape (H, W, 3) with RGB intensities in
[0, 1].  Every kernel is a pure function of its inputs; randomness enters
only through an explicit ``numpy.random.Generator``.  All interpolation
uses bilinear sampling with pixel centers at integer coordinates and zero
fill for reads outside the source image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AugmentationPolicy",
    "AugmentationParams",
    "WEAK",
    "MODERATE",
    "STRONG",
    "POLICY_PRESETS",
    "validate_image",
    "rgb_to_hsv",
    "hsv_to_rgb",
    "flip_horizontal",
    "rotate",
    "crop_with_offsets",
    "color_jitter",
    "resize_bilinear",
    "sample_augmentation",
    "flip_only_params",
    "apply_augmentation",
    "read_ppm",
    "write_ppm",
]


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check the (H, W, 3) unit-interval contract and return float32 view."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image must have positive size, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite intensities")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image intensities outside [0, 1]")
    return arr.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# augmentation policies


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ranges for one stochastic augmentation pattern.

    Crop offsets are whole pixels per edge (negative extends outward with
    zero padding).  Hue shift is on the [0, 1) hue circle.  Saturation and
    value scales are multiplicative and sampled log-uniformly so a scale
    and its reciprocal are equally likely.
    """

    crop_offset_range: tuple[float, float]
    flip_probability: float
    rotation_range: tuple[float, float]
    hue_range: tuple[float, float]
    saturation_scale_range: tuple[float, float]
    value_scale_range: tuple[float, float]

    def __post_init__(self):
        for name in ("crop_offset_range", "rotation_range", "hue_range",
                     "saturation_scale_range", "value_scale_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ValueError(f"{name} must be a finite ordered interval, got ({lo}, {hi})")
        if self.saturation_scale_range[0] <= 0 or self.value_scale_range[0] <= 0:
            raise ValueError("scale ranges must be strictly positive")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError(f"flip_probability must lie in [0, 1], got {self.flip_probability}")
        lo, hi = self.crop_offset_range
        if math.ceil(lo) > math.floor(hi):
            raise ValueError(f"crop_offset_range ({lo}, {hi}) contains no whole-pixel offset")


@dataclass(frozen=True)
class AugmentationParams:
    """One concrete draw from a policy: the arguments of apply_augmentation."""

    offsets: tuple[int, int, int, int]  # top, bottom, left, right
    flip: bool
    degrees: float
    hue_shift: float
    sat_scale: float
    val_scale: float

    @property
    def is_flip_only(self) -> bool:
        """True when every component other than the flip is an identity."""
        return (
            self.offsets == (0, 0, 0, 0)
            and self.degrees == 0.0
            and self.hue_shift == 0.0
            and self.sat_scale == 1.0
            and self.val_scale == 1.0
        )

    @property
    def is_identity(self) -> bool:
        return self.is_flip_only and not self.flip


WEAK = AugmentationPolicy(
    crop_offset_range=(-5, 5),
    flip_probability=0.5,
    rotation_range=(0.0, 0.0),
    hue_range=(-0.05, 0.05),
    saturation_scale_range=(0.67, 1.5),
    value_scale_range=(0.67, 1.5),
)

MODERATE = AugmentationPolicy(
    crop_offset_range=(-10, 10),
    flip_probability=0.5,
    rotation_range=(-5.0, 5.0),
    hue_range=(-0.1, 0.1),
    saturation_scale_range=(0.5, 2.0),
    value_scale_range=(0.5, 2.0),
)

STRONG = AugmentationPolicy(
    crop_offset_range=(-15, 15),
    flip_probability=0.5,
    rotation_range=(-10.0, 10.0),
    hue_range=(-0.15, 0.15),
    saturation_scale_range=(0.4, 2.5),
    value_scale_range=(0.4, 2.5),
)

POLICY_PRESETS = {"weak": WEAK, "moderate": MODERATE, "strong": STRONG}


# ---------------------------------------------------------------------------
# color space


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV with H in [0, 1) and S, V in [0, 1]."""
    img = np.asarray(image, dtype=np.float32)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    diff = maxc - minc

    v = maxc
    s = np.where(maxc > 0, diff / np.where(maxc > 0, maxc, 1.0), 0.0)

    h = np.zeros_like(maxc)
    chrom = diff > 0
    safe = np.where(chrom, diff, 1.0)
    is_r = chrom & (maxc == r)
    is_g = chrom & (maxc == g) & ~is_r
    is_b = chrom & ~is_r & ~is_g
    h = np.where(is_r, ((g - b) / safe) % 6.0, h)
    h = np.where(is_g, (b - r) / safe + 2.0, h)
    h = np.where(is_b, (r - g) / safe + 4.0, h)
    h = (h / 6.0) % 1.0
    return np.stack([h, s, v], axis=-1).astype(np.float32)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse hexcone conversion; output clamped to [0, 1]."""
    grid = np.asarray(hsv, dtype=np.float32)
    h, s, v = grid[..., 0], grid[..., 1], grid[..., 2]
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)

    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)

    r = np.choose(sector, [v, q, p, p, t, v])
    g = np.choose(sector, [t, v, v, q, p, p])
    b = np.choose(sector, [p, p, t, v, v, q])
    out = np.stack([r, g, b], axis=-1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# geometric kernels


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1, :])


def _gather_flat(stack: np.ndarray, sy: np.ndarray, sx: np.ndarray,
                 base: np.ndarray) -> np.ndarray:
    """Zero-fill bilinear sampling of an image stack at real positions.

    ``base`` carries per-image row offsets into the flattened stack so a
    whole batch resolves in one indexing pass.
    """
    h, w = stack.shape[1:3]
    flat = stack.reshape(-1, 3)
    y0f = np.floor(sy)
    x0f = np.floor(sx)
    fy = (sy - y0f).astype(np.float32)
    fx = (sx - x0f).astype(np.float32)
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    vy0 = (y0 >= 0) & (y0 < h)
    vy1 = (y1 >= 0) & (y1 < h)
    vx0 = (x0 >= 0) & (x0 < w)
    vx1 = (x1 >= 0) & (x1 < w)
    y0c = np.clip(y0, 0, h - 1) * w + base
    y1c = np.clip(y1, 0, h - 1) * w + base
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x1, 0, w - 1)
    gy = np.float32(1.0) - fy
    gx = np.float32(1.0) - fx
    res = (gy * gx * (vy0 & vx0))[..., None] * flat[y0c + x0c]
    res += (gy * fx * (vy0 & vx1))[..., None] * flat[y0c + x1c]
    res += (fy * gx * (vy1 & vx0))[..., None] * flat[y1c + x0c]
    res += (fy * fx * (vy1 & vx1))[..., None] * flat[y1c + x1c]
    return np.clip(res, 0.0, 1.0, out=res)


def _bilinear_gather(image: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample image at real positions (sy, sx); out-of-bounds corners read 0."""
    stack = np.ascontiguousarray(image, dtype=np.float32)[None]
    base = np.zeros((1, 1, 1), dtype=np.int64)
    return _gather_flat(stack, sy[None], sx[None], base)[0]


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center; bilinear, zero fill, shape preserved."""
    h, w = image.shape[:2]
    theta = math.radians(degrees)
    cos_t = math.cos(theta)
    sin_t = math.sin(theta)
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    rows = np.arange(h, dtype=np.float64)[:, None] - cy
    cols = np.arange(w, dtype=np.float64)[None, :] - cx
    sx = cos_t * cols + sin_t * rows + cx
    sy = -sin_t * cols + cos_t * rows + cy
    return _bilinear_gather(image, sy, sx)


def _resample_grid(n_out: int, n_in: int) -> np.ndarray:
    """Source coordinates spanning [0, n_in - 1] at n_out points."""
    if n_out == 1:
        return np.full(1, (n_in - 1) / 2.0)
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize; output grid spans the full source extent."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = image.shape[:2]
    if (out_h, out_w) == (h, w):
        return np.array(image, dtype=np.float32, copy=True)
    sy = _resample_grid(out_h, h)[:, None] + np.zeros((1, out_w))
    sx = _resample_grid(out_w, w)[None, :] + np.zeros((out_h, 1))
    return _bilinear_gather(image, sy, sx)


def crop_with_offsets(image: np.ndarray, offsets) -> np.ndarray:
    """Crop inward (positive offsets) or pad outward (negative), then
    resize the region back to the source shape.

    Offsets are whole pixels per edge in (top, bottom, left, right) order.
    """
    top, bottom, left, right = (int(o) for o in offsets)
    h, w = image.shape[:2]
    rh = h - top - bottom
    rw = w - left - right
    if rh < 1 or rw < 1:
        raise ValueError(
            f"crop offsets {offsets!r} leave a degenerate {rh}x{rw} region of a {h}x{w} image"
        )
    if (top, bottom, left, right) == (0, 0, 0, 0):
        return np.array(image, dtype=np.float32, copy=True)

    # Resampling the zero-padded region back to H x W is a single zero-fill
    # gather of the source at region coordinates shifted by the offsets.
    sy = (_resample_grid(h, rh) + top)[:, None] + np.zeros((1, w))
    sx = (_resample_grid(w, rw) + left)[None, :] + np.zeros((h, 1))
    return _bilinear_gather(image, sy, sx)


def color_jitter(image: np.ndarray, hue_shift: float, sat_scale: float,
                 val_scale: float) -> np.ndarray:
    """Shift hue on the circle, scale saturation and value with clamping."""
    if sat_scale <= 0 or val_scale <= 0:
        raise ValueError("saturation and value scales must be positive")
    hsv = rgb_to_hsv(image)
    hsv[..., 0] = (hsv[..., 0] + np.float32(hue_shift)) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * np.float32(sat_scale), 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * np.float32(val_scale), 0.0, 1.0)
    return hsv_to_rgb(hsv)


# ---------------------------------------------------------------------------
# sampling and composition


def sample_augmentation(policy: AugmentationPolicy,
                        rng: np.random.Generator) -> AugmentationParams:
    """Draw one parameter set from the policy.

    Draw order is fixed (offsets, flip, degrees, hue, saturation, value)
    so that a given stream state always yields the same parameters.
    """
    lo, hi = policy.crop_offset_range
    lo_i, hi_i = math.ceil(lo), math.floor(hi)
    offsets = tuple(int(v) for v in rng.integers(lo_i, hi_i + 1, size=4))
    flip = bool(rng.random() < policy.flip_probability)
    degrees = float(rng.uniform(*policy.rotation_range))
    hue_shift = float(rng.uniform(*policy.hue_range))
    s_lo, s_hi = policy.saturation_scale_range
    v_lo, v_hi = policy.value_scale_range
    sat_scale = float(np.exp(rng.uniform(np.log(s_lo), np.log(s_hi))))
    val_scale = float(np.exp(rng.uniform(np.log(v_lo), np.log(v_hi))))
    return AugmentationParams(offsets, flip, degrees, hue_shift, sat_scale, val_scale)


def flip_only_params(flip_probability: float,
                     rng: np.random.Generator) -> AugmentationParams:
    """Params whose only possible effect is one horizontal flip."""
    flip = bool(rng.random() < flip_probability)
    return AugmentationParams((0, 0, 0, 0), flip, 0.0, 0.0, 1.0, 1.0)


def apply_augmentation(image: np.ndarray, params: AugmentationParams) -> np.ndarray:
    """Apply crop, flip, rotation and color jitter in that order.

    Stages whose parameters are identities are skipped, so flip-only
    params reduce to exactly flip_horizontal and identity params to a copy.
    """
    out = image
    if params.offsets != (0, 0, 0, 0):
        out = crop_with_offsets(out, params.offsets)
    if params.flip:
        out = flip_horizontal(out)
    if params.degrees != 0.0:
        out = rotate(out, params.degrees)
    if params.hue_shift != 0.0 or params.sat_scale != 1.0 or params.val_scale != 1.0:
        out = color_jitter(out, params.hue_shift, params.sat_scale, params.val_scale)
    if out is image:
        out = np.array(image, dtype=np.float32, copy=True)
    return out


def _gather_stage(out: np.ndarray, grids: list) -> None:
    """Run a batch of per-image zero-fill gathers in one indexing pass."""
    if not grids:
        return
    k = len(grids)
    h, w = out.shape[1:3]
    idx = np.array([g[0] for g in grids])
    sy = np.stack([g[1] for g in grids])
    sx = np.stack([g[2] for g in grids])
    stack = np.ascontiguousarray(out[idx])
    base = (np.arange(k, dtype=np.int64) * (h * w))[:, None, None]
    out[idx] = _gather_flat(stack, sy, sx, base)


def apply_augmentation_batch(images: np.ndarray, params_list) -> np.ndarray:
    """Stage-batched equivalent of apply_augmentation over an image stack.

    Produces bit-identical pixels to mapping apply_augmentation over the
    stack; all images must share one shape.
    """
    out = np.array(images, dtype=np.float32, copy=True)
    k, h, w, _ = out.shape
    if len(params_list) != k:
        raise ValueError("one AugmentationParams per image required")

    crops = []
    for i, p in enumerate(params_list):
        if p.offsets == (0, 0, 0, 0):
            continue
        top, bottom, left, right = (int(o) for o in p.offsets)
        rh = h - top - bottom
        rw = w - left - right
        if rh < 1 or rw < 1:
            raise ValueError(
                f"crop offsets {p.offsets!r} leave a degenerate {rh}x{rw} region "
                f"of a {h}x{w} image")
        sy = np.broadcast_to((_resample_grid(h, rh) + top)[:, None], (h, w))
        sx = np.broadcast_to((_resample_grid(w, rw) + left)[None, :], (h, w))
        crops.append((i, sy, sx))
    _gather_stage(out, crops)

    flips = [i for i, p in enumerate(params_list) if p.flip]
    if flips:
        out[flips] = out[flips][:, :, ::-1, :]

    rots = []
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    rows = np.arange(h, dtype=np.float64)[:, None] - cy
    cols = np.arange(w, dtype=np.float64)[None, :] - cx
    for i, p in enumerate(params_list):
        if p.degrees == 0.0:
            continue
        theta = math.radians(p.degrees)
        cos_t = math.cos(theta)
        sin_t = math.sin(theta)
        rots.append((i, -sin_t * cols + cos_t * rows + cy,
                     cos_t * cols + sin_t * rows + cx))
    _gather_stage(out, rots)

    jits = [i for i, p in enumerate(params_list)
            if p.hue_shift != 0.0 or p.sat_scale != 1.0 or p.val_scale != 1.0]
    if jits:
        hues = np.array([params_list[i].hue_shift for i in jits], dtype=np.float32)
        sats = np.array([params_list[i].sat_scale for i in jits], dtype=np.float32)
        vals = np.array([params_list[i].val_scale for i in jits], dtype=np.float32)
        hsv = rgb_to_hsv(out[jits])
        hsv[..., 0] = (hsv[..., 0] + hues[:, None, None]) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * sats[:, None, None], 0.0, 1.0)
        hsv[..., 2] = np.clip(hsv[..., 2] * vals[:, None, None], 0.0, 1.0)
        out[jits] = hsv_to_rgb(hsv)
    return out


# ---------------------------------------------------------------------------
# PPM I/O


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit binary PPM (P6) into a unit-interval float32 image."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(data):
            raise ValueError(f"{path}: truncated PPM header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            pos = data.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            fields.append(data[pos:end])
            pos = end
    magic, w_s, h_s, maxval_s = fields
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w_s), int(h_s), int(maxval_s)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    raw = data[pos:pos + h * w * 3]
    if len(raw) != h * w * 3:
        raise ValueError(f"{path}: expected {h * w * 3} pixel bytes, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.astype(np.float32) / 255.0)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a unit-interval image as 8-bit binary PPM (P6)."""
    arr = validate_image(image)
    h, w = arr.shape[:2]
    bytes_ = np.round(arr * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes_.tobytes())
