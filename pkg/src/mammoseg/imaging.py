"""ROI preprocessing, crop framing, mask morphology and binary PGM I/O.

Gray images are 2-D float64 arrays with values in [0, 1]; binary masks are
2-D uint8 arrays holding only 0 and 1.
"""
from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .errors import ContractViolation, FormatError

PathLike = Union[str, os.PathLike]


def is_mask(arr: np.ndarray) -> bool:
    return arr.dtype == bool or np.issubdtype(arr.dtype, np.integer)


def as_gray(arr) -> np.ndarray:
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim != 2:
        raise ContractViolation(f"gray image must be 2-D, got shape {img.shape}")
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ContractViolation("gray image values must lie in [0, 1]")
    return img


def as_mask(arr) -> np.ndarray:
    m = np.asarray(arr)
    if m.ndim != 2:
        raise ContractViolation(f"mask must be 2-D, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ContractViolation("mask must be two-valued {0, 1}")
    return m.astype(np.uint8)


# -- preprocessing ---------------------------------------------------------

def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian taps; radius floor(3*sigma), at least 1."""
    if sigma <= 0:
        raise ContractViolation(f"sigma must be positive, got {sigma}")
    radius = max(1, int(math.floor(3 * sigma)))
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(d * d) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_smooth(img, sigma: float = 0.5) -> np.ndarray:
    """Separable Gaussian blur with reflected borders."""
    img = as_gray(img)
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def equalize_histogram(img, bins: int = 256) -> np.ndarray:
    """Map each quantised level to its cumulative frequency.

    A constant image has no contrast to spread and maps to all zeros.
    """
    if bins < 2:
        raise ContractViolation(f"bins must be >= 2, got {bins}")
    img = as_gray(img)
    levels = np.rint(img * (bins - 1)).astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=bins)
    if np.count_nonzero(hist) <= 1:
        return np.zeros_like(img)
    cdf = np.cumsum(hist) / levels.size
    return cdf[levels]


def _resize_axis(arr: np.ndarray, out_n: int, axis: int) -> np.ndarray:
    in_n = arr.shape[axis]
    if in_n == out_n:
        return arr
    src = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
    src = np.clip(src, 0, in_n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_n - 1)
    frac = src - lo
    shape = [1, 1]
    shape[axis] = out_n
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1 - frac) + np.take(arr, hi, axis=axis) * frac


def resize_bilinear(img, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres.

    Masks (integer/bool input) come back as masks, re-thresholded at 0.5.
    """
    if out_w < 1 or out_h < 1:
        raise ContractViolation(f"output extents must be >= 1, got {out_w}x{out_h}")
    arr = np.asarray(img)
    mask = is_mask(arr)
    src = as_mask(arr).astype(np.float64) if mask else as_gray(arr)
    out = _resize_axis(_resize_axis(src, out_h, 0), out_w, 1)
    if mask:
        return (out >= 0.5).astype(np.uint8)
    return np.clip(out, 0.0, 1.0)


# -- framing ---------------------------------------------------------------

@dataclass(frozen=True)
class BoundingBox:
    center_x: float
    center_y: float
    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ContractViolation(f"box extents must be positive: {self}")

    @property
    def x0(self) -> float:
        return self.center_x - self.width / 2

    @property
    def y0(self) -> float:
        return self.center_y - self.height / 2

    @property
    def area(self) -> float:
        return self.width * self.height

    @classmethod
    def from_mask(cls, mask) -> "BoundingBox":
        """Tight frame around the foreground of ``mask``."""
        m = as_mask(mask)
        ys, xs = np.nonzero(m)
        if ys.size == 0:
            raise ContractViolation("cannot frame an empty mask")
        x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
        return cls((x0 + x1) / 2, (y0 + y1) / 2, float(x1 - x0), float(y1 - y0))


def _clip_span(center: float, size: float, limit: int):
    size = min(size, float(limit))
    lo = center - size / 2
    lo = min(max(lo, 0.0), limit - size)
    return lo + size / 2, size


def loose_frame_from_tight(tight: BoundingBox, img_w: int, img_h: int) -> BoundingBox:
    """Double the tight frame about its centre, then fit it inside the image.

    The doubled size is kept when it fits; the centre moves only as far as
    needed to bring the box inside.  Oversized extents are cut to the image.
    """
    if tight.x0 >= img_w or tight.y0 >= img_h or tight.x0 + tight.width <= 0 \
            or tight.y0 + tight.height <= 0:
        raise ContractViolation(f"tight box {tight} does not intersect a {img_w}x{img_h} image")
    cx, w = _clip_span(tight.center_x, 2 * tight.width, img_w)
    cy, h = _clip_span(tight.center_y, 2 * tight.height, img_h)
    return BoundingBox(cx, cy, w, h)


def crop(img: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Integer-pixel crop of ``box`` (rounded outward-neutral, clipped to the image)."""
    h, w = img.shape
    x0 = int(np.clip(round(box.x0), 0, w - 1))
    y0 = int(np.clip(round(box.y0), 0, h - 1))
    x1 = int(np.clip(round(box.x0 + box.width), x0 + 1, w))
    y1 = int(np.clip(round(box.y0 + box.height), y0 + 1, h))
    return img[y0:y1, x0:x1]


def preprocess_roi(img, box: Optional[BoundingBox] = None, size: int = 256,
                   sigma: float = 0.5, bins: int = 256) -> np.ndarray:
    """smooth -> equalise -> crop -> resize to ``size`` x ``size``."""
    out = equalize_histogram(gaussian_smooth(img, sigma), bins)
    if box is not None:
        out = crop(out, box)
    return resize_bilinear(out, size, size)


# -- morphology -------------------------------------------------------------

def _shifted_stack(m: np.ndarray, offsets):
    h, w = m.shape
    pad = max(max(abs(dy), abs(dx)) for dy, dx in offsets)
    p = np.pad(m, pad)
    return [p[pad + dy : pad + dy + h, pad + dx : pad + dx + w] for dy, dx in offsets]


def dilate(mask: np.ndarray, offsets) -> np.ndarray:
    out = np.zeros_like(mask)
    for s in _shifted_stack(mask, offsets):
        out |= s
    return out


def erode(mask: np.ndarray, offsets) -> np.ndarray:
    out = np.ones_like(mask)
    for s in _shifted_stack(mask, offsets):
        out &= s
    return out


SQUARE3 = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
# a 2x2 element has no centre; anchor is its top-left cell
SQUARE2_TOPLEFT = [(0, 0), (0, 1), (1, 0), (1, 1)]


def morph_cleanup(mask) -> np.ndarray:
    """3x3 closing, 2x2 erosion, 3x3 dilation; outside the image is background."""
    m = as_mask(mask)
    m = erode(dilate(m, SQUARE3), SQUARE3)
    m = erode(m, SQUARE2_TOPLEFT)
    return dilate(m, SQUARE3)


# -- PGM ------------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n\r]*[\n\r])*(\S+)")


def parse_pgm(data: bytes) -> np.ndarray:
    """Decode a binary (P5) PGM into float64 values in [0, 1]."""
    if len(data) < 2:
        raise FormatError("truncated PGM header", len(data))
    magic = data[:2]
    if magic in (b"P6", b"P3", b"P2", b"P1", b"P4"):
        raise FormatError(f"unsupported netpbm format {magic.decode()}: only binary grayscale P5 is read", 0)
    if magic != b"P5":
        raise FormatError(f"bad magic {magic!r}", 0)
    pos, fields = 2, []
    for name in ("width", "height", "maxval"):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"missing {name} in PGM header", pos)
        tok = m.group(1)
        if not tok.isdigit():
            raise FormatError(f"non-numeric {name} {tok!r}", m.start(1))
        fields.append(int(tok))
        pos = m.end(1)
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"bad PGM extents {width}x{height}", pos)
    if not 1 <= maxval <= 65535:
        raise FormatError(f"bad PGM maxval {maxval}", pos)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace before PGM payload", pos)
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(data) - pos < need:
        raise FormatError(f"truncated PGM payload: need {need} bytes, have {len(data) - pos}", len(data))
    raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    if raw.max(initial=0) > maxval:
        raise FormatError("PGM sample exceeds maxval", pos)
    return (raw.astype(np.float64) / maxval).reshape(height, width)


def encode_pgm(img) -> bytes:
    """P5, maxval 255, round-half-up quantisation; masks are written as 0/255."""
    arr = np.asarray(img)
    vals = as_mask(arr).astype(np.float64) if is_mask(arr) else as_gray(arr)
    q = np.floor(vals * 255 + 0.5).astype(np.uint8)
    h, w = q.shape
    return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def read_pgm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return parse_pgm(data)
    except FormatError as exc:
        raise exc.prefixed(os.fspath(path)) from None


def write_pgm(img, path: PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img))


def read_mask(path: PathLike) -> np.ndarray:
    return (read_pgm(path) >= 0.5).astype(np.uint8)
