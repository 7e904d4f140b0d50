"""Image containers, netpbm / float-map I/O, normalization and patch grids.

Supported containers:

* binary PGM (``P5``) at 8 or 16 bits, PPM (``P6``) at 8 or 16 bits.
  16-bit samples are big-endian as netpbm requires.
* float map: the ASCII header ``FLOATMAP w h\\n`` followed by ``w*h``
  little-endian float32 values in row-major order. Three-channel images
  use ``FLOATMAP w h 3\\n`` followed by the three planes one after another.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BitDepthMismatch, PatchTooLarge, ShapeMismatch, UnsupportedFormat

FORMATS = ("pgm8", "pgm16", "float")
COLOR_FORMATS = ("ppm8", "ppm16", "float")

_FLOAT_MAGIC = b"FLOATMAP"
_NETPBM_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


@dataclass
class ImagePlane:
    """Single-channel image, nominally in [0, 1]."""

    data: np.ndarray
    bit_depth: int = 32

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeMismatch(f"plane data must be 2-D, got shape {self.data.shape}")
        if self.bit_depth < 1:
            raise ValueError("bit_depth must be >= 1")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class ColorImage:
    """Three-channel image stored channel-first, shape ``(3, H, W)``."""

    data: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ShapeMismatch(f"color data must be (3, H, W), got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def planes(self) -> list[ImagePlane]:
        return [ImagePlane(c, self.bit_depth) for c in self.data]

    @classmethod
    def from_planes(cls, planes):
        shapes = {p.data.shape for p in planes}
        if len(planes) != 3 or len(shapes) != 1:
            raise ShapeMismatch("a color image needs three planes of equal size")
        return cls(np.stack([p.data for p in planes]), planes[0].bit_depth)

    def luma(self) -> ImagePlane:
        r, g, b = self.data
        return ImagePlane(0.299 * r + 0.587 * g + 0.114 * b, self.bit_depth)


@dataclass
class PatchView:
    """One cell of a non-overlapping patch grid."""

    grid_y: int
    grid_x: int
    top: int
    left: int
    size: int
    data: np.ndarray = field(repr=False)


def normalize_raw(raw, bit_depth):
    """Map integer codes to [0, 1] by ``raw * 2**-bit_depth``."""
    raw = np.asarray(raw)
    out = raw.astype(np.float64) * 2.0 ** (-bit_depth)
    return np.clip(out, 0.0, 1.0)


def _read_netpbm(blob: bytes):
    m = _NETPBM_HEADER.match(blob)
    if m is None:
        raise UnsupportedFormat("not a binary PGM/PPM or float map")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if not 0 < maxval < 65536:
        raise UnsupportedFormat(f"bad maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    payload = blob[m.end(): m.end() + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise UnsupportedFormat("truncated netpbm payload")
    arr = np.frombuffer(payload, dtype=dtype).astype(np.int64)
    if channels == 1:
        arr = arr.reshape(h, w)
    else:
        arr = arr.reshape(h, w, 3).transpose(2, 0, 1)
    return arr, maxval


def _read_floatmap(blob: bytes):
    end = blob.find(b"\n")
    parts = blob[:end].split()
    if len(parts) not in (3, 4) or parts[0] != _FLOAT_MAGIC:
        raise UnsupportedFormat("malformed FLOATMAP header")
    w, h = int(parts[1]), int(parts[2])
    channels = int(parts[3]) if len(parts) == 4 else 1
    count = w * h * channels
    payload = blob[end + 1:]
    if len(payload) != 4 * count:
        raise UnsupportedFormat("FLOATMAP payload size does not match header")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(channels, h, w)


def _read(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    return path.read_bytes()


def _to_unit(arr, maxval, bit_depth):
    if bit_depth is None:
        depth = int(maxval).bit_length()
        return np.clip(arr / float(maxval), 0.0, 1.0), depth
    if arr.size and arr.max() > 2 ** bit_depth - 1:
        raise BitDepthMismatch(
            f"sample value {arr.max()} exceeds 2^{bit_depth} - 1"
        )
    return normalize_raw(arr, bit_depth), bit_depth


def load_plane(path, bit_depth: int | None = None) -> ImagePlane:
    """Load a single-channel image normalized to [0, 1].

    With ``bit_depth`` set the samples are treated as raw sensor codes and
    scaled by ``2**-bit_depth``. Without it, integer samples are divided by
    the container's maxval (display convention), and float maps are read
    as-is.
    """
    blob = _read(path)
    if blob.startswith(_FLOAT_MAGIC):
        data = _read_floatmap(blob)
        if data.ndim != 2:
            raise UnsupportedFormat("expected a single-channel float map")
        return ImagePlane(data, 32)
    arr, maxval = _read_netpbm(blob)
    if arr.ndim != 2:
        raise UnsupportedFormat("expected a single-channel image (PGM)")
    data, depth = _to_unit(arr, maxval, bit_depth)
    return ImagePlane(data, depth)


def load_color(path) -> ColorImage:
    """Load a PPM or 3-channel float map. A PGM is replicated to gray RGB."""
    blob = _read(path)
    if blob.startswith(_FLOAT_MAGIC):
        data = _read_floatmap(blob)
        if data.ndim == 2:
            data = np.repeat(data[None], 3, axis=0)
        return ColorImage(data, 32)
    arr, maxval = _read_netpbm(blob)
    data, depth = _to_unit(arr, maxval, None)
    if data.ndim == 2:
        data = np.repeat(data[None], 3, axis=0)
    return ColorImage(data, depth)


def load_image(path, bit_depth: int | None = None):
    """Load whatever the file holds: an ImagePlane or a ColorImage."""
    blob = _read(path)
    if blob.startswith(_FLOAT_MAGIC):
        data = _read_floatmap(blob)
        return ImagePlane(data, 32) if data.ndim == 2 else ColorImage(data, 32)
    arr, maxval = _read_netpbm(blob)
    data, depth = _to_unit(arr, maxval, bit_depth)
    return ImagePlane(data, depth) if data.ndim == 2 else ColorImage(data, depth)


def _quantize(data, maxval):
    # round half down: 0.5 at 8 bits -> 127
    codes = np.ceil(np.clip(data, 0.0, 1.0) * maxval - 0.5)
    return np.clip(codes, 0, maxval)


def _write_floatmap(path, data):
    if data.ndim == 2:
        header = b"FLOATMAP %d %d\n" % (data.shape[1], data.shape[0])
    else:
        header = b"FLOATMAP %d %d %d\n" % (data.shape[2], data.shape[1], data.shape[0])
    Path(path).write_bytes(header + np.ascontiguousarray(data, dtype="<f4").tobytes())


def save_plane(plane: ImagePlane, path, format: str = "float") -> None:
    """Write a plane as ``pgm8``, ``pgm16`` or ``float``."""
    if format == "float":
        _write_floatmap(path, plane.data)
        return
    if format not in FORMATS:
        raise UnsupportedFormat(f"unknown plane format {format!r}")
    maxval = 255 if format == "pgm8" else 65535
    dtype = "u1" if maxval == 255 else ">u2"
    codes = _quantize(plane.data, maxval).astype(dtype)
    header = b"P5\n%d %d\n%d\n" % (plane.width, plane.height, maxval)
    Path(path).write_bytes(header + codes.tobytes())


def save_color(image: ColorImage, path, format: str = "ppm8") -> None:
    """Write a color image as ``ppm8``, ``ppm16`` or 3-channel ``float``."""
    if format == "float":
        _write_floatmap(path, image.data)
        return
    if format not in COLOR_FORMATS:
        raise UnsupportedFormat(f"unknown color format {format!r}")
    maxval = 255 if format == "ppm8" else 65535
    dtype = "u1" if maxval == 255 else ">u2"
    codes = _quantize(image.data.transpose(1, 2, 0), maxval).astype(dtype)
    header = b"P6\n%d %d\n%d\n" % (image.width, image.height, maxval)
    Path(path).write_bytes(header + codes.tobytes())


def save_image(image, path, format: str | None = None) -> None:
    if isinstance(image, ColorImage):
        save_color(image, path, format or "ppm8")
    else:
        save_plane(image, path, format or "float")


def patch_grid(plane: ImagePlane, patch_size: int) -> tuple[int, int]:
    if patch_size < 1 or patch_size > min(plane.width, plane.height):
        raise PatchTooLarge(
            f"patch size {patch_size} does not fit a {plane.width}x{plane.height} image"
        )
    return plane.height // patch_size, plane.width // patch_size


def partition_patches(plane: ImagePlane, patch_size: int) -> list[PatchView]:
    """Non-overlapping floor grid of square patches, in row-major order.

    Right and bottom remainders are dropped.
    """
    rows, cols = patch_grid(plane, patch_size)
    out = []
    for gy in range(rows):
        for gx in range(cols):
            top, left = gy * patch_size, gx * patch_size
            view = plane.data[top:top + patch_size, left:left + patch_size]
            out.append(PatchView(gy, gx, top, left, patch_size, view))
    return out


BAYER_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")


def bayer_split(plane: ImagePlane, pattern: str = "RGGB") -> dict[str, ImagePlane]:
    """Split a mosaic into its four 2x2-phase subplanes.

    Keys follow the pattern letters in raster order; the two greens are
    named ``G1`` (first row) and ``G2``.
    """
    pattern = pattern.upper()
    if pattern not in BAYER_PATTERNS:
        raise UnsupportedFormat(f"unknown Bayer pattern {pattern!r}")
    h, w = plane.height - plane.height % 2, plane.width - plane.width % 2
    names, seen_g = [], 0
    for ch in pattern:
        if ch == "G":
            seen_g += 1
            names.append(f"G{seen_g}")
        else:
            names.append(ch)
    phases = [(0, 0), (0, 1), (1, 0), (1, 1)]
    return {
        name: ImagePlane(plane.data[dy:h:2, dx:w:2].copy(), plane.bit_depth)
        for name, (dy, dx) in zip(names, phases)
    }
