"""Grayscale image container, normalization, and file I/O.

Images travel through the pipeline as float32 grids with a declared value
range. The raw-grid format is bit-exact and used wherever quantization would
disturb round trips; PNG (8/16-bit grayscale) is supported for interchange.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, RangeError, ShapeError

RAW_MAGIC = b"NACG"
RAW_VERSION = 1

PNG_FORMATS = {"png8": (8, 255), "png16": (16, 65535)}


@dataclass(frozen=True)
class ImageGrid:
    """2-D grayscale intensity grid with a declared (lo, hi) value range.

    `pixels` is always float32, height x width, row-major with top-left
    origin. `group` is an optional tag (e.g. patient id) used by the
    dataset splitter; it carries no pixel semantics.
    """

    pixels: np.ndarray
    value_range: tuple[float, float]
    id: str
    group: str | None = field(default=None)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ShapeError(f"image '{self.id}' must be 2-D, got {px.ndim}-D")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeError(f"image '{self.id}' must be at least 1x1, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise RangeError(f"image '{self.id}' contains non-finite pixels")
        object.__setattr__(self, "pixels", px)
        lo, hi = self.value_range
        object.__setattr__(self, "value_range", (float(lo), float(hi)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> "ImageGrid":
        return replace(self, pixels=np.asarray(pixels, dtype=np.float32))


def normalize(img: ImageGrid) -> ImageGrid:
    """Map pixels linearly from the declared range onto [0, 1]."""
    lo, hi = img.value_range
    if hi <= lo:
        raise RangeError(f"degenerate value range ({lo}, {hi}) for image '{img.id}'")
    if img.value_range == (0.0, 1.0):
        return img
    scaled = (img.pixels.astype(np.float64) - lo) / (hi - lo)
    return ImageGrid(scaled.astype(np.float32), (0.0, 1.0), img.id, img.group)


def denormalize(img: ImageGrid, target_range: tuple[float, float]) -> ImageGrid:
    """Inverse of :func:`normalize` for the given target range."""
    if img.value_range != (0.0, 1.0):
        raise RangeError(
            f"denormalize expects a (0, 1) image, got range {img.value_range}"
        )
    lo, hi = float(target_range[0]), float(target_range[1])
    if hi <= lo:
        raise RangeError(f"degenerate target range ({lo}, {hi})")
    scaled = img.pixels.astype(np.float64) * (hi - lo) + lo
    return ImageGrid(scaled.astype(np.float32), (lo, hi), img.id, img.group)


def clip_for_display(img: ImageGrid) -> ImageGrid:
    """Clamp a normalized image to [0, 1].

    Used for saving, visualization, and metric computation on corrupted
    inputs. Never applied inside the training-pair pipeline, where clamping
    would bias the noise mean.
    """
    return img.with_pixels(np.clip(img.pixels, 0.0, 1.0))


def load_image(path, id: str | None = None) -> ImageGrid:
    """Load a grayscale PNG (8/16-bit) or raw-grid file.

    Multi-channel images are rejected rather than converted. The value
    range is inferred from the PNG bit depth; raw grids always declare
    (0, 1).
    """
    path = Path(path)
    image_id = id if id is not None else path.stem
    try:
        head = path.open("rb").read(4)
    except OSError as exc:
        raise OSError(f"cannot read image file {path}: {exc}") from exc
    if head == RAW_MAGIC:
        return _load_raw(path, image_id)
    return _load_png(path, image_id)


def _load_png(path: Path, image_id: str) -> ImageGrid:
    try:
        with Image.open(path) as im:
            im.load()
            bands = im.getbands()
            if len(bands) != 1:
                raise FormatError(
                    f"{path}: expected single-channel grayscale, got {len(bands)} channels"
                )
            arr = np.asarray(im)
    except FormatError:
        raise
    except Image.UnidentifiedImageError as exc:
        raise FormatError(
            f"{path}: neither a raw-grid file (bad magic) nor a readable PNG"
        ) from exc
    except OSError as exc:
        raise OSError(f"cannot read image file {path}: {exc}") from exc
    if arr.dtype == np.uint8:
        hi = 255.0
    elif arr.dtype in (np.uint16, np.int32):
        hi = 65535.0
    else:
        raise FormatError(f"{path}: unsupported PNG sample type {arr.dtype}")
    return ImageGrid(arr.astype(np.float32), (0.0, hi), image_id)


def _load_raw(path: Path, image_id: str) -> ImageGrid:
    data = path.read_bytes()
    if len(data) < 13 or data[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: not a raw-grid file (bad magic)")
    version = data[4]
    if version != RAW_VERSION:
        raise FormatError(f"{path}: unsupported raw-grid version {version}")
    h, w = struct.unpack_from("<II", data, 5)
    payload = data[13:]
    if len(payload) != 4 * h * w:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {4 * h * w} for {h}x{w}"
        )
    pixels = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    return ImageGrid(pixels.astype(np.float32), (0.0, 1.0), image_id)


def save_image(img: ImageGrid, path, format: str = "raw") -> None:
    """Write an image as raw-grid (lossless) or quantized PNG.

    PNG quantization maps the declared range onto [0, 2^N - 1] and rounds
    half up; pixels must already lie inside the declared range (clip first
    via :func:`clip_for_display`).
    """
    path = Path(path)
    if format == "raw":
        _save_raw(img, path)
        return
    if format not in PNG_FORMATS:
        raise FormatError(f"unknown save format '{format}'")
    bits, qmax = PNG_FORMATS[format]
    lo, hi = img.value_range
    if hi <= lo:
        raise RangeError(f"degenerate value range ({lo}, {hi}) for image '{img.id}'")
    px = img.pixels
    if px.min() < lo or px.max() > hi:
        raise RangeError(
            f"image '{img.id}' has pixels outside its declared range ({lo}, {hi}); "
            "clip before saving to PNG"
        )
    scaled = (px.astype(np.float64) - lo) / (hi - lo) * qmax
    quantized = np.floor(scaled + 0.5)  # round half up
    if bits == 8:
        Image.fromarray(quantized.astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray(quantized.astype(np.uint16)).save(path)


def _save_raw(img: ImageGrid, path: Path) -> None:
    h, w = img.shape
    header = RAW_MAGIC + bytes([RAW_VERSION]) + struct.pack("<II", h, w)
    payload = np.ascontiguousarray(img.pixels, dtype="<f4").tobytes()
    path.write_bytes(header + payload)
