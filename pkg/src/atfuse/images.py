"""Grayscale image containers, bit-exact PGM I/O, and patch sampling.

Binary PGM (P5, maxval 255) is the interchange format: an 8-bit raster loads
to k/255 float32 pixels and saves back to the identical bytes. 8-bit
grayscale PNG is supported as a convenience through Pillow; anything that is
not single-channel 8-bit is rejected rather than silently converted.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


class ImageFormatError(ValueError):
    """Input bytes do not describe a supported grayscale image."""


@dataclass(frozen=True)
class GrayImage:
    """A single-channel image, float32 pixels in [0, 1], row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.size == 0:
            raise ImageFormatError("expected a non-empty 2-d array, got shape %s" % (px.shape,))
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ImageFormatError("pixels must be finite and within [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class ImagePair:
    """Registered infrared/visible images of identical dimensions."""

    ir: GrayImage
    vi: GrayImage
    name: str = ""

    def __post_init__(self):
        if self.ir.pixels.shape != self.vi.pixels.shape:
            raise ImageFormatError(
                "pair %r: ir %s vs vi %s" % (self.name, self.ir.pixels.shape, self.vi.pixels.shape))


@dataclass(frozen=True)
class PatchSet:
    """Aligned ir/vi crops plus where each one came from.

    ``origins[i]`` is (pair_index, top, left) for crop i; ir and vi stacks
    share that geometry, so the crops stay registered.
    """

    ir: np.ndarray
    vi: np.ndarray
    origins: list[tuple[int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.ir.shape[0]


# -- PGM ----------------------------------------------------------------------


def _read_pgm_tokens(raw: bytes, count: int) -> tuple[list[int], int]:
    """Read whitespace/comment-delimited header integers, return them and the offset."""
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        if i >= len(raw):
            raise ImageFormatError("truncated header: expected %d fields" % count)
        ch = raw[i:i + 1]
        if ch == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace() and raw[j:j + 1] != b"#":
                j += 1
            tok = raw[i:j]
            if not tok.isdigit():
                raise ImageFormatError("bad header field %r" % tok.decode("ascii", "replace"))
            tokens.append(int(tok))
            i = j
    # Exactly one whitespace byte separates the header from the raster.
    if i >= len(raw) or not raw[i:i + 1].isspace():
        raise ImageFormatError("missing separator before raster")
    return tokens, i + 1


def load_pgm(path: str | os.PathLike) -> GrayImage:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise ImageFormatError("%s: bad magic %r, expected P5" % (path, raw[:2]))
    (width, height, maxval), offset = _read_pgm_tokens(raw[2:], 3)
    offset += 2
    if maxval != 255:
        raise ImageFormatError("%s: unsupported maxval %d, expected 255" % (path, maxval))
    expected = width * height
    raster = raw[offset:offset + expected]
    if len(raster) != expected:
        raise ImageFormatError(
            "%s: raster has %d bytes, expected %d" % (path, len(raster), expected))
    levels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return GrayImage(levels.astype(np.float32) / 255.0)


def save_pgm(image: GrayImage | np.ndarray, path: str | os.PathLike) -> None:
    levels = quantize(image)
    header = b"P5\n%d %d\n255\n" % (levels.shape[1], levels.shape[0])
    Path(path).write_bytes(header + levels.tobytes())


def quantize(image: GrayImage | np.ndarray) -> np.ndarray:
    """Map [0,1] floats to uint8 levels: clamp, scale by 255, round half up."""
    px = image.pixels if isinstance(image, GrayImage) else np.asarray(image, dtype=np.float32)
    px = np.clip(px, 0.0, 1.0)
    return np.floor(px.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


# -- PNG ----------------------------------------------------------------------


def load_png(path: str | os.PathLike) -> GrayImage:
    with PILImage.open(path) as im:
        if im.mode != "L":
            raise ImageFormatError(
                "%s: mode %r, only 8-bit grayscale PNG is supported" % (path, im.mode))
        levels = np.asarray(im, dtype=np.uint8)
    return GrayImage(levels.astype(np.float32) / 255.0)


def save_png(image: GrayImage | np.ndarray, path: str | os.PathLike) -> None:
    PILImage.fromarray(quantize(image), mode="L").save(path, format="PNG")


# -- dispatch and corpus ------------------------------------------------------


def load_gray(path: str | os.PathLike) -> GrayImage:
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return load_pgm(path)
    if suffix == ".png":
        return load_png(path)
    raise ImageFormatError("%s: unsupported extension %r" % (path, suffix))


def save_gray(image: GrayImage | np.ndarray, path: str | os.PathLike) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        save_pgm(image, path)
    elif suffix == ".png":
        save_png(image, path)
    else:
        raise ImageFormatError("%s: unsupported extension %r" % (path, suffix))


def load_corpus(root: str | os.PathLike) -> list[ImagePair]:
    """Load ``root/ir/NAME.*`` and ``root/vi/NAME.*`` matched by stem, sorted."""
    root = Path(root)
    ir_dir, vi_dir = root / "ir", root / "vi"
    for sub in (ir_dir, vi_dir):
        if not sub.is_dir():
            raise ImageFormatError("corpus subdirectory not found: %s" % sub)
    ir_files = {p.stem: p for p in sorted(ir_dir.iterdir()) if p.suffix.lower() in (".pgm", ".png")}
    vi_files = {p.stem: p for p in sorted(vi_dir.iterdir()) if p.suffix.lower() in (".pgm", ".png")}
    missing = sorted(set(ir_files) ^ set(vi_files))
    if missing:
        raise ImageFormatError("unpaired corpus entries: %s" % ", ".join(missing))
    if not ir_files:
        raise ImageFormatError("corpus at %s has no image pairs" % root)
    return [ImagePair(load_gray(ir_files[s]), load_gray(vi_files[s]), name=s)
            for s in sorted(ir_files)]


def random_patches(pairs: list[ImagePair], patch: int = 32, count: int = 1,
                   seed: int = 0) -> PatchSet:
    """Crop ``count`` aligned ir/vi patches at uniform offsets from a seeded RNG.

    Every draw picks a pair index, then a top-left offset uniform over the
    valid range; identical geometry is applied to both modalities. An image
    smaller than the patch is an error naming both sizes.
    """
    if not pairs:
        raise ImageFormatError("no image pairs to sample from")
    for pair in pairs:
        if pair.ir.height < patch or pair.ir.width < patch:
            raise ImageFormatError(
                "pair %r is %dx%d, smaller than patch %d"
                % (pair.name, pair.ir.height, pair.ir.width, patch))
    rng = np.random.default_rng(seed)
    ir = np.empty((count, patch, patch), dtype=np.float32)
    vi = np.empty((count, patch, patch), dtype=np.float32)
    origins: list[tuple[int, int, int]] = []
    for i in range(count):
        k = int(rng.integers(0, len(pairs)))
        pair = pairs[k]
        top = int(rng.integers(0, pair.ir.height - patch + 1))
        left = int(rng.integers(0, pair.ir.width - patch + 1))
        ir[i] = pair.ir.pixels[top:top + patch, left:left + patch]
        vi[i] = pair.vi.pixels[top:top + patch, left:left + patch]
        origins.append((k, top, left))
    return PatchSet(ir=ir, vi=vi, origins=origins)
