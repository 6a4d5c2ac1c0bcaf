"""Images, luminance, block partitioning and the fold/unfold used for deblocking.

Images are plain float64 arrays in ``[0, 1]``: ``H x W`` for grayscale or
``H x W x 3`` for RGB.  Patch grids are laid out in raster order (row-major
over grid positions) and each patch is vectorised row-major.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


class ImageFormatError(ValueError):
    pass


def as_image(arr) -> np.ndarray:
    """Validate an array as an image and clamp it to ``[0, 1]``."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if not (img.ndim == 2 or (img.ndim == 3 and img.shape[2] == 3)):
        raise ImageFormatError(f"image must be H x W or H x W x 3, got shape {img.shape}")
    if img.size == 0:
        raise ImageFormatError("empty image")
    return np.clip(img, 0.0, 1.0)


def to_luminance(img) -> np.ndarray:
    """Full-range Y of YCbCr; single-channel input passes through."""
    img = as_image(img)
    if img.ndim == 2:
        return img
    return img @ LUMA


@dataclass
class PatchGrid:
    side: int
    rows: int
    cols: int
    patches: np.ndarray  # (rows * cols) x side**2
    height: int
    width: int

    @property
    def count(self) -> int:
        return self.rows * self.cols

    @property
    def n(self) -> int:
        return self.side * self.side

    def with_patches(self, patches: np.ndarray) -> "PatchGrid":
        patches = np.asarray(patches, dtype=np.float64)
        if patches.shape != self.patches.shape:
            raise ValueError(f"expected patches of shape {self.patches.shape}, got {patches.shape}")
        return PatchGrid(self.side, self.rows, self.cols, patches, self.height, self.width)


def partition(img, side: int) -> PatchGrid:
    """Reflect-pad bottom/right to a multiple of ``side`` and cut into raster-ordered patches."""
    if side < 1:
        raise ValueError(f"patch side must be >= 1, got {side}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"partition expects a single-channel image, got shape {img.shape}")
    if img.size == 0:
        raise ValueError("cannot partition an empty image")
    h, w = img.shape
    rows, cols = math.ceil(h / side), math.ceil(w / side)
    padded = np.pad(img, ((0, rows * side - h), (0, cols * side - w)), mode="reflect") if (
        rows * side != h or cols * side != w
    ) else img
    batch = unfold(padded[None, None], side)
    return PatchGrid(side, rows, cols, batch.reshape(rows * cols, side * side).copy(), h, w)


def fold(batch: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """``(rows*cols) x C x s x s`` patches -> ``1 x C x rows*s x cols*s`` image."""
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ValueError(f"fold expects a 4-d batch, got shape {batch.shape}")
    nb, c, s, s2 = batch.shape
    if nb != rows * cols:
        raise ValueError(f"batch of {nb} patches does not fill a {rows} x {cols} grid")
    return batch.reshape(rows, cols, c, s, s2).transpose(2, 0, 3, 1, 4).reshape(1, c, rows * s, cols * s2)


def unfold(image: np.ndarray, side: int) -> np.ndarray:
    """Inverse of :func:`fold`: ``1 x C x H x W`` -> ``(H/s * W/s) x C x s x s``."""
    image = np.asarray(image)
    if image.ndim != 4 or image.shape[0] != 1:
        raise ValueError(f"unfold expects a 1 x C x H x W array, got shape {image.shape}")
    _, c, h, w = image.shape
    if h % side or w % side:
        raise ValueError(f"image {h} x {w} is not a whole number of {side}-pixel blocks")
    rows, cols = h // side, w // side
    return image.reshape(c, rows, side, cols, side).transpose(1, 3, 0, 2, 4).reshape(rows * cols, c, side, side)


def assemble(grid: PatchGrid, patches: np.ndarray | None = None) -> np.ndarray:
    """Fold a grid's (or replacement) patches back into an image cropped to the original size."""
    p = grid.patches if patches is None else np.asarray(patches)
    img = fold(p.reshape(grid.count, 1, grid.side, grid.side), grid.rows, grid.cols)[0, 0]
    return img[: grid.height, : grid.width]


# ---------------------------------------------------------------------------
# file I/O


def _read_pgm(raw: bytes) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"malformed PGM header {tokens!r}") from exc
    if not 0 < maxval <= 255:
        raise ImageFormatError(f"unsupported PGM maxval {maxval}; only 8-bit data is supported")
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid PGM size {width} x {height}")
    need = width * height
    if len(raw) - pos < need:
        raise ImageFormatError(f"PGM raster truncated: need {need} bytes, have {len(raw) - pos}")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(height, width)
    return data.astype(np.float64) / maxval


def read_image(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P5":
        return as_image(_read_pgm(raw))
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("1", "L", "P", "LA", "RGB", "RGBA", "CMYK", "YCbCr"):
                if mode in ("L", "LA"):
                    arr = np.asarray(im.convert("L"))
                else:
                    arr = np.asarray(im.convert("RGB"))
            else:
                raise ImageFormatError(f"unsupported image mode {mode!r} in {path}")
    except ImageFormatError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"unsupported bit depth ({arr.dtype}) in {path}")
    return as_image(arr.astype(np.float64) / 255.0)


def quantize(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(img, path) -> None:
    """Write 8-bit PGM (``.pgm``) or PNG (anything else)."""
    img = as_image(img)
    q = quantize(img)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        if q.ndim != 2:
            raise ImageFormatError("PGM output requires a single-channel image")
        h, w = q.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())
        return
    from PIL import Image as PILImage

    PILImage.fromarray(q).save(path, format="PNG")
