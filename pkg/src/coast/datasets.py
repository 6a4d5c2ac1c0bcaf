"""Desk-scale image sets built from sample photographs bundled with common
scientific Python packages (scikit-image, scikit-learn, matplotlib).

Nothing is downloaded: the files ship inside those packages.  Images are
converted to luminance, box-downscaled so the longer side is at most
``max_side`` pixels, and written as 8-bit PGM.
"""
from __future__ import annotations

import importlib.util
from pathlib import Path

import numpy as np

from .blocks import read_image, to_luminance, write_image

TRAIN_IMAGES = (
    ("skimage", "data/brick.png"),
    ("skimage", "data/chelsea.png"),
    ("sklearn", "datasets/images/china.jpg"),
    ("skimage", "data/clock_motion.png"),
    ("skimage", "data/coins.png"),
    ("skimage", "data/grass.png"),
    ("skimage", "data/gravel.png"),
    ("skimage", "data/ihc.png"),
    ("skimage", "data/moon.png"),
    ("skimage", "data/motorcycle_left.png"),
    ("skimage", "data/rocket.jpg"),
    ("skimage", "data/retina.jpg"),
)

TEST_IMAGES = (
    ("skimage", "data/astronaut.png"),
    ("skimage", "data/camera.png"),
    ("skimage", "data/cell.png"),
    ("skimage", "data/coffee.png"),
    ("sklearn", "datasets/images/flower.jpg"),
    ("matplotlib", "mpl-data/sample_data/grace_hopper.jpg"),
    ("skimage", "data/hubble_deep_field.jpg"),
    ("skimage", "data/microaneurysms.png"),
)


def _package_file(package: str, rel: str) -> Path:
    spec = importlib.util.find_spec(package)
    if spec is None or not spec.submodule_search_locations:
        raise FileNotFoundError(f"package {package!r} is not installed; it provides {rel}")
    path = Path(list(spec.submodule_search_locations)[0]) / rel
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def box_downscale(img: np.ndarray, max_side: int) -> np.ndarray:
    factor = -(-max(img.shape) // max_side)  # ceil
    if factor <= 1:
        return img
    h, w = (img.shape[0] // factor) * factor, (img.shape[1] // factor) * factor
    return img[:h, :w].reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def export_sample_images(out_dir, max_side: int = 256) -> tuple[Path, Path]:
    """Write ``out_dir/train`` and ``out_dir/test``; returns both directories."""
    out_dir = Path(out_dir)
    dirs = []
    for sub, entries in (("train", TRAIN_IMAGES), ("test", TEST_IMAGES)):
        d = out_dir / sub
        d.mkdir(parents=True, exist_ok=True)
        for package, rel in entries:
            img = box_downscale(to_luminance(read_image(_package_file(package, rel))), max_side)
            write_image(img, d / (Path(rel).stem + ".pgm"))
        dirs.append(d)
    return dirs[0], dirs[1]
