"""Training data: random patches from image folders and a synthetic toy corpus."""

import logging
import os

import numpy as np

from .imageio import ImageFormatError, read_image, to_float

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".ppm", ".pnm", ".jpg", ".jpeg", ".bmp")


def list_images(directory):
    """Image files in ``directory`` sorted lexicographically by name."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(IMAGE_EXTENSIONS))
    return [os.path.join(directory, n) for n in names]


def random_patches(images, count, size, seed=0):
    """``count`` random ``size``x``size`` crops, drawn uniformly over images then positions."""
    rng = np.random.default_rng(seed)
    usable = [im for im in images if im.shape[1] >= size and im.shape[2] >= size]
    if not usable:
        raise ValueError(f"no image is at least {size}x{size}")
    out = np.empty((count, 3, size, size), dtype=np.float32)
    for i in range(count):
        im = usable[rng.integers(len(usable))]
        top = rng.integers(im.shape[1] - size + 1)
        left = rng.integers(im.shape[2] - size + 1)
        out[i] = im[:, top : top + size, left : left + size]
    return out


def load_patch_dataset(directory, count, size, seed=0):
    images = []
    for path in list_images(directory):
        try:
            images.append(to_float(read_image(path)))
        except ImageFormatError as exc:
            logger.warning("skipping %s: %s", path, exc)
    if not images:
        raise ValueError(f"no readable images in {directory}")
    return random_patches(images, count, size, seed)


def synthetic_image(rng, height, width):
    """Smooth colour fields overlaid with flat and striped shapes, values in [0, 1]."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.empty((3, height, width))
    base = rng.uniform(0.2, 0.8, size=3)
    for c in range(3):
        field = np.full((height, width), base[c])
        for _ in range(2):
            fy, fx = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / np.array([height, width])
            phase = rng.uniform(0, 2 * np.pi)
            field += rng.uniform(0.05, 0.2) * np.sin(fy * yy + fx * xx + phase)
        img[c] = field
    for _ in range(rng.integers(1, 5)):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry, rx = rng.uniform(0.08, 0.35) * height, rng.uniform(0.08, 0.35) * width
        if rng.random() < 0.5:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        else:
            inside = np.maximum(np.abs(yy - cy) / ry, np.abs(xx - cx) / rx) ** 2
        alpha = 0.5 * (1.0 - np.tanh((inside - 1.0) * rng.uniform(3.0, 10.0)))
        colour = rng.uniform(0, 1, size=3)
        if rng.random() < 0.15:
            # striped fill: two colours alternating with a period of a few pixels
            period = rng.uniform(8.0, 16.0)
            angle = rng.uniform(0, np.pi)
            stripes = np.sin(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / period) > 0
            other = rng.uniform(0, 1, size=3)
            colour = np.where(stripes, colour.reshape(3, 1, 1), other.reshape(3, 1, 1))
        else:
            colour = colour.reshape(3, 1, 1)
        img = img * (1 - alpha) + colour * alpha
    return np.clip(img, 0, 1).astype(np.float32)


def toy_corpus(count, size=32, seed=0, source_size=64):
    """Deterministic corpus of ``count`` patches cropped from synthetic images."""
    rng = np.random.default_rng(seed)
    n_images = max(1, count // 4)
    images = [synthetic_image(rng, source_size, source_size) for _ in range(n_images)]
    return random_patches(images, count, size, seed=seed + 1)


def write_toy_images(directory, count, size=64, seed=0):
    """Write ``count`` synthetic images as PPM files (for CLI demos and tests)."""
    from .imageio import to_uint8, write_image

    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        path = os.path.join(directory, f"toy_{i:03d}.ppm")
        write_image(path, to_uint8(synthetic_image(rng, size, size)))
        paths.append(path)
    return paths
