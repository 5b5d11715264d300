"""Grayscale image I/O, patch sampling, noise, PSNR and the bimodal toy set."""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng

PREPROCESS_MEAN = 0.5
PREPROCESS_STD = 0.2
PSNR_CAP_DB = 99.0
LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class NoiseSpec:
    """Additive white Gaussian noise with std ``sigma_255`` on the 0-255 scale."""

    sigma_255: float

    def __post_init__(self):
        if self.sigma_255 < 0:
            raise ValueError("noise sigma must be >= 0")

    @property
    def sigma(self) -> float:
        return self.sigma_255 / 255.0

    def expected_psnr(self) -> float:
        return float(-10.0 * np.log10(self.sigma ** 2)) if self.sigma else PSNR_CAP_DB


@dataclass
class PatchSet:
    patches: np.ndarray   # (count, 1, p, p), values in [0, 1]
    mean: float = PREPROCESS_MEAN
    std: float = PREPROCESS_STD

    def __len__(self):
        return len(self.patches)


# --------------------------------------------------------------------------
# pixels


def to_gray(rgb) -> np.ndarray:
    """Luminance ``0.299 R + 0.587 G + 0.114 B`` of an (h, w, 3) image in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got shape {rgb.shape}")
    return rgb @ np.array(LUMA)


def preprocess(x) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - PREPROCESS_MEAN) / PREPROCESS_STD


def deprocess(t) -> np.ndarray:
    """Inverse of :func:`preprocess`, clipped to [0, 1]."""
    return np.clip(np.asarray(t, dtype=np.float64) * PREPROCESS_STD + PREPROCESS_MEAN, 0.0, 1.0)


def corrupt(x, spec, rng: Rng) -> np.ndarray:
    """``x + N(0, (sigma/255)^2)`` per pixel; the result is not clipped."""
    if not isinstance(spec, NoiseSpec):
        spec = NoiseSpec(float(spec))
    x = np.asarray(x, dtype=np.float64)
    if spec.sigma == 0:
        return x.copy()
    return x + rng.normal(x.shape, std=spec.sigma)


def psnr(x, y) -> float:
    """``-10 log10(mean squared error)`` for images in [0, 1], capped at 99 dB."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * np.log10(mse))


# --------------------------------------------------------------------------
# binary PGM (P5, maxval 255)


def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit graymap as floats in [0, 1]."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4, 0)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def quantize(img) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up (values clipped first)."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, img) -> None:
    """Write an (h, w) image in [0, 1] as a binary graymap."""
    q = quantize(img)
    if q.ndim != 2:
        raise ValueError("write_pgm expects a 2-D image")
    header = f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


def load_image_dir(path) -> list[tuple[str, np.ndarray]]:
    """Every ``*.pgm`` in a flat directory, sorted by file name."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise FileNotFoundError(f"no .pgm images in {path}")
    return [(p.name, read_pgm(p)) for p in files]


# --------------------------------------------------------------------------
# patches


def split_images(images, test_fraction, rng: Rng):
    """Split a list of images into (train, test) lists; whole images never straddle the split."""
    n = len(images)
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n_test >= n:
        raise ValueError("need at least one training and one test image")
    order = rng.permutation(n)
    test = set(order[:n_test].tolist())
    return ([im for i, im in enumerate(images) if i not in test],
            [im for i, im in enumerate(images) if i in test])


def extract_patches(images, size, count, rng: Rng) -> PatchSet:
    """``count`` uniformly placed ``size``x``size`` crops.

    Each crop position across all images is equally likely, so larger images
    contribute proportionally more patches.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    for im in images:
        if im.shape[0] < size or im.shape[1] < size:
            raise ValueError(f"patch size {size} exceeds image shape {im.shape}")
    positions = np.array([(im.shape[0] - size + 1) * (im.shape[1] - size + 1) for im in images])
    cum = np.cumsum(positions)
    flat = rng.integers(0, int(cum[-1]), size=count)
    which = np.searchsorted(cum, flat, side="right")
    out = np.empty((count, 1, size, size))
    for n, (img_i, pos) in enumerate(zip(which, flat)):
        im = images[img_i]
        local = pos - (cum[img_i - 1] if img_i else 0)
        cols = im.shape[1] - size + 1
        r, c = divmod(int(local), cols)
        out[n, 0] = im[r:r + size, c:c + size]
    return PatchSet(out)


# --------------------------------------------------------------------------
# inference on whole images


def denoise_image(denoiser, noisy, mode="mean", n_samples=1, random_state=None):
    """Run a fitted denoiser on one image.

    Returns a single image for ``mean``/``map`` and a list of ``n_samples``
    images for ``sample``. ``mean`` on a model with several gated layers has
    no exact form; it warns and returns one sample instead.
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    if noisy.ndim != 2:
        raise ValueError("expected a 2-D grayscale image")
    if mode == "sample":
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        out = denoiser.sample(noisy[None], n_samples=n_samples, random_state=random_state)
        return [o[0] for o in out]
    if mode == "mean" and denoiser.model_.n_gated_layers != 1:
        warnings.warn("mean prediction is exact only for one gated layer; drawing a sample",
                      RuntimeWarning, stacklevel=2)
        mode = "sample"
    return denoiser.predict(noisy[None], mode=mode, random_state=random_state)[0]


# --------------------------------------------------------------------------
# toy regression data


def toy_bimodal_dataset(n, rng: Rng):
    """``x ~ U[-1, 1]``, ``y = s (1 + 0.3 x) + N(0, 0.05^2)`` with a fair random sign ``s``.

    Returns ``(x, y)`` with shapes (n, 1) and (n, 1).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = rng.uniform((n, 1), -1.0, 1.0)
    s = np.where(rng.uniform((n, 1)) < 0.5, -1.0, 1.0)
    y = s * (1.0 + 0.3 * x) + rng.normal((n, 1), std=0.05)
    return x, y


def atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
