"""Procedural texture source so the toolkit can run without downloaded datasets.

Each texture is a sum of a colour gradient, a few gaussian blobs, stripes and
some rendered glyphs. Reflection layers are the same textures seen out of
focus. Everything is driven by a numpy ``Generator``.
"""

from __future__ import annotations

import string

import cv2
import numpy as np
from scipy import ndimage

_GLYPHS = string.ascii_uppercase + string.digits


def _gradient(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    c0, c1 = rng.uniform(0.05, 0.95, size=(2, 3))
    return c0 + ramp[..., None] * (c1 - c0)


def _blobs(rng: np.random.Generator, img: np.ndarray, count: int) -> None:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(count):
        cy, cx = rng.uniform(0, size, size=2)
        sigma = rng.uniform(0.05, 0.25) * size
        weight = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        colour = rng.uniform(0, 1, size=3)
        alpha = rng.uniform(0.4, 0.9)
        img += alpha * weight[..., None] * (colour - img)


def _stripes(rng: np.random.Generator, img: np.ndarray) -> None:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(6, 20)
    phase = (np.cos(angle) * xx + np.sin(angle) * yy) / period
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * phase)
    amp = rng.uniform(0.05, 0.2)
    img += amp * (wave[..., None] - 0.5)


def _glyphs(rng: np.random.Generator, img: np.ndarray, count: int) -> None:
    size = img.shape[0]
    for _ in range(count):
        text = "".join(rng.choice(list(_GLYPHS), size=rng.integers(1, 3)))
        scale = rng.uniform(0.3, 0.8) * size / 64
        org = (int(rng.integers(0, size - 8)), int(rng.integers(10, size)))
        colour = rng.uniform(0, 1, size=3)
        thickness = int(rng.integers(1, 3))
        mask = np.zeros((size, size), np.uint8)
        cv2.putText(mask, text, org, cv2.FONT_HERSHEY_SIMPLEX, scale, 255, thickness, cv2.LINE_AA)
        alpha = (mask / 255.0)[..., None]
        img += alpha * (colour - img)


def procedural_texture(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Return a float64 ``size x size x 3`` texture in [0, 1]."""
    img = _gradient(rng, size)
    _blobs(rng, img, int(rng.integers(2, 5)))
    if rng.random() < 0.5:
        _stripes(rng, img)
    _glyphs(rng, img, int(rng.integers(0, 3)))
    return np.clip(img, 0.0, 1.0)


def texture_pool(seed: int, count: int, size: int = 64) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [procedural_texture(rng, size) for _ in range(count)]


def reflection_texture(rng: np.random.Generator, size: int = 64,
                       blur_sigma: tuple[float, float] = (1.0, 3.0)) -> np.ndarray:
    """A procedural texture defocused by a gaussian of random width, as reflections usually are."""
    img = procedural_texture(rng, size)
    sigma = rng.uniform(*blur_sigma)
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


def reflection_pool(seed: int, count: int, size: int = 64,
                    blur_sigma: tuple[float, float] = (1.0, 3.0)) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [reflection_texture(rng, size, blur_sigma) for _ in range(count)]
