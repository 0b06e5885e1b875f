"""Image file I/O and conversions between channel-last arrays and tensors."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from dereflect.errors import ValidationError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def check_image(img: np.ndarray, name: str = "image", min_size: int = 8) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"{name} must be H x W x 3, got shape {img.shape}")
    if img.shape[0] < min_size or img.shape[1] < min_size:
        raise ValidationError(f"{name} must be at least {min_size}x{min_size}, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise ValidationError(f"{name} contains non-finite values")
    return img


def read_image(path: str | Path) -> np.ndarray:
    """Read an 8- or 16-bit RGB image into float64 in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValidationError(f"cannot decode image {path}")
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.shape[2] == 4:
        raw = raw[:, :, :3]
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ValidationError(f"unsupported pixel type {raw.dtype} in {path}")
    return raw[:, :, ::-1].astype(np.float64) / scale


def write_image(path: str | Path, img: np.ndarray, bits: int = 16) -> Path:
    """Write a [0, 1] float image losslessly as PNG (8- or 16-bit)."""
    if bits not in (8, 16):
        raise ValidationError("bits must be 8 or 16")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    peak = 255 if bits == 8 else 65535
    dtype = np.uint8 if bits == 8 else np.uint16
    q = np.rint(np.clip(img, 0.0, 1.0) * peak).astype(dtype)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q[:, :, ::-1])):
        raise ValidationError(f"failed to write {path}")
    return path


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def to_gray(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma."""
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
