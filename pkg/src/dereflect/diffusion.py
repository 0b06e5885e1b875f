"""Noise schedule, forward noising and the training objectives.

Tensors are torch ``(N, C, H, W)``; every loss reduces with a plain mean so
float64 inputs give float64 results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from dereflect.errors import DimensionError, ValidationError

# Stable Diffusion's scaled-linear endpoints at 1,000 steps; shorter schedules
# rescale them so the cumulative signal at t_max stays comparable.
SD_STEPS = 1000
SD_BETA_START = 0.00085
SD_BETA_END = 0.012

DEFAULT_LAMBDA_REC = 0.2


@dataclass(frozen=True)
class NoiseSchedule:
    t_max: int
    beta_start: float
    beta_end: float
    alpha_bar: np.ndarray

    @classmethod
    def scaled_linear(cls, t_max: int = 64, beta_start: float | None = None,
                      beta_end: float | None = None) -> "NoiseSchedule":
        if t_max < 1:
            raise ValidationError("t_max must be positive")
        scale = SD_STEPS / t_max
        beta_start = SD_BETA_START * scale if beta_start is None else beta_start
        beta_end = SD_BETA_END * scale if beta_end is None else beta_end
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), t_max, dtype=np.float64) ** 2
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(t_max, float(beta_start), float(beta_end), alpha_bar)

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (self.t_max + 1,):
            raise ValidationError(f"alpha_bar needs {self.t_max + 1} entries, got {ab.shape}")
        if ab[0] != 1.0:
            raise ValidationError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ValidationError("alpha_bar must be strictly decreasing")
        if not 0.0 < ab[-1] < 0.01:
            raise ValidationError(f"alpha_bar[t_max]={ab[-1]:.4g} must lie in (0, 0.01)")

    def to_dict(self) -> dict:
        return {
            "t_max": self.t_max,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "alpha_bar": self.alpha_bar.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return cls(int(data["t_max"]), float(data["beta_start"]), float(data["beta_end"]),
                   np.asarray(data["alpha_bar"], dtype=np.float64))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "NoiseSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _coefficients(sched: NoiseSchedule, t, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    t_arr = np.asarray(t)
    if not np.issubdtype(t_arr.dtype, np.integer):
        raise ValidationError("t must be an integer step index")
    if t_arr.size == 0 or t_arr.min() < 0 or t_arr.max() > sched.t_max:
        raise ValidationError(f"t must lie in [0, {sched.t_max}]")
    ab = sched.alpha_bar[t_arr]
    signal = torch.as_tensor(np.sqrt(ab), dtype=like.dtype, device=like.device)
    noise = torch.as_tensor(np.sqrt(1.0 - ab), dtype=like.dtype, device=like.device)
    if t_arr.ndim == 1:
        shape = (-1,) + (1,) * (like.dim() - 1)
        return signal.reshape(shape), noise.reshape(shape)
    return signal, noise


def add_noise(z: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(ab_t) * z + sqrt(1 - ab_t) * eps``; ``t`` may be a scalar or one step per batch item."""
    if z.shape != eps.shape:
        raise DimensionError(f"latent {tuple(z.shape)} vs noise {tuple(eps.shape)}")
    signal, noise = _coefficients(sched, t, z)
    return signal * z + noise * eps


# --------------------------------------------------------------------------- latent losses


def _check_same(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-element mean squared error; the kernel behind every latent loss."""
    _check_same(a, b)
    return ((a - b) ** 2).mean()


def loss_multistep_reference(pred_eps: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Noise-prediction objective of conventional multi-step diffusion training."""
    _check_same(pred_eps, eps)
    diff = eps - pred_eps
    return (diff * diff).sum() / diff.numel()


def loss_one_step(pred_zt: torch.Tensor, target_zt: torch.Tensor) -> torch.Tensor:
    return mse(pred_zt, target_zt)


def loss_consistency(pred_1: torch.Tensor, pred_2: torch.Tensor) -> torch.Tensor:
    return mse(pred_1, pred_2)


@dataclass
class LossReport:
    l_diff_1: torch.Tensor
    l_diff_2: torch.Tensor | None = None
    l_con: torch.Tensor | None = None

    @property
    def total(self) -> torch.Tensor:
        total = self.l_diff_1
        if self.l_diff_2 is not None:
            total = total + self.l_diff_2
        if self.l_con is not None:
            total = total + self.l_con
        return total

    def as_floats(self) -> dict[str, float | None]:
        def f(x):
            return None if x is None else float(x.detach())

        return {"l_diff_1": f(self.l_diff_1), "l_diff_2": f(self.l_diff_2),
                "l_con": f(self.l_con), "total": f(self.total)}


def loss_stage2(pred_1: torch.Tensor, target_1: torch.Tensor,
                pred_2: torch.Tensor, target_2: torch.Tensor) -> LossReport:
    """Two one-step losses plus the consistency term, equally weighted."""
    return LossReport(
        l_diff_1=loss_one_step(pred_1, target_1),
        l_diff_2=loss_one_step(pred_2, target_2),
        l_con=loss_consistency(pred_1, pred_2),
    )


# --------------------------------------------------------------------------- image losses

LUMA = (0.299, 0.587, 0.114)


def luma(img: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(LUMA, dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
    return (img * w).sum(dim=1, keepdim=True)


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_torch(pred: torch.Tensor, gt: torch.Tensor, window: int = 11, sigma: float = 1.5,
               k1: float = 0.01, k2: float = 0.03) -> torch.Tensor:
    """Mean luma SSIM over valid (unpadded) Gaussian windows, per batch item."""
    _check_same(pred, gt)
    if pred.shape[-1] < window or pred.shape[-2] < window:
        raise ValidationError(f"image smaller than the {window}px SSIM window")
    x, y = luma(pred), luma(gt)
    w = gaussian_window(window, sigma, x.dtype).to(x.device)[None, None]
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x**2
    syy = F.conv2d(y * y, w) - mu_y**2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return (num / den).mean(dim=(1, 2, 3))


class FeaturePyramidDistance(nn.Module):
    """Perceptual distance from a fixed, randomly initialized conv pyramid.

    Features at each scale are unit-normalized across channels and compared
    with a squared distance, in the manner of LPIPS but without learned weights.
    """

    def __init__(self, widths: tuple[int, ...] = (8, 16, 32), seed: int = 0, eps: float = 1e-10):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.eps = eps
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        cin = 3
        for cout in widths:
            w = torch.randn(cout, cin, 3, 3, generator=gen, dtype=torch.float64) * np.sqrt(2.0 / (cin * 9))
            b = torch.randn(cout, generator=gen, dtype=torch.float64) * 0.1
            self.weights.append(nn.Parameter(w, requires_grad=False))
            self.biases.append(nn.Parameter(b, requires_grad=False))
            cin = cout

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = img * 2 - 1
        for w, b in zip(self.weights, self.biases):
            h = F.gelu(F.conv2d(h, w.to(h.dtype), b.to(h.dtype), stride=2, padding=1))
            feats.append(h)
        return feats

    def forward(self, pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
        _check_same(pred, gt)
        total = pred.new_zeros(())
        for fp, fg in zip(self.features(pred), self.features(gt)):
            fp = fp / torch.sqrt((fp * fp).sum(dim=1, keepdim=True) + self.eps)
            fg = fg / torch.sqrt((fg * fg).sum(dim=1, keepdim=True) + self.eps)
            total = total + ((fp - fg) ** 2).sum(dim=1).mean()
        return total


_DEFAULT_PERCEPTUAL: FeaturePyramidDistance | None = None


def default_perceptual() -> FeaturePyramidDistance:
    global _DEFAULT_PERCEPTUAL
    if _DEFAULT_PERCEPTUAL is None:
        _DEFAULT_PERCEPTUAL = FeaturePyramidDistance()
    return _DEFAULT_PERCEPTUAL


def reconstruction_terms(pred: torch.Tensor, gt: torch.Tensor, perceptual=None) -> dict[str, torch.Tensor]:
    _check_same(pred, gt)
    perceptual = perceptual or default_perceptual()
    return {
        "l1": (pred - gt).abs().mean(),
        "l_ssim": 1.0 - ssim_torch(pred, gt).mean(),
        "l_lpips": perceptual(pred, gt),
    }


def loss_reconstruction(pred: torch.Tensor, gt: torch.Tensor, lambda_: float = DEFAULT_LAMBDA_REC,
                        perceptual=None, terms: dict | None = None) -> torch.Tensor:
    """``L1 + lambda * (1 - SSIM + perceptual)``.

    Pass a dict as ``terms`` to receive the individual components.
    """
    if lambda_ < 0:
        raise ValidationError("lambda_ must be non-negative")
    parts = reconstruction_terms(pred, gt, perceptual)
    if terms is not None:
        terms.update(parts)
    if lambda_ == 0:
        return parts["l1"]
    return parts["l1"] + lambda_ * (parts["l_ssim"] + parts["l_lpips"])
