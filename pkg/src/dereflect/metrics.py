"""PSNR / SSIM and a directory-level benchmark harness."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from dereflect.errors import DimensionError, ValidationError
from dereflect.images import IMAGE_SUFFIXES, read_image, to_gray

PSNR_CAP_DB = 100.0

# Published numbers for the full-scale model, kept as reference metadata only.
REFERENCE_TABLE = {
    "Nature": {"psnr": 27.05, "ssim": 0.846},
    "DRR-S": {"psnr": 27.21},
}


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; ``inf`` for identical inputs."""
    _check_pair(pred, gt)
    err = np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2)
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / err))


def _gaussian_1d(window: int, sigma: float) -> np.ndarray:
    x = np.arange(window, dtype=np.float64) - (window - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = len(kernel) // 2
    out = ndimage.correlate1d(img, kernel, axis=0, mode="constant")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(pred: np.ndarray, gt: np.ndarray, window: int = 11, k1: float = 0.01, k2: float = 0.03,
         sigma: float = 1.5) -> float:
    """Mean luma SSIM over Gaussian windows that fit entirely inside the image."""
    _check_pair(pred, gt)
    x = to_gray(np.asarray(pred, np.float64)) if pred.ndim == 3 else np.asarray(pred, np.float64)
    y = to_gray(np.asarray(gt, np.float64)) if gt.ndim == 3 else np.asarray(gt, np.float64)
    if min(x.shape) < window:
        raise ValidationError(f"image {x.shape} smaller than the {window}px SSIM window")
    g = _gaussian_1d(window, sigma)
    c1, c2 = k1**2, k2**2
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x**2
    syy = _filter_valid(y * y, g) - mu_y**2
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class EvalRecord:
    benchmark_name: str
    scene_id: str
    psnr_db: float
    ssim: float

    def to_json(self) -> dict:
        d = asdict(self)
        if math.isinf(self.psnr_db):
            d["psnr_db"] = PSNR_CAP_DB
            d["psnr_infinite"] = True
        return d


@dataclass
class BenchmarkReport:
    benchmark_name: str
    records: list[EvalRecord] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        if not self.records:
            return math.nan
        return float(np.mean([min(r.psnr_db, PSNR_CAP_DB) for r in self.records]))

    @property
    def mean_ssim(self) -> float:
        if not self.records:
            return math.nan
        return float(np.mean([r.ssim for r in self.records]))

    def summary(self) -> dict:
        return {"benchmark_name": self.benchmark_name, "n_images": len(self.records),
                "n_errors": len(self.errors), "mean_psnr_db": self.mean_psnr, "mean_ssim": self.mean_ssim}

    def table(self) -> str:
        lines = [f"{'scene':<32} {'PSNR':>8} {'SSIM':>7}"]
        for r in self.records:
            lines.append(f"{r.scene_id:<32} {min(r.psnr_db, PSNR_CAP_DB):8.2f} {r.ssim:7.4f}")
        lines.append(f"{'mean (' + self.benchmark_name + ')':<32} {self.mean_psnr:8.2f} {self.mean_ssim:7.4f}")
        for e in self.errors:
            lines.append(f"ERROR {e['scene_id']}: {e['error']}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "records.jsonl").open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
            for e in self.errors:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
        (out_dir / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        (out_dir / "summary.txt").write_text(self.table())


def _index(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def evaluate_benchmark(pred_dir: str | Path, gt_dir: str | Path, benchmark_name: str = "benchmark") -> BenchmarkReport:
    """Score every prediction against the ground truth with the same file stem.

    Missing, unreadable or mis-shaped files become error entries; the rest are still scored.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise ValidationError(f"not a directory: {d}")
    preds, gts = _index(pred_dir), _index(gt_dir)
    report = BenchmarkReport(benchmark_name)
    for stem in sorted(set(preds) | set(gts)):
        if stem not in preds or stem not in gts:
            side = "prediction" if stem not in preds else "ground truth"
            report.errors.append({"benchmark_name": benchmark_name, "scene_id": stem, "error": f"missing {side}"})
            continue
        try:
            pred, gt = read_image(preds[stem]), read_image(gts[stem])
            report.records.append(EvalRecord(benchmark_name, stem, psnr(pred, gt), ssim(pred, gt)))
        except (ValidationError, ValueError) as exc:
            report.errors.append({"benchmark_name": benchmark_name, "scene_id": stem, "error": str(exc)})
    return report
