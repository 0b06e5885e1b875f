"""Synthetic (transmission, reflection, mixed) triples and realism filtering."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence, TypeVar

import numpy as np
from scipy import ndimage

from dereflect.errors import DimensionError, ValidationError
from dereflect.images import check_image

GAMMA1_RANGE = (0.8, 1.0)
GAMMA2_RANGE = (0.4, 1.0)

# Reference operating point of the CLIP-based filter: 69,443 pairs kept down to 20,833.
REFERENCE_KEEP_FRACTION = 20833 / 69443


@dataclass(frozen=True)
class MixCoefficients:
    gamma1: float
    gamma2: float

    def __post_init__(self):
        lo1, hi1 = GAMMA1_RANGE
        lo2, hi2 = GAMMA2_RANGE
        if not lo1 <= self.gamma1 <= hi1:
            raise ValidationError(f"gamma1={self.gamma1} outside [{lo1}, {hi1}]")
        if not lo2 <= self.gamma2 <= hi2:
            raise ValidationError(f"gamma2={self.gamma2} outside [{lo2}, {hi2}]")


@dataclass
class MixTriple:
    transmission: np.ndarray
    reflection: np.ndarray
    mixed: np.ndarray
    coeffs: MixCoefficients
    scene_id: str

    def formula_error(self) -> float:
        """Max absolute deviation of ``mixed`` from the mixing formula."""
        expected = mix(self.transmission, self.reflection, self.coeffs)
        return float(np.max(np.abs(expected - self.mixed)))


@dataclass
class SceneGroup:
    """One transmission with several mixed renderings of the same scene."""

    transmission: np.ndarray
    triples: list[MixTriple] = field(default_factory=list)
    scene_id: str = ""

    @property
    def mixed(self) -> list[np.ndarray]:
        return [t.mixed for t in self.triples]

    def __len__(self) -> int:
        return len(self.triples)


def mix_unclamped(transmission: np.ndarray, reflection: np.ndarray, coeffs: MixCoefficients) -> np.ndarray:
    if transmission.shape != reflection.shape:
        raise DimensionError(f"transmission {transmission.shape} vs reflection {reflection.shape}")
    g1, g2 = coeffs.gamma1, coeffs.gamma2
    return g1 * transmission + g2 * reflection - g1 * g2 * (transmission * reflection)


def mix(transmission: np.ndarray, reflection: np.ndarray, coeffs: MixCoefficients) -> np.ndarray:
    """Blend ``M = g1*T + g2*R - g1*g2*T*R`` and clamp to [0, 1].

    For inputs in [0, 1] the bilinear form already stays in [0, 1]; the clamp
    only guards against inputs that drift slightly outside that range.
    """
    return np.clip(mix_unclamped(transmission, reflection, coeffs), 0.0, 1.0)


def sample_coefficients(rng: np.random.Generator) -> MixCoefficients:
    g1 = rng.uniform(*GAMMA1_RANGE)
    g2 = rng.uniform(*GAMMA2_RANGE)
    return MixCoefficients(float(g1), float(g2))


def content_id(img: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(img, dtype=np.float64).tobytes()).hexdigest()[:12]


def generate_scene(
    transmission: np.ndarray,
    reflections: Sequence[np.ndarray],
    rng: np.random.Generator,
    scene_id: str | None = None,
    sampler: Callable[[np.random.Generator], MixCoefficients] = sample_coefficients,
) -> SceneGroup:
    """Mix one transmission with every reflection, drawing fresh coefficients each time."""
    if len(reflections) == 0:
        raise ValidationError("generate_scene needs at least one reflection")
    check_image(transmission, "transmission")
    scene_id = scene_id if scene_id is not None else content_id(transmission)
    group = SceneGroup(transmission=transmission, scene_id=scene_id)
    for refl in reflections:
        check_image(refl, "reflection")
        coeffs = sampler(rng)
        group.triples.append(
            MixTriple(transmission, refl, mix(transmission, refl, coeffs), coeffs, scene_id)
        )
    return group


# --------------------------------------------------------------------------- scoring


class RealismScorer(Protocol):
    def __call__(self, triple: MixTriple) -> float: ...


class HeuristicRealismScorer:
    """Cheap stand-in for an image-text realism score.

    Rewards visible mid-frequency structure in the reflection residual
    ``M - g1*T`` and penalizes blown-out highlights.
    """

    def __init__(self, clip_level: float = 0.99, clip_weight: float = 4.0,
                 fine_sigma: float = 1.0, coarse_sigma: float = 4.0):
        self.clip_level = clip_level
        self.clip_weight = clip_weight
        self.fine_sigma = fine_sigma
        self.coarse_sigma = coarse_sigma

    def __call__(self, triple: MixTriple) -> float:
        residual = triple.mixed - triple.coeffs.gamma1 * triple.transmission
        gray = residual.mean(axis=2)
        band = ndimage.gaussian_filter(gray, self.fine_sigma) - ndimage.gaussian_filter(gray, self.coarse_sigma)
        clipped = float(np.mean(triple.mixed.max(axis=2) >= self.clip_level))
        return float(band.std()) - self.clip_weight * clipped


class ClipRealismScorer:
    """Cosine similarity between an image and a text prompt in CLIP space.

    Model files are looked up under ``$DEREFLECT_CACHE`` when set. The model
    is loaded lazily on first use.
    """

    def __init__(self, prompt: str = "image with glass reflection",
                 model_name: str = "openai/clip-vit-base-patch32", cache_dir: str | None = None):
        self.prompt = prompt
        self.model_name = model_name
        self.cache_dir = cache_dir or os.environ.get("DEREFLECT_CACHE")
        self._model = None
        self._processor = None
        self._text = None

    def _load(self):
        if self._model is None:
            from transformers import CLIPModel, CLIPProcessor

            self._model = CLIPModel.from_pretrained(self.model_name, cache_dir=self.cache_dir).eval()
            self._processor = CLIPProcessor.from_pretrained(self.model_name, cache_dir=self.cache_dir)
        return self._model, self._processor

    def _text_embedding(self):
        import torch

        if self._text is None:
            model, proc = self._load()
            with torch.no_grad():
                tokens = proc(text=[self.prompt], return_tensors="pt", padding=True)
                emb = model.get_text_features(**tokens)
            self._text = emb / emb.norm(dim=-1, keepdim=True)
        return self._text

    def __call__(self, triple: MixTriple) -> float:
        import torch

        model, proc = self._load()
        text = self._text_embedding()
        pixels = np.rint(np.clip(triple.mixed, 0, 1) * 255).astype(np.uint8)
        with torch.no_grad():
            inputs = proc(images=[pixels], return_tensors="pt")
            emb = model.get_image_features(**inputs)
        emb = emb / emb.norm(dim=-1, keepdim=True)
        return float((emb * text).sum())


# --------------------------------------------------------------------------- filtering

T = TypeVar("T")


def retained_count(n: int, keep_fraction: float) -> int:
    """``ceil(keep_fraction * n)`` robust to binary rounding of the fraction."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValidationError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if n == 0:
        return 0
    return max(1, min(n, math.ceil(round(keep_fraction * n, 6))))


def rank_by_realism(items: Iterable[T], scorer: Callable[[T], float]) -> list[tuple[float, T]]:
    """Score items and order them by (score desc, scene_id asc), stable otherwise."""
    scored = [(float(scorer(item)), item) for item in items]
    scored.sort(key=lambda pair: (-pair[0], str(pair[1].scene_id)))
    return scored


def filter_by_realism(
    triples: Sequence[T],
    scorer: Callable[[T], float],
    keep_fraction: float = REFERENCE_KEEP_FRACTION,
    threshold: float | None = None,
    with_scores: bool = False,
) -> list:
    """Keep the most realistic triples.

    Rank mode keeps the top ``ceil(keep_fraction * N)``. Passing ``threshold``
    switches to absolute mode, keeping every triple scoring at least that value.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValidationError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    ranked = rank_by_realism(triples, scorer)
    if threshold is None:
        kept = ranked[: retained_count(len(ranked), keep_fraction)]
    else:
        kept = [pair for pair in ranked if pair[0] >= threshold]
    return kept if with_scores else [item for _, item in kept]


# --------------------------------------------------------------------------- manifests


@dataclass
class ManifestRecord:
    scene_id: str
    transmission: str
    reflection: str
    mixed: str
    gamma1: float
    gamma2: float
    score: float | None = None


def write_manifest(path: str | Path, records: Iterable[ManifestRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.__dict__, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    records = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return records
