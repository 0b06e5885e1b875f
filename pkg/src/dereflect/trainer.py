"""Progressive training: prior pretraining, foundation, reflection-invariant fine-tuning, decoder."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from dereflect import diffusion as D
from dereflect.datagen import SceneGroup
from dereflect.errors import FrozenPartitionError, StageOrderError, ValidationError
from dereflect.network import PARTITIONS, Dereflector, ModelConfig, build_model, to_tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dereflect-checkpoint"
CHECKPOINT_VERSION = 1


class Stage(str, Enum):
    PRIOR = "prior"
    FOUNDATION = "foundation"
    INVARIANT = "invariant_finetune"
    DECODER = "decoder"


PREREQUISITE = {
    Stage.PRIOR: None,
    Stage.FOUNDATION: Stage.PRIOR,
    Stage.INVARIANT: Stage.FOUNDATION,
    Stage.DECODER: Stage.INVARIANT,
}

TRAINABLE = {
    Stage.FOUNDATION: ("phi", "theta_up"),
    Stage.INVARIANT: ("phi", "theta_up"),
    Stage.DECODER: ("fusion",),
}

DEFAULT_LR = {Stage.PRIOR: 1e-3, Stage.FOUNDATION: 3e-4, Stage.INVARIANT: 1e-4, Stage.DECODER: 3e-4}
LR_SCHEDULES = ("constant", "cosine")
DEFAULT_STEPS = {Stage.PRIOR: 2000, Stage.FOUNDATION: 2000, Stage.INVARIANT: 1000, Stage.DECODER: 1000}


@dataclass
class AugmentConfig:
    enabled: bool = True
    crop_size: int = 64
    flip: bool = True
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    hue: float = 0.02  # fraction of a full turn


@dataclass
class StageConfig:
    stage: Stage
    lr: float | None = None
    steps: int | None = None
    batch_size: int = 1
    grad_accum: int = 1
    alternate_every: int = 100
    lambda_rec: float = D.DEFAULT_LAMBDA_REC
    weight_decay: float = 0.01
    seed: int = 0
    codec_steps: int = 1000
    codec_lr: float = 1e-3
    allow_skip: bool = False
    lr_schedule: str = "constant"  # or "cosine": decay to zero over the stage
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.stage = Stage(self.stage)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.lr is None:
            self.lr = DEFAULT_LR[self.stage]
        if self.steps is None:
            self.steps = DEFAULT_STEPS[self.stage]
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.steps < 0 or self.codec_steps < 0:
            raise ValidationError("step counts must be non-negative")
        if self.batch_size < 1 or self.grad_accum < 1 or self.alternate_every < 1:
            raise ValidationError("batch_size, grad_accum and alternate_every must be >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValidationError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.lambda_rec < 0:
            raise ValidationError("lambda_rec must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        return d


# --------------------------------------------------------------------------- randomness


class Streams:
    """Independent named random streams derived from one seed."""

    NAMES = ("data", "noise", "augment", "init")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        self._rngs = {n: np.random.default_rng(s) for n, s in zip(self.NAMES, children)}

    def __getitem__(self, name: str) -> np.random.Generator:
        return self._rngs[name]

    def normal(self, shape, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self._rngs["noise"].standard_normal(shape)).to(dtype)


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    top: int
    left: int
    flip: bool
    brightness: float
    contrast: float
    saturation: float
    hue: float


_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


def sample_augment_params(shape: tuple[int, int], rng: np.random.Generator, cfg: AugmentConfig) -> AugmentParams:
    h, w = shape
    if cfg.crop_size > h or cfg.crop_size > w:
        raise ValidationError(f"crop {cfg.crop_size} larger than image {h}x{w}")
    return AugmentParams(
        top=int(rng.integers(0, h - cfg.crop_size + 1)),
        left=int(rng.integers(0, w - cfg.crop_size + 1)),
        flip=bool(cfg.flip and rng.random() < 0.5),
        brightness=float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)),
        contrast=float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)),
        saturation=float(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)),
        hue=float(rng.uniform(-cfg.hue, cfg.hue)),
    )


def apply_augment(img: np.ndarray, p: AugmentParams, crop_size: int) -> np.ndarray:
    out = img[p.top:p.top + crop_size, p.left:p.left + crop_size]
    if p.flip:
        out = out[:, ::-1]
    out = out * p.brightness
    out = (out - 0.5) * p.contrast + 0.5
    gray = (out @ _YIQ[0])[..., None]
    out = gray + p.saturation * (out - gray)
    if p.hue:
        theta = 2 * np.pi * p.hue
        rot = np.array([[1, 0, 0], [0, np.cos(theta), -np.sin(theta)], [0, np.sin(theta), np.cos(theta)]])
        out = out @ (_YIQ_INV @ rot @ _YIQ).T
    return np.clip(out, 0.0, 1.0)


def augment(images: Sequence[np.ndarray], rng: np.random.Generator, cfg: AugmentConfig,
            return_params: bool = False):
    """Apply one shared random crop/flip/colour transform to every image of a group."""
    if not cfg.enabled:
        out = [np.asarray(img) for img in images]
        return (out, None) if return_params else out
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ValidationError(f"images in a group must share a shape, got {shapes}")
    params = sample_augment_params(images[0].shape[:2], rng, cfg)
    out = [apply_augment(img, params, cfg.crop_size) for img in images]
    return (out, params) if return_params else out


# --------------------------------------------------------------------------- helpers


def _check_order(model: Dereflector, stage: Stage, allow_skip: bool) -> None:
    need = PREREQUISITE[stage]
    if need is not None and need.value not in model.completed_stages and not allow_skip:
        raise StageOrderError(f"stage {stage.value!r} requires completed stage {need.value!r}")


class FreezeGuard:
    """Hash frozen partitions on entry and verify them on exit."""

    def __init__(self, model: Dereflector, trainable: Sequence[str]):
        self.model = model
        self.frozen = [p for p in PARTITIONS if p not in trainable]

    def __enter__(self):
        self.before = {p: self.model.partition_hash(p) for p in self.frozen}
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            return False
        changed = [p for p in self.frozen if self.model.partition_hash(p) != self.before[p]]
        if changed:
            raise FrozenPartitionError(f"frozen partitions modified: {changed}")
        return False


def _adamw(params, cfg: StageConfig, lr: float | None = None) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr or cfg.lr, weight_decay=cfg.weight_decay)


def lr_at(cfg: StageConfig, step: int, total: int, base: float | None = None) -> float:
    base = base or cfg.lr
    if cfg.lr_schedule == "cosine" and total > 1:
        return base * 0.5 * (1 + math.cos(math.pi * step / total))
    return base


def _step(opt: torch.optim.Optimizer, cfg: StageConfig, step: int, total: int, base: float | None = None) -> float:
    lr = lr_at(cfg, step, total, base)
    for group in opt.param_groups:
        group["lr"] = lr
    opt.step()
    return lr


@dataclass
class TrainingData:
    groups: list[SceneGroup]

    def __post_init__(self):
        if not self.groups:
            raise ValidationError("training data is empty")
        self.pairs = [(g.transmission, m) for g in self.groups for m in g.mixed]
        self.images = [g.transmission for g in self.groups] + [m for _, m in self.pairs]

    def sample_pairs(self, rng, n, aug: AugmentConfig):
        ts, ms = [], []
        for i in rng.integers(0, len(self.pairs), size=n):
            t, m = augment(self.pairs[i], rng, aug)
            ts.append(t)
            ms.append(m)
        return to_tensor(np.stack(ts)), to_tensor(np.stack(ms))

    def sample_images(self, rng, n, aug: AugmentConfig):
        picks = [augment([self.images[i]], rng, aug)[0] for i in rng.integers(0, len(self.images), size=n)]
        return to_tensor(np.stack(picks))

    def sample_scene_pairs(self, rng, n, aug: AugmentConfig):
        eligible = [g for g in self.groups if len(g.mixed) >= 2]
        if not eligible:
            raise ValidationError("reflection-invariant fine-tuning needs scene groups with >= 2 mixed images")
        ts, m1s, m2s = [], [], []
        for gi in rng.integers(0, len(eligible), size=n):
            g = eligible[gi]
            a, b = rng.choice(len(g.mixed), size=2, replace=False)
            t, m1, m2 = augment([g.transmission, g.mixed[a], g.mixed[b]], rng, aug)
            ts.append(t)
            m1s.append(m1)
            m2s.append(m2)
        return to_tensor(np.stack(ts)), to_tensor(np.stack(m1s)), to_tensor(np.stack(m2s))


def _as_data(data) -> TrainingData:
    if isinstance(data, TrainingData):
        return data
    return TrainingData(list(data))


@dataclass
class StageResult:
    stage: Stage
    losses: list[dict] = field(default_factory=list)
    updated: list[list[str]] = field(default_factory=list)

    def smoothed(self, key: str = "total", window: int = 50) -> np.ndarray:
        vals = np.array([r[key] for r in self.losses if r.get(key) is not None])
        if len(vals) < window:
            return vals
        return np.convolve(vals, np.ones(window) / window, mode="valid")


def _record(result: StageResult, step: int, cfg: StageConfig, sink: Callable[[dict], None] | None, **losses):
    rec = {"step": step, "stage": cfg.stage.value, "l_diff_1": None, "l_diff_2": None,
           "l_con": None, "l_rec": None, "lr": cfg.lr}
    rec.update({k: (None if v is None else float(v)) for k, v in losses.items()})
    result.losses.append(rec)
    if sink is not None:
        sink(rec)


def _one_step_targets(model, t_img, sched, streams):
    """Clean latent -> (fully noised input, target at a uniformly sampled step, sampled step)."""
    with torch.no_grad():
        z, _ = model.encode(t_img)
    eps = streams.normal(tuple(z.shape))
    t = streams["noise"].integers(0, sched.t_max + 1, size=z.shape[0])
    z_T = D.add_noise(z, np.full(z.shape[0], sched.t_max), eps, sched)
    target = D.add_noise(z, t, eps, sched)
    return z_T, target, torch.from_numpy(t)


# --------------------------------------------------------------------------- stages


def run_stage_prior(data, model: Dereflector, cfg: StageConfig, sched: D.NoiseSchedule,
                    sink=None) -> StageResult:
    """Codec pretraining, then unconditional noise-prediction pretraining of the U-Net."""
    data = _as_data(data)
    streams = Streams(cfg.seed)
    result = StageResult(Stage.PRIOR)
    model.train()

    if cfg.codec_steps:
        model.set_trainable({"codec"})
        opt = _adamw(model.partition_params("codec"), cfg, cfg.codec_lr)
        for step in range(cfg.codec_steps):
            imgs = data.sample_images(streams["data"], cfg.batch_size, cfg.augment)
            z, _ = model.codec.encode(imgs)
            rec = model.codec.decode_raw(z)
            loss = (rec - imgs).abs().mean() + ((rec - imgs) ** 2).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            lr = _step(opt, cfg, step, cfg.codec_steps, cfg.codec_lr)
            _record(result, step, cfg, sink, l_rec=loss.detach(), lr=lr)
        calibrate_latent_scale(model, data)

    unet_parts = {"theta_down", "theta_mid", "theta_up", "c"}
    model.set_trainable(unet_parts)
    opt = _adamw([p for part in sorted(unet_parts) for p in model.partition_params(part)], cfg)
    for step in range(cfg.steps):
        imgs = data.sample_images(streams["data"], cfg.batch_size, cfg.augment)
        with torch.no_grad():
            z, _ = model.encode(imgs)
        eps = streams.normal(tuple(z.shape))
        t = streams["noise"].integers(1, sched.t_max + 1, size=z.shape[0])
        z_t = D.add_noise(z, t, eps, sched)
        loss = D.loss_multistep_reference(model.denoise(z_t, torch.from_numpy(t)), eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        lr = _step(opt, cfg, step, cfg.steps)
        _record(result, cfg.codec_steps + step, cfg, sink, l_diff_1=loss.detach(), lr=lr)

    model.init_control_from_denoiser()
    model.set_trainable(set())
    _mark_done(model, Stage.PRIOR)
    return result


@torch.no_grad()
def calibrate_latent_scale(model: Dereflector, data: TrainingData, max_images: int = 256) -> float:
    model.codec.latent_scale.fill_(1.0)
    imgs = to_tensor(np.stack(data.images[:max_images]))
    z, _ = model.codec.encode(imgs)
    scale = float(1.0 / z.std().clamp_min(1e-6))
    model.codec.latent_scale.fill_(scale)
    return scale


def _mark_done(model: Dereflector, stage: Stage) -> None:
    if stage.value not in model.completed_stages:
        model.completed_stages.append(stage.value)


def run_stage_foundation(data, model: Dereflector, cfg: StageConfig, sched: D.NoiseSchedule,
                         sink=None) -> StageResult:
    """Train the control branch and the U-Net up path on the one-step loss."""
    _check_order(model, Stage.FOUNDATION, cfg.allow_skip)
    data = _as_data(data)
    streams = Streams(cfg.seed)
    result = StageResult(Stage.FOUNDATION)
    trainable = TRAINABLE[Stage.FOUNDATION]
    with FreezeGuard(model, trainable):
        model.train()
        model.set_trainable(set(trainable))
        opt = _adamw(model.partition_params("phi") + model.partition_params("theta_up"), cfg)
        for step in range(cfg.steps):
            opt.zero_grad(set_to_none=True)
            total = 0.0
            for _ in range(cfg.grad_accum):
                t_img, m_img = data.sample_pairs(streams["data"], cfg.batch_size, cfg.augment)
                z_T, target, t = _one_step_targets(model, t_img, sched, streams)
                with torch.no_grad():
                    cond, _ = model.encode(m_img)
                loss = D.loss_one_step(model.denoise(z_T, t, cond), target)
                (loss / cfg.grad_accum).backward()
                total += float(loss.detach()) / cfg.grad_accum
            lr = _step(opt, cfg, step, cfg.steps)
            result.updated.append(list(trainable))
            _record(result, step, cfg, sink, l_diff_1=total, lr=lr)
        model.set_trainable(set())
    if cfg.steps:
        _mark_done(model, Stage.FOUNDATION)
    return result


def active_partition(step: int, alternate_every: int) -> str:
    """Control branch first, then the up path, swapping every ``alternate_every`` steps."""
    return "phi" if (step // alternate_every) % 2 == 0 else "theta_up"


def run_stage_invariant(data, model: Dereflector, cfg: StageConfig, sched: D.NoiseSchedule,
                        sink=None) -> StageResult:
    """Two mixed views of one scene through shared weights, with a consistency penalty."""
    _check_order(model, Stage.INVARIANT, cfg.allow_skip)
    data = _as_data(data)
    if cfg.steps and not any(len(g.mixed) >= 2 for g in data.groups):
        raise ValidationError("reflection-invariant fine-tuning needs scene groups with >= 2 mixed images")
    streams = Streams(cfg.seed)
    result = StageResult(Stage.INVARIANT)
    trainable = TRAINABLE[Stage.INVARIANT]
    with FreezeGuard(model, trainable):
        model.train()
        opts = {p: _adamw(model.partition_params(p), cfg) for p in trainable}
        for step in range(cfg.steps):
            part = active_partition(step, cfg.alternate_every)
            model.set_trainable({part})
            opt = opts[part]
            opt.zero_grad(set_to_none=True)
            sums = {"l_diff_1": 0.0, "l_diff_2": 0.0, "l_con": 0.0}
            for _ in range(cfg.grad_accum):
                t_img, m1, m2 = data.sample_scene_pairs(streams["data"], cfg.batch_size, cfg.augment)
                z_T, target, t = _one_step_targets(model, t_img, sched, streams)
                with torch.no_grad():
                    c1, _ = model.encode(m1)
                    c2, _ = model.encode(m2)
                report = D.loss_stage2(model.denoise(z_T, t, c1), target, model.denoise(z_T, t, c2), target)
                (report.total / cfg.grad_accum).backward()
                for k, v in report.as_floats().items():
                    if k in sums:
                        sums[k] += v / cfg.grad_accum
            lr = _step(opt, cfg, step, cfg.steps)
            result.updated.append([part])
            _record(result, step, cfg, sink, **sums, lr=lr)
        model.set_trainable(set())
    if cfg.steps:
        _mark_done(model, Stage.INVARIANT)
    return result


def run_stage_decoder(data, model: Dereflector, cfg: StageConfig, sched: D.NoiseSchedule,
                      sink=None, perceptual=None) -> StageResult:
    """Train only the cross-latent fusion convs on the image reconstruction loss."""
    _check_order(model, Stage.DECODER, cfg.allow_skip)
    data = _as_data(data)
    streams = Streams(cfg.seed)
    result = StageResult(Stage.DECODER)
    trainable = TRAINABLE[Stage.DECODER]
    with FreezeGuard(model, trainable):
        model.train()
        model.set_trainable(set(trainable))
        opt = _adamw(model.partition_params("fusion"), cfg, cfg.lr)
        for step in range(cfg.steps):
            opt.zero_grad(set_to_none=True)
            sums = {"l_rec": 0.0, "l1": 0.0, "l_ssim": 0.0, "l_lpips": 0.0}
            for _ in range(cfg.grad_accum):
                t_img, m_img = data.sample_pairs(streams["data"], cfg.batch_size, cfg.augment)
                with torch.no_grad():
                    cond, skips = model.encode(m_img)
                    z_T = model.inference_noise(tuple(cond.shape), cond.dtype)
                    z0 = model.denoise(z_T, 0, cond)
                pred = model.decode_cross_latent(z0, skips)
                terms: dict = {}
                loss = D.loss_reconstruction(pred, t_img, cfg.lambda_rec, perceptual, terms=terms)
                (loss / cfg.grad_accum).backward()
                sums["l_rec"] += float(loss.detach()) / cfg.grad_accum
                for k, v in terms.items():
                    sums[k] += float(v.detach()) / cfg.grad_accum
            lr = _step(opt, cfg, step, cfg.steps)
            result.updated.append(list(trainable))
            _record(result, step, cfg, sink, l_rec=sums["l_rec"], lr=lr)
            result.losses[-1].update(
                l1=sums["l1"], l_ssim=sums["l_ssim"], l_lpips=sums["l_lpips"],
                w_ssim=cfg.lambda_rec, w_lpips=cfg.lambda_rec,
            )
        model.set_trainable(set())
    if cfg.steps:
        _mark_done(model, Stage.DECODER)
    return result


STAGE_RUNNERS = {
    Stage.PRIOR: run_stage_prior,
    Stage.FOUNDATION: run_stage_foundation,
    Stage.INVARIANT: run_stage_invariant,
    Stage.DECODER: run_stage_decoder,
}


def run_stage(data, model, cfg: StageConfig, sched, sink=None) -> StageResult:
    log.info("stage %s: %d steps, lr %.1e", cfg.stage.value, cfg.steps, cfg.lr)
    return STAGE_RUNNERS[cfg.stage](data, model, cfg, sched, sink)


def default_stage_configs(seed: int = 0, **overrides) -> dict[Stage, StageConfig]:
    """One config per stage; ``overrides`` maps a stage value to a dict of field overrides."""
    out = {}
    for i, stage in enumerate(Stage):
        fields = dict(overrides.get(stage.value, {}))
        fields.setdefault("seed", seed + i)
        out[stage] = StageConfig(stage=stage, **fields)
    return out


def run_pipeline(data, model: Dereflector, configs: dict[Stage, StageConfig], sched,
                 sink=None, on_stage_end=None) -> dict[Stage, StageResult]:
    results = {}
    for stage in Stage:
        if stage in configs:
            results[stage] = run_stage(data, model, configs[stage], sched, sink)
            if on_stage_end is not None:
                on_stage_end(stage, model)
    return results


# --------------------------------------------------------------------------- evaluation helpers


@torch.no_grad()
def predict_latents(model: Dereflector, mixed: Sequence[np.ndarray]) -> torch.Tensor:
    model.eval()
    x = to_tensor(np.stack(mixed))
    cond, _ = model.encode(x)
    z_T = model.inference_noise(tuple(cond.shape), cond.dtype)
    return model.denoise(z_T, 0, cond)


def probe_consistency(model: Dereflector, groups: Sequence[SceneGroup]) -> float:
    """Mean squared latent disagreement between the first two mixed views of each scene."""
    vals = []
    for g in groups:
        if len(g.mixed) < 2:
            continue
        p = predict_latents(model, g.mixed[:2])
        vals.append(float(D.loss_consistency(p[0:1], p[1:2])))
    if not vals:
        raise ValidationError("probe set has no scene with two mixed images")
    return float(np.mean(vals))


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: Dereflector, path: str | Path, sched: D.NoiseSchedule | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    partitions, shapes = {}, {}
    for part in PARTITIONS:
        state = {k: v.detach().cpu().clone() for k, v in model.partition_state(part).items()}
        partitions[part] = state
        shapes[part] = {k: list(v.shape) for k, v in state.items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "noise_seed": model.cfg.noise_seed,
        "completed_stages": list(model.completed_stages),
        "partitions": partitions,
        "shapes": shapes,
        "schedule": sched.to_dict() if sched is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[Dereflector, D.NoiseSchedule | None, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not a dereflect checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig(**payload["config"])
    model = build_model(cfg)
    state = {}
    for part, tensors in payload["partitions"].items():
        for name, tensor in tensors.items():
            if list(tensor.shape) != payload["shapes"][part][name]:
                raise ValidationError(f"shape metadata mismatch for {name}")
            state[name] = tensor
    model.load_state_dict(state)
    model.completed_stages = list(payload["completed_stages"])
    sched = D.NoiseSchedule.from_dict(payload["schedule"]) if payload.get("schedule") else None
    return model, sched, payload.get("extra", {})


def jsonl_sink(path: str | Path) -> Callable[[dict], None]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = path.open("a")

    def write(rec: dict) -> None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()

    return write
