"""Toy-scale latent codec, U-Net denoiser, control branch and cross-latent decoder."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from dereflect.diffusion import NoiseSchedule
from dereflect.errors import DimensionError, ValidationError

PARTITIONS = ("codec", "theta_down", "theta_mid", "theta_up", "phi", "fusion", "c")


@dataclass
class ModelConfig:
    image_size: int = 64
    codec_factor: int = 4
    latent_channels: int = 4
    codec_widths: tuple[int, ...] = (16, 32, 64)
    unet_widths: tuple[int, ...] = (32, 64, 128)
    emb_dim: int = 128
    groups: int = 8
    noise_seed: int = 1234

    def __post_init__(self):
        self.codec_widths = tuple(self.codec_widths)
        self.unet_widths = tuple(self.unet_widths)
        if 2 ** (len(self.codec_widths) - 1) != self.codec_factor:
            raise ValidationError("codec_widths must provide log2(codec_factor) + 1 stages")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["codec_widths"] = list(self.codec_widths)
        d["unet_widths"] = list(self.unet_widths)
        return d


def zero_conv(cin: int, cout: int, kernel: int = 1) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, kernel, padding=kernel // 2)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``H x W x 3`` (or ``N x H x W x 3``) array to an NCHW tensor."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().to(torch.float64).numpy().transpose(0, 2, 3, 1)
    return arr[0] if arr.shape[0] == 1 else arr


# --------------------------------------------------------------------------- codec


class ResidualUnit(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class LatentCodec(nn.Module):
    """Deterministic convolutional autoencoder with multi-scale skip capture.

    ``latent_scale`` rescales latents to roughly unit variance and is set after
    codec pretraining.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.codec_widths
        self.factor = cfg.codec_factor
        self.enc_in = nn.Conv2d(3, w[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList()
        for i in range(len(w)):
            down = i > 0
            cin = w[i - 1] if down else w[0]
            self.enc_blocks.append(nn.Sequential(
                nn.Conv2d(cin, w[i], 3, stride=2 if down else 1, padding=1), ResidualUnit(w[i]),
            ))
        self.enc_out = nn.Sequential(nn.SiLU(), nn.Conv2d(w[-1], cfg.latent_channels, 3, padding=1))

        rev = w[::-1]
        self.dec_in = nn.Conv2d(cfg.latent_channels, rev[0], 3, padding=1)
        self.dec_blocks = nn.ModuleList()
        for i in range(len(rev)):
            self.dec_blocks.append(nn.Sequential(
                nn.Conv2d(rev[i - 1] if i else rev[0], rev[i], 3, padding=1), ResidualUnit(rev[i]),
            ))
        self.dec_out = nn.Sequential(nn.SiLU(), nn.Conv2d(rev[-1], 3, 3, padding=1))
        self.register_buffer("latent_scale", torch.ones(()))

    @property
    def decoder_widths(self) -> list[int]:
        return [blk[0].out_channels for blk in self.dec_blocks]

    def check_input(self, img: torch.Tensor) -> None:
        if img.shape[-1] % self.factor or img.shape[-2] % self.factor:
            raise ValidationError(f"image size {tuple(img.shape[-2:])} not divisible by codec factor {self.factor}")

    def encode(self, img: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Latent (scaled) plus encoder features ordered coarse to fine."""
        self.check_input(img)
        h = self.enc_in(img * 2 - 1)
        feats = []
        for blk in self.enc_blocks:
            h = blk(h)
            feats.append(h)
        z = self.enc_out(h) * self.latent_scale
        return z, feats[::-1]

    def decode_raw(self, z: torch.Tensor, fusion: "CrossLatentFusion | None" = None,
                   skips: list[torch.Tensor] | None = None) -> torch.Tensor:
        h = self.dec_in(z / self.latent_scale)
        for i, blk in enumerate(self.dec_blocks):
            if i:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = blk(h)
            if fusion is not None:
                h = fusion.inject(i, h, skips)
        return (self.dec_out(h) + 1) / 2

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(0, 1)


class CrossLatentFusion(nn.Module):
    """Zero-initialized 3x3 convs adding encoder skips to the output of each decoder stage."""

    def __init__(self, enc_widths: list[int], dec_widths: list[int]):
        super().__init__()
        self.convs = nn.ModuleList(zero_conv(ce, cd, 3) for ce, cd in zip(enc_widths, dec_widths))

    def inject(self, stage: int, h: torch.Tensor, skips: list[torch.Tensor] | None) -> torch.Tensor:
        if skips is None:
            return h
        if len(skips) != len(self.convs):
            raise ValidationError(f"expected {len(self.convs)} skip scales, got {len(skips)}")
        return h + self.convs[stage](skips[stage])


# --------------------------------------------------------------------------- denoiser


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class DownPath(nn.Module):
    """Input conv plus one residual block per resolution, halving between levels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.unet_widths
        self.conv_in = nn.Conv2d(cfg.latent_channels, w[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, width in enumerate(w):
            self.blocks.append(ResBlock(w[i - 1] if i else w[0], width, cfg.emb_dim, cfg.groups))
            self.downs.append(nn.Conv2d(width, width, 3, stride=2, padding=1) if i < len(w) - 1 else nn.Identity())

    def forward(self, x: torch.Tensor, emb: torch.Tensor, hint: torch.Tensor | None = None):
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        skips = []
        for blk, down in zip(self.blocks, self.downs):
            h = blk(h, emb)
            skips.append(h)
            h = down(h)
        return h, skips


class MidBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.unet_widths[-1]
        self.block1 = ResBlock(w, w, cfg.emb_dim, cfg.groups)
        self.block2 = ResBlock(w, w, cfg.emb_dim, cfg.groups)

    def forward(self, h, emb):
        return self.block2(self.block1(h, emb), emb)


class UpPath(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.unet_widths
        self.blocks = nn.ModuleList()
        prev = w[-1]
        for width in reversed(w):
            self.blocks.append(ResBlock(prev + width, width, cfg.emb_dim, cfg.groups))
            prev = width
        self.norm_out = nn.GroupNorm(min(cfg.groups, w[0]), w[0])
        self.conv_out = nn.Conv2d(w[0], cfg.latent_channels, 3, padding=1)

    def forward(self, h, skips, emb):
        for i, (blk, skip) in enumerate(zip(self.blocks, reversed(skips))):
            if i:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = blk(torch.cat([h, skip], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_embedding(t, self.dim))


class ControlBranch(nn.Module):
    """Trainable copy of the down path and bottleneck fed with the encoded mixed image.

    Every output leaves through a zero-initialized conv, so at initialization
    the branch contributes exact zeros to the denoiser.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.unet_widths
        self.hint = nn.Sequential(
            nn.Conv2d(cfg.latent_channels, w[0], 3, padding=1), nn.SiLU(),
            nn.Conv2d(w[0], w[0], 3, padding=1), nn.SiLU(),
            zero_conv(w[0], w[0]),
        )
        self.down = DownPath(cfg)
        self.mid = MidBlock(cfg)
        self.zero_skips = nn.ModuleList(zero_conv(c, c) for c in w)
        self.zero_mid = zero_conv(w[-1], w[-1])

    def forward(self, z_t, cond_latent, emb):
        h, skips = self.down(z_t, emb, hint=self.hint(cond_latent))
        h = self.mid(h, emb)
        return [zc(s) for zc, s in zip(self.zero_skips, skips)], self.zero_mid(h)


class Dereflector(nn.Module):
    """All trainable parts, partitioned as codec / theta_down / theta_mid / theta_up / phi / fusion / c."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        cfg = self.cfg
        self.codec = LatentCodec(cfg)
        self.time_embed = TimeEmbedding(cfg.emb_dim)
        self.down = DownPath(cfg)
        self.mid = MidBlock(cfg)
        self.up = UpPath(cfg)
        self.control = ControlBranch(cfg)
        enc_widths = list(cfg.codec_widths[::-1])
        self.fusion = CrossLatentFusion(enc_widths, self.codec.decoder_widths)
        self.cond = nn.Parameter(torch.zeros(cfg.emb_dim))
        self.completed_stages: list[str] = []

    # -- partitions -------------------------------------------------------

    _PREFIXES = {
        "codec": ("codec.",),
        "theta_down": ("time_embed.", "down."),
        "theta_mid": ("mid.",),
        "theta_up": ("up.",),
        "phi": ("control.",),
        "fusion": ("fusion.",),
        "c": ("cond",),
    }

    @classmethod
    def partition_of(cls, name: str) -> str:
        hits = [p for p, prefixes in cls._PREFIXES.items() if any(
            name == pre or (pre.endswith(".") and name.startswith(pre)) for pre in prefixes)]
        if len(hits) != 1:
            raise ValidationError(f"parameter {name!r} maps to partitions {hits}")
        return hits[0]

    def partition_state(self, partition: str) -> dict[str, torch.Tensor]:
        """Parameters and buffers belonging to ``partition``, keyed by full name."""
        state = {}
        for name, tensor in self.state_dict(keep_vars=True).items():
            if self.partition_of(name) == partition:
                state[name] = tensor
        return state

    def partition_params(self, partition: str) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if self.partition_of(n) == partition]

    def partition_hash(self, partition: str) -> str:
        digest = hashlib.sha256()
        for name, tensor in sorted(self.partition_state(partition).items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def partition_hashes(self) -> dict[str, str]:
        return {p: self.partition_hash(p) for p in PARTITIONS}

    def set_trainable(self, partitions: set[str] | list[str]) -> None:
        for name, p in self.named_parameters():
            p.requires_grad_(self.partition_of(name) in partitions)

    def init_control_from_denoiser(self) -> None:
        """Copy the frozen down path and bottleneck into the control branch."""
        self.control.down.load_state_dict(self.down.state_dict())
        self.control.mid.load_state_dict(self.mid.state_dict())

    # -- forward pieces ---------------------------------------------------

    def encode(self, img: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        return self.codec.encode(img)

    def embedding(self, t, batch: int) -> torch.Tensor:
        t = torch.as_tensor(t).long().reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)
        return self.time_embed(t) + self.cond

    def denoise(self, z: torch.Tensor, t, cond_latent: torch.Tensor | None = None) -> torch.Tensor:
        """One U-Net pass; the control branch is skipped entirely when ``cond_latent`` is None."""
        emb = self.embedding(t, z.shape[0])
        h, skips = self.down(z, emb)
        if cond_latent is not None:
            if cond_latent.shape != z.shape:
                raise DimensionError(f"conditioning latent {tuple(cond_latent.shape)} vs noisy latent {tuple(z.shape)}")
            ctrl_skips, ctrl_mid = self.control(z, cond_latent, emb)
        h = self.mid(h, emb)
        if cond_latent is not None:
            h = h + ctrl_mid
            skips = [s + c for s, c in zip(skips, ctrl_skips)]
        return self.up(h, skips, emb)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.codec.decode(z)

    def decode_cross_latent(self, z: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        if len(skips) != len(self.fusion.convs):
            raise ValidationError(f"expected {len(self.fusion.convs)} skip scales, got {len(skips)}")
        return self.codec.decode_raw(z, self.fusion, skips).clamp(0, 1)

    def inference_noise(self, latent_shape: tuple[int, ...], dtype=torch.float32) -> torch.Tensor:
        gen = torch.Generator().manual_seed(self.cfg.noise_seed)
        return torch.randn(1, *latent_shape[1:], generator=gen).to(dtype).expand(latent_shape)


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> Dereflector:
    """Construct a model whose random initialization depends only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Dereflector(cfg)


# --------------------------------------------------------------------------- operations


def encode(model: Dereflector, img: np.ndarray | torch.Tensor):
    x = to_tensor(img) if isinstance(img, np.ndarray) else img
    return model.encode(x)


def denoise_one_step(z_T: torch.Tensor, cond_latent: torch.Tensor | None, t, model: Dereflector) -> torch.Tensor:
    return model.denoise(z_T, t, cond_latent)


def decode_cross_latent(z: torch.Tensor, skips: list[torch.Tensor], model: Dereflector) -> torch.Tensor:
    return model.decode_cross_latent(z, skips)


@torch.no_grad()
def infer(mixed: np.ndarray, model: Dereflector, sched: NoiseSchedule | None = None) -> np.ndarray:
    """Encode, denoise once at t=0 from the model's fixed noise, decode with skips.

    ``sched`` is accepted for interface symmetry; inference always targets t=0.
    """
    if "foundation" not in model.completed_stages:
        warnings.warn("running inference with an untrained conditioning branch", RuntimeWarning, stacklevel=2)
    was_training = model.training
    model.eval()
    x = to_tensor(mixed)
    cond, skips = model.encode(x)
    z_T = model.inference_noise(tuple(cond.shape), cond.dtype)
    z0 = model.denoise(z_T, 0, cond)
    out = model.decode_cross_latent(z0, skips)
    model.train(was_training)
    return to_image(out)
