"""Latent codecs: image <-> reduced-resolution latent space.

Two implementations ship. ``identity`` runs diffusion in pixel space (one
latent channel, latent grid = image grid) and makes preservation invariants
bit-exact. ``conv_ae`` is a small strided convolutional autoencoder trained
with a plain reconstruction MSE objective (in-plane factor 4, 3 latent
channels); its latents are rescaled to roughly unit variance before
diffusion sees them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import (
    ConfigError,
    DataError,
    InvalidParameterError,
    ShapeError,
    TrainingFailureError,
)
from .geometry import VolumeGrid
from .volumeio import build_checkpoint_blob, load_checkpoint, save_checkpoint

CODEC_KINDS = ("identity", "conv_ae")


class LatentCodec:
    """Encoder/decoder pair; frozen codecs are safe for concurrent use."""

    kind: str
    image_grid: VolumeGrid
    latent_grid: VolumeGrid
    channels: int

    def encode(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def header(self) -> dict:
        return {
            "format": "spinepaint-codec-v1",
            "kind": self.kind,
            "image_grid": self.image_grid.to_dict(),
            "latent_grid": self.latent_grid.to_dict(),
            "channels": self.channels,
        }

    def fingerprint(self) -> str:
        return hashlib.sha256(
            build_checkpoint_blob(self.header(), self._arrays())).hexdigest()

    def _arrays(self) -> dict[str, np.ndarray]:
        return {}

    def _check_image(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        spatial = self.image_grid.shape
        if x.shape == spatial:
            return x
        if x.shape[1:] == spatial:
            return x
        raise ShapeError(f"image shape {x.shape} does not match grid {spatial}")

    def _check_latent(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        expected = (self.channels,) + self.latent_grid.shape
        if z.shape == expected or z.shape[1:] == expected:
            return z
        raise ShapeError(f"latent shape {z.shape} does not match {expected}")


class IdentityCodec(LatentCodec):
    """Pixel-space passthrough; latent = image with one channel axis."""

    kind = "identity"

    def __init__(self, image_grid: VolumeGrid):
        self.image_grid = image_grid
        self.latent_grid = image_grid
        self.channels = 1

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = self._check_image(x)
        if x.shape == self.image_grid.shape:
            return x[None]
        return x[:, None]

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = self._check_latent(z)
        if z.ndim == len(self.latent_grid.shape) + 1:
            return z[0]
        return z[:, 0]


class _ConvEncoder(nn.Module):
    def __init__(self, width: int, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width + width // 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width + width // 2, width + width // 2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width + width // 2, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * width, channels, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class _ConvDecoder(nn.Module):
    def __init__(self, width: int, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, 2 * width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * width, width + width // 2, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width + width // 2, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, 1, 3, padding=1),
        )

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class ConvCodec(LatentCodec):
    """Strided conv autoencoder; encode() divides by a stored latent scale."""

    kind = "conv_ae"

    def __init__(self, image_grid: VolumeGrid, channels: int = 3, factor: int = 4,
                 width: int = 32, scale: float = 1.0):
        if image_grid.ndim != 2:
            raise ConfigError("conv_ae codec supports 2-D grids only")
        self.image_grid = image_grid
        self.latent_grid = image_grid.downsample(factor)
        self.channels = channels
        self.factor = factor
        self.width = width
        self.scale = float(scale)
        self.encoder = _ConvEncoder(width, channels)
        self.decoder = _ConvDecoder(width, channels)
        self.encoder.eval()
        self.decoder.eval()

    def header(self) -> dict:
        h = super().header()
        h.update({"factor": self.factor, "width": self.width, "scale": self.scale})
        return h

    def _arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, module in (("encoder", self.encoder), ("decoder", self.decoder)):
            for name, tensor in module.state_dict().items():
                out[f"{prefix}.{name}"] = tensor.detach().cpu().numpy()
        return out

    def _load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for prefix, module in (("encoder", self.encoder), ("decoder", self.decoder)):
            state = {name: torch.from_numpy(arrays[f"{prefix}.{name}"].copy())
                     for name in module.state_dict()}
            module.load_state_dict(state)

    @torch.no_grad()
    def encode(self, x: np.ndarray) -> np.ndarray:
        x = self._check_image(x)
        single = x.shape == self.image_grid.shape
        batch = x[None] if single else x
        z = self.encoder(torch.from_numpy(batch).unsqueeze(1)).numpy() / self.scale
        return z[0] if single else z

    @torch.no_grad()
    def decode(self, z: np.ndarray) -> np.ndarray:
        z = self._check_latent(z)
        single = z.ndim == len(self.latent_grid.shape) + 1
        batch = z[None] if single else z
        x = self.decoder(torch.from_numpy(batch * self.scale)).squeeze(1).numpy()
        return x[0] if single else x


@dataclass
class CodecTrainConfig:
    kind: str = "conv_ae"
    batch_size: int = 32
    lr: float = 1e-3
    max_steps: int = 1500
    val_every: int = 100
    patience: int = 10
    seed: int = 0
    width: int = 32
    channels: int = 3
    factor: int = 4

    def __post_init__(self):
        if self.kind not in CODEC_KINDS:
            raise InvalidParameterError(f"unknown codec kind {self.kind!r}")
        if self.batch_size < 1 or self.lr <= 0 or self.max_steps < 1:
            raise InvalidParameterError("batch_size/max_steps must be >= 1 and lr > 0")


def train_codec(train_images: np.ndarray, val_images: np.ndarray,
                image_grid: VolumeGrid, config: CodecTrainConfig,
                log=None) -> tuple[LatentCodec, list[dict]]:
    """Fit a codec; returns (codec, history rows of {step, split, loss})."""
    if config.kind == "identity":
        return IdentityCodec(image_grid), []
    train_images = np.asarray(train_images, dtype=np.float32)
    val_images = np.asarray(val_images, dtype=np.float32)
    if len(train_images) == 0 or len(val_images) == 0:
        raise DataError("codec training requires nonempty train and val sets")

    torch.manual_seed(config.seed)
    codec = ConvCodec(image_grid, channels=config.channels, factor=config.factor,
                      width=config.width)
    codec.encoder.train()
    codec.decoder.train()
    params = list(codec.encoder.parameters()) + list(codec.decoder.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    x_val = torch.from_numpy(val_images).unsqueeze(1)

    def val_loss() -> float:
        codec.encoder.eval()
        codec.decoder.eval()
        with torch.no_grad():
            losses = []
            for start in range(0, len(x_val), 64):
                chunk = x_val[start:start + 64]
                recon = codec.decoder(codec.encoder(chunk))
                losses.append(((recon - chunk) ** 2).mean().item() * len(chunk))
        codec.encoder.train()
        codec.decoder.train()
        return float(sum(losses) / len(x_val))

    history = []
    best = float("inf")
    best_state = None
    stale = 0
    for step in range(1, config.max_steps + 1):
        idx = rng.integers(0, len(train_images), size=config.batch_size)
        batch = torch.from_numpy(train_images[idx]).unsqueeze(1)
        recon = codec.decoder(codec.encoder(batch))
        loss = ((recon - batch) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingFailureError(f"codec loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.val_every == 0 or step == config.max_steps:
            v = val_loss()
            history.append({"step": step, "split": "train", "loss": float(loss.item())})
            history.append({"step": step, "split": "val", "loss": v})
            if log:
                log(f"codec step {step}: train {loss.item():.5f} val {v:.5f}")
            if v < best:
                best = v
                best_state = (
                    {n: t.detach().clone() for n, t in codec.encoder.state_dict().items()},
                    {n: t.detach().clone() for n, t in codec.decoder.state_dict().items()},
                )
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if best_state is not None:
        codec.encoder.load_state_dict(best_state[0])
        codec.decoder.load_state_dict(best_state[1])
    codec.encoder.eval()
    codec.decoder.eval()

    # rescale latents to unit-ish variance for the diffusion stage
    with torch.no_grad():
        sample = torch.from_numpy(train_images[: min(len(train_images), 512)]).unsqueeze(1)
        latents = codec.encoder(sample)
        codec.scale = float(latents.std().item()) or 1.0
    return codec, history


def save_codec(path, codec: LatentCodec, extra: dict | None = None) -> str:
    header = codec.header()
    if extra:
        header["meta"] = extra
    return save_checkpoint(path, header, codec._arrays())


def load_codec(path) -> tuple[LatentCodec, str]:
    header, arrays, fp = load_checkpoint(path)
    if header.get("format") != "spinepaint-codec-v1":
        raise DataError(f"{path}: not a codec checkpoint")
    image_grid = VolumeGrid.from_dict(header["image_grid"])
    if header["kind"] == "identity":
        return IdentityCodec(image_grid), fp
    codec = ConvCodec(image_grid, channels=header["channels"], factor=header["factor"],
                      width=header["width"], scale=header["scale"])
    codec._load_arrays(arrays)
    return codec, fp
