"""Noise-prediction networks and the predictor interface used by samplers.

The trainable network is a small 2-D U-Net. It sees the spatial noise
pattern through the weight field W concatenated to the latent as an extra
input channel, the global step t through a sinusoidal embedding, and the
level/severity one-hots through either cross attention over a few learned
context tokens or a plain additive embedding (miniature configs).

``AnalyticGaussianDenoiser`` implements the same predictor interface in
closed form for a standard-normal prior; samplers are tested against it
without any training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidParameterError, ShapeError
from .geometry import LEVELS, SEVERITIES
from .schedule import NoiseSchedule, round_half_up

COND_DIM = len(LEVELS) + 2


@dataclass(frozen=True)
class Conditioning:
    """Level and severity one-hots for one sample."""

    level: str
    pathology: str
    severity: str

    def vector(self) -> np.ndarray:
        if self.level not in LEVELS:
            raise InvalidParameterError(f"unknown level {self.level!r}")
        severities = SEVERITIES.get(self.pathology)
        if severities is None or self.severity not in severities:
            raise InvalidParameterError(
                f"unknown pathology/severity {self.pathology!r}/{self.severity!r}")
        v = np.zeros(COND_DIM, dtype=np.float32)
        v[LEVELS.index(self.level)] = 1.0
        v[len(LEVELS) + severities.index(self.severity)] = 1.0
        return v


def expand_weights(w: np.ndarray, like: np.ndarray, spatial_ndim: int) -> np.ndarray:
    """Broadcast a (B?, *spatial) weight array against a (B, C, *spatial) array."""
    w = np.asarray(w)
    if w.shape == like.shape:
        return w
    if w.shape == like.shape[-spatial_ndim:]:
        return w[(None,) * (like.ndim - spatial_ndim)]
    if w.ndim == spatial_ndim + 1 and w.shape[0] == like.shape[0] \
            and w.shape[1:] == like.shape[-spatial_ndim:]:
        return w[(slice(None),) + (None,) * (like.ndim - spatial_ndim - 1)]
    raise ShapeError(f"weight shape {w.shape} incompatible with {like.shape}")


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 3
    base_width: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 4)
    num_res_blocks: int = 1
    time_embed_dim: int = 128
    sin_embed_dim: int = 64
    context_tokens: int = 4
    ctx_dim: int = 64
    heads: int = 2
    groups: int = 8
    cross_attention: bool = True
    attn_levels: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        for name in ("latent_channels", "base_width", "num_res_blocks",
                     "time_embed_dim", "sin_embed_dim", "context_tokens",
                     "ctx_dim", "heads", "groups"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be positive")
        if len(self.channel_mult) < 2:
            raise InvalidParameterError("channel_mult needs at least two levels")
        object.__setattr__(self, "channel_mult", tuple(self.channel_mult))
        object.__setattr__(self, "attn_levels", tuple(self.attn_levels))

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "base_width": self.base_width,
            "channel_mult": list(self.channel_mult),
            "num_res_blocks": self.num_res_blocks,
            "time_embed_dim": self.time_embed_dim,
            "sin_embed_dim": self.sin_embed_dim,
            "context_tokens": self.context_tokens,
            "ctx_dim": self.ctx_dim,
            "heads": self.heads,
            "groups": self.groups,
            "cross_attention": self.cross_attention,
            "attn_levels": list(self.attn_levels),
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        kw = dict(d)
        kw["channel_mult"] = tuple(kw["channel_mult"])
        kw["attn_levels"] = tuple(kw["attn_levels"])
        return DenoiserConfig(**kw)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


def _norm(groups: int, channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, channels), channels)


class _ResBlock(nn.Module):
    def __init__(self, c_in, c_out, time_dim, groups):
        super().__init__()
        self.norm1 = _norm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(time_dim, c_out)
        self.norm2 = _norm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.emb_proj(nn.functional.silu(emb))[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class _CrossAttention(nn.Module):
    """Pixels attend over a handful of conditioning tokens."""

    def __init__(self, channels, ctx_dim, heads, groups):
        super().__init__()
        self.heads = heads
        self.norm = _norm(groups, channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(ctx_dim, channels)
        self.to_v = nn.Linear(ctx_dim, channels)
        self.proj = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, ctx):
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k = self.to_k(ctx)
        v = self.to_v(ctx)
        d = c // self.heads
        q = q.reshape(b, -1, self.heads, d).transpose(1, 2)
        k = k.reshape(b, -1, self.heads, d).transpose(1, 2)
        v = v.reshape(b, -1, self.heads, d).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class WeightedUNet(nn.Module):
    """eps-prediction U-Net over latents with a weight-field input channel."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        cfg = config
        w0 = cfg.base_width
        time_dim = cfg.time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.sin_embed_dim, time_dim), nn.SiLU(),
            nn.Linear(time_dim, time_dim))
        if cfg.cross_attention:
            self.ctx_mlp = nn.Sequential(
                nn.Linear(COND_DIM, cfg.context_tokens * cfg.ctx_dim), nn.SiLU(),
                nn.Linear(cfg.context_tokens * cfg.ctx_dim,
                          cfg.context_tokens * cfg.ctx_dim))
        else:
            self.cond_mlp = nn.Sequential(
                nn.Linear(COND_DIM, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))

        self.conv_in = nn.Conv2d(cfg.latent_channels + 1, w0, 3, padding=1)
        widths = [w0 * m for m in cfg.channel_mult]

        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        skip_widths = [w0]
        ch = w0
        for level, width in enumerate(widths):
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(_ResBlock(ch, width, time_dim, cfg.groups))
                attns.append(self._maybe_attn(level, width))
                ch = width
                skip_widths.append(ch)
            self.down_blocks.append(blocks)
            self.down_attns.append(attns)
            if level < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_widths.append(ch)
            else:
                self.downsamples.append(nn.Identity())

        self.mid_block1 = _ResBlock(ch, ch, time_dim, cfg.groups)
        self.mid_attn = self._maybe_attn(len(widths) - 1, ch)
        self.mid_block2 = _ResBlock(ch, ch, time_dim, cfg.groups)

        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(len(widths))):
            width = widths[level]
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.num_res_blocks + 1):
                blocks.append(_ResBlock(ch + skip_widths.pop(), width, time_dim, cfg.groups))
                attns.append(self._maybe_attn(level, width))
                ch = width
            self.up_blocks.append(blocks)
            self.up_attns.append(attns)
            if level > 0:
                self.upsamples.append(nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, ch, 3, padding=1)))
            else:
                self.upsamples.append(nn.Identity())

        self.out_norm = _norm(cfg.groups, ch)
        self.out_conv = nn.Conv2d(ch, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _maybe_attn(self, level, width):
        if self.config.cross_attention and level in self.config.attn_levels:
            return _CrossAttention(width, self.config.ctx_dim, self.config.heads,
                                   self.config.groups)
        return None

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        emb = self.time_mlp(timestep_embedding(t, cfg.sin_embed_dim).to(x.dtype))
        if cfg.cross_attention:
            ctx = self.ctx_mlp(cond).reshape(len(x), cfg.context_tokens, cfg.ctx_dim)
        else:
            ctx = None
            emb = emb + self.cond_mlp(cond)

        h = self.conv_in(x)
        skips = [h]
        for level in range(len(cfg.channel_mult)):
            for block, attn in zip(self.down_blocks[level], self.down_attns[level]):
                h = block(h, emb)
                if attn is not None:
                    h = attn(h, ctx)
                skips.append(h)
            if not isinstance(self.downsamples[level], nn.Identity):
                h = self.downsamples[level](h)
                skips.append(h)

        h = self.mid_block1(h, emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, ctx)
        h = self.mid_block2(h, emb)

        for i, level in enumerate(reversed(range(len(cfg.channel_mult)))):
            for block, attn in zip(self.up_blocks[i], self.up_attns[i]):
                h = block(torch.cat([h, skips.pop()], dim=1), emb)
                if attn is not None:
                    h = attn(h, ctx)
            if not isinstance(self.upsamples[i], nn.Identity):
                h = self.upsamples[i](h)

        return self.out_conv(nn.functional.silu(self.out_norm(h)))


class NoisePredictor:
    """Interface consumed by the samplers (numpy in, numpy out)."""

    def predict(self, z: np.ndarray, t: int, w: np.ndarray,
                cond: np.ndarray | None) -> np.ndarray:
        raise NotImplementedError


class TorchDenoiser(NoisePredictor):
    """Frozen WeightedUNet behind the predictor interface."""

    def __init__(self, model: WeightedUNet):
        self.model = model
        self.model.eval()

    @torch.no_grad()
    def predict(self, z, t, w, cond):
        z = np.asarray(z)
        squeeze = z.ndim == 3
        if squeeze:
            z = z[None]
        w_full = np.broadcast_to(expand_weights(w, z, z.ndim - 2), z[:, :1].shape)
        x = np.concatenate([z, w_full], axis=1).astype(np.float32)
        t_vec = torch.full((len(x),), int(t), dtype=torch.float64)
        if cond is None:
            cond_t = torch.zeros(len(x), COND_DIM)
        else:
            cond_t = torch.as_tensor(np.asarray(cond, dtype=np.float32))
            if cond_t.ndim == 1:
                cond_t = cond_t[None].expand(len(x), -1)
        eps = self.model(torch.from_numpy(x), t_vec, cond_t).numpy().astype(z.dtype)
        return eps[0] if squeeze else eps


class AnalyticGaussianDenoiser(NoisePredictor):
    """Optimal eps for a zero-mean Gaussian prior over the clean latents.

    For x0 ~ N(0, prior_var I) and the weighted forward process, the
    posterior-mean noise estimate at a voxel with cumulative product abar is
    z * sqrt(1 - abar) / (abar * prior_var + 1 - abar).
    """

    def __init__(self, sched: NoiseSchedule, prior_var: float = 1.0):
        self.sched = sched
        self.prior_var = float(prior_var)

    def predict(self, z, t, w, cond):
        z = np.asarray(z, dtype=np.float64)
        t_v = round_half_up(np.asarray(w, dtype=np.float64) * float(t))
        abar = expand_weights(self.sched.alpha_bar[t_v], z, max(z.ndim - 2, 1))
        return z * np.sqrt(1.0 - abar) / (abar * self.prior_var + (1.0 - abar))
