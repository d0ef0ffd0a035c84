"""Diffusion training on pathology-only samples with the weighted forward process.

Three weight modes cover the method and both baselines with one loop:
``gaussian`` (the weighted method), ``mask`` (ROI-restricted baseline), and
``uniform`` (full-latent synthesis model used by the RePaint baseline).
The loss is the masked eps-prediction MSE over voxels whose effective
timestep is >= 1; untouched voxels carry no gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .codec import LatentCodec
from .denoiser import Conditioning, DenoiserConfig, WeightedUNet
from .errors import DataError, InvalidParameterError, TrainingFailureError
from .geometry import resample_weights, threshold_mask
from .schedule import NoiseSchedule
from .volumeio import load_checkpoint, save_checkpoint, write_json

WEIGHT_MODES = ("gaussian", "mask", "uniform")
VARIANT_WEIGHT_MODES = {"weighted": "gaussian", "masked": "mask", "repaint-base": "uniform"}


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    max_steps: int = 4000
    val_every: int = 200
    patience: int = 20
    seed: int = 0
    weight_mode: str = "gaussian"
    sigma_mm: float = 16.0
    tau: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be >= 1")
        if self.lr <= 0:
            raise InvalidParameterError("lr must be > 0")
        if self.weight_mode not in WEIGHT_MODES:
            raise InvalidParameterError(
                f"unknown weight_mode {self.weight_mode!r}; expected {WEIGHT_MODES}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("batch_size", "lr", "max_steps", "val_every", "patience", "seed",
                 "weight_mode", "sigma_mm", "tau")}


def training_loss(model: WeightedUNet, x0: torch.Tensor, w: torch.Tensor,
                  t: torch.Tensor, cond: torch.Tensor, alpha_bar: torch.Tensor,
                  noise: torch.Tensor) -> torch.Tensor:
    """Masked eps-prediction loss for one batch.

    Noise enters per voxel at round(w * t); the squared error is averaged
    over voxel-channels with effective timestep >= 1 only.
    """
    t_v = torch.floor(w * t.reshape(-1, *([1] * (w.ndim - 1))) + 0.5).long()
    abar = alpha_bar[t_v].unsqueeze(1).to(x0.dtype)
    x_t = torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise
    eps_hat = model(torch.cat([x_t, w.unsqueeze(1).to(x0.dtype)], dim=1),
                    t.to(torch.float64), cond)
    active = (t_v >= 1).unsqueeze(1).to(x0.dtype)
    count = active.sum() * x0.shape[1]
    return (active * (eps_hat - noise) ** 2).sum() / count


@dataclass
class TrainResult:
    checkpoint_path: str
    fingerprint: str
    best_step: int
    best_val: float
    initial_val: float
    history: list


def _sample_weight_field(sample, codec: LatentCodec, config: TrainConfig) -> np.ndarray:
    if config.weight_mode == "uniform":
        return np.ones(codec.latent_grid.shape, dtype=np.float64)
    w = resample_weights(sample.landmark, config.sigma_mm, codec.image_grid,
                         codec.latent_grid)
    if config.weight_mode == "mask":
        return threshold_mask(w, config.tau).values.astype(np.float64)
    return w.values


def prepare_training_arrays(samples, codec: LatentCodec, config: TrainConfig):
    """Encode latents and precompute weight fields + conditioning vectors."""
    if not samples:
        raise DataError("empty training dataset")
    for s in samples:
        if s.landmark is None or s.severity is None:
            raise DataError(f"sample {s.sample_id} lacks a landmark/severity label")
    pathologies = {s.pathology for s in samples}
    if len(pathologies) != 1:
        raise DataError(f"mixed pathologies in training set: {sorted(pathologies)}")
    images = np.stack([s.image for s in samples]).astype(np.float32)
    latents = []
    for start in range(0, len(images), 64):
        latents.append(codec.encode(images[start:start + 64]))
    latents = np.concatenate(latents)
    weights = np.stack([_sample_weight_field(s, codec, config) for s in samples])
    conds = np.stack([Conditioning(s.level, s.pathology, s.severity).vector()
                      for s in samples])
    return latents.astype(np.float32), weights, conds, pathologies.pop()


def train(train_samples, val_samples, codec: LatentCodec, sched: NoiseSchedule,
          config: TrainConfig, model_config: DenoiserConfig, out_dir,
          codec_fingerprint: str = "", log=None) -> TrainResult:
    """Train one denoiser variant; keeps the best-validation checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if model_config.latent_channels != codec.channels:
        raise InvalidParameterError(
            f"model latent_channels {model_config.latent_channels} != codec channels "
            f"{codec.channels}")

    x_train, w_train, c_train, pathology = prepare_training_arrays(
        train_samples, codec, config)
    x_val, w_val, c_val, _ = prepare_training_arrays(val_samples, codec, config)

    torch.manual_seed(config.seed)
    model = WeightedUNet(model_config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    alpha_bar = torch.from_numpy(sched.alpha_bar)
    rng = np.random.default_rng(config.seed)

    # frozen validation draws: one (t, noise) pair per val sample
    val_rng = np.random.default_rng((config.seed, 0x5EED))
    t_val = torch.from_numpy(val_rng.integers(1, sched.T + 1, size=len(x_val)))
    noise_val = torch.from_numpy(
        val_rng.standard_normal(x_val.shape).astype(np.float32))
    xv = torch.from_numpy(x_val)
    wv = torch.from_numpy(w_val)
    cv = torch.from_numpy(c_val)

    def validation_loss() -> float:
        model.eval()
        total, count = 0.0, 0
        with torch.no_grad():
            for s in range(0, len(xv), 64):
                sl = slice(s, min(s + 64, len(xv)))
                loss = training_loss(model, xv[sl], wv[sl], t_val[sl], cv[sl],
                                     alpha_bar, noise_val[sl])
                total += loss.item() * (sl.stop - sl.start)
                count += sl.stop - sl.start
        model.train()
        return total / count

    xt = torch.from_numpy(x_train)
    wt = torch.from_numpy(w_train)
    ct = torch.from_numpy(c_train)
    gen = torch.Generator().manual_seed(config.seed)

    header = {
        "format": "spinepaint-denoiser-v1",
        "model": model_config.to_dict(),
        "schedule": sched.params(),
        "train": config.to_dict(),
        "codec_fingerprint": codec_fingerprint,
        "pathology": pathology,
        "latent_grid": codec.latent_grid.to_dict(),
    }
    write_json(out_dir / "config.json", {**header, "n_train": len(x_train),
                                         "n_val": len(x_val)})

    history = []
    model.train()
    initial_val = validation_loss()
    best_val, best_step, best_state = initial_val, 0, {
        k: v.detach().clone() for k, v in model.state_dict().items()}
    history.append({"step": 0, "split": "val", "loss": initial_val})
    stale = 0

    def save_best() -> tuple[str, str]:
        arrays = {k: v.cpu().numpy() for k, v in best_state.items()}
        path = out_dir / "denoiser.spckpt"
        fp = save_checkpoint(path, {**header, "best_step": best_step,
                                    "best_val": best_val}, arrays)
        return str(path), fp

    for step in range(1, config.max_steps + 1):
        idx = rng.integers(0, len(xt), size=config.batch_size)
        t = torch.from_numpy(rng.integers(1, sched.T + 1, size=config.batch_size))
        noise = torch.randn(
            (config.batch_size,) + xt.shape[1:], generator=gen, dtype=torch.float32)
        loss = training_loss(model, xt[idx], wt[idx], t, ct[idx], alpha_bar, noise)
        if not torch.isfinite(loss):
            save_best()
            raise TrainingFailureError(
                f"loss became non-finite at step {step}; best checkpoint retained")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.val_every == 0 or step == config.max_steps:
            v = validation_loss()
            history.append({"step": step, "split": "train", "loss": float(loss.item())})
            history.append({"step": step, "split": "val", "loss": v})
            if log:
                log(f"step {step}: train {loss.item():.5f} val {v:.5f}")
            if v < best_val:
                best_val, best_step = v, step
                best_state = {k: p.detach().clone() for k, p in model.state_dict().items()}
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break

    with open(out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "split", "loss"])
        writer.writeheader()
        writer.writerows(history)
    write_json(out_dir / "seed.json", {"seed": config.seed})
    path, fp = save_best()
    return TrainResult(path, fp, best_step, best_val, initial_val, history)


def load_denoiser(path) -> tuple[WeightedUNet, dict, str]:
    header, arrays, fp = load_checkpoint(path)
    if header.get("format") != "spinepaint-denoiser-v1":
        raise DataError(f"{path}: not a denoiser checkpoint")
    model = WeightedUNet(DenoiserConfig.from_dict(header["model"]))
    state = {name: torch.from_numpy(arrays[name].copy()) for name in model.state_dict()}
    model.load_state_dict(state)
    model.eval()
    return model, header, fp
