"""Frozen patch classifier: evaluation features and pathology judgments.

A small CNN is trained per pathology on landmark patches (normal patches
are centered on a sampled insertion point so both classes share spatial
context). Its penultimate GAP features feed the Frechet distance; its two
sigmoid heads {normal, pathology} provide the pathology-presence judgment
and an in-distribution proxy (summed probability mass).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import CalibrationError, DataError, InvalidParameterError
from .metrics import crop_landmark_patch
from .sampling import sample_insertion_point
from .volumeio import load_checkpoint, save_checkpoint


@dataclass
class ClassifierConfig:
    patch_extent_mm: tuple[float, float] = (25.0, 25.0)
    feature_dim: int = 32
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    min_accuracy: float = 0.9

    def __post_init__(self):
        if self.feature_dim < 1 or self.epochs < 1 or self.batch_size < 1:
            raise InvalidParameterError("feature_dim/epochs/batch_size must be >= 1")


class _PatchNet(nn.Module):
    def __init__(self, feature_dim: int):
        super().__init__()
        self.features_net = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.GroupNorm(4, 16), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GroupNorm(8, 32), nn.SiLU(),
            nn.Conv2d(32, feature_dim, 3, padding=1), nn.GroupNorm(8, feature_dim),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head = nn.Linear(feature_dim, 2)

    def forward(self, x):
        return self.head(self.features_net(x))


class FeatureExtractor:
    """Frozen classifier: deterministic features + {normal, pathology} heads."""

    def __init__(self, net: _PatchNet, pathology: str, config: ClassifierConfig,
                 val_accuracy: float = float("nan")):
        self.net = net
        self.net.eval()
        self.pathology = pathology
        self.config = config
        self.val_accuracy = val_accuracy

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @torch.no_grad()
    def features(self, patches: np.ndarray) -> np.ndarray:
        x = self._to_tensor(patches)
        out = [self.net.features_net(x[s:s + 256]).numpy() for s in range(0, len(x), 256)]
        return np.concatenate(out)

    @torch.no_grad()
    def probs(self, patches: np.ndarray) -> np.ndarray:
        """Independent sigmoid probabilities, columns (normal, pathology)."""
        x = self._to_tensor(patches)
        out = [torch.sigmoid(self.net(x[s:s + 256])).numpy()
               for s in range(0, len(x), 256)]
        return np.concatenate(out)

    @staticmethod
    def _to_tensor(patches: np.ndarray) -> torch.Tensor:
        patches = np.asarray(patches, dtype=np.float32)
        if patches.ndim == 2:
            patches = patches[None]
        return torch.from_numpy(patches).unsqueeze(1)

    def header(self) -> dict:
        return {
            "format": "spinepaint-classifier-v1",
            "pathology": self.pathology,
            "patch_extent_mm": list(self.config.patch_extent_mm),
            "feature_dim": self.config.feature_dim,
            "val_accuracy": self.val_accuracy,
        }


def pathology_rate(probs: np.ndarray) -> float:
    """Fraction of patches judged pathological (p_pathology > p_normal)."""
    probs = np.atleast_2d(probs)
    return float((probs[:, 1] > probs[:, 0]).mean())


def in_distribution_rate(probs: np.ndarray, mass_threshold: float = 0.9) -> float:
    """Fraction with normal-or-pathology probability mass >= the threshold."""
    probs = np.atleast_2d(probs)
    return float((probs.sum(axis=1) >= mass_threshold).mean())


def _collect_patches(dataset, pathology: str, split: str, config: ClassifierConfig):
    patches, labels = [], []
    records = dataset.select(split=split, condition=pathology) \
        + dataset.select(split=split, condition="normal")
    if not records:
        raise DataError(f"no {split} records for classifier training")
    for rec in records:
        sample = dataset.load_sample(rec)
        if sample.pathology is not None:
            center = sample.landmark.position_mm
            label = 1.0
        else:
            rng = np.random.default_rng((config.seed, int(rec["id"])))
            severity = "small" if pathology == "dh" else "moderate"
            center = sample_insertion_point(sample, pathology, severity, rng).position_mm
            label = 0.0
        patch, _ = crop_landmark_patch(sample.image, sample.grid, center,
                                       config.patch_extent_mm)
        patches.append(patch)
        labels.append(label)
    return np.stack(patches).astype(np.float32), np.asarray(labels, dtype=np.float32)


def train_feature_classifier(dataset, pathology: str,
                             config: ClassifierConfig | None = None,
                             log=None) -> FeatureExtractor:
    """Train + freeze the evaluation classifier; aborts below min_accuracy."""
    config = config or ClassifierConfig()
    x_train, y_train = _collect_patches(dataset, pathology, "train", config)
    x_val, y_val = _collect_patches(dataset, pathology, "val", config)

    torch.manual_seed(config.seed)
    net = _PatchNet(config.feature_dim)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    loss_fn = nn.BCEWithLogitsLoss()
    rng = np.random.default_rng(config.seed)
    xt = torch.from_numpy(x_train).unsqueeze(1)
    # targets are one-hot over (normal, pathology) with independent sigmoids
    yt = torch.stack([1.0 - torch.from_numpy(y_train), torch.from_numpy(y_train)], dim=1)

    net.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(xt))
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            logits = net(xt[idx])
            loss = loss_fn(logits, yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        if log and (epoch + 1) % 10 == 0:
            log(f"classifier epoch {epoch + 1}: train loss {loss.item():.4f}")
    net.eval()

    clf = FeatureExtractor(net, pathology, config)
    probs = clf.probs(x_val)
    predicted = probs[:, 1] > probs[:, 0]
    accuracy = float((predicted == (y_val > 0.5)).mean())
    clf.val_accuracy = accuracy
    if log:
        log(f"classifier val accuracy: {accuracy:.4f}")
    if accuracy < config.min_accuracy:
        raise CalibrationError(
            f"classifier accuracy {accuracy:.3f} < {config.min_accuracy}; "
            "evaluation would be unreliable")
    return clf


def save_classifier(path, clf: FeatureExtractor) -> str:
    arrays = {name: t.detach().cpu().numpy() for name, t in clf.net.state_dict().items()}
    return save_checkpoint(path, clf.header(), arrays)


def load_classifier(path) -> tuple[FeatureExtractor, str]:
    header, arrays, fp = load_checkpoint(path)
    if header.get("format") != "spinepaint-classifier-v1":
        raise DataError(f"{path}: not a classifier checkpoint")
    config = ClassifierConfig(patch_extent_mm=tuple(header["patch_extent_mm"]),
                              feature_dim=header["feature_dim"])
    net = _PatchNet(config.feature_dim)
    net.load_state_dict({n: torch.from_numpy(arrays[n].copy())
                         for n in net.state_dict()})
    clf = FeatureExtractor(net, header["pathology"], config,
                           val_accuracy=header["val_accuracy"])
    return clf, fp
