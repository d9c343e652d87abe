"""Orientation separator: a small CNN with dilated convolutions.

Architecture (fixed): 32x32x1 input; two standard 3x3 convolutions (16 then 32
channels, stride 1, ReLU, each followed by 2x2 max-pool) for local features;
then 3x3 convolutions with dilation 2 and 4 (64 channels each, ReLU, same
padding) to widen the receptive field over the whole input; global average
pool; fully connected 64 -> 3; softmax.

Routing is always by *predicted* orientation so downstream training sees the
same partition a label-free deployment would.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetManifest, ManifestEntry, Orientation, SliceImage
from .preprocess import prepare_for_separator

CHECKPOINT_VERSION = 1

# (kernel, stride, dilation) per layer, pools included; used for receptive-field
# arithmetic and checkpoint compatibility checks.
ARCHITECTURE = (
    ("conv", 3, 1, 1, 1, 16),
    ("pool", 2, 2, 1, 16, 16),
    ("conv", 3, 1, 1, 16, 32),
    ("pool", 2, 2, 1, 32, 32),
    ("conv", 3, 1, 2, 32, 64),
    ("conv", 3, 1, 4, 64, 64),
)


class SeparatorError(RuntimeError):
    """Raised for invalid training inputs or incompatible checkpoints."""


class _SeparatorNet(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, kernel_size=3, padding=1)
        self.conv3 = nn.Conv2d(32, 64, kernel_size=3, padding=2, dilation=2)
        self.conv4 = nn.Conv2d(64, 64, kernel_size=3, padding=4, dilation=4)
        self.fc = nn.Linear(64, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.conv3(x))
        x = F.relu(self.conv4(x))
        x = x.mean(dim=(2, 3))
        return self.fc(x)


@dataclass
class SeparatorModel:
    net: _SeparatorNet
    seed: int
    trained: bool = False
    epoch_losses: list[float] = field(default_factory=list)

    def probabilities(self, batch: torch.Tensor) -> torch.Tensor:
        self.net.eval()
        with torch.no_grad():
            return F.softmax(self.net(batch), dim=1)


@dataclass
class OrientationPrediction:
    slice_id: str
    predicted: Orientation
    probabilities: np.ndarray  # (p_axial, p_sagittal, p_coronal)


@dataclass
class SeparatorTrainConfig:
    epochs: int = 50
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32


def build_separator(seed: int) -> SeparatorModel:
    """Construct the fixed architecture with seed-deterministic initialization."""
    torch.manual_seed(seed)
    return SeparatorModel(net=_SeparatorNet(), seed=seed)


def _to_batch(slices: Sequence[SliceImage]) -> torch.Tensor:
    arrays = [prepare_for_separator(s).pixels for s in slices]
    return torch.from_numpy(np.stack(arrays))


def train_separator(
    model: SeparatorModel,
    train_set: Sequence[SliceImage],
    config: SeparatorTrainConfig | None = None,
) -> SeparatorModel:
    """Train with cross-entropy and SGD (lr 0.001, momentum 0.9) for 50 epochs.

    Every slice must carry an orientation label. Per-epoch mean training loss is
    recorded on the model. Single-threaded parameter updates; deterministic for
    a fixed (model seed, data) pair.
    """
    config = config or SeparatorTrainConfig()
    if len(train_set) == 0:
        raise SeparatorError("empty training set")
    for s in train_set:
        if s.orientation_label is None:
            raise SeparatorError(f"slice {s.id!r} lacks an orientation label")

    inputs = _to_batch(train_set)
    labels = torch.tensor([s.orientation_label.value for s in train_set])
    opt = torch.optim.SGD(
        model.net.parameters(), lr=config.learning_rate, momentum=config.momentum
    )
    shuffler = torch.Generator().manual_seed(model.seed)
    model.net.train()
    model.epoch_losses = []
    n = len(train_set)
    for _ in range(config.epochs):
        perm = torch.randperm(n, generator=shuffler)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            logits = model.net(inputs[idx])
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
        model.epoch_losses.append(total / n)
    model.trained = True
    return model


def predict_orientation(
    model: SeparatorModel, slices: Sequence[SliceImage]
) -> list[OrientationPrediction]:
    """One prediction per slice, input order preserved. Ties break to the lowest
    class index (argmax convention)."""
    if len(slices) == 0:
        return []
    out: list[OrientationPrediction] = []
    batch_size = 256
    for start in range(0, len(slices), batch_size):
        chunk = slices[start : start + batch_size]
        probs = model.probabilities(_to_batch(chunk)).numpy()
        for s, p in zip(chunk, probs):
            out.append(
                OrientationPrediction(
                    slice_id=s.id,
                    predicted=Orientation(int(np.argmax(p))),
                    probabilities=p,
                )
            )
    return out


def partition_by_orientation(
    manifest: DatasetManifest,
    predictions: Sequence[OrientationPrediction] | Mapping[str, Orientation],
) -> dict[Orientation, DatasetManifest]:
    """Route every entry into one of three manifests by predicted orientation."""
    if isinstance(predictions, Mapping):
        routed = dict(predictions)
    else:
        routed = {p.slice_id: p.predicted for p in predictions}
    buckets: dict[Orientation, list[ManifestEntry]] = {o: [] for o in Orientation}
    for e in manifest.entries:
        if e.id not in routed:
            raise SeparatorError(f"no prediction for manifest entry {e.id!r}")
        buckets[routed[e.id]].append(e)
    return {
        o: DatasetManifest(entries=buckets[o], seed=manifest.seed, base_dir=manifest.base_dir)
        for o in Orientation
    }


def save_separator(model: SeparatorModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "separator",
            "architecture": ARCHITECTURE,
            "seed": model.seed,
            "trained": model.trained,
            "epoch_losses": model.epoch_losses,
            "state_dict": model.net.state_dict(),
        },
        path,
    )


def load_separator(path: str | Path) -> SeparatorModel:
    path = Path(path)
    if not path.exists():
        raise SeparatorError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise SeparatorError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != "separator":
        raise SeparatorError(f"{path} is not a separator checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise SeparatorError(
            f"checkpoint version {payload.get('format_version')} "
            f"unsupported (expected {CHECKPOINT_VERSION})"
        )
    if tuple(map(tuple, payload.get("architecture", ()))) != ARCHITECTURE:
        raise SeparatorError(f"checkpoint {path} architecture mismatch")
    model = SeparatorModel(net=_SeparatorNet(), seed=int(payload["seed"]))
    model.net.load_state_dict(payload["state_dict"])
    model.trained = bool(payload["trained"])
    model.epoch_losses = [float(x) for x in payload["epoch_losses"]]
    return model


def write_predictions_csv(
    predictions: Sequence[OrientationPrediction], path: str | Path
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["slice_id", "predicted", "p_axial", "p_sagittal", "p_coronal"])
        for p in predictions:
            writer.writerow(
                [p.slice_id, p.predicted.name.lower()]
                + [repr(float(x)) for x in p.probabilities]
            )
