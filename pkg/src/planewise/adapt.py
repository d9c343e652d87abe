"""Per-orientation tumor classifier with two-phase unsupervised adaptation.

The classifier is a frozen ResNet50 convolutional trunk (2048-d pooled output)
with a trainable head 2048 -> 1024 -> 512 -> 256 -> 3 (ReLU hidden layers,
softmax output). Phase 1 trains the head on labeled source slices; the phase-1
model assigns one fixed pseudo-label per target slice; phase 2 minimizes

    total = ce_source + ce_target_pseudo + lambda * mmd

over paired source/target mini-batches, where the MMD term compares the 256-d
penultimate activations (class-wise by default, global optionally). Because the
trunk never trains, per-slice 2048-d features are computed once and reused
across epochs and phases.

Backbone weights come from a local file. ``make_backbone_weights`` produces one
by briefly training the trunk to label procedural texture families under
photometric jitter; use it where ImageNet checkpoints cannot be downloaded.
The optimizer minimizes mean-reduced losses; ``cross_entropy`` and
``total_loss`` expose the literal summed forms for verification.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import (
    DatasetManifest,
    Domain,
    ManifestEntry,
    Orientation,
    Split,
    TumorClass,
    load_slice,
)
from .metrics import MetricsReport, compute_metrics
from .mmd import FeatureBatch, classwise_mmd, mmd_squared, resolve_sigma
from .preprocess import prepare_for_classifier
from .synth import N_TEXTURE_FAMILIES, apply_photometric, draw_texture_sample

CHECKPOINT_VERSION = 1
BACKBONE_DIM = 2048
HEAD_ARCH = (2048, 1024, 512, 256, 3)
PROB_EPS = 1e-12


class AdaptError(RuntimeError):
    """Raised for missing weights, empty streams, or invalid configuration."""


# ---------------------------------------------------------------------------
# Configuration

_CONFIG_KEYS = {
    "lambda",
    "bandwidth_policy",
    "sigma",
    "mmd_mode",
    "phase1_epochs",
    "phase2_epochs",
    "learning_rate",
    "beta1",
    "batch_size",
    "seed",
}


@dataclass
class AdaptConfig:
    """Hyperparameters for both phases.

    ``lambda_mmd`` weights the alignment term. The bandwidth policy is either
    ``median`` (median pairwise distance per batch pair) or ``fixed`` (uses
    ``sigma``). Optimization uses Adam with the given step size and first-moment
    decay (second moment 0.999, eps 1e-8).
    """

    lambda_mmd: float = 5e-4
    bandwidth_policy: str = "median"
    sigma: float | None = None
    mmd_mode: str = "classwise"
    phase1_epochs: int = 20
    phase2_epochs: int = 100
    learning_rate: float = 0.001
    beta1: float = 0.9
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda_mmd < 0:
            raise AdaptError(f"lambda must be >= 0, got {self.lambda_mmd}")
        if self.phase1_epochs < 1 or self.phase2_epochs < 1:
            raise AdaptError("epoch counts must be >= 1")
        if self.batch_size < 2:
            raise AdaptError("batch size must be >= 2")
        if self.mmd_mode not in ("classwise", "global"):
            raise AdaptError(f"unknown mmd mode {self.mmd_mode!r}")
        if self.bandwidth_policy not in ("median", "fixed"):
            raise AdaptError(f"unknown bandwidth policy {self.bandwidth_policy!r}")
        if self.bandwidth_policy == "fixed" and (self.sigma is None or self.sigma <= 0):
            raise AdaptError("fixed bandwidth policy needs a positive sigma")


def load_adapt_config(path: str | Path) -> AdaptConfig:
    """Parse a key-value config file; every key optional, unknown keys rejected."""
    path = Path(path)
    if not path.exists():
        raise AdaptError(f"adapt config not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise AdaptError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise AdaptError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    try:
        kwargs = {}
        if "lambda" in values:
            kwargs["lambda_mmd"] = float(values["lambda"])
        if "bandwidth_policy" in values:
            kwargs["bandwidth_policy"] = values["bandwidth_policy"]
        if "sigma" in values:
            kwargs["sigma"] = float(values["sigma"])
        if "mmd_mode" in values:
            kwargs["mmd_mode"] = values["mmd_mode"]
        for key in ("phase1_epochs", "phase2_epochs", "batch_size", "seed"):
            if key in values:
                kwargs[key] = int(values[key])
        for key in ("learning_rate", "beta1"):
            if key in values:
                kwargs[key] = float(values[key])
    except ValueError as exc:
        raise AdaptError(f"{path}: bad value: {exc}") from None
    return AdaptConfig(**kwargs)


# ---------------------------------------------------------------------------
# Backbone weights

def _resnet50_trunk() -> nn.Sequential:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    return nn.Sequential(*list(net.children())[:-1])


def make_backbone_weights(
    path: str | Path,
    seed: int = 0,
    steps: int = 300,
    batch_size: int = 16,
    crop: int = 112,
    progress: bool = False,
) -> Path:
    """Create a local backbone weights file by texture-vocabulary pretraining.

    Trains ResNet50 from scratch to classify procedural texture families drawn
    on random silhouettes, under photometric jitter, using random crops of the
    classifier-resolution rendering. The resulting trunk maps texture identity
    to separable features while retaining sensitivity to appearance, which is
    the combination the adaptation experiments need. Deterministic per seed.
    """
    from torchvision.models import resnet50

    torch.manual_seed(seed)
    net = resnet50(weights=None, num_classes=N_TEXTURE_FAMILIES)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    net.train()
    for step in range(steps):
        xs, ys = [], []
        for _ in range(batch_size):
            family = int(rng.integers(0, N_TEXTURE_FAMILIES))
            img = draw_texture_sample(rng, family)
            img = apply_photometric(
                img,
                rng,
                offset=rng.uniform(-15, 15),
                contrast=rng.uniform(0.75, 1.25),
                noise=rng.uniform(0, 6),
            )
            full = prepare_for_classifier(img).pixels
            oy = int(rng.integers(0, full.shape[1] - crop + 1))
            ox = int(rng.integers(0, full.shape[2] - crop + 1))
            xs.append(full[:, oy : oy + crop, ox : ox + crop])
            ys.append(family)
        x = torch.from_numpy(np.stack(xs))
        y = torch.tensor(ys)
        loss = F.cross_entropy(net(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if progress and (step % 25 == 0 or step == steps - 1):
            print(f"backbone pretraining step {step + 1}/{steps}: loss {float(loss):.3f}")

    trunk = nn.Sequential(*list(net.children())[:-1])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "backbone",
            "seed": seed,
            "steps": steps,
            "state_dict": trunk.state_dict(),
        },
        path,
    )
    return path


def load_backbone(weights_path: str | Path) -> nn.Sequential:
    """Load frozen trunk weights from a local file; never downloads."""
    weights_path = Path(weights_path)
    if not weights_path.exists():
        raise AdaptError(f"backbone weights file not found: {weights_path}")
    try:
        payload = torch.load(weights_path, weights_only=True)
    except Exception as exc:
        raise AdaptError(f"corrupt backbone weights {weights_path}: {exc}") from exc
    trunk = _resnet50_trunk()
    try:
        if isinstance(payload, dict) and payload.get("kind") == "backbone":
            trunk.load_state_dict(payload["state_dict"])
        else:
            # Plain torchvision resnet50 state dict (e.g. a real ImageNet file).
            from torchvision.models import resnet50

            net = resnet50(weights=None)
            net.load_state_dict(payload)
            trunk = nn.Sequential(*list(net.children())[:-1])
    except Exception as exc:
        raise AdaptError(f"corrupt backbone weights {weights_path}: {exc}") from exc
    trunk.eval()
    for p in trunk.parameters():
        p.requires_grad_(False)
    return trunk


def backbone_checksum(backbone: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in backbone.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Model

class _Head(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        self.fc1 = nn.Linear(2048, 1024)
        self.fc2 = nn.Linear(1024, 512)
        self.fc3 = nn.Linear(512, 256)
        self.fc4 = nn.Linear(256, 3)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.relu(self.fc1(x))
        h = F.relu(self.fc2(h))
        penultimate = F.relu(self.fc3(h))
        probs = F.softmax(self.fc4(penultimate), dim=1)
        return probs, penultimate


@dataclass
class ClassifierModel:
    backbone: nn.Sequential
    head: _Head
    orientation: Orientation
    seed: int
    phase: str = "init"
    phase1_log: list[dict] = field(default_factory=list)
    phase2_log: list[dict] = field(default_factory=list)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Frozen 2048-d pooled trunk features for a (n, 3, 224, 224) batch."""
        self.backbone.eval()
        with torch.no_grad():
            return self.backbone(images).flatten(1)

    def head_forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(probabilities, penultimate activations); differentiable."""
        return self.head(feats)

    def predict_proba(self, feats: torch.Tensor) -> np.ndarray:
        self.head.eval()
        with torch.no_grad():
            probs, _ = self.head(feats)
        return probs.numpy()

    def backbone_checksum(self) -> str:
        return backbone_checksum(self.backbone)


def build_classifier(
    orientation: Orientation, seed: int, weights_path: str | Path
) -> ClassifierModel:
    """Frozen pretrained trunk plus a seed-deterministically initialized head."""
    backbone = load_backbone(weights_path)
    torch.manual_seed(seed)
    head = _Head()
    return ClassifierModel(backbone=backbone, head=head, orientation=orientation, seed=seed)


# ---------------------------------------------------------------------------
# Losses

def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def cross_entropy(probabilities, labels_onehot) -> torch.Tensor:
    """Summed negative log-likelihood over the batch (the double-sum form).

    Probabilities are clamped below at 1e-12 before the log. The optimizer loop
    uses this value divided by the batch size (mean reduction).
    """
    probs = _to_tensor(probabilities)
    onehot = _to_tensor(labels_onehot)
    if probs.shape != onehot.shape or probs.ndim != 2:
        raise AdaptError(f"shape mismatch: probabilities {tuple(probs.shape)} vs labels {tuple(onehot.shape)}")
    row_sums = probs.detach().sum(dim=1)
    if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-5):
        raise AdaptError("probability rows must sum to 1 within 1e-5")
    return -(onehot * torch.log(probs.clamp_min(PROB_EPS))).sum()


def one_hot(labels: Sequence[TumorClass] | torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    if isinstance(labels, torch.Tensor):
        idx = labels.long()
    else:
        idx = torch.tensor([label.value for label in labels], dtype=torch.long)
    return F.one_hot(idx, num_classes=3).to(dtype)


@dataclass(frozen=True)
class LossComponents:
    ce_src: float
    ce_tgt: float
    mmd: float
    lambda_mmd: float

    @property
    def total(self) -> float:
        return self.ce_src + self.ce_tgt + self.lambda_mmd * self.mmd


def total_loss(
    src_probs,
    src_labels,
    tgt_probs,
    tgt_pseudo,
    src_feats: FeatureBatch,
    tgt_feats: FeatureBatch,
    config: AdaptConfig,
) -> tuple[torch.Tensor, LossComponents]:
    """Summed-form combined objective and its parts.

    With ``lambda_mmd == 0`` the MMD term never enters the total (it is still
    reported in the components for logging).
    """
    ce_s = cross_entropy(src_probs, src_labels)
    ce_t = cross_entropy(tgt_probs, tgt_pseudo)
    mmd_val = _mmd_term(src_feats, tgt_feats, config)
    if config.lambda_mmd > 0:
        total = ce_s + ce_t + config.lambda_mmd * mmd_val
    else:
        total = ce_s + ce_t
    comps = LossComponents(
        ce_src=float(ce_s), ce_tgt=float(ce_t), mmd=float(mmd_val), lambda_mmd=config.lambda_mmd
    )
    return total, comps


def _mmd_term(src_feats: FeatureBatch, tgt_feats: FeatureBatch, config: AdaptConfig) -> torch.Tensor:
    if config.mmd_mode == "classwise":
        return classwise_mmd(src_feats, tgt_feats, config)
    sigma = resolve_sigma(src_feats, tgt_feats, config.bandwidth_policy, config.sigma)
    return mmd_squared(src_feats, tgt_feats, sigma)


# ---------------------------------------------------------------------------
# Feature extraction (frozen trunk => cacheable)

class FeatureStore:
    """Slice id -> 2048-d trunk feature, computed once per manifest entry."""

    def __init__(self) -> None:
        self._feats: dict[str, torch.Tensor] = {}

    def __contains__(self, slice_id: str) -> bool:
        return slice_id in self._feats

    def get(self, slice_ids: Sequence[str]) -> torch.Tensor:
        return torch.stack([self._feats[sid] for sid in slice_ids])

    def add(self, slice_id: str, feat: torch.Tensor) -> None:
        self._feats[slice_id] = feat


def extract_features(
    model: ClassifierModel,
    manifest: DatasetManifest,
    entries: Sequence[ManifestEntry],
    store: FeatureStore | None = None,
    batch_size: int = 32,
) -> FeatureStore:
    """Run the frozen trunk over any entries not already in the store."""
    store = store or FeatureStore()
    todo = [e for e in entries if e.id not in store]
    for start in range(0, len(todo), batch_size):
        chunk = todo[start : start + batch_size]
        arrays = [prepare_for_classifier(load_slice(manifest, e)).pixels for e in chunk]
        feats = model.features(torch.from_numpy(np.stack(arrays)))
        for e, f in zip(chunk, feats):
            store.add(e.id, f)
    return store


# ---------------------------------------------------------------------------
# Pseudo-labels

@dataclass
class PseudoLabelSet:
    """Fixed per-target-slice (class, confidence) assignments from phase 1."""

    entries: dict[str, tuple[TumorClass, float]]
    source_model_id: str

    def __post_init__(self) -> None:
        for sid, (_, conf) in self.entries.items():
            if not 0.0 <= conf <= 1.0:
                raise AdaptError(f"pseudo-label confidence for {sid!r} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.entries)

    def label_of(self, slice_id: str) -> TumorClass:
        try:
            return self.entries[slice_id][0]
        except KeyError:
            raise AdaptError(f"pseudo-label missing for slice {slice_id!r}") from None


def generate_pseudo_labels(
    model: ClassifierModel,
    target_manifest: DatasetManifest,
    features: FeatureStore | None = None,
) -> PseudoLabelSet:
    """Argmax class and max-probability confidence for every target slice."""
    targets = target_manifest.select(domain=Domain.TARGET)
    if not targets:
        raise AdaptError("empty target manifest")
    features = extract_features(model, target_manifest, targets, features)
    probs = model.predict_proba(features.get([e.id for e in targets]))
    entries = {}
    for e, p in zip(targets, probs):
        idx = int(np.argmax(p))
        entries[e.id] = (TumorClass(idx), float(p[idx]))
    return PseudoLabelSet(
        entries=entries,
        source_model_id=f"{model.orientation.name.lower()}-phase1-seed{model.seed}",
    )


def write_pseudo_csv(pseudo: PseudoLabelSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["slice_id", "class", "confidence"])
        for sid in sorted(pseudo.entries):
            cls, conf = pseudo.entries[sid]
            writer.writerow([sid, cls.name.lower(), repr(conf)])


# ---------------------------------------------------------------------------
# Training

def _adam(model: ClassifierModel, config: AdaptConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.head.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, 0.999),
        eps=1e-8,
    )


def _source_train_val(manifest: DatasetManifest):
    train = [
        e
        for e in manifest.entries
        if e.domain is Domain.SOURCE and e.split is Split.TRAIN
    ]
    val = [
        e for e in manifest.entries if e.domain is Domain.SOURCE and e.split is Split.VAL
    ]
    return train, val


def target_stream_entries(manifest: DatasetManifest) -> list[ManifestEntry]:
    """Unlabeled target slices used for adaptation.

    Prefers target TRAIN entries when the manifest partitions the target
    domain; otherwise adapts on every target slice (transductive use).
    """
    targets = manifest.select(domain=Domain.TARGET)
    train = [e for e in targets if e.split is Split.TRAIN]
    return train if train else targets


def _val_macro_f1(model: ClassifierModel, entries, features: FeatureStore) -> float:
    if not entries:
        return float("nan")
    feats = features.get([e.id for e in entries])
    preds = np.argmax(model.predict_proba(feats), axis=1)
    truth = [e.class_label for e in entries]
    return compute_metrics(truth, preds).macro_f1


def train_phase1(
    model: ClassifierModel,
    source_manifest: DatasetManifest,
    config: AdaptConfig,
    features: FeatureStore | None = None,
) -> ClassifierModel:
    """Supervised training of the head on labeled source TRAIN slices.

    Logs one row per epoch (mean training CE and source-VAL macro F1) and
    returns the final-epoch model. Deterministic for a fixed config seed.
    """
    train, val = _source_train_val(source_manifest)
    if not train:
        raise AdaptError("empty domain stream: no source TRAIN entries")
    for e in train:
        if e.class_label is None:
            raise AdaptError(f"source entry {e.id!r} lacks a class label")
    features = extract_features(model, source_manifest, train + val, features)

    feats = features.get([e.id for e in train])
    onehot = one_hot([e.class_label for e in train])
    opt = _adam(model, config)
    shuffler = torch.Generator().manual_seed(config.seed)
    n = len(train)
    model.phase1_log = []
    for epoch in range(config.phase1_epochs):
        model.head.train()
        perm = torch.randperm(n, generator=shuffler)
        ce_sum = 0.0
        steps = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            probs, _ = model.head_forward(feats[idx])
            loss = cross_entropy(probs, onehot[idx]) / len(idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
            ce_sum += float(loss)
            steps += 1
        ce_epoch = ce_sum / steps
        model.phase1_log.append(
            {
                "epoch": epoch + 1,
                "ce_src": ce_epoch,
                "ce_tgt": 0.0,
                "mmd": 0.0,
                "total": ce_epoch,
                "val_macro_f1": _val_macro_f1(model, val, features),
            }
        )
    model.phase = "phase1"
    return model


def train_phase2(
    model: ClassifierModel,
    source_manifest: DatasetManifest,
    target_manifest: DatasetManifest,
    pseudo: PseudoLabelSet,
    config: AdaptConfig,
    features: FeatureStore | None = None,
) -> ClassifierModel:
    """Joint source/pseudo-target training with the MMD alignment term.

    Each step pairs one source and one target mini-batch, sampled independently;
    the shorter stream is re-shuffled and recycled within the epoch. Only head
    parameters move. Logs per-epoch means of (ce_src, ce_tgt, mmd, total).
    """
    src_train, src_val = _source_train_val(source_manifest)
    tgt_train = target_stream_entries(target_manifest)
    if not src_train or not tgt_train:
        raise AdaptError("empty domain stream")
    features = extract_features(model, source_manifest, src_train + src_val, features)
    features = extract_features(model, target_manifest, tgt_train, features)

    src_feats = features.get([e.id for e in src_train])
    src_labels = [e.class_label for e in src_train]
    src_onehot = one_hot(src_labels)
    tgt_feats = features.get([e.id for e in tgt_train])
    tgt_labels = [pseudo.label_of(e.id) for e in tgt_train]
    tgt_onehot = one_hot(tgt_labels)

    opt = _adam(model, config)
    shuffler = torch.Generator().manual_seed(config.seed + 1)
    n_s, n_t = len(src_train), len(tgt_train)
    steps_per_epoch = math.ceil(max(n_s, n_t) / config.batch_size)
    model.phase2_log = []

    perm_s = torch.randperm(n_s, generator=shuffler)
    perm_t = torch.randperm(n_t, generator=shuffler)
    pos_s = pos_t = 0
    for epoch in range(config.phase2_epochs):
        model.head.train()
        sums = {"ce_src": 0.0, "ce_tgt": 0.0, "mmd": 0.0}
        for _ in range(steps_per_epoch):
            if pos_s >= n_s:
                perm_s = torch.randperm(n_s, generator=shuffler)
                pos_s = 0
            if pos_t >= n_t:
                perm_t = torch.randperm(n_t, generator=shuffler)
                pos_t = 0
            si = perm_s[pos_s : pos_s + config.batch_size]
            ti = perm_t[pos_t : pos_t + config.batch_size]
            pos_s += config.batch_size
            pos_t += config.batch_size

            probs_s, pen_s = model.head_forward(src_feats[si])
            probs_t, pen_t = model.head_forward(tgt_feats[ti])
            ce_s = cross_entropy(probs_s, src_onehot[si]) / len(si)
            ce_t = cross_entropy(probs_t, tgt_onehot[ti]) / len(ti)

            batch_s = FeatureBatch(pen_s, [src_labels[i] for i in si.tolist()], Domain.SOURCE)
            if config.lambda_mmd > 0:
                batch_t = FeatureBatch(pen_t, [tgt_labels[i] for i in ti.tolist()], Domain.TARGET)
                mmd_val = _mmd_term(batch_s, batch_t, config)
                loss = ce_s + ce_t + config.lambda_mmd * mmd_val
            else:
                with torch.no_grad():
                    batch_t = FeatureBatch(
                        pen_t.detach(), [tgt_labels[i] for i in ti.tolist()], Domain.TARGET
                    )
                    batch_s_d = FeatureBatch(
                        pen_s.detach(), [src_labels[i] for i in si.tolist()], Domain.SOURCE
                    )
                    mmd_val = _mmd_term(batch_s_d, batch_t, config)
                loss = ce_s + ce_t
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["ce_src"] += float(ce_s)
            sums["ce_tgt"] += float(ce_t)
            sums["mmd"] += float(mmd_val)

        ce_src = sums["ce_src"] / steps_per_epoch
        ce_tgt = sums["ce_tgt"] / steps_per_epoch
        mmd_mean = sums["mmd"] / steps_per_epoch
        model.phase2_log.append(
            {
                "epoch": epoch + 1,
                "ce_src": ce_src,
                "ce_tgt": ce_tgt,
                "mmd": mmd_mean,
                "total": ce_src + ce_tgt + config.lambda_mmd * mmd_mean,
                "val_macro_f1": _val_macro_f1(model, src_val, features),
            }
        )
    model.phase = "phase2"
    return model


def evaluate_on_target_test(
    model: ClassifierModel,
    manifest: DatasetManifest,
    features: FeatureStore | None = None,
    tags: Mapping[str, str] | None = None,
) -> MetricsReport:
    """Score the model on target TEST entries; true labels are read only here."""
    test = [
        e
        for e in manifest.entries
        if e.domain is Domain.TARGET and e.split is Split.TEST
    ]
    if not test:
        raise AdaptError("no target TEST entries to evaluate")
    missing = [e.id for e in test if e.class_label is None]
    if missing:
        raise AdaptError(f"target TEST entries lack true labels: {missing[:5]}")
    features = extract_features(model, manifest, test, features)
    preds = np.argmax(model.predict_proba(features.get([e.id for e in test])), axis=1)
    truth = [e.class_label for e in test]
    base_tags = {
        "orientation": model.orientation.name.lower(),
        "domain": "target",
        "phase": model.phase,
    }
    base_tags.update(tags or {})
    return compute_metrics(truth, preds, tags=base_tags)


def run_orientation_pipeline(
    orientation: Orientation,
    manifest: DatasetManifest,
    config: AdaptConfig,
    weights_path: str | Path,
    features: FeatureStore | None = None,
) -> tuple[ClassifierModel, MetricsReport]:
    """Phase 1 -> pseudo-labels -> phase 2 -> target-TEST evaluation.

    The returned model carries ``phase1_log``, ``phase2_log``, ``pseudo``,
    ``phase1_head_state`` (for no-adaptation baselines), and ``phase1_report``.
    """
    model = build_classifier(orientation, config.seed, weights_path)
    features = features or FeatureStore()
    train_phase1(model, manifest, config, features)
    model.phase1_head_state = copy.deepcopy(model.head.state_dict())
    model.phase1_report = evaluate_on_target_test(model, manifest, features)
    pseudo = generate_pseudo_labels(model, manifest, features)
    model.pseudo = pseudo
    train_phase2(model, manifest, manifest, pseudo, config, features)
    report = evaluate_on_target_test(model, manifest, features)
    return model, report


# ---------------------------------------------------------------------------
# Artifacts

def write_epoch_log(rows: Sequence[Mapping], path: str | Path) -> None:
    """CSV log, one row per epoch: epoch,ce_src,ce_tgt,mmd,total,val_macro_f1."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "ce_src", "ce_tgt", "mmd", "total", "val_macro_f1"])
        for row in rows:
            writer.writerow(
                [row["epoch"]]
                + [repr(float(row[k])) for k in ("ce_src", "ce_tgt", "mmd", "total", "val_macro_f1")]
            )


def save_classifier(model: ClassifierModel, path: str | Path, phase: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "classifier",
            "orientation": model.orientation.name,
            "phase": phase or model.phase,
            "seed": model.seed,
            "head_arch": HEAD_ARCH,
            "head_state": model.head.state_dict(),
            "backbone_checksum": model.backbone_checksum(),
        },
        path,
    )


def load_classifier(path: str | Path, weights_path: str | Path) -> ClassifierModel:
    path = Path(path)
    if not path.exists():
        raise AdaptError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise AdaptError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != "classifier":
        raise AdaptError(f"{path} is not a classifier checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise AdaptError(
            f"checkpoint version {payload.get('format_version')} "
            f"unsupported (expected {CHECKPOINT_VERSION})"
        )
    if tuple(payload.get("head_arch", ())) != HEAD_ARCH:
        raise AdaptError(f"checkpoint {path} head architecture mismatch")
    backbone = load_backbone(weights_path)
    if payload["backbone_checksum"] != backbone_checksum(backbone):
        raise AdaptError(
            f"checkpoint {path} was produced with different backbone weights"
        )
    model = ClassifierModel(
        backbone=backbone,
        head=_Head(),
        orientation=Orientation[payload["orientation"]],
        seed=int(payload["seed"]),
        phase=str(payload["phase"]),
    )
    model.head.load_state_dict(payload["head_state"])
    return model
