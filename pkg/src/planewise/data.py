"""Dataset types, manifest I/O, stratified splitting, and rotation augmentation.

The manifest is a plain CSV with header ``id,path,domain,class,orientation,split``;
empty class/orientation fields mean the label is absent. Image paths are resolved
relative to the manifest file's directory unless absolute.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image


class DataError(ValueError):
    """Raised for malformed manifests, invalid labels, or broken invariants."""


class Orientation(Enum):
    AXIAL = 0
    SAGITTAL = 1
    CORONAL = 2

    @classmethod
    def parse(cls, token: str) -> "Orientation":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise DataError(f"unknown orientation {token!r}") from None


class TumorClass(Enum):
    GLIOMA = 0
    MENINGIOMA = 1
    PITUITARY = 2

    @classmethod
    def parse(cls, token: str) -> "TumorClass":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise DataError(f"unknown class {token!r}") from None


class Domain(Enum):
    SOURCE = "source"
    TARGET = "target"

    @classmethod
    def parse(cls, token: str) -> "Domain":
        try:
            return cls(token.strip().lower())
        except ValueError:
            raise DataError(f"unknown domain {token!r}") from None


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"

    @classmethod
    def parse(cls, token: str) -> "Split":
        try:
            return cls(token.strip().lower())
        except ValueError:
            raise DataError(f"unknown split {token!r}") from None


@dataclass
class SliceImage:
    """One grayscale 2-D slice, the pipeline's atomic unit.

    ``pixels`` is an H x W uint8 array. Source slices used for training must
    carry ``class_label``; target slices may omit it (held out for testing).
    """

    id: str
    pixels: np.ndarray
    domain: Domain
    class_label: TumorClass | None = None
    orientation_label: Orientation | None = None

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise DataError(f"slice {self.id!r}: pixels must be 2-D")
        h, w = self.pixels.shape
        if h < 32 or w < 32:
            raise DataError(f"slice {self.id!r}: size {h}x{w} below 32x32 minimum")
        if self.pixels.dtype != np.uint8:
            arr = self.pixels
            if arr.min() < 0 or arr.max() > 255:
                raise DataError(f"slice {self.id!r}: intensities outside [0, 255]")
            self.pixels = arr.astype(np.uint8)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    domain: Domain
    class_label: TumorClass | None
    orientation_label: Orientation | None
    split: Split


MANIFEST_HEADER = ["id", "path", "domain", "class", "orientation", "split"]


@dataclass
class DatasetManifest:
    """Ordered index of slices with domain, split, and label metadata."""

    entries: list[ManifestEntry]
    seed: int = 0
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        self.base_dir = Path(self.base_dir)
        seen: set[str] = set()
        for e in self.entries:
            if e.id in seen:
                raise DataError(f"duplicate id {e.id!r} in manifest")
            seen.add(e.id)

    def __len__(self) -> int:
        return len(self.entries)

    def counts(self, domain: Domain) -> dict[tuple[Orientation | None, TumorClass | None], int]:
        """Per-(orientation, class) tallies for one domain, recomputed from entries."""
        out: dict[tuple[Orientation | None, TumorClass | None], int] = {}
        for e in self.entries:
            if e.domain is domain:
                key = (e.orientation_label, e.class_label)
                out[key] = out.get(key, 0) + 1
        return out

    @property
    def source_counts(self):
        return self.counts(Domain.SOURCE)

    @property
    def target_counts(self):
        return self.counts(Domain.TARGET)

    def select(self, domain: Domain | None = None, split: Split | None = None) -> list[ManifestEntry]:
        out = self.entries
        if domain is not None:
            out = [e for e in out if e.domain is domain]
        if split is not None:
            out = [e for e in out if e.split is split]
        return out

    def resolve_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.base_dir / p


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read and validate a manifest CSV; entry order is preserved from the file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest file not found: {path}")
    entries: list[ManifestEntry] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"manifest {path} is empty") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise DataError(f"manifest {path}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 6:
                raise DataError(f"manifest {path}:{lineno}: expected 6 fields, got {len(row)}")
            sid, spath, sdomain, sclass, sorient, ssplit = (c.strip() for c in row)
            entries.append(
                ManifestEntry(
                    id=sid,
                    path=spath,
                    domain=Domain.parse(sdomain),
                    class_label=TumorClass.parse(sclass) if sclass else None,
                    orientation_label=Orientation.parse(sorient) if sorient else None,
                    split=Split.parse(ssplit),
                )
            )
    return DatasetManifest(entries=entries, base_dir=path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            writer.writerow(
                [
                    e.id,
                    e.path,
                    e.domain.value,
                    e.class_label.name.lower() if e.class_label else "",
                    e.orientation_label.name.lower() if e.orientation_label else "",
                    e.split.value,
                ]
            )


def load_slice(manifest: DatasetManifest, entry: ManifestEntry) -> SliceImage:
    """Load one entry's PNG into a SliceImage."""
    img = Image.open(manifest.resolve_path(entry)).convert("L")
    return SliceImage(
        id=entry.id,
        pixels=np.asarray(img, dtype=np.uint8),
        domain=entry.domain,
        class_label=entry.class_label,
        orientation_label=entry.orientation_label,
    )


def load_slices(manifest: DatasetManifest, entries: Iterable[ManifestEntry]) -> list[SliceImage]:
    return [load_slice(manifest, e) for e in entries]


def split_source(manifest: DatasetManifest, ratio: float, seed: int) -> DatasetManifest:
    """Assign source entries to TRAIN/VAL stratified per class; target goes to TEST.

    Per class, round(ratio * n) entries are drawn for TRAIN (clamped so both
    partitions are non-empty), which keeps every class within +/-1 sample of the
    requested ratio. Deterministic for a fixed seed; entry order is preserved.
    """
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must be in (0, 1), got {ratio}")
    by_class: dict[TumorClass, list[int]] = {c: [] for c in TumorClass}
    for i, e in enumerate(manifest.entries):
        if e.domain is Domain.SOURCE:
            if e.class_label is None:
                raise DataError(f"source entry {e.id!r} lacks a class label")
            by_class[e.class_label].append(i)

    rng = np.random.default_rng(seed)
    assignment: dict[int, Split] = {}
    for cls in TumorClass:
        idxs = by_class[cls]
        if not idxs:
            continue
        if len(idxs) < 2:
            raise DataError(f"cannot stratify: class {cls.name} has {len(idxs)} source sample(s)")
        n_train = int(round(ratio * len(idxs)))
        n_train = min(max(n_train, 1), len(idxs) - 1)
        order = rng.permutation(len(idxs))
        for rank, j in enumerate(order):
            assignment[idxs[j]] = Split.TRAIN if rank < n_train else Split.VAL

    new_entries = []
    for i, e in enumerate(manifest.entries):
        if e.domain is Domain.SOURCE:
            new_entries.append(replace(e, split=assignment[i]))
        else:
            new_entries.append(replace(e, split=Split.TEST))
    return DatasetManifest(entries=new_entries, seed=seed, base_dir=manifest.base_dir)


def augment_rotations(slices: Sequence[SliceImage], angles: Sequence[float]) -> list[SliceImage]:
    """Rotate every slice by every angle about the image center.

    Bilinear interpolation, zero-filled background. Returns len(slices) *
    len(angles) new records; ids derive from the parent id and angle, labels are
    copied. Angles are degrees in (-180, 180]; 0 reproduces the input exactly.
    """
    if len(angles) == 0:
        raise DataError("angle list must be non-empty")
    for a in angles:
        if not -180.0 < a <= 180.0:
            raise DataError(f"angle {a} outside (-180, 180]")
    out: list[SliceImage] = []
    for s in slices:
        for a in angles:
            if a == 0:
                pixels = s.pixels.copy()
            else:
                img = Image.fromarray(s.pixels, mode="L")
                pixels = np.asarray(
                    img.rotate(a, resample=Image.BILINEAR, fillcolor=0), dtype=np.uint8
                )
            out.append(
                SliceImage(
                    id=f"{s.id}_rot{a:+g}",
                    pixels=pixels,
                    domain=s.domain,
                    class_label=s.class_label,
                    orientation_label=s.orientation_label,
                )
            )
    return out
