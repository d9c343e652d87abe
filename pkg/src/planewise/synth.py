"""Synthetic domain-shifted dataset generation for desk-scale experiments.

Images live in a small procedural world: a near-black background, an elliptical
silhouette whose aspect and placement encode the orientation, and an interior
texture that encodes the class (checkerboard, diagonal stripes, or a solid mass
with a dark ring). The target domain applies a photometric shift per image:
``shifted = clip(contrast * x + offset + N(0, noise))``, with each parameter
drawn from a configured range so the target is heterogeneous, as scanner and
protocol variation would make it.

Everything is deterministic for a fixed (config, seed) pair, including the
emitted PNG bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    DataError,
    DatasetManifest,
    Domain,
    ManifestEntry,
    Orientation,
    Split,
    TumorClass,
)

# Texture families drawable inside a silhouette. The three tumor classes map to
# a fixed subset; the rest exist so feature extractors can be trained on a
# broader texture vocabulary than the classification task itself.
N_TEXTURE_FAMILIES = 10

CLASS_TEXTURE = {
    TumorClass.GLIOMA: 4,  # checkerboard
    TumorClass.MENINGIOMA: 3,  # diagonal stripes
    TumorClass.PITUITARY: 7,  # solid mass with dark ring
}


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _rotated(yy: np.ndarray, xx: np.ndarray, theta: float) -> tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(theta), math.sin(theta)
    return c * yy - s * xx, s * yy + c * xx


def draw_texture(
    img: np.ndarray,
    sil: np.ndarray,
    family: int,
    rng: np.random.Generator,
    lo: float,
    hi: float,
    cy: float | None = None,
    cx: float | None = None,
) -> np.ndarray:
    """Fill the silhouette with one of the texture families, in place."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    if cy is None:
        cy, cx = h / 2.0, w / 2.0
    scale = h / 64.0  # periods below are calibrated for 64-px images

    if family == 0:  # solid fill
        img[sil] = hi - 20
    elif family in (1, 2, 3):  # stripes: horizontal / vertical / diagonal
        base = {1: 0.0, 2: math.pi / 2, 3: math.pi / 4}[family]
        theta = base + rng.uniform(-0.3, 0.3)
        period = rng.uniform(6, 14) * scale
        ry_, _ = _rotated(yy, xx, theta)
        tex = np.sin(2 * math.pi * (ry_ + rng.uniform(0, period)) / period) > 0
        img[sil] = np.where(tex[sil], hi, lo)
    elif family == 4:  # checkerboard, lattice slightly rotated
        period = rng.uniform(8, 16) * scale
        theta = rng.uniform(-0.35, 0.35)
        ry_, rx_ = _rotated(yy, xx, theta)
        py, px = rng.uniform(0, period, size=2)
        tex = (
            np.sin(2 * math.pi * (ry_ + py) / period) * np.sin(2 * math.pi * (rx_ + px) / period)
        ) > 0
        img[sil] = np.where(tex[sil], hi, lo)
    elif family == 5:  # scattered bright dots
        img[sil] = lo
        for _ in range(int(rng.integers(8, 14))):
            by, bx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(2.0, 3.5) * scale
            blob = ((yy - by) ** 2 + (xx - bx) ** 2) <= r * r
            img[blob & sil] = hi
    elif family == 6:  # concentric rings
        period = rng.uniform(6, 12) * scale
        rr = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        tex = np.sin(2 * math.pi * rr / period) > 0
        img[sil] = np.where(tex[sil], hi, lo)
    elif family == 7:  # solid mass with one dark ring
        img[sil] = hi - 20
        oy = cy + rng.uniform(-3, 3) * scale
        ox = cx + rng.uniform(-3, 3) * scale
        r_o = rng.uniform(0.4, 0.65) * h / 2
        r_i = r_o * rng.uniform(0.45, 0.7)
        rr = (yy - oy) ** 2 + (xx - ox) ** 2
        img[(rr <= r_o**2) & (rr >= r_i**2) & sil] = lo
    elif family == 8:  # two-tone vertical split
        split = w / 2 + rng.uniform(-4, 4) * scale
        img[sil] = np.where((xx <= split)[sil], hi, lo)
    elif family == 9:  # radial gradient
        rr = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        grad = lo + (hi - lo) * np.clip(rr / (h / 2), 0.0, 1.0)
        img[sil] = grad[sil]
    else:
        raise DataError(f"unknown texture family {family}")
    return img


def orientation_silhouette(
    rng: np.random.Generator, orientation: Orientation, h: int, w: int
) -> tuple[np.ndarray, float, float]:
    """Silhouette mask for one orientation, with jittered geometry."""
    jit = 1.0 + rng.uniform(-0.08, 0.08)
    cy = h / 2 + rng.uniform(-0.03, 0.03) * h
    cx = w / 2 + rng.uniform(-0.03, 0.03) * w
    if orientation is Orientation.AXIAL:  # wide ellipse
        ry, rx = 0.28 * h * jit, 0.42 * w * (1.0 + rng.uniform(-0.08, 0.08))
    elif orientation is Orientation.SAGITTAL:  # tall and narrow, shifted left
        ry, rx = 0.42 * h * jit, 0.20 * w * (1.0 + rng.uniform(-0.08, 0.08))
        cx -= 0.12 * w
    else:  # CORONAL: round, shifted up
        ry, rx = 0.34 * h * jit, 0.34 * w * (1.0 + rng.uniform(-0.08, 0.08))
        cy -= 0.08 * h
    return _ellipse_mask(h, w, cy, cx, ry, rx), cy, cx


def random_silhouette(rng: np.random.Generator, h: int, w: int):
    """Free-form silhouette for texture-vocabulary pretext images."""
    cy = h / 2 + rng.uniform(-0.06, 0.06) * h
    cx = w / 2 + rng.uniform(-0.06, 0.06) * w
    ry = rng.uniform(0.2, 0.45) * h
    rx = rng.uniform(0.2, 0.45) * w
    return _ellipse_mask(h, w, cy, cx, ry, rx), cy, cx


def draw_slice(
    rng: np.random.Generator,
    orientation: Orientation,
    tumor_class: TumorClass,
    size: int = 64,
) -> np.ndarray:
    """One clean (source-style) slice: silhouette by orientation, texture by class."""
    img = rng.uniform(0.0, 6.0, size=(size, size))
    sil, cy, cx = orientation_silhouette(rng, orientation, size, size)
    lo = rng.uniform(55, 90)
    hi = rng.uniform(155, 210)
    draw_texture(img, sil, CLASS_TEXTURE[tumor_class], rng, lo, hi, cy=cy, cx=cx)
    img[sil] += rng.normal(0.0, 3.0, size=int(sil.sum()))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def draw_texture_sample(rng: np.random.Generator, family: int, size: int = 64) -> np.ndarray:
    """One pretext image: random silhouette filled with the given texture family."""
    img = rng.uniform(0.0, 6.0, size=(size, size))
    sil, cy, cx = random_silhouette(rng, size, size)
    lo = rng.uniform(55, 90)
    hi = rng.uniform(155, 210)
    draw_texture(img, sil, family, rng, lo, hi, cy=cy, cx=cx)
    img[sil] += rng.normal(0.0, 3.0, size=int(sil.sum()))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def apply_photometric(
    img: np.ndarray,
    rng: np.random.Generator,
    offset: float,
    contrast: float,
    noise: float,
) -> np.ndarray:
    """clip(contrast * x + offset + N(0, noise^2)) rounded back to uint8."""
    x = contrast * img.astype(np.float64) + offset
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Generator configuration


@dataclass
class GeneratorConfig:
    """Counts, image size, split fractions, and target-shift parameter ranges.

    ``count_source``/``count_target`` are per (orientation, class) cell;
    ``cell_overrides`` adjusts individual cells. Shift parameters are (min, max)
    ranges sampled per target image; a degenerate range applies the same shift
    everywhere.
    """

    image_size: int = 64
    count_source: int = 50
    count_target: int = 34
    cell_overrides: dict[tuple[Domain, Orientation, TumorClass], int] = field(
        default_factory=dict
    )
    split_ratio: float = 0.8
    target_train_fraction: float = 0.5
    offset: tuple[float, float] = (5.0, 22.0)
    contrast: tuple[float, float] = (0.40, 0.62)
    noise: tuple[float, float] = (4.0, 10.0)

    def validate(self) -> None:
        if self.image_size < 32:
            raise DataError(f"image size {self.image_size} below 32")
        for count in (self.count_source, self.count_target, *self.cell_overrides.values()):
            if count < 0:
                raise DataError(f"negative count {count}")
        if not 0.0 < self.split_ratio < 1.0:
            raise DataError(f"split ratio {self.split_ratio} outside (0, 1)")
        if not 0.0 <= self.target_train_fraction < 1.0:
            raise DataError(
                f"target train fraction {self.target_train_fraction} outside [0, 1)"
            )
        for name, rng_ in (("offset", self.offset), ("contrast", self.contrast), ("noise", self.noise)):
            if rng_[0] > rng_[1]:
                raise DataError(f"{name} range {rng_} has min > max")
        if self.noise[0] < 0:
            raise DataError("noise level cannot be negative")

    def count_for(self, domain: Domain, orientation: Orientation, cls: TumorClass) -> int:
        default = self.count_source if domain is Domain.SOURCE else self.count_target
        return self.cell_overrides.get((domain, orientation, cls), default)


def _parse_range(value: str) -> tuple[float, float]:
    if ":" in value:
        lo, hi = value.split(":", 1)
        return (float(lo), float(hi))
    v = float(value)
    return (v, v)


def parse_generator_config(path: str | Path) -> GeneratorConfig:
    """Read a key-value config file (``key = value``, ``#`` comments).

    Keys: image_size, count_source, count_target, split_ratio,
    target_train_fraction, offset, contrast, noise, and per-cell overrides of
    the form ``count_<domain>_<orientation>_<class>``. Range-valued keys accept
    ``min:max`` or a single number. Unknown keys are rejected.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"generator config not found: {path}")
    config = GeneratorConfig()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key == "image_size":
                config.image_size = int(value)
            elif key == "count_source":
                config.count_source = int(value)
            elif key == "count_target":
                config.count_target = int(value)
            elif key == "split_ratio":
                config.split_ratio = float(value)
            elif key == "target_train_fraction":
                config.target_train_fraction = float(value)
            elif key == "offset":
                config.offset = _parse_range(value)
            elif key == "contrast":
                config.contrast = _parse_range(value)
            elif key == "noise":
                config.noise = _parse_range(value)
            elif key.startswith("count_"):
                parts = key.split("_")
                if len(parts) != 4:
                    raise DataError(f"{path}:{lineno}: bad count override key {key!r}")
                cell = (
                    Domain.parse(parts[1]),
                    Orientation.parse(parts[2]),
                    TumorClass.parse(parts[3]),
                )
                config.cell_overrides[cell] = int(value)
            else:
                raise DataError(f"{path}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
    config.validate()
    return config


def generate_synthetic_dataset(
    config: GeneratorConfig, seed: int, out_dir: str | Path
) -> DatasetManifest:
    """Emit PNG slices plus a manifest under ``out_dir``.

    Source entries are split TRAIN/VAL stratified per class at ``split_ratio``;
    target entries are split TRAIN/TEST per class at ``target_train_fraction``
    (the TRAIN portion is the unlabeled adaptation stream, TEST is held out for
    evaluation). Fully deterministic for a fixed (config, seed).
    """
    config.validate()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    entries: list[ManifestEntry] = []

    for domain in (Domain.SOURCE, Domain.TARGET):
        for orientation in Orientation:
            for cls in TumorClass:
                n = config.count_for(domain, orientation, cls)
                n_primary = int(round(n * (config.split_ratio if domain is Domain.SOURCE
                                           else config.target_train_fraction)))
                if domain is Domain.SOURCE and n >= 2:
                    n_primary = min(max(n_primary, 1), n - 1)
                for i in range(n):
                    img = draw_slice(rng, orientation, cls, size=config.image_size)
                    if domain is Domain.TARGET:
                        img = apply_photometric(
                            img,
                            rng,
                            offset=rng.uniform(*config.offset),
                            contrast=rng.uniform(*config.contrast),
                            noise=rng.uniform(*config.noise),
                        )
                    sid = f"{domain.value}_{orientation.name.lower()}_{cls.name.lower()}_{i:04d}"
                    rel = Path("images") / domain.value / f"{sid}.png"
                    file_path = out_dir / rel
                    file_path.parent.mkdir(parents=True, exist_ok=True)
                    Image.fromarray(img, mode="L").save(file_path)
                    if domain is Domain.SOURCE:
                        split = Split.TRAIN if i < n_primary else Split.VAL
                        label: TumorClass | None = cls
                    else:
                        split = Split.TRAIN if i < n_primary else Split.TEST
                        label = cls  # true label, reachable only by evaluation
                    entries.append(
                        ManifestEntry(
                            id=sid,
                            path=str(rel),
                            domain=domain,
                            class_label=label,
                            orientation_label=orientation,
                            split=split,
                        )
                    )

    manifest = DatasetManifest(entries=entries, seed=seed, base_dir=out_dir)
    from .data import save_manifest

    if config_total(config) > 0 or True:
        save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def config_total(config: GeneratorConfig) -> int:
    total = 0
    for domain in (Domain.SOURCE, Domain.TARGET):
        for orientation in Orientation:
            for cls in TumorClass:
                total += config.count_for(domain, orientation, cls)
    return total
