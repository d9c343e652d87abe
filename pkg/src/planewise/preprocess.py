"""Intensity thresholding and the two resize/normalize paths.

The orientation-separator path binarizes at T=35, resizes to 32x32, and scales
to [0, 1]. The classifier path resizes to 224x224, replicates grayscale to three
channels, and standardizes with the pretrained backbone's published ImageNet
statistics; it applies no thresholding. All functions leave their input intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .data import SliceImage

DEFAULT_THRESHOLD = 35
SEPARATOR_SIZE = 32
CLASSIFIER_SIZE = 224

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class BinaryImage:
    """Thresholded image holding only the values 0 and 255."""

    pixels: np.ndarray
    source_id: str

    def __post_init__(self) -> None:
        vals = np.unique(self.pixels)
        if not np.all(np.isin(vals, (0, 255))):
            raise ValueError(f"binary image {self.source_id!r} contains values other than 0/255")


@dataclass
class NormalizedImage:
    """Float image in channel-first layout with the (mean, std) used per channel."""

    pixels: np.ndarray
    channel_stats: tuple[tuple[float, float], ...]
    source_id: str


def _pixels_of(img) -> tuple[np.ndarray, str]:
    if isinstance(img, SliceImage):
        return img.pixels, img.id
    return np.asarray(img), ""


def binarize(img: SliceImage | np.ndarray, threshold: int = DEFAULT_THRESHOLD) -> BinaryImage:
    """Map intensities strictly above ``threshold`` to 255 and the rest to 0."""
    pixels, sid = _pixels_of(img)
    out = np.where(pixels > threshold, 255, 0).astype(np.uint8)
    return BinaryImage(pixels=out, source_id=sid)


def _resize(pixels: np.ndarray, size: int) -> np.ndarray:
    if pixels.dtype == np.uint8:
        pil = Image.fromarray(pixels, mode="L")
    else:
        pil = Image.fromarray(pixels.astype(np.float32), mode="F")
    resized = pil.resize((size, size), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float32)


def prepare_for_separator(img: SliceImage | np.ndarray) -> NormalizedImage:
    """Binarize at T=35, resize to 32x32 (bilinear), scale to [0, 1], 1 channel."""
    pixels, sid = _pixels_of(img)
    binary = binarize(pixels, DEFAULT_THRESHOLD)
    resized = _resize(binary.pixels, SEPARATOR_SIZE)
    scaled = (resized / 255.0).astype(np.float32)
    return NormalizedImage(pixels=scaled[None, :, :], channel_stats=((0.0, 1.0),), source_id=sid)


def prepare_for_classifier(img: SliceImage | np.ndarray) -> NormalizedImage:
    """Resize to 224x224, replicate to 3 channels, standardize with ImageNet stats."""
    pixels, sid = _pixels_of(img)
    resized = _resize(pixels, CLASSIFIER_SIZE) / 255.0
    channels = []
    for mean, std in zip(IMAGENET_MEAN, IMAGENET_STD):
        channels.append((resized - mean) / std)
    stacked = np.stack(channels, axis=0).astype(np.float32)
    stats = tuple(zip(IMAGENET_MEAN, IMAGENET_STD))
    return NormalizedImage(pixels=stacked, channel_stats=stats, source_id=sid)
