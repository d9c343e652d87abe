"""Gaussian-kernel maximum mean discrepancy between feature batches.

``mmd_squared`` is the biased V-statistic estimator

    (1/ns^2) sum_ij k(s_i, s_j) + (1/nt^2) sum_ij k(t_i, t_j)
        - (2/(ns*nt)) sum_ij k(s_i, t_j),        k(a, b) = exp(-||a-b||^2 / (2 sigma^2)),

which is non-negative, defined for single-point batches, and differentiable in
the features, so it can serve directly as an alignment loss. The class-wise
variant averages the estimator over classes present in both batches, which
keeps class semantics intact during alignment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import Domain, TumorClass


class MMDError(ValueError):
    """Raised on dimension mismatches, non-finite inputs, or bad bandwidths."""


@dataclass
class FeatureBatch:
    """An n x d feature matrix with per-row class tags and a domain tag.

    Class tags are true labels for source batches and pseudo-labels for target
    batches. Features may carry gradients; validation never detaches them.
    """

    features: torch.Tensor
    class_tags: Sequence[TumorClass] | None = None
    domain: Domain | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.features, torch.Tensor):
            self.features = torch.as_tensor(np.asarray(self.features), dtype=torch.float64)
        if self.features.ndim != 2:
            raise MMDError(f"features must be 2-D, got shape {tuple(self.features.shape)}")
        if self.features.shape[0] < 1:
            raise MMDError("feature batch must contain at least one row")
        if not torch.isfinite(self.features).all():
            raise MMDError("feature batch contains non-finite values")
        if self.class_tags is not None and len(self.class_tags) != self.features.shape[0]:
            raise MMDError("class_tags length must match feature rows")

    def subset(self, cls: TumorClass) -> "FeatureBatch":
        if self.class_tags is None:
            raise MMDError("batch has no class tags")
        mask = torch.tensor([t is cls for t in self.class_tags], dtype=torch.bool)
        return FeatureBatch(
            features=self.features[mask],
            class_tags=[t for t in self.class_tags if t is cls],
            domain=self.domain,
        )

    def classes_present(self) -> set[TumorClass]:
        if self.class_tags is None:
            return set()
        return set(self.class_tags)


def _features(batch: FeatureBatch | torch.Tensor | np.ndarray) -> torch.Tensor:
    if isinstance(batch, FeatureBatch):
        return batch.features
    return FeatureBatch(batch).features


def gaussian_kernel(a: torch.Tensor, b: torch.Tensor, sigma: float) -> torch.Tensor:
    """Pairwise kernel matrix k(a_i, b_j) = exp(-||a_i - b_j||^2 / (2 sigma^2))."""
    sq = torch.cdist(a, b, p=2.0) ** 2
    return torch.exp(-sq / (2.0 * sigma * sigma))


def mmd_squared(
    source: FeatureBatch | torch.Tensor | np.ndarray,
    target: FeatureBatch | torch.Tensor | np.ndarray,
    sigma: float,
) -> torch.Tensor:
    """Biased squared-MMD estimate between two batches; differentiable, >= 0."""
    xs, xt = _features(source), _features(target)
    if xs.shape[1] != xt.shape[1]:
        raise MMDError(f"feature dimension mismatch: {xs.shape[1]} vs {xt.shape[1]}")
    if sigma <= 0:
        raise MMDError(f"sigma must be positive, got {sigma}")
    k_ss = gaussian_kernel(xs, xs, sigma).mean()
    k_tt = gaussian_kernel(xt, xt, sigma).mean()
    k_st = gaussian_kernel(xs, xt, sigma).mean()
    return k_ss + k_tt - 2.0 * k_st


def median_heuristic_sigma(
    source: FeatureBatch | torch.Tensor | np.ndarray,
    target: FeatureBatch | torch.Tensor | np.ndarray,
) -> float:
    """Median pairwise distance over the pooled batch (self-pairs excluded).

    Falls back to 1.0 when the median is zero (all points identical). Needs at
    least two pooled points.
    """
    pooled = torch.cat([_features(source), _features(target)]).detach()
    n = pooled.shape[0]
    if n < 2:
        raise MMDError("median heuristic needs at least 2 pooled points")
    dists = torch.cdist(pooled, pooled, p=2.0)
    iu = torch.triu_indices(n, n, offset=1)
    med = float(dists[iu[0], iu[1]].double().median())
    return med if med > 0.0 else 1.0


def resolve_sigma(
    source: FeatureBatch | torch.Tensor | np.ndarray,
    target: FeatureBatch | torch.Tensor | np.ndarray,
    bandwidth_policy: str = "median",
    sigma: float | None = None,
) -> float:
    if bandwidth_policy == "median":
        return median_heuristic_sigma(source, target)
    if bandwidth_policy == "fixed":
        if sigma is None or sigma <= 0:
            raise MMDError("fixed bandwidth policy needs a positive sigma")
        return float(sigma)
    raise MMDError(f"unknown bandwidth policy {bandwidth_policy!r}")


def classwise_mmd(source: FeatureBatch, target: FeatureBatch, config) -> torch.Tensor:
    """Mean of per-class squared MMD over classes present in both batches.

    The bandwidth is resolved per class pair under ``config.bandwidth_policy``
    (``median`` or ``fixed`` with ``config.sigma``). Returns 0 when the batches
    share no class.
    """
    shared = source.classes_present() & target.classes_present()
    if not shared:
        return torch.zeros((), dtype=source.features.dtype)
    vals = []
    for cls in sorted(shared, key=lambda c: c.value):
        s_c = source.subset(cls)
        t_c = target.subset(cls)
        sig = resolve_sigma(s_c, t_c, config.bandwidth_policy, getattr(config, "sigma", None))
        vals.append(mmd_squared(s_c, t_c, sig))
    return torch.stack(vals).mean()
