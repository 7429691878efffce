"""Registration MSE, dense InfoNCE over sampled voxel embeddings, joint total.

The InfoNCE term contrasts feature vectors sampled at shared spatial
locations of two feature maps: per anchor, one positive (same location in the
other map) against the 2(n-1) vectors at the other locations of both maps.
Vectors are L2-normalized before the inner product so the temperature has a
scale-free meaning; the loss reduces by sum over anchors. The registration
term is a plain voxel-mean MSE between displacement fields.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "LossWeights",
    "SampledFeatureSet",
    "registration_loss",
    "info_nce",
    "sample_locations",
    "total_loss",
]

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Contrastive weight and temperature of the joint objective."""

    alpha: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


@dataclass
class SampledFeatureSet:
    """Paired feature vectors drawn from the same locations of two maps."""

    vectors_a: torch.Tensor  # (n, C)
    vectors_b: torch.Tensor  # (n, C)
    locations: np.ndarray  # (n, 3) integer voxel indices

    def __post_init__(self):
        if self.vectors_a.shape != self.vectors_b.shape:
            raise ValueError(
                f"sample shapes differ: {tuple(self.vectors_a.shape)} vs "
                f"{tuple(self.vectors_b.shape)}"
            )
        if self.vectors_a.dim() != 2 or self.vectors_a.shape[0] < 1:
            raise ValueError("samples must be a non-empty (n, C) matrix")

    @classmethod
    def from_maps(cls, map_a: torch.Tensor, map_b: torch.Tensor, locations: np.ndarray):
        """Gather (n, C) vectors from two (C, D, H, W) maps at integer locations."""
        locs = np.asarray(locations)
        z, y, x = locs[:, 0], locs[:, 1], locs[:, 2]
        return cls(map_a[:, z, y, x].T, map_b[:, z, y, x].T, locs)

    @property
    def n(self) -> int:
        return self.vectors_a.shape[0]


def registration_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over voxels and components of the squared field difference."""
    if pred.shape != target.shape:
        raise ValueError(f"field shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def _normalize(v: torch.Tensor) -> torch.Tensor:
    norms = v.norm(dim=1, keepdim=True).clamp(min=NORM_EPS)
    return v / norms


def info_nce(samples: SampledFeatureSet, tau: float = 0.1) -> torch.Tensor:
    """Dense InfoNCE summed over anchors.

    For anchor j (drawn from map A) the positive is location j of map B and
    the negatives are the other n-1 locations of both maps. Computed with
    logsumexp for stability; always >= 0, and exactly 0 for n = 1.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    a = _normalize(samples.vectors_a)
    b = _normalize(samples.vectors_b)
    n = a.shape[0]
    sim_ab = a @ b.T / tau
    pos = sim_ab.diagonal()
    if n == 1:
        return pos.sum() * 0.0
    sim_aa = a @ a.T / tau
    # self-similarity of the anchor is not a candidate; drop it from the set
    neg_inf = torch.finfo(a.dtype).min
    sim_aa = sim_aa.masked_fill(
        torch.eye(n, dtype=torch.bool, device=a.device), neg_inf
    )
    logits = torch.cat([sim_ab, sim_aa], dim=1)  # (n, 2n): pos + 2(n-1) negs + self(-inf)
    return (torch.logsumexp(logits, dim=1) - pos).sum()


def sample_locations(mask, n: int, seed: int = 0) -> np.ndarray:
    """Uniform sample of distinct voxel locations inside a validity mask.

    Returns an (m, 3) integer array with m = min(n, #valid); if the mask has
    no valid voxels an empty array is returned and a diagnostic is logged.
    Deterministic for a given seed; a mask with exactly n valid voxels yields
    them in lexicographic order.
    """
    if isinstance(mask, torch.Tensor):
        mask = mask.cpu().numpy()
    mask = np.asarray(mask, dtype=bool)
    if n < 1:
        raise ValueError("n must be >= 1")
    valid = np.argwhere(mask)
    if valid.shape[0] == 0:
        logger.warning("sample_locations: validity mask is empty")
        return np.empty((0, 3), dtype=np.int64)
    if valid.shape[0] <= n:
        if valid.shape[0] < n:
            logger.warning(
                "sample_locations: only %d valid voxels for requested n=%d",
                valid.shape[0],
                n,
            )
        return valid.astype(np.int64)
    rng = np.random.default_rng(seed)
    idx = rng.choice(valid.shape[0], size=n, replace=False)
    return valid[idx].astype(np.int64)


def total_loss(l_reg, l_c_fixed, l_c_moving, weights: LossWeights):
    """Joint objective: registration term plus weighted two-branch contrastive."""
    return l_reg + weights.alpha * (l_c_fixed + l_c_moving)
