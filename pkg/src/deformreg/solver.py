"""Differentiable displacement estimation over a discretized search window.

The pipeline is: sum-of-squared-differences costs between fixed features and
moving features sampled at every candidate integer offset of a search window,
a soft-argmin readout, a few coupled smoothing iterations that re-solve the
soft-argmin against a proximity penalty to the local box mean, and a final
trilinear upsampling from the control grid to the full image grid. Every step
is plain torch, so gradients flow back into both feature maps.

Units: candidate offsets (and the control-grid estimate) are in feature-grid
voxels; the upsampled output is converted to image voxels by multiplying with
the feature stride.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .grid import DisplacementField
from .nets import FeatureMap

__all__ = [
    "SolverConfig",
    "CostVolume",
    "build_cost_volume",
    "solve_displacement",
    "instance_optimize",
    "upsample_field",
    "sample_features",
]


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the discretized search.

    radius: search window half-width in discrete steps (window is
        ``(2*radius+1)**3`` offsets).
    stride: control-grid stride in feature voxels.
    quant: feature voxels per discrete step.
    beta: soft-argmin temperature (lower = closer to hard argmin).
    coupling: weight of the proximity penalty toward the box-mean field.
    coupling_iters: number of coupled smoothing iterations.
    """

    radius: int = 3
    stride: int = 2
    quant: int = 1
    beta: float = 0.05
    coupling: float = 1.0
    coupling_iters: int = 3

    def __post_init__(self):
        if self.radius < 1 or self.stride < 1 or self.quant < 1:
            raise ValueError("radius, stride and quant must be >= 1")
        if self.beta <= 0 or self.coupling < 0 or self.coupling_iters < 0:
            raise ValueError("beta must be > 0; coupling and coupling_iters >= 0")


@dataclass
class CostVolume:
    """Per-control-point dissimilarities over the search window.

    ``costs[k, i, j, l]`` is the SSD between the fixed features at control
    point (i, j, l) and the moving features displaced by ``offsets[k]``
    (feature voxels).
    """

    costs: torch.Tensor  # (K, nz, ny, nx)
    offsets: torch.Tensor  # (K, 3), feature-voxel units
    config: SolverConfig
    feat_stride: int
    feat_shape: tuple[int, int, int]
    image_shape: tuple[int, int, int]

    @property
    def window_size(self) -> int:
        return self.costs.shape[0]


def _window_offsets(radius: int, quant: int, dtype, device) -> torch.Tensor:
    r = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    grid = torch.stack(torch.meshgrid(r, r, r, indexing="ij"), dim=-1)
    return grid.reshape(-1, 3) * quant


def build_cost_volume(
    feat_fixed: FeatureMap, feat_moving: FeatureMap, config: SolverConfig | None = None
) -> CostVolume:
    """SSD cost over the search window, differentiable w.r.t. both feature maps."""
    config = config or SolverConfig()
    if feat_fixed.channels != feat_moving.channels:
        raise ValueError(
            f"channel mismatch: {feat_fixed.channels} vs {feat_moving.channels}"
        )
    if feat_fixed.stride != feat_moving.stride:
        raise ValueError("fixed and moving feature maps must share a stride")
    fdata, mdata = feat_fixed.data, feat_moving.data
    d, h, w = feat_fixed.spatial_shape
    reach = config.quant * config.radius
    if 2 * reach > min(d, h, w):
        raise ValueError(
            f"search window (+-{reach} voxels) exceeds half the feature extent {min(d, h, w)}"
        )
    s = config.stride
    fixed_ctrl = fdata[:, ::s, ::s, ::s]  # control points at arange(0, n, stride)

    # replicate padding + integer slicing == border-clamped sampling, and it
    # keeps the gather differentiable w.r.t. the moving features
    padded = F.pad(mdata[None], (reach,) * 6, mode="replicate")[0]
    offsets = _window_offsets(config.radius, config.quant, fdata.dtype, fdata.device)
    rows = []
    for dz, dy, dx in offsets.to(torch.long).tolist():
        window = padded[
            :,
            reach + dz : reach + dz + d : s,
            reach + dy : reach + dy + h : s,
            reach + dx : reach + dx + w : s,
        ]
        diff = fixed_ctrl - window
        rows.append((diff * diff).sum(dim=0))
    costs = torch.stack(rows, dim=0)
    return CostVolume(
        costs=costs,
        offsets=offsets,
        config=config,
        feat_stride=feat_fixed.stride,
        feat_shape=(d, h, w),
        image_shape=feat_fixed.image_shape,
    )


def _soft_argmin(costs: torch.Tensor, offsets: torch.Tensor, beta: float) -> torch.Tensor:
    """Expected offset under softmax(-costs/beta): (K,nz,ny,nx) -> (3,nz,ny,nx)."""
    probs = torch.softmax(-costs / beta, dim=0)
    return torch.einsum("kzyx,kc->czyx", probs, offsets)


def _box_mean(u: torch.Tensor) -> torch.Tensor:
    """3x3x3 box mean with replicate padding (uniform fields stay uniform)."""
    padded = F.pad(u[None], (1, 1, 1, 1, 1, 1), mode="replicate")
    return F.avg_pool3d(padded, kernel_size=3, stride=1)[0]


def solve_control_grid(cost: CostVolume) -> torch.Tensor:
    """Coupled soft-argmin estimate on the control grid, in feature voxels."""
    cfg = cost.config
    u = _soft_argmin(cost.costs, cost.offsets, cfg.beta)
    for _ in range(cfg.coupling_iters):
        target = _box_mean(u)
        # squared distance from each candidate offset to the smoothed field
        diff = cost.offsets.view(-1, 3, 1, 1, 1) - target[None]
        penalty = cfg.coupling * (diff * diff).sum(dim=1)
        u = _soft_argmin(cost.costs + penalty, cost.offsets, cfg.beta)
    return u


def upsample_field(
    u_ctrl: torch.Tensor, total_stride: int, out_shape, value_scale: float = 1.0
) -> torch.Tensor:
    """Trilinearly upsample a control-grid field to an arbitrary grid.

    Control point ``c`` sits at output coordinate ``total_stride * c``; output
    positions beyond the last control point are border-clamped. Values are
    multiplied by ``value_scale`` (feature voxels -> output voxels).
    """
    dtype, device = u_ctrl.dtype, u_ctrl.device
    nc = torch.tensor(u_ctrl.shape[1:], dtype=dtype, device=device)
    axes = [
        torch.arange(n, dtype=dtype, device=device) / float(total_stride)
        for n in out_shape
    ]
    grid = torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)
    norm = 2.0 * grid / (nc - 1).clamp(min=1) - 1.0
    sampled = F.grid_sample(
        u_ctrl[None],
        norm.flip(-1)[None],
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )[0]
    return sampled * value_scale


def solve_displacement(cost: CostVolume, config: SolverConfig | None = None) -> torch.Tensor:
    """Full-resolution displacement (3, D, H, W) in image voxels.

    Differentiable w.r.t. the cost volume (and through it the feature maps).
    """
    if config is not None and config != cost.config:
        cost = replace(cost, config=config)
    u_ctrl = solve_control_grid(cost)
    total_stride = cost.config.stride * cost.feat_stride
    return upsample_field(
        u_ctrl, total_stride, cost.image_shape, value_scale=float(cost.feat_stride)
    )


def sample_features(data: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Trilinear border-clamped sampling of (C, D, H, W) at (3, ...) voxel coords.

    Differentiable in both the features and the coordinates.
    """
    d, h, w = data.shape[1:]
    sizes = torch.tensor([d, h, w], dtype=data.dtype, device=data.device)
    pts = torch.movedim(coords, 0, -1)
    norm = 2.0 * pts / (sizes - 1).clamp(min=1) - 1.0
    out = F.grid_sample(
        data[None],
        norm.flip(-1)[None],
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )[0]
    return out


def _feature_ssd_objective(
    fixed: torch.Tensor,
    moving: torch.Tensor,
    u_ctrl: torch.Tensor,
    stride: int,
    smooth_weight: float,
) -> torch.Tensor:
    """Feature SSD at full feature resolution + forward-difference smoothness."""
    feat_shape = fixed.shape[1:]
    u_feat = upsample_field(u_ctrl, stride, feat_shape)
    base = torch.stack(
        torch.meshgrid(
            *[torch.arange(n, dtype=fixed.dtype, device=fixed.device) for n in feat_shape],
            indexing="ij",
        ),
        dim=0,
    )
    warped = sample_features(moving, base + u_feat)
    data_term = ((fixed - warped) ** 2).sum()
    smooth = torch.zeros((), dtype=fixed.dtype, device=fixed.device)
    for axis in range(3):
        diff = torch.diff(u_ctrl, dim=axis + 1)
        smooth = smooth + (diff * diff).sum()
    return data_term + smooth_weight * smooth


def instance_optimize(
    feat_fixed: FeatureMap,
    feat_moving: FeatureMap,
    init: DisplacementField,
    iters: int = 50,
    lr: float = 0.02,
    smooth_weight: float = 0.5,
    stride: int = 2,
) -> DisplacementField:
    """Per-pair gradient refinement of a displacement field against feature SSD.

    The field is parameterized on a control grid (``stride`` in feature
    voxels), refined with Adam, and the best iterate is kept; if no iterate
    improves on the initial objective the input field is returned unchanged.
    """
    if not np.all(np.isfinite(init.vectors)):
        raise ValueError("initial field contains non-finite values")
    if tuple(init.shape) != tuple(feat_fixed.image_shape):
        raise ValueError(
            f"init grid {init.shape} does not match feature image shape "
            f"{feat_fixed.image_shape}"
        )
    fixed = feat_fixed.data.detach()
    moving = feat_moving.data.detach()
    feat_stride = feat_fixed.stride
    feat_shape = fixed.shape[1:]

    # sample the init at control-point image positions, in feature voxels
    ctrl_axes = [np.arange(0, n, stride) for n in feat_shape]
    zz, yy, xx = np.meshgrid(*ctrl_axes, indexing="ij")
    img_coords = np.stack([zz, yy, xx], axis=0) * feat_stride
    init_t = torch.from_numpy(init.vectors).to(fixed.dtype)
    ctrl_coords = torch.from_numpy(img_coords).to(fixed.dtype)
    u0 = sample_features(init_t, ctrl_coords) / feat_stride

    u = u0.clone().requires_grad_(True)
    optimizer = torch.optim.Adam([u], lr=lr)
    with torch.no_grad():
        best_obj = _feature_ssd_objective(fixed, moving, u0, stride, smooth_weight).item()
    best_u = None
    with torch.enable_grad():  # callers may sit inside a no_grad block
        for _ in range(iters):
            optimizer.zero_grad()
            obj = _feature_ssd_objective(fixed, moving, u, stride, smooth_weight)
            obj.backward()
            optimizer.step()
            with torch.no_grad():
                cur = _feature_ssd_objective(fixed, moving, u, stride, smooth_weight).item()
            if np.isfinite(cur) and cur < best_obj:
                best_obj = cur
                best_u = u.detach().clone()
    if best_u is None:
        return init
    full = upsample_field(
        best_u, stride * feat_stride, feat_fixed.image_shape, value_scale=float(feat_stride)
    )
    return DisplacementField(full.cpu().numpy().astype(np.float32))
