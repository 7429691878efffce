"""Trainable feature extractor and projection head (torch, CPU-friendly).

The feature extractor is a stack of stride-1 conv blocks (3x3x3 conv ->
batch norm -> ReLU) that preserves the spatial grid; the projection head is
one stride-2 conv block followed by a 1x1x1 linear projection to a fixed
embedding width. Both are ordinary ``nn.Module``s so the whole registration
pipeline stays on one reverse-mode graph.

Feature maps carry their downsampling stride and the shape of the image they
came from, so downstream code can convert between feature-grid and
image-grid units without guessing.
"""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid import AffineTransform, Volume

logger = logging.getLogger(__name__)

__all__ = [
    "NetConfig",
    "FeatureMap",
    "FeatureExtractor",
    "ProjectionHead",
    "init_networks",
    "extract_features",
    "project_features",
    "transform_featuremap",
    "gradients",
    "save_checkpoint",
    "load_checkpoint",
    "volume_to_tensor",
]

# every dimension must survive four 3x3x3 convs and one stride-2 block
MIN_INPUT_SIZE = 4


@dataclass
class NetConfig:
    """Channel layout of the extractor blocks and the projection head."""

    extractor_channels: tuple[int, ...] = (16, 32, 32, 32)
    projection_mid_channels: int = 128
    projection_out_channels: int = 16
    in_channels: int = 1

    @property
    def feature_channels(self) -> int:
        return self.extractor_channels[-1]


@dataclass
class FeatureMap:
    """A C-channel 3D feature grid plus its stride relative to the image grid."""

    data: torch.Tensor  # (C, D', H', W')
    stride: int = 1
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(f"feature map must be (C, D, H, W), got {tuple(self.data.shape)}")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if self.image_shape is None:
            if self.stride != 1:
                raise ValueError("image_shape is required for stride > 1 feature maps")
            self.image_shape = tuple(self.data.shape[1:])
        self.image_shape = tuple(int(n) for n in self.image_shape)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


class FeatureExtractor(nn.Module):
    """Stride-1 convolutional feature extractor; preserves the spatial grid."""

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = config or NetConfig()
        blocks = []
        prev = self.config.in_channels
        for c in self.config.extractor_channels:
            blocks.append(
                nn.Sequential(
                    nn.Conv3d(prev, c, kernel_size=3, stride=1, padding=1),
                    nn.BatchNorm3d(c),
                    nn.ReLU(inplace=True),
                )
            )
            prev = c
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class ProjectionHead(nn.Module):
    """One stride-2 conv block, then a linear 1x1x1 projection (no activation)."""

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = config or NetConfig()
        c_in = self.config.feature_channels
        mid = self.config.projection_mid_channels
        self.block = nn.Sequential(
            nn.Conv3d(c_in, mid, kernel_size=3, stride=2, padding=1),
            nn.BatchNorm3d(mid),
            nn.ReLU(inplace=True),
        )
        self.project = nn.Conv3d(mid, self.config.projection_out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.block(x))


def _init_module(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in-scaled uniform conv init; unit scale / zero shift for norms.

    The weight bound is the He gain sqrt(6 / fan_in) so activation variance
    survives the ReLU stack even before any normalization statistics exist
    (the first round of pseudo-labels runs on the freshly initialized net).
    """
    for m in module.modules():
        if isinstance(m, nn.Conv3d):
            fan_in = m.in_channels * math.prod(m.kernel_size)
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    bias_bound = 1.0 / math.sqrt(fan_in)
                    m.bias.uniform_(-bias_bound, bias_bound, generator=generator)
        elif isinstance(m, nn.BatchNorm3d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
                m.num_batches_tracked.zero_()


def init_networks(
    config: NetConfig | None = None, seed: int = 0
) -> tuple[FeatureExtractor, ProjectionHead]:
    """Build and reproducibly initialize the extractor/projector pair."""
    config = config or NetConfig()
    generator = torch.Generator().manual_seed(int(seed))
    extractor = FeatureExtractor(config)
    projector = ProjectionHead(config)
    _init_module(extractor, generator)
    _init_module(projector, generator)
    return extractor, projector


def volume_to_tensor(volume, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Coerce a Volume or 3D array to a (D, H, W) tensor."""
    if isinstance(volume, Volume):
        arr = volume.data
    elif isinstance(volume, torch.Tensor):
        return volume.to(dtype)
    else:
        arr = np.asarray(volume, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{what} contains non-finite values")


def extract_features(extractor: FeatureExtractor, volume) -> FeatureMap:
    """Run the feature extractor on one volume; returns a stride-1 FeatureMap."""
    dtype = next(extractor.parameters()).dtype
    x = volume_to_tensor(volume, dtype=dtype)
    if x.dim() != 3:
        raise ValueError(f"expected a single 3D volume, got shape {tuple(x.shape)}")
    if min(x.shape) < MIN_INPUT_SIZE:
        raise ValueError(f"input shape {tuple(x.shape)} below minimum {MIN_INPUT_SIZE}")
    _check_finite(x, "input volume")
    out = extractor(x[None, None])[0]
    _check_finite(out, "extractor output")
    return FeatureMap(out, stride=1, image_shape=tuple(x.shape))


def project_features(projector: ProjectionHead, feat: FeatureMap) -> FeatureMap:
    """Project stride-1 features to the embedding grid (stride doubles)."""
    if feat.stride != 1:
        raise ValueError("projection head expects stride-1 features")
    _check_finite(feat.data, "projection input")
    out = projector(feat.data[None])[0]
    return FeatureMap(out, stride=feat.stride * 2, image_shape=feat.image_shape)


def gradients(loss: torch.Tensor, modules) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every named parameter.

    Parameters not connected to the loss get explicit zero gradients, and
    the disconnection is logged rather than silently dropped.
    """
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar tensor")
    if isinstance(modules, nn.Module):
        modules = [modules]
    named = []
    for idx, m in enumerate(modules):
        prefix = f"module{idx}." if len(modules) > 1 else ""
        named.extend((prefix + n, p) for n, p in m.named_parameters())
    params = [p for _, p in named]
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    else:
        grads = [None] * len(params)
    out: dict[str, torch.Tensor] = {}
    missing = []
    for (name, p), g in zip(named, grads):
        if g is None:
            missing.append(name)
            g = torch.zeros_like(p)
        out[name] = g
    if missing:
        logger.warning(
            "loss is not connected to %d parameter(s); reporting zero gradients: %s",
            len(missing),
            ", ".join(missing),
        )
    return out


def _affine_sample_grid(transform: AffineTransform, shape, dtype, device):
    """grid_sample coordinates for out(q) = in(T(q)), plus the in-domain mask."""
    d, h, w = shape
    zs = torch.arange(d, dtype=dtype, device=device)
    ys = torch.arange(h, dtype=dtype, device=device)
    xs = torch.arange(w, dtype=dtype, device=device)
    grid = torch.stack(torch.meshgrid(zs, ys, xs, indexing="ij"), dim=-1)  # (D,H,W,3) zyx
    lin = torch.as_tensor(transform.linear, dtype=dtype, device=device)
    trans = torch.as_tensor(transform.translation, dtype=dtype, device=device)
    mapped = grid @ lin.T + trans
    sizes = torch.tensor([d, h, w], dtype=dtype, device=device)
    inside = ((mapped >= 0) & (mapped <= sizes - 1)).all(dim=-1)
    # normalize to [-1, 1] with align_corners=True; grid_sample wants xyz order
    norm = 2.0 * mapped / (sizes - 1).clamp(min=1) - 1.0
    return norm.flip(-1), inside


def transform_featuremap(
    transform: AffineTransform, feat: FeatureMap
) -> tuple[FeatureMap, torch.Tensor]:
    """Resample every channel by the affine pull-back, tracking validity.

    Returns the transformed map and a boolean mask of voxels whose sample
    point lay inside the source domain (no border extrapolation). Identity
    transforms return the input tensor unchanged with a full mask.
    """
    data = feat.data
    if transform.is_identity:
        mask = torch.ones(feat.spatial_shape, dtype=torch.bool, device=data.device)
        return FeatureMap(data, feat.stride, feat.image_shape), mask
    sample_grid, mask = _affine_sample_grid(
        transform, feat.spatial_shape, data.dtype, data.device
    )
    warped = F.grid_sample(
        data[None],
        sample_grid[None],
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )[0]
    return FeatureMap(warped, feat.stride, feat.image_shape), mask


# ---------------------------------------------------------------------------
# checkpoint archive: named float32 little-endian arrays + a JSON manifest
# ---------------------------------------------------------------------------

def _state_arrays(extractor: FeatureExtractor, projector: ProjectionHead):
    for prefix, module in (("extractor", extractor), ("projector", projector)):
        for name, tensor in module.state_dict().items():
            if name.endswith("num_batches_tracked"):
                continue  # momentum-based BN update never reads the counter
            yield f"{prefix}.{name}", tensor.detach().cpu().numpy()


def save_checkpoint(
    path,
    extractor: FeatureExtractor,
    projector: ProjectionHead,
    seed: int = 0,
    extra: dict | None = None,
) -> None:
    """Write parameters as a zip of little-endian float32 .npy arrays + manifest."""
    config = extractor.config
    entries = {}
    manifest = {
        "format": "deformreg-checkpoint-v1",
        "seed": int(seed),
        "channels": {
            "extractor": list(config.extractor_channels),
            "projection_mid": config.projection_mid_channels,
            "projection_out": config.projection_out_channels,
            "in_channels": config.in_channels,
        },
        "arrays": [],
        "extra": extra or {},
    }
    for name, arr in _state_arrays(extractor, projector):
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        entries[name] = arr32
        manifest["arrays"].append({"name": name, "shape": list(arr32.shape)})
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, arr in entries.items():
            buf = io.BytesIO()
            np.save(buf, arr)
            zf.writestr(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path) -> tuple[FeatureExtractor, ProjectionHead, dict]:
    """Rebuild the extractor/projector pair from a checkpoint archive."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != "deformreg-checkpoint-v1":
            raise ValueError(f"unrecognized checkpoint format in {path}")
        arrays = {}
        for entry in manifest["arrays"]:
            name = entry["name"]
            with zf.open(f"params/{name}.npy") as fh:
                arrays[name] = np.load(io.BytesIO(fh.read()))
    ch = manifest["channels"]
    config = NetConfig(
        extractor_channels=tuple(ch["extractor"]),
        projection_mid_channels=ch["projection_mid"],
        projection_out_channels=ch["projection_out"],
        in_channels=ch["in_channels"],
    )
    extractor, projector = init_networks(config, seed=manifest["seed"])
    for prefix, module in (("extractor", extractor), ("projector", projector)):
        state = module.state_dict()
        for name, tensor in state.items():
            if name.endswith("num_batches_tracked"):
                tensor.zero_()
                continue
            key = f"{prefix}.{name}"
            if key not in arrays:
                raise ValueError(f"checkpoint is missing array {key}")
            loaded = torch.from_numpy(arrays[key].astype(np.float32))
            if tuple(loaded.shape) != tuple(tensor.shape):
                raise ValueError(
                    f"checkpoint array {key} has shape {tuple(loaded.shape)}, "
                    f"expected {tuple(tensor.shape)}"
                )
            tensor.copy_(loaded)
    return extractor, projector, manifest
