"""Staged self-training with refined pseudo-labels and a contrastive term.

Each stage regenerates pseudo-labels for every pair by running the current
pipeline in both directions, symmetrizing them for forward-backward
consistency, re-registering after a first warp (double warping), and
finishing with per-pair instance optimization. The stage then trains the
feature extractor and projection head to reproduce those fields under random
affine augmentation, with an InfoNCE equivariance term tying features of the
augmented image to the transformed features of the original.

All randomness is derived from the config seed through ``SeedSequence``
streams, so two runs with equal configs produce identical histories.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .grid import (
    AffineTransform,
    DisplacementField,
    Volume,
    apply_affine_to_volume,
    compose,
    identity_coords,
    warp,
    warp_array,
)
from .losses import LossWeights, SampledFeatureSet, info_nce, registration_loss, sample_locations, total_loss
from .nets import (
    FeatureExtractor,
    FeatureMap,
    NetConfig,
    ProjectionHead,
    extract_features,
    init_networks,
    project_features,
    save_checkpoint,
    transform_featuremap,
)
from .solver import (
    SolverConfig,
    build_cost_volume,
    instance_optimize,
    sample_features,
    solve_displacement,
)

logger = logging.getLogger(__name__)

__all__ = [
    "NumericalError",
    "IntensityTransform",
    "AugmentationSpec",
    "AugmentedPair",
    "TrainConfig",
    "TrainState",
    "PseudoLabelStore",
    "cosine_restart_lr",
    "augment_pair",
    "generate_pseudo_labels",
    "train_stage",
    "run_training",
    "register",
    "desk_scale_config",
]

LOSS_MODES = ("joint", "reg_only", "contrastive_frozen")

# stream tags for seed derivation
_DATA, _AUGMENT, _SAMPLING, _PRETRAIN = 1, 2, 3, 4


class NumericalError(RuntimeError):
    """Training produced non-finite values beyond the skip budget."""


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntensityTransform:
    """Appearance map: gamma on [0,1], linear scale/shift, additive noise."""

    gamma: float = 1.0
    scale: float = 1.0
    shift: float = 0.0
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def apply(self, data: np.ndarray) -> np.ndarray:
        out = np.clip(data, 0.0, 1.0) ** self.gamma
        out = out * self.scale + self.shift
        if self.noise_sigma > 0:
            rng = np.random.default_rng(self.noise_seed)
            out = out + self.noise_sigma * rng.standard_normal(out.shape)
        return out.astype(np.float32)


@dataclass
class AugmentationSpec:
    """Sampling ranges for the geometric and appearance augmentations.

    ``geometric``/``intensity`` switch the two augmentation families
    independently; intensity maps touch only network inputs, never the
    feature-transform branch or the pseudo-field adjustment.
    """

    rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    shear: float = 0.05
    translation: float = 3.0
    gamma_range: tuple[float, float] = (0.7, 1.4)
    noise_sigma_range: tuple[float, float] = (0.0, 0.05)
    intensity_scale_range: tuple[float, float] = (0.9, 1.1)
    intensity_shift: float = 0.05
    geometric: bool = True
    intensity: bool = False

    def sample_affine(self, rng: np.random.Generator, shape) -> AffineTransform:
        """Random rotation/scale/shear/translation about the volume center."""
        for _ in range(5):
            angles = np.deg2rad(rng.uniform(-self.rotation_deg, self.rotation_deg, 3))
            ca, sa = np.cos(angles[0]), np.sin(angles[0])
            cb, sb = np.cos(angles[1]), np.sin(angles[1])
            cg, sg = np.cos(angles[2]), np.sin(angles[2])
            rz = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
            ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
            rx = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
            scale = np.diag(rng.uniform(*self.scale_range, size=3))
            shear = np.eye(3)
            shear[np.triu_indices(3, 1)] = rng.uniform(-self.shear, self.shear, 3)
            linear = rz @ ry @ rx @ scale @ shear
            if abs(np.linalg.det(linear)) < 1e-6:
                continue
            center = (np.asarray(shape, dtype=np.float64) - 1) / 2
            shift = rng.uniform(-self.translation, self.translation, 3)
            translation = center - linear @ center + shift
            return AffineTransform(linear, translation)
        raise RuntimeError("could not sample an invertible affine augmentation")

    def sample_intensity(self, rng: np.random.Generator) -> IntensityTransform:
        return IntensityTransform(
            gamma=rng.uniform(*self.gamma_range),
            scale=rng.uniform(*self.intensity_scale_range),
            shift=rng.uniform(-self.intensity_shift, self.intensity_shift),
            noise_sigma=rng.uniform(*self.noise_sigma_range),
            noise_seed=int(rng.integers(0, 2**31 - 1)),
        )


@dataclass
class AugmentedPair:
    fixed: Volume
    moving: Volume
    field: DisplacementField
    transform_fixed: AffineTransform
    transform_moving: AffineTransform
    intensity_fixed: IntensityTransform | None = None
    intensity_moving: IntensityTransform | None = None


def _adjust_pseudo_field(
    pseudo: DisplacementField,
    t_fixed: AffineTransform,
    t_moving: AffineTransform,
) -> DisplacementField:
    """Pseudo-field for the augmented pair.

    With pull-back resampling of both images, the field that maps the
    augmented fixed grid onto the augmented moving image is
    ``u_aug(q) = T_m^{-1}(T_f(q) + u(T_f(q))) - q``.
    """
    q = identity_coords(pseudo.shape, dtype=np.float64)
    p = t_fixed.apply(q)
    u_at_p = np.stack([warp_sample(pseudo.vectors[c], p) for c in range(3)], axis=0)
    mapped = t_moving.inverse().apply(p + u_at_p)
    return DisplacementField((mapped - q).astype(np.float32))


def warp_sample(component: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear border-clamped sampling of one scalar grid at given coords."""
    from scipy.ndimage import map_coordinates

    return map_coordinates(component, coords, order=1, mode="nearest")


def augment_pair(
    fixed: Volume,
    moving: Volume,
    pseudo: DisplacementField,
    spec: AugmentationSpec,
    rng: np.random.Generator,
) -> AugmentedPair:
    """Apply per-image affine (and optional intensity) augmentation to a pair
    and adjust the pseudo displacement field accordingly.

    Identity transforms (geometric disabled) reproduce the pseudo field
    bitwise.
    """
    if tuple(pseudo.shape) != tuple(fixed.shape):
        raise ValueError("pseudo field grid does not match the fixed image")
    if spec.geometric:
        t_fixed = spec.sample_affine(rng, fixed.shape)
        t_moving = spec.sample_affine(rng, moving.shape)
        fixed_aug = apply_affine_to_volume(fixed, t_fixed)
        moving_aug = apply_affine_to_volume(moving, t_moving)
        field_aug = _adjust_pseudo_field(pseudo, t_fixed, t_moving)
    else:
        t_fixed = AffineTransform.identity()
        t_moving = AffineTransform.identity()
        fixed_aug = Volume(fixed.data.copy(), spacing=fixed.spacing)
        moving_aug = Volume(moving.data.copy(), spacing=moving.spacing)
        field_aug = DisplacementField(pseudo.vectors.copy())
    int_f = int_m = None
    if spec.intensity:
        int_f = spec.sample_intensity(rng)
        int_m = spec.sample_intensity(rng)
        fixed_aug = Volume(int_f.apply(fixed_aug.data), spacing=fixed.spacing)
        moving_aug = Volume(int_m.apply(moving_aug.data), spacing=moving.spacing)
    return AugmentedPair(fixed_aug, moving_aug, field_aug, t_fixed, t_moving, int_f, int_m)


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Full training recipe.

    The default schedule mirrors the reference setup (8 stages of 1000
    iterations, batch 2, cosine warm restarts 1e-3 -> 1e-5); use
    ``desk_scale_config()`` for a configuration that trains end-to-end on a
    small CPU in minutes.
    """

    stages: int = 8
    iters_per_stage: int = 1000
    batch_size: int = 2
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    seed: int = 0
    n_samples: int = 1000
    loss_mode: str = "joint"
    pretrain_iters: int | None = None
    max_skipped_steps: int = 25
    instance_iters: int = 50
    instance_lr: float = 0.02
    instance_smooth: float = 0.5
    loss_weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if not (self.lr_max >= self.lr_min > 0):
            raise ValueError("need lr_max >= lr_min > 0")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        for key, sub in (
            ("loss_weights", LossWeights),
            ("net", NetConfig),
            ("solver", SolverConfig),
            ("augment", AugmentationSpec),
        ):
            if key in raw and isinstance(raw[key], dict):
                params = {
                    k: tuple(v) if isinstance(v, list) else v for k, v in raw[key].items()
                }
                raw[key] = sub(**params)
        return cls(**raw)


def desk_scale_config(**overrides) -> TrainConfig:
    """CPU-sized preset: small net, short schedule, moderate search window."""
    base = dict(
        stages=3,
        iters_per_stage=100,
        batch_size=2,
        n_samples=128,
        net=NetConfig(extractor_channels=(4, 8, 8, 8), projection_mid_channels=16),
        solver=SolverConfig(radius=3, stride=2, quant=1, beta=0.2, coupling=20.0, coupling_iters=3),
        augment=AugmentationSpec(rotation_deg=6.0, translation=2.0),
        instance_iters=40,
        instance_lr=0.1,
        instance_smooth=1.0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class PseudoLabelStore:
    """Refined displacement fields keyed by (fixed_id, moving_id)."""

    fields: dict
    stage: int
    diagnostics: dict = field(default_factory=dict)

    def get(self, pair) -> DisplacementField:
        return self.fields[(pair.fixed_id, pair.moving_id)]


@dataclass
class TrainState:
    """Mutable training state: networks, stage index, optimizer, history."""

    config: TrainConfig
    extractor: FeatureExtractor
    projector: ProjectionHead
    stage: int = 0
    history: list = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None
    last_inference_seconds: float | None = None

    @classmethod
    def initialize(cls, config: TrainConfig) -> "TrainState":
        extractor, projector = init_networks(config.net, seed=config.seed)
        return cls(config=config, extractor=extractor, projector=projector)

    def trainable_parameters(self):
        params = [p for p in self.extractor.parameters() if p.requires_grad]
        params += [p for p in self.projector.parameters() if p.requires_grad]
        return params


def cosine_restart_lr(step_in_stage: int, iters_per_stage: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing with one warm restart per stage.

    Position 0 of every stage returns ``lr_max`` exactly; the last position
    approaches ``lr_min``.
    """
    pos = step_in_stage % iters_per_stage
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * pos / iters_per_stage))


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, *key]))


def _stream_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, *key]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _normalize_projection(feat):
    """Scale a projected map to unit RMS so solver costs are scale-stable.

    Training inflates feature magnitudes, which would silently re-tune the
    solver temperature and coupling; dividing by the map's own RMS keeps the
    cost landscape in the same numeric range at every stage. Differentiable.
    """
    rms = feat.data.pow(2).mean().sqrt().clamp(min=1e-6)
    return FeatureMap(feat.data / rms, feat.stride, feat.image_shape)


def _project_pair(state: TrainState, fixed, moving):
    feat_f = extract_features(state.extractor, fixed)
    feat_m = extract_features(state.extractor, moving)
    return (
        _normalize_projection(project_features(state.projector, feat_f)),
        _normalize_projection(project_features(state.projector, feat_m)),
    )


def register(state: TrainState, fixed, moving) -> DisplacementField:
    """Full inference path: features -> projections -> solver -> field.

    Runs networks in evaluation mode; wall-clock time (excluding any IO) is
    recorded on ``state.last_inference_seconds``.
    """
    modes = (state.extractor.training, state.projector.training)
    state.extractor.eval()
    state.projector.eval()
    start = time.perf_counter()
    with torch.no_grad():
        proj_f, proj_m = _project_pair(state, fixed, moving)
        cost = build_cost_volume(proj_f, proj_m, state.config.solver)
        u = solve_displacement(cost)
    state.last_inference_seconds = time.perf_counter() - start
    state.extractor.train(modes[0])
    state.projector.train(modes[1])
    return DisplacementField(u.cpu().numpy().astype(np.float32))


# ---------------------------------------------------------------------------
# pseudo-label generation
# ---------------------------------------------------------------------------

def _warp_field_components(field_to_sample: np.ndarray, through: np.ndarray) -> np.ndarray:
    """Sample a vector field at p + through(p), componentwise trilinear."""
    return np.stack(
        [warp_array(field_to_sample[c], through) for c in range(3)], axis=0
    )


def _feature_ssd(proj_f, proj_m, field: DisplacementField, stride: int) -> float:
    """Data-term SSD of projected features under a full-resolution field."""
    fixed = proj_f.data.detach()
    moving = proj_m.data.detach()
    feat_shape = fixed.shape[1:]
    axes = [np.arange(0, n) * proj_f.stride for n in feat_shape]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    img_coords = np.stack([zz, yy, xx]).astype(np.float32)
    u = np.stack(
        [warp_sample(field.vectors[c], img_coords) for c in range(3)], axis=0
    )
    coords = torch.from_numpy((img_coords + u) / proj_f.stride).to(fixed.dtype)
    warped = sample_features(moving, coords)
    return float(((fixed - warped) ** 2).sum().item())


def generate_pseudo_labels(
    state: TrainState, dataset, config: TrainConfig | None = None
) -> PseudoLabelStore:
    """Run the three-step refinement for every pair and store the results.

    Steps per pair: (1) symmetrize the two directional estimates for
    forward-backward consistency, (2) re-register the once-warped moving
    image and fold the residual in (double warping), (3) instance-optimize.
    Networks run in evaluation mode so the labels are reproducible. A pair
    whose refinement turns non-finite falls back to its last finite field.
    """
    config = config or state.config
    state.extractor.eval()
    state.projector.eval()
    fields = {}
    diagnostics = {}
    for pair in dataset.pairs:
        fixed = dataset.volume(pair.fixed_id)
        moving = dataset.volume(pair.moving_id)
        with torch.no_grad():
            proj_f, proj_m = _project_pair(state, fixed, moving)
            cost_fm = build_cost_volume(proj_f, proj_m, config.solver)
            u_fm = solve_displacement(cost_fm).cpu().numpy()
            cost_mf = build_cost_volume(proj_m, proj_f, config.solver)
            u_mf = solve_displacement(cost_mf).cpu().numpy()

        current = DisplacementField(u_fm.astype(np.float32))
        ssd_initial = _feature_ssd(proj_f, proj_m, current, config.solver.stride)
        try:
            # (1) forward-backward consistency by symmetrization
            u_mf_at = _warp_field_components(u_mf, u_fm)
            sym = 0.5 * (u_fm - u_mf_at)
            if not np.all(np.isfinite(sym)):
                raise FloatingPointError("consistency step produced non-finite field")
            current = DisplacementField(sym.astype(np.float32))

            # (2) double warping: residual registration of the warped moving image
            moving_warped = warp(moving, current)
            with torch.no_grad():
                feat_mw = extract_features(state.extractor, moving_warped)
                proj_mw = project_features(state.projector, feat_mw)
                residual = solve_displacement(
                    build_cost_volume(proj_f, proj_mw, config.solver)
                ).cpu().numpy()
            if not np.all(np.isfinite(residual)):
                raise FloatingPointError("double-warp residual is non-finite")
            current = compose(current, DisplacementField(residual.astype(np.float32)))

            # (3) per-pair instance optimization
            current = instance_optimize(
                proj_f,
                proj_m,
                current,
                iters=config.instance_iters,
                lr=config.instance_lr,
                smooth_weight=config.instance_smooth,
                stride=config.solver.stride,
            )
        except FloatingPointError as exc:
            logger.warning(
                "pseudo-label refinement aborted for pair (%s, %s): %s",
                pair.fixed_id,
                pair.moving_id,
                exc,
            )
        ssd_refined = _feature_ssd(proj_f, proj_m, current, config.solver.stride)
        key = (pair.fixed_id, pair.moving_id)
        fields[key] = current
        diagnostics[key] = {"ssd_initial": ssd_initial, "ssd_refined": ssd_refined}
    return PseudoLabelStore(fields=fields, stage=state.stage, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _effective_alpha(config: TrainConfig) -> float:
    if config.loss_mode == "joint":
        return config.loss_weights.alpha
    return 0.0


def _pair_order(seed: int, stage: int, n_pairs: int, count: int) -> np.ndarray:
    """Shuffled cycling over pair indices, deterministic per (seed, stage)."""
    rng = _stream(seed, _DATA, stage)
    reps = int(np.ceil(count / max(n_pairs, 1)))
    order = np.concatenate([rng.permutation(n_pairs) for _ in range(reps)])
    return order[:count]


def _contrastive_branch(
    feat_aug_data: torch.Tensor,
    feat_orig,
    transform: AffineTransform,
    n_samples: int,
    tau: float,
    seed: int,
) -> torch.Tensor:
    feat_b, mask = transform_featuremap(transform, feat_orig)
    locations = sample_locations(mask, n_samples, seed=seed)
    if locations.shape[0] < 1:
        return feat_aug_data.sum() * 0.0
    samples = SampledFeatureSet.from_maps(feat_aug_data, feat_b.data, locations)
    return info_nce(samples, tau=tau)


def train_stage(
    state: TrainState, store: PseudoLabelStore, dataset, config: TrainConfig | None = None
) -> TrainState:
    """One stage of optimizer steps against the stage's pseudo-labels."""
    config = config or state.config
    alpha = _effective_alpha(config)
    frozen_extractor = config.loss_mode == "contrastive_frozen"
    if frozen_extractor:
        for p in state.extractor.parameters():
            p.requires_grad_(False)
        state.extractor.eval()
    else:
        state.extractor.train()
    state.projector.train()
    if state.optimizer is None:
        state.optimizer = torch.optim.Adam(state.trainable_parameters(), lr=config.lr_max)
    optimizer = state.optimizer

    stage = state.stage
    n_steps = config.iters_per_stage
    order = _pair_order(config.seed, stage, len(dataset.pairs), n_steps * config.batch_size)
    skipped = 0
    for step in range(n_steps):
        lr = cosine_restart_lr(step, n_steps, config.lr_max, config.lr_min)
        for group in optimizer.param_groups:
            group["lr"] = lr

        batch_idx = order[step * config.batch_size : (step + 1) * config.batch_size]
        batch = []
        for slot, pair_idx in enumerate(batch_idx):
            pair = dataset.pairs[int(pair_idx)]
            rng = _stream(config.seed, _AUGMENT, stage, step, slot)
            aug = augment_pair(
                dataset.volume(pair.fixed_id),
                dataset.volume(pair.moving_id),
                store.get(pair),
                config.augment,
                rng,
            )
            batch.append((pair, aug))

        # one batched extractor pass: augmented fixed/moving per pair, then
        # (when the contrastive term is active) the original fixed/moving
        inputs = []
        for _, aug in batch:
            inputs.append(torch.from_numpy(aug.fixed.data))
            inputs.append(torch.from_numpy(aug.moving.data))
        if alpha > 0:
            for pair, _ in batch:
                inputs.append(torch.from_numpy(dataset.volume(pair.fixed_id).data))
                inputs.append(torch.from_numpy(dataset.volume(pair.moving_id).data))
        stackin = torch.stack(inputs)[:, None]
        features = state.extractor(stackin)
        image_shape = tuple(stackin.shape[2:])

        l_reg_terms = []
        l_c_fixed_terms = []
        l_c_moving_terms = []
        for slot, (pair, aug) in enumerate(batch):
            feat_f_aug = FeatureMap(features[2 * slot], 1, image_shape)
            feat_m_aug = FeatureMap(features[2 * slot + 1], 1, image_shape)
            proj_f = _normalize_projection(project_features(state.projector, feat_f_aug))
            proj_m = _normalize_projection(project_features(state.projector, feat_m_aug))
            cost = build_cost_volume(proj_f, proj_m, config.solver)
            pred = solve_displacement(cost)
            target = torch.from_numpy(aug.field.vectors)
            l_reg_terms.append(registration_loss(pred, target))
            if alpha > 0:
                base = 2 * len(batch)
                feat_f_orig = FeatureMap(features[base + 2 * slot], 1, image_shape)
                feat_m_orig = FeatureMap(features[base + 2 * slot + 1], 1, image_shape)
                l_c_fixed_terms.append(
                    _contrastive_branch(
                        feat_f_aug.data,
                        feat_f_orig,
                        aug.transform_fixed,
                        config.n_samples,
                        config.loss_weights.tau,
                        _stream_seed(config.seed, _SAMPLING, stage, step, slot, 0),
                    )
                )
                l_c_moving_terms.append(
                    _contrastive_branch(
                        feat_m_aug.data,
                        feat_m_orig,
                        aug.transform_moving,
                        config.n_samples,
                        config.loss_weights.tau,
                        _stream_seed(config.seed, _SAMPLING, stage, step, slot, 1),
                    )
                )

        l_reg = torch.stack(l_reg_terms).mean()
        if alpha > 0:
            l_c_fixed = torch.stack(l_c_fixed_terms).mean()
            l_c_moving = torch.stack(l_c_moving_terms).mean()
        else:
            l_c_fixed = torch.zeros(())
            l_c_moving = torch.zeros(())
        loss = total_loss(l_reg, l_c_fixed, l_c_moving, replace(config.loss_weights, alpha=alpha))

        if not torch.isfinite(loss):
            skipped += 1
            logger.warning("skipping step %d of stage %d: non-finite loss", step, stage)
            if skipped > config.max_skipped_steps:
                raise NumericalError(
                    f"{skipped} non-finite steps in stage {stage}; aborting"
                )
            continue

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        state.history.append(
            {
                "stage": stage,
                "step": step,
                "lr": lr,
                "loss": float(loss.item()),
                "l_reg": float(l_reg.item()),
                "l_c_fixed": float(l_c_fixed.item()),
                "l_c_moving": float(l_c_moving.item()),
            }
        )
    return state


def _contrastive_pretrain(state: TrainState, dataset, config: TrainConfig) -> None:
    """Contrastive-only pretraining of the feature extractor."""
    iters = config.pretrain_iters or config.iters_per_stage
    state.extractor.train()
    optimizer = torch.optim.Adam(state.extractor.parameters(), lr=config.lr_max)
    order = _pair_order(config.seed, 0, len(dataset.pairs), iters * config.batch_size)
    zero_field_cache: dict = {}
    for step in range(iters):
        lr = cosine_restart_lr(step, iters, config.lr_max, config.lr_min)
        for group in optimizer.param_groups:
            group["lr"] = lr
        losses = []
        batch_idx = order[step * config.batch_size : (step + 1) * config.batch_size]
        for slot, pair_idx in enumerate(batch_idx):
            pair = dataset.pairs[int(pair_idx)]
            rng = _stream(config.seed, _PRETRAIN, step, slot)
            for branch, vid in enumerate((pair.fixed_id, pair.moving_id)):
                volume = dataset.volume(vid)
                if vid not in zero_field_cache:
                    zero_field_cache[vid] = DisplacementField.zeros(volume.shape)
                aug = augment_pair(
                    volume, volume, zero_field_cache[vid], config.augment, rng
                )
                feat_aug = extract_features(state.extractor, aug.fixed)
                feat_orig = extract_features(state.extractor, volume)
                losses.append(
                    _contrastive_branch(
                        feat_aug.data,
                        feat_orig,
                        aug.transform_fixed,
                        config.n_samples,
                        config.loss_weights.tau,
                        _stream_seed(config.seed, _PRETRAIN, step, slot, branch),
                    )
                )
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            logger.warning("skipping pretrain step %d: non-finite loss", step)
            continue
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        state.history.append(
            {"stage": 0, "step": step, "lr": lr, "loss": float(loss.item()),
             "l_reg": 0.0, "l_c_fixed": float(loss.item()), "l_c_moving": 0.0}
        )


def run_training(dataset, config: TrainConfig, out_dir=None) -> TrainState:
    """Alternate pseudo-label generation and stage training for all stages.

    With ``out_dir`` set, writes per-stage checkpoints, pseudo-label
    provenance, and a JSON-lines loss history.
    """
    if len(dataset.pairs) == 0:
        raise ValueError("dataset has no pairs")
    state = TrainState.initialize(config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if config.loss_mode == "contrastive_frozen":
        _contrastive_pretrain(state, dataset, config)

    for stage in range(1, config.stages + 1):
        state.stage = stage
        store = generate_pseudo_labels(state, dataset, config)
        train_stage(state, store, dataset, config)
        if out is not None:
            save_checkpoint(
                out / f"stage_{stage:02d}.ckpt",
                state.extractor,
                state.projector,
                seed=config.seed,
                extra={"stage": stage, "loss_mode": config.loss_mode},
            )
            provenance = {
                "stage": stage,
                "pairs": [list(k) for k in store.fields],
                "diagnostics": {f"{k[0]}|{k[1]}": v for k, v in store.diagnostics.items()},
            }
            (out / f"stage_{stage:02d}_pseudo.json").write_text(
                json.dumps(provenance, indent=2)
            )
            with (out / "history.jsonl").open("a") as fh:
                for row in state.history[len(state.history) - config.iters_per_stage :]:
                    fh.write(json.dumps(row) + "\n")
    return state
