"""Sklearn-style estimator wrapping the full registration pipeline.

``DeformableRegistration`` exposes the staged self-training loop through the
familiar fit/predict/transform surface so the registrar composes with
pipelines, grid search, and ``clone()``. Hyperparameters are flat keyword
arguments mirroring ``TrainConfig``; the fitted state lives in ``state_``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import PairRecord, RegistrationDataset
from .grid import Volume, warp_array
from .losses import LossWeights
from .nets import NetConfig
from .selftrain import AugmentationSpec, TrainConfig, register, run_training
from .solver import SolverConfig
from .validation import check_volume_array

__all__ = ["DeformableRegistration"]


class DeformableRegistration(BaseEstimator):
    """Deformable pairwise 3D registration trained by staged self-training.

    Parameters follow the desk-scale defaults; see ``TrainConfig`` for the
    full-scale schedule. ``fit`` accepts a ``RegistrationDataset`` or a list
    of ``(fixed, moving)`` arrays/Volumes.
    """

    def __init__(
        self,
        stages=3,
        iters_per_stage=100,
        batch_size=2,
        lr_max=1e-3,
        lr_min=1e-5,
        alpha=1.0,
        tau=0.1,
        n_samples=128,
        extractor_channels=(4, 8, 8, 8),
        projection_mid_channels=16,
        projection_out_channels=16,
        search_radius=3,
        control_stride=2,
        quant=1,
        beta=1.0,
        coupling=1.0,
        coupling_iters=3,
        rotation_deg=6.0,
        translation=2.0,
        geometric_augment=True,
        intensity_augment=False,
        loss_mode="joint",
        instance_iters=40,
        instance_lr=0.1,
        instance_smooth=0.5,
        seed=0,
    ):
        self.stages = stages
        self.iters_per_stage = iters_per_stage
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.alpha = alpha
        self.tau = tau
        self.n_samples = n_samples
        self.extractor_channels = extractor_channels
        self.projection_mid_channels = projection_mid_channels
        self.projection_out_channels = projection_out_channels
        self.search_radius = search_radius
        self.control_stride = control_stride
        self.quant = quant
        self.beta = beta
        self.coupling = coupling
        self.coupling_iters = coupling_iters
        self.rotation_deg = rotation_deg
        self.translation = translation
        self.geometric_augment = geometric_augment
        self.intensity_augment = intensity_augment
        self.loss_mode = loss_mode
        self.instance_iters = instance_iters
        self.instance_lr = instance_lr
        self.instance_smooth = instance_smooth
        self.seed = seed

    # ------------------------------------------------------------------
    def build_config(self) -> TrainConfig:
        """Assemble the nested TrainConfig from the flat parameter surface."""
        return TrainConfig(
            stages=self.stages,
            iters_per_stage=self.iters_per_stage,
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            lr_min=self.lr_min,
            seed=self.seed,
            n_samples=self.n_samples,
            loss_mode=self.loss_mode,
            instance_iters=self.instance_iters,
            instance_lr=self.instance_lr,
            instance_smooth=self.instance_smooth,
            loss_weights=LossWeights(alpha=self.alpha, tau=self.tau),
            net=NetConfig(
                extractor_channels=tuple(self.extractor_channels),
                projection_mid_channels=self.projection_mid_channels,
                projection_out_channels=self.projection_out_channels,
            ),
            solver=SolverConfig(
                radius=self.search_radius,
                stride=self.control_stride,
                quant=self.quant,
                beta=self.beta,
                coupling=self.coupling,
                coupling_iters=self.coupling_iters,
            ),
            augment=AugmentationSpec(
                rotation_deg=self.rotation_deg,
                translation=self.translation,
                geometric=self.geometric_augment,
                intensity=self.intensity_augment,
            ),
        )

    @staticmethod
    def _as_dataset(pairs) -> RegistrationDataset:
        if isinstance(pairs, RegistrationDataset):
            return pairs
        volumes = {}
        records = []
        for i, (fixed, moving) in enumerate(pairs):
            fixed = fixed if isinstance(fixed, Volume) else Volume(check_volume_array(fixed))
            moving = moving if isinstance(moving, Volume) else Volume(check_volume_array(moving))
            fid, mid = f"pair{i:03d}_f", f"pair{i:03d}_m"
            volumes[fid] = fixed
            volumes[mid] = moving
            records.append(PairRecord(fid, mid))
        return RegistrationDataset(pairs=records, mode="intra", volumes=volumes)

    # ------------------------------------------------------------------
    def fit(self, pairs, y=None):
        """Run the staged self-training loop on a dataset of image pairs."""
        dataset = self._as_dataset(pairs)
        config = self.build_config()
        self.state_ = run_training(dataset, config)
        self.history_ = list(self.state_.history)
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise RuntimeError("this estimator is not fitted yet; call fit first")

    def predict(self, fixed, moving) -> np.ndarray:
        """Displacement field (3, D, H, W) aligning ``moving`` onto ``fixed``."""
        self._check_fitted()
        fixed = fixed if isinstance(fixed, Volume) else Volume(check_volume_array(fixed))
        moving = moving if isinstance(moving, Volume) else Volume(check_volume_array(moving))
        if fixed.shape != moving.shape:
            raise ValueError(f"shape mismatch: {fixed.shape} vs {moving.shape}")
        return register(self.state_, fixed, moving).vectors

    def transform(self, fixed, moving) -> np.ndarray:
        """Moving image resampled onto the fixed grid by the predicted field."""
        vectors = self.predict(fixed, moving)
        moving_arr = moving.data if isinstance(moving, Volume) else check_volume_array(moving)
        return warp_array(moving_arr, vectors)

    def score(self, dataset, y=None) -> float:
        """Mean Dice of warped moving labels against fixed labels."""
        self._check_fitted()
        from .evaluation import evaluate

        report = evaluate(self.state_, dataset, timing_repeats=1)
        value = report.aggregate.get("dice_mean")
        if value is None:
            raise ValueError("dataset has no labels to score against")
        return float(value)
