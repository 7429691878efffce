"""deformreg: deformable 3D registration with jointly trained contrastive features.

A trainable convolutional feature extractor feeds a differentiable
discretized-search solver that emits dense displacement fields; training is
staged self-training on refined pseudo-labels plus an InfoNCE geometric
equivariance loss. Designed to run end-to-end on a CPU at phantom scale.
"""

from .data import (
    PhantomSpec,
    RegistrationDataset,
    build_dataset,
    generate_phantom_pair,
    make_phantom_dataset,
    read_volume,
    write_volume,
)
from .estimator import DeformableRegistration
from .evaluation import EvalReport, ablation_run, dice, evaluate, sdlogj
from .grid import (
    AffineTransform,
    DisplacementField,
    LabelMap,
    Volume,
    affine_to_field,
    apply_affine_to_volume,
    compose,
    jacobian_determinant,
    warp,
)
from .losses import LossWeights, info_nce, registration_loss, sample_locations, total_loss
from .nets import FeatureExtractor, FeatureMap, NetConfig, ProjectionHead, init_networks
from .selftrain import (
    AugmentationSpec,
    TrainConfig,
    TrainState,
    desk_scale_config,
    register,
    run_training,
)
from .solver import CostVolume, SolverConfig, build_cost_volume, instance_optimize, solve_displacement

__version__ = "0.1.0"

__all__ = [
    "AffineTransform",
    "AugmentationSpec",
    "CostVolume",
    "DeformableRegistration",
    "DisplacementField",
    "EvalReport",
    "FeatureExtractor",
    "FeatureMap",
    "LabelMap",
    "LossWeights",
    "NetConfig",
    "PhantomSpec",
    "ProjectionHead",
    "RegistrationDataset",
    "SolverConfig",
    "TrainConfig",
    "TrainState",
    "Volume",
    "ablation_run",
    "affine_to_field",
    "apply_affine_to_volume",
    "build_cost_volume",
    "build_dataset",
    "compose",
    "desk_scale_config",
    "dice",
    "evaluate",
    "generate_phantom_pair",
    "info_nce",
    "init_networks",
    "instance_optimize",
    "jacobian_determinant",
    "make_phantom_dataset",
    "read_volume",
    "register",
    "registration_loss",
    "run_training",
    "sample_locations",
    "sdlogj",
    "solve_displacement",
    "total_loss",
    "warp",
    "write_volume",
]
