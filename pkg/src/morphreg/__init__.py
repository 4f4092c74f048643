"""Diffeomorphic image registration with appearance-change masking.

Periodic-grid geodesic shooting, masked energies that let registration
ignore regions where intensity genuinely changed, residual-based mask
estimation, a joint alternating loop, and a synthetic data + evaluation
harness.  All public containers and operations re-export here.
"""

from .errors import (
    DegenerateStatisticsError,
    GridFileError,
    GridMismatchError,
    InvalidParameterError,
    MissingLabelsError,
    MorphRegError,
    ShootingInstabilityError,
)
from .grid import (
    DeformationField,
    GridDesc,
    LandmarkSet,
    MaskImage,
    ScalarImage,
    VectorField,
    divergence,
    gradient_central,
    interp_scalar,
    interp_vector,
    jacobian,
    mask_image,
    mask_velocity,
    require_same_grid,
    zero_mask,
    zero_vector_field,
)
from .operators import FluidKernel, apply_K, apply_L, build_kernel, laplacian_symbol
from .geodesic import (
    GeodesicPath,
    ShootingConfig,
    default_kernel,
    epdiff_rhs,
    integrate_psi,
    jacobian_determinant,
    propagate_label,
    propagate_landmarks,
    shoot,
    warp,
)
from .metrics import (
    EnergyReport,
    RmiConfig,
    cross_entropy,
    dice,
    dice_loss,
    energy_metamorphic,
    loss_joint,
    reg_energy,
    reg_masked,
    rmi,
    rmi_batch,
    ssd,
)
from .optimize import (
    RegistrationConfig,
    RegistrationResult,
    fd_grad,
    grad_v0,
    register,
)
from .segment import (
    JointConfig,
    JointResult,
    MaskEstimator,
    augment,
    estimate_masks,
    joint_fit,
    union_mask,
)
from .synth import SynthSpec, TumorSpec, insert_tumor, make_image, make_pair, sample_v0
from .gridio import (
    ImagePair,
    load_grid,
    load_landmarks,
    load_pair,
    load_report,
    save_grid,
    save_landmarks,
    save_pair,
    save_report,
)
from .evaluate import build_report, evaluate_pair, landmark_l2

__version__ = "0.1.0"

__all__ = [
    "MorphRegError", "GridMismatchError", "InvalidParameterError",
    "ShootingInstabilityError", "DegenerateStatisticsError",
    "MissingLabelsError", "GridFileError",
    "GridDesc", "ScalarImage", "VectorField", "MaskImage",
    "DeformationField", "LandmarkSet",
    "gradient_central", "jacobian", "divergence", "interp_scalar",
    "interp_vector", "mask_image", "mask_velocity", "require_same_grid",
    "zero_mask", "zero_vector_field",
    "FluidKernel", "laplacian_symbol", "build_kernel", "apply_L", "apply_K",
    "ShootingConfig", "GeodesicPath", "default_kernel", "epdiff_rhs",
    "shoot", "integrate_psi", "warp", "propagate_label",
    "propagate_landmarks", "jacobian_determinant",
    "RmiConfig", "EnergyReport", "ssd", "dice", "dice_loss",
    "cross_entropy", "rmi", "rmi_batch", "reg_energy", "reg_masked",
    "energy_metamorphic", "loss_joint",
    "RegistrationConfig", "RegistrationResult", "grad_v0", "fd_grad", "register",
    "MaskEstimator", "JointConfig", "JointResult", "estimate_masks",
    "union_mask", "augment", "joint_fit",
    "SynthSpec", "TumorSpec", "make_image", "sample_v0", "make_pair",
    "insert_tumor",
    "ImagePair", "load_grid", "save_grid", "load_landmarks", "save_landmarks",
    "load_pair", "save_pair", "load_report", "save_report",
    "evaluate_pair", "landmark_l2", "build_report",
]
