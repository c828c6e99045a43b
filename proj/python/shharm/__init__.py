"""Python bindings for the shharm diffusion MRI harmonization library."""

from ._core import (
    Error,
    IoError,
    NumericalError,
    UsageError,
    ValidationError,
    design_matrix,
    evaluate,
    fa,
    fit_sh,
    fit_tensor,
    harmonize,
    md,
    nmse,
    real_sh,
    reconstruct,
    rish_features,
    rish_project,
    set_num_threads,
    tensor_attenuations,
    train,
    wilcoxon,
    write_phantom,
)

__all__ = [
    "Error",
    "IoError",
    "NumericalError",
    "UsageError",
    "ValidationError",
    "design_matrix",
    "evaluate",
    "fa",
    "fit_sh",
    "fit_tensor",
    "harmonize",
    "md",
    "nmse",
    "real_sh",
    "reconstruct",
    "rish_features",
    "rish_project",
    "set_num_threads",
    "tensor_attenuations",
    "train",
    "wilcoxon",
    "write_phantom",
]
