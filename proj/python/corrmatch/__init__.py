"""Point cloud registration driven by a correspondence matrix.

Point clouds are numpy arrays of shape (3, N). Transforms come back as dicts
with "rotation" (3x3) and "translation" (3,).
"""

from ._core import (
    ConfigError,
    IoError,
    NumericalError,
    __version__,
    apply_transform,
    chamfer_distance,
    correspondence_accuracy,
    crop_partial,
    cross_entropy_grad,
    cross_entropy_loss,
    euler_zyx,
    featurize,
    generate_shape,
    ground_truth_correspondence,
    horn_align,
    icp,
    load_xyz,
    matrix_to_rotvec,
    point_descriptors,
    register_clouds,
    rotation_error,
    rotvec_to_matrix,
    run_study,
    sample_misalignment,
    save_xyz,
    sinkhorn_normalize,
    soft_correspondence,
    train,
    weighted_align,
)

__all__ = [name for name in dir() if not name.startswith("_")]
