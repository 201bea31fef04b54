"""Semantic-mask to radiance-field toolkit (C++ core)."""

from ._core import (
    CameraPose,
    Model,
    __version__,
    build_contour,
    build_dataset,
    distance_field,
    label_names,
    psnr,
    read_mask,
    render_homogeneous,
    squared_distance_transform,
)

__all__ = [
    "CameraPose",
    "Model",
    "__version__",
    "build_contour",
    "build_dataset",
    "distance_field",
    "label_names",
    "psnr",
    "read_mask",
    "render_homogeneous",
    "squared_distance_transform",
]
