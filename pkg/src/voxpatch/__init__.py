"""Voxel shape completion by retrieving, rigidly deforming and smoothly
blending detail patches copied from the partial input itself."""

__version__ = "0.1.0"

from .voxelgrid import (  # noqa: F401
    GridFormatError,
    Patch,
    PointSet,
    Subvolume,
    VoxelGrid,
    downsample,
    export_obj,
    read_grid,
    sample_patches,
    surface_points,
    to_point_set,
    upsample_nearest,
    voxelize_points,
    write_grid,
)
from .registration import (  # noqa: F401
    AlignmentResult,
    RigidTransform,
    apply_transform,
    geometric_distance,
    icp_align,
    resample_patch,
)
