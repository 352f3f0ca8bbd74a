"""Coarse complete-shape providers: ground-truth downsampling, a
morphological heuristic with optional symmetry fill, and external files."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .voxelgrid import VoxelGrid, downsample, read_grid

COARSE_FACTOR = 4


def coarse_from_gt(S_gt: VoxelGrid) -> VoxelGrid:
    """Evaluation-mode coarse shape: the ground truth downsampled 4x."""
    return downsample(S_gt, COARSE_FACTOR)


def _best_mirror_axis(occ: np.ndarray):
    """Axis whose center mirror plane maximizes overlap; ties go to x, y, z."""
    best_axis, best_overlap = None, -1
    for axis in range(3):
        mirrored = np.flip(occ, axis=axis)
        overlap = int((occ & mirrored).sum())
        if overlap > best_overlap:
            best_axis, best_overlap = axis, overlap
    return best_axis


def coarse_heuristic(S: VoxelGrid, closing_radius: int = 1,
                     symmetry: bool = True) -> VoxelGrid:
    """Non-learned coarse completion: downsample, close gaps, mirror-fill."""
    if closing_radius < 0:
        raise ValueError("closing_radius must be >= 0")
    coarse = downsample(S, COARSE_FACTOR)
    occ = coarse.data
    if closing_radius > 0 and occ.any():
        k = 2 * closing_radius + 1
        structure = np.ones((k, k, k), dtype=bool)
        pad = closing_radius
        padded = np.pad(occ, pad)
        closed = ndimage.binary_closing(padded, structure=structure)
        occ = occ | closed[pad:-pad, pad:-pad, pad:-pad]
    if symmetry and occ.any():
        axis = _best_mirror_axis(occ)
        occ = occ | np.flip(occ, axis=axis)
    return VoxelGrid(occ, coarse.voxel_pitch)


def load_external_coarse(path, s_shape: int = 128) -> VoxelGrid:
    """Coarse shape predicted elsewhere; must already be at s_shape/4."""
    grid = read_grid(path)
    expected = s_shape // COARSE_FACTOR
    if grid.size != expected:
        raise ValueError(
            f"external coarse grid is {grid.size}^3, expected {expected}^3")
    return grid.binarize()
