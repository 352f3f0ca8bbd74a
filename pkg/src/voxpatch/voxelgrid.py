"""Dense cubic occupancy grids, patch sampling, resampling and file I/O.

Grids are numpy arrays indexed ``[x, y, z]``; the flat (file) order is
x-major, then y, then z, which is numpy C order for that axis layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

PVOX_MAGIC = b"PVOX1\x00\x00\x00"


class GridFormatError(ValueError):
    """Raised for malformed grid files; message carries the byte offset."""


@dataclass(frozen=True)
class VoxelGrid:
    """Cubic occupancy grid. Binary grids are bool, blended outputs float in [0,1]."""

    data: np.ndarray
    voxel_pitch: float = 1.0

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or len(set(d.shape)) != 1:
            raise ValueError(f"grid must be cubic, got shape {d.shape}")
        if d.shape[0] < 1:
            raise ValueError("grid size must be >= 1")

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def is_binary(self) -> bool:
        return self.data.dtype == bool

    @property
    def occupied_count(self) -> int:
        if self.is_binary:
            return int(self.data.sum())
        return int((self.data >= 0.5).sum())

    def binarize(self, threshold: float = 0.5) -> "VoxelGrid":
        if self.is_binary:
            return self
        return VoxelGrid(self.data >= threshold, self.voxel_pitch)

    @staticmethod
    def empty(size: int) -> "VoxelGrid":
        return VoxelGrid(np.zeros((size, size, size), dtype=bool))


@dataclass(frozen=True)
class Patch:
    """An extent^3 occupancy block cut from a parent grid at lattice corner `corner`."""

    corner: tuple
    data: np.ndarray

    @property
    def extent(self) -> int:
        return self.data.shape[0]

    @property
    def occupied_count(self) -> int:
        return int(self.data.sum())


# A subvolume is structurally a large patch; the alias keeps call sites readable.
Subvolume = Patch


@dataclass(frozen=True)
class PointSet:
    """Occupied-voxel centers relative to a stated origin."""

    points: np.ndarray
    origin_mode: str = "patch_center"


def as_points(x) -> np.ndarray:
    """Accept a PointSet or a raw (n, 3) array."""
    pts = getattr(x, "points", x)
    return np.asarray(pts, dtype=float).reshape(-1, 3)


def sample_patches(grid: VoxelGrid, extent: int, stride: int,
                   keep_empty: bool = False) -> list:
    """All extent^3 windows at the stride lattice, ordered by x, y, z of corner."""
    if extent < 1 or extent > grid.size:
        raise ValueError(f"extent {extent} outside [1, {grid.size}]")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    occ = grid.data
    n = (grid.size - extent) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(occ, (extent, extent, extent))
    windows = windows[::stride, ::stride, ::stride]
    counts = windows.reshape(n, n, n, -1).sum(axis=-1)
    patches = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if not keep_empty and counts[i, j, k] == 0:
                    continue
                corner = (i * stride, j * stride, k * stride)
                patches.append(Patch(corner, np.array(windows[i, j, k])))
    return patches


def extract_patch(grid: VoxelGrid, corner, extent: int) -> Patch:
    x, y, z = corner
    if min(x, y, z) < 0 or max(x, y, z) + extent > grid.size:
        raise ValueError(f"window {corner}+{extent} outside grid of size {grid.size}")
    return Patch((x, y, z), np.array(grid.data[x:x + extent, y:y + extent, z:z + extent]))


def downsample(grid: VoxelGrid, factor: int) -> VoxelGrid:
    """Max-pool by factor: a coarse voxel is occupied iff any voxel in its block is."""
    if factor < 1 or grid.size % factor != 0:
        raise ValueError(f"factor {factor} does not divide grid size {grid.size}")
    n = grid.size // factor
    occ = grid.binarize().data
    blocks = occ.reshape(n, factor, n, factor, n, factor)
    return VoxelGrid(blocks.any(axis=(1, 3, 5)), grid.voxel_pitch * factor)


def upsample_nearest(grid: VoxelGrid, factor: int) -> VoxelGrid:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    d = grid.data
    for axis in range(3):
        d = np.repeat(d, factor, axis=axis)
    return VoxelGrid(d, grid.voxel_pitch / factor)


def to_point_set(patch: Patch, origin_mode: str = "patch_center") -> PointSet:
    """One point per occupied voxel at its center (i+0.5), offset by the origin."""
    idx = np.argwhere(patch.data)
    pts = idx.astype(float) + 0.5
    if origin_mode == "patch_center":
        pts -= patch.extent / 2.0
    elif origin_mode == "grid_corner":
        pts += np.asarray(patch.corner, dtype=float)
    else:
        raise ValueError(f"unknown origin_mode {origin_mode!r}")
    return PointSet(pts, origin_mode)


def voxelize_points(points, size: int) -> VoxelGrid:
    """Scale the point bounding box uniformly into the grid with a 2-voxel margin."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("cannot voxelize an empty point list")
    margin = 2
    lo = pts.min(axis=0)
    span = float((pts.max(axis=0) - lo).max())
    scale = (size - 2 * margin) / span if span > 0 else 1.0
    idx = np.floor((pts - lo) * scale).astype(int) + margin
    idx = np.clip(idx, 0, size - 1)
    occ = np.zeros((size, size, size), dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return VoxelGrid(occ)


_FACE_DIRS = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)]


def _exposed_faces(occ: np.ndarray):
    """(n_faces, 5) array of voxel index + axis + direction for every exposed face."""
    rows = []
    for axis, sign in _FACE_DIRS:
        neighbor = np.zeros_like(occ)
        sl_src = [slice(None)] * 3
        sl_dst = [slice(None)] * 3
        if sign > 0:
            sl_src[axis] = slice(1, None)
            sl_dst[axis] = slice(0, -1)
        else:
            sl_src[axis] = slice(0, -1)
            sl_dst[axis] = slice(1, None)
        neighbor[tuple(sl_dst)] = occ[tuple(sl_src)]
        exposed = occ & ~neighbor
        idx = np.argwhere(exposed)
        if idx.size:
            extra = np.full((idx.shape[0], 2), (axis, sign))
            rows.append(np.hstack([idx, extra]))
    if not rows:
        return np.zeros((0, 5), dtype=int)
    return np.vstack(rows)


def surface_points(grid: VoxelGrid, n: int, seed: int) -> np.ndarray:
    """n points sampled uniformly over exposed voxel faces, deterministic in seed."""
    occ = grid.binarize().data
    faces = _exposed_faces(occ)
    if faces.shape[0] == 0:
        raise ValueError("grid has no occupied voxels")
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, faces.shape[0], size=n)
    chosen = faces[pick]
    centers = chosen[:, :3].astype(float) + 0.5
    axis = chosen[:, 3]
    sign = chosen[:, 4]
    pts = centers.copy()
    pts[np.arange(n), axis] += 0.5 * sign
    offs = rng.uniform(-0.5, 0.5, size=(n, 2))
    tangents = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    pts[np.arange(n), tangents[:, 0]] += offs[:, 0]
    pts[np.arange(n), tangents[:, 1]] += offs[:, 1]
    return pts


# Corner offsets of the quad for each (axis, sign) face, wound CCW seen from outside.
_FACE_QUADS = {
    (0, 1): [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)],
    (0, -1): [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)],
    (1, 1): [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)],
    (1, -1): [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)],
    (2, 1): [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
    (2, -1): [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)],
}


def export_obj(grid: VoxelGrid, threshold: float, path) -> None:
    """Write exposed faces of voxels with occupancy >= threshold as an OBJ mesh."""
    occ = grid.data >= threshold if not grid.is_binary else grid.data
    faces = _exposed_faces(np.ascontiguousarray(occ))
    verts: dict = {}
    tris = []
    for x, y, z, axis, sign in faces:
        quad = []
        for ox, oy, oz in _FACE_QUADS[(axis, sign)]:
            key = (x + ox, y + oy, z + oz)
            if key not in verts:
                verts[key] = len(verts) + 1
            quad.append(verts[key])
        tris.append((quad[0], quad[1], quad[2]))
        tris.append((quad[0], quad[2], quad[3]))
    with open(path, "w") as fh:
        fh.write(f"# voxpatch grid size {grid.size}\n")
        for (vx, vy, vz) in verts:
            fh.write(f"v {vx} {vy} {vz}\n")
        for a, b, c in tris:
            fh.write(f"f {a} {b} {c}\n")


def _rle_encode(flat: np.ndarray) -> np.ndarray:
    """Alternating run lengths, starting with an empty run (possibly zero-length)."""
    if flat.size == 0:
        return np.zeros(0, dtype="<u4")
    change = np.flatnonzero(np.diff(flat.view(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).astype("<u4")
    if flat[0]:
        runs = np.concatenate([np.zeros(1, dtype="<u4"), runs])
    return runs


def write_grid(grid: VoxelGrid, path) -> None:
    flat = grid.data.reshape(-1, order="C")
    flags = 0 if grid.is_binary else 1
    with open(path, "wb") as fh:
        fh.write(PVOX_MAGIC)
        fh.write(struct.pack("<II", grid.size, flags))
        if grid.is_binary:
            fh.write(_rle_encode(flat).tobytes())
        else:
            fh.write(flat.astype("<f4").tobytes())


def _read_text_grid(path) -> VoxelGrid:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise GridFormatError(f"{path}: empty text grid")
    try:
        size = int(lines[0])
    except ValueError:
        raise GridFormatError(f"{path}: first line must be the grid size") from None
    occ = np.zeros((size, size, size), dtype=bool)
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != 3:
            raise GridFormatError(f"{path}:{lineno}: expected 'x y z'")
        x, y, z = (int(p) for p in parts)
        if not (0 <= x < size and 0 <= y < size and 0 <= z < size):
            raise GridFormatError(f"{path}:{lineno}: voxel ({x},{y},{z}) outside grid")
        occ[x, y, z] = True
    return VoxelGrid(occ)


def read_grid(path) -> VoxelGrid:
    if str(path).endswith(".txt"):
        return _read_text_grid(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise GridFormatError(f"{path}: truncated header at byte {len(blob)}")
    if blob[:8] != PVOX_MAGIC:
        raise GridFormatError(f"{path}: bad magic at byte 0")
    size, flags = struct.unpack_from("<II", blob, 8)
    payload = blob[16:]
    n = size ** 3
    if flags & 1:
        if len(payload) != 4 * n:
            raise GridFormatError(
                f"{path}: scalar payload at byte 16 has {len(payload)} bytes, "
                f"expected {4 * n}")
        data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        return VoxelGrid(data.reshape(size, size, size))
    if len(payload) % 4 != 0:
        raise GridFormatError(
            f"{path}: RLE payload truncated at byte {16 + len(payload)}")
    runs = np.frombuffer(payload, dtype="<u4").astype(np.int64)
    if runs.sum() != n:
        raise GridFormatError(
            f"{path}: RLE runs at byte 16 decode to {runs.sum()} voxels, expected {n}")
    flat = np.zeros(n, dtype=bool)
    pos = 0
    val = False
    for r in runs:
        if val:
            flat[pos:pos + r] = True
        pos += r
        val = not val
    return VoxelGrid(flat.reshape(size, size, size))
