"""Procedural voxel shapes for benchmarks and tests.

Generators produce furniture-like shapes with repeated substructure
(legs, slats, rings) so that detail patches cropped from one region have
plausible matches elsewhere in the same shape.
"""

from __future__ import annotations

import numpy as np

from .voxelgrid import VoxelGrid


def _box(occ, lo, hi):
    occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True


def chair(size: int, seed: int = 0) -> VoxelGrid:
    rng = np.random.default_rng(seed)
    occ = np.zeros((size,) * 3, dtype=bool)
    s = size
    leg = max(1, s // 16 + rng.integers(0, 2))
    seat_z = s // 2 + rng.integers(-s // 8, s // 8)
    m = s // 8
    for x0 in (m, s - m - leg):
        for y0 in (m, s - m - leg):
            _box(occ, (x0, y0, m // 2), (x0 + leg, y0 + leg, seat_z))
    _box(occ, (m, m, seat_z), (s - m, s - m, seat_z + max(1, s // 16)))
    back_h = min(s - 1, seat_z + s // 3)
    _box(occ, (m, m, seat_z), (m + leg, s - m, back_h))
    for z in range(seat_z + 2, back_h, max(2, s // 10)):
        _box(occ, (m, m, z), (m + leg, s - m, z + 1))
    return VoxelGrid(occ)


def table(size: int, seed: int = 0) -> VoxelGrid:
    rng = np.random.default_rng(seed)
    occ = np.zeros((size,) * 3, dtype=bool)
    s = size
    leg = max(1, s // 14)
    top_z = s // 2 + rng.integers(0, s // 4)
    m = s // 8 + rng.integers(0, s // 12)
    for x0 in (m, s - m - leg):
        for y0 in (m, s - m - leg):
            _box(occ, (x0, y0, m // 2), (x0 + leg, y0 + leg, top_z))
    _box(occ, (m - 1, m - 1, top_z), (s - m + 1, s - m + 1, top_z + max(1, s // 16)))
    return VoxelGrid(occ)


def ladder(size: int, seed: int = 0) -> VoxelGrid:
    rng = np.random.default_rng(seed)
    occ = np.zeros((size,) * 3, dtype=bool)
    s = size
    rail = max(1, s // 14)
    m = s // 6
    _box(occ, (m, m, m // 2), (m + rail, m + rail, s - m))
    _box(occ, (s - m - rail, m, m // 2), (s - m, m + rail, s - m))
    step = max(2, s // (4 + int(rng.integers(0, 3))))
    for z in range(m, s - m, step):
        _box(occ, (m, m, z), (s - m, m + rail, z + max(1, rail)))
    return VoxelGrid(occ)


def shelf(size: int, seed: int = 0) -> VoxelGrid:
    rng = np.random.default_rng(seed)
    occ = np.zeros((size,) * 3, dtype=bool)
    s = size
    t = max(1, s // 16)
    m = s // 8
    _box(occ, (m, m, m), (m + t, s - m, s - m))
    _box(occ, (s - m - t, m, m), (s - m, s - m, s - m))
    n_boards = 2 + int(rng.integers(0, 3))
    for i in range(n_boards + 1):
        z = m + i * (s - 2 * m - t) // n_boards
        _box(occ, (m, m, z), (s - m, s - m, z + t))
    return VoxelGrid(occ)


def tube_frame(size: int, seed: int = 0) -> VoxelGrid:
    rng = np.random.default_rng(seed)
    occ = np.zeros((size,) * 3, dtype=bool)
    s = size
    t = max(1, s // 14)
    m = s // 6 + int(rng.integers(0, s // 12))
    lo, hi = m, s - m
    for a in (lo, hi - t):
        for b in (lo, hi - t):
            _box(occ, (a, b, lo), (a + t, b + t, hi))
            _box(occ, (a, lo, b), (a + t, hi, b + t))
            _box(occ, (lo, a, b), (hi, a + t, b + t))
    return VoxelGrid(occ)


GENERATORS = [chair, table, ladder, shelf, tube_frame]


def random_shape(size: int, seed: int) -> VoxelGrid:
    """A seeded procedural shape; the template is picked from the seed."""
    rng = np.random.default_rng(seed)
    gen = GENERATORS[int(rng.integers(0, len(GENERATORS)))]
    return gen(size, seed=seed + 1000)


def shape_suite(size: int, count: int, seed: int = 0) -> list:
    """(shape_id, VoxelGrid) pairs cycling through the generator templates."""
    out = []
    for i in range(count):
        gen = GENERATORS[i % len(GENERATORS)]
        out.append((f"{gen.__name__}_{i:03d}", gen(size, seed=seed + i)))
    return out
