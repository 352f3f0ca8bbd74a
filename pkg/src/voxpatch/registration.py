"""Rigid alignment of voxel patches: transforms with optional reflection,
SVD-based ICP, and the pose-invariant geometric distance between patches.

The distance between two patches is the minimum over rigid motions (with an
optional mirror) of a symmetric nearest-neighbor L1 residual, normalized by
the L1 mass of the two point sets about their patch centers. It is computed
by ICP restarted from a bank of axis-aligned initializations, refined
best-first with early exit on an exact match.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .voxelgrid import Patch, as_points, to_point_set

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    """x -> R @ mirror_f(x) + t, where mirror_f negates x[0] when reflect is set."""

    rotation: np.ndarray
    translation: np.ndarray
    reflect: bool = False

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must be proper (det +1); use reflect for mirrors")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity(reflect: bool = False) -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3), reflect)

    def apply(self, points) -> np.ndarray:
        pts = as_points(points).copy()
        if self.reflect:
            pts[:, 0] *= -1.0
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix (mirror folded into the linear part)."""
        M = np.eye(4)
        lin = self.rotation.copy()
        if self.reflect:
            lin[:, 0] *= -1.0
        M[:3, :3] = lin
        M[:3, 3] = self.translation
        return M


@dataclass(frozen=True)
class AlignmentResult:
    transform: RigidTransform
    distance: float
    iterations: int
    converged: bool


def apply_transform(points, transform: RigidTransform) -> np.ndarray:
    return transform.apply(points)


def _rotations_24() -> list:
    rots = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            R = np.zeros((3, 3))
            for row, (col, s) in enumerate(zip(perm, signs)):
                R[row, col] = s
            if np.linalg.det(R) > 0:
                rots.append(R)
    return rots


ROTATIONS_24 = _rotations_24()
_ROT_STACK = np.stack(ROTATIONS_24)


def _nearest_idx(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Index into dst of each src point's nearest neighbor; ties -> lowest index."""
    d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _chamfer_l1(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric sum of L1 distances to the nearest neighbor in the other set."""
    diff = a[:, None, :] - b[None, :, :]
    d1 = np.abs(diff).sum(axis=2)
    return float(d1.min(axis=1).sum() + d1.min(axis=0).sum())


def _normalized_distance(transformed_src: np.ndarray, target: np.ndarray) -> float:
    num = _chamfer_l1(transformed_src, target)
    den = float(np.abs(transformed_src).sum() + np.abs(target).sum())
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


def _kabsch(src: np.ndarray, dst: np.ndarray):
    """Least-squares proper rotation + translation mapping src onto dst."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    t = cd - R @ cs
    return R, t


def icp_align(source, target, init: RigidTransform,
              max_iters: int = 50, tol: float = 1e-6) -> AlignmentResult:
    """Alternate nearest-neighbor correspondence with closed-form rigid fit.

    The reflection flag is fixed by `init` and never changed. Stops when the
    RMS change of correspondence points drops below tol.
    """
    src = as_points(source)
    dst = as_points(target)
    if src.shape[0] == 0 or dst.shape[0] == 0:
        raise ValueError("icp_align requires non-empty point sets")
    src0 = src.copy()
    if init.reflect:
        src0[:, 0] *= -1.0
    R = init.rotation
    t = init.translation
    prev_corr = None
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        cur = src0 @ R.T + t
        corr = dst[_nearest_idx(cur, dst)]
        R, t = _kabsch(src0, corr)
        fit_rms = float(np.sqrt(((src0 @ R.T + t - corr) ** 2).sum(axis=1).mean()))
        if fit_rms < tol:
            converged = True
            break
        if prev_corr is not None:
            rms = float(np.sqrt(((corr - prev_corr) ** 2).sum(axis=1).mean()))
            if rms < tol:
                converged = True
                break
        prev_corr = corr
    transform = RigidTransform(R, t, init.reflect)
    dist = _normalized_distance(src0 @ R.T + t, dst)
    return AlignmentResult(transform, dist, iters, converged)


def _init_bank(src: np.ndarray, dst: np.ndarray, mode: str):
    """Candidate (R, t, reflect, start-cost) tuples, centroid-aligned per rotation."""
    rots = ROTATIONS_24 if mode == "full" else [np.eye(3)]
    rot_stack = _ROT_STACK if mode == "full" else np.eye(3)[None]
    cd = dst.mean(axis=0)
    mirrored = src.copy()
    mirrored[:, 0] *= -1.0
    both = np.stack([src, mirrored])  # (2, n, 3)
    # (2, k, n, 3) -> flattened to (2k, n, 3), plain sources first
    stack = np.einsum("kij,snj->skni", rot_stack, both).reshape(
        2 * len(rots), -1, 3)
    trans = cd - stack.mean(axis=1)
    moved = stack + trans[:, None, :]
    d1 = np.abs(moved[:, :, None, :] - dst[None, None, :, :]).sum(axis=3)
    num = d1.min(axis=2).sum(axis=1) + d1.min(axis=1).sum(axis=1)
    den = np.abs(moved).sum(axis=(1, 2)) + np.abs(dst).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        cost = np.where(den > 0, num / np.where(den > 0, den, 1.0),
                        np.where(num == 0, 0.0, np.inf))
    out = []
    k = len(rots)
    for i in range(stack.shape[0]):
        reflect = i >= k
        out.append((rots[i % k], trans[i], reflect, float(cost[i])))
    return out


def geometric_distance(p1: Patch, p2: Patch, init_mode: str = "full",
                       max_refines: int = 8, max_iters: int = 50,
                       tol: float = 1e-6) -> AlignmentResult:
    """Pose-invariant distance: best ICP result over the initialization bank.

    init_mode "full" seeds all 24 axis-aligned rotations x optional mirror;
    "paper" seeds only the two center-aligning starts (with/without mirror).
    Initializations are refined best-first; at most max_refines full ICP runs,
    with early exit once an exact match is found.
    """
    if p1.occupied_count == 0 or p2.occupied_count == 0:
        raise ValueError("geometric_distance requires non-empty patches")
    if (p1.extent == p2.extent
            and np.array_equal(np.asarray(p1.data, dtype=bool),
                               np.asarray(p2.data, dtype=bool))):
        return AlignmentResult(RigidTransform.identity(), 0.0, 0, True)
    src = as_points(to_point_set(p1))
    dst = as_points(to_point_set(p2))
    bank = _init_bank(src, dst, init_mode)
    bank.sort(key=lambda item: item[3])
    best = None
    for R0, t0, reflect, cost in bank[:max(1, max_refines)]:
        init = RigidTransform(R0, t0, reflect)
        res = icp_align(src, dst, init, max_iters=max_iters, tol=tol)
        if cost < res.distance:
            # refinement moved off an already-better start; keep the start
            res = AlignmentResult(init, cost, 0, True)
        if best is None or res.distance < best.distance:
            best = res
        if best.distance == 0.0:
            break
    return best


def resample_patch(source: Patch, transform: RigidTransform,
                   target_extent: int) -> Patch:
    """Rasterize the transformed source into a target_extent^3 window.

    Source voxel centers are taken relative to the source patch center,
    transformed, shifted to the target window frame, and rounded to the
    nearest lattice cell; cells landing outside the window are dropped.
    """
    idx = np.argwhere(source.data)
    out = np.zeros((target_extent,) * 3, dtype=bool)
    if idx.size == 0:
        return Patch((0, 0, 0), out)
    pts = idx.astype(float) + 0.5 - source.extent / 2.0
    moved = transform.apply(pts) + target_extent / 2.0
    cells = np.floor(moved).astype(int)
    keep = np.all((cells >= 0) & (cells < target_extent), axis=1)
    cells = cells[keep]
    out[cells[:, 0], cells[:, 1], cells[:, 2]] = True
    return Patch((0, 0, 0), out)
