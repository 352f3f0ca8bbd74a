"""Deformation-and-blending of retrieved patches over subvolumes.

Each subvolume blends up to M transformed candidate patches with
block-constant nonnegative weights (partition of unity): the value at a
voxel is the weight-normalized sum of the candidate values there. Weights
and per-slot rigid transforms are optimized directly against a
reconstruction loss plus a weighted smoothness loss that penalizes
disagreeing candidates on blend-block boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .registration import RigidTransform, icp_align, resample_patch
from .voxelgrid import VoxelGrid


class OptimizationError(RuntimeError):
    pass


@dataclass
class BlendParams:
    M: int = 400
    alpha: float = 10.0
    s_blend: int = 8
    opt_iters: int = 100
    restarts: int = 3
    lr: float = 0.05
    no_deform: bool = False
    no_blend: bool = False
    no_smooth: bool = False

    def effective_alpha(self) -> float:
        return 0.0 if self.no_smooth else self.alpha


@dataclass
class CandidateSlot:
    patch_id: int
    placement: tuple  # corner of the patch window inside the subvolume
    transform: RigidTransform
    weight_blocks: np.ndarray  # (nb, nb, nb) nonnegative, block-constant weights


@dataclass
class BlendState:
    subvolume_corner: tuple
    slots: list
    alpha: float
    losses: tuple = (np.nan, np.nan, np.nan)  # (L_rec, L_sm, L)


def subvolume_corners(size: int, s_subv: int, stride: int) -> list:
    """Stride lattice covering the domain; the last corner is clamped inside."""
    if s_subv > size:
        raise ValueError(f"subvolume {s_subv} larger than grid {size}")
    per_axis = list(range(0, size - s_subv + 1, stride))
    if per_axis[-1] != size - s_subv:
        per_axis.append(size - s_subv)
    return [(x, y, z) for x in per_axis for y in per_axis for z in per_axis]


def select_candidates(retrievals, V_corner, params: BlendParams,
                      s_subv: int, extent: int, codebook=None,
                      target=None) -> list:
    """Slots for one subvolume: candidates whose window fits inside it,
    sorted by (retrieval rank, x, y, z of location), first M kept.

    With `codebook` and `target` given, candidates whose placed occupancy
    contradicts the target more than it matches it are skipped: blending is
    a convex combination per voxel, so a location where every candidate is
    wrong cannot be repaired by the weights."""
    nb = s_subv // params.s_blend
    gathered = []
    for rs in retrievals:
        loc = rs.location
        rel = tuple(loc[i] - V_corner[i] for i in range(3))
        if any(r < 0 or r + extent > s_subv for r in rel):
            continue
        cands = rs.candidates[:1] if params.no_blend else rs.candidates
        for rank, (pid, hint, _score) in enumerate(cands):
            gathered.append((rank, loc, pid, hint, rel))
    gathered.sort(key=lambda g: (g[0], g[1]))
    tgt = None
    if target is not None and codebook is not None:
        tgt = np.asarray(getattr(target, "data", target),
                         dtype=float).reshape((s_subv,) * 3)
    slots = []
    for rank, loc, pid, hint, rel in gathered:
        if len(slots) == params.M:
            break
        if tgt is not None:
            placed = resample_patch(codebook[pid], hint,
                                    codebook[pid].extent).data
            x, y, z = rel
            win = tgt[x:x + extent, y:y + extent, z:z + extent] >= 0.5
            agree = int((placed & win).sum())
            wrong = int((placed & ~win).sum())
            if wrong > agree:
                continue
        slots.append(CandidateSlot(pid, rel, hint, np.ones((nb, nb, nb))))
    return slots


def _placed_values(slot: CandidateSlot, codebook, s_subv: int) -> np.ndarray:
    """Transformed patch rasterized into its window, zero elsewhere."""
    patch = codebook[slot.patch_id]
    moved = resample_patch(patch, slot.transform, patch.extent)
    out = np.zeros((s_subv,) * 3)
    x, y, z = slot.placement
    e = patch.extent
    out[x:x + e, y:y + e, z:z + e] = moved.data
    return out


def _window_mask(slot, extent, s_subv):
    m = np.zeros((s_subv,) * 3, dtype=bool)
    x, y, z = slot.placement
    m[x:x + extent, y:y + extent, z:z + extent] = True
    return m


def _expand_blocks(blocks: np.ndarray, s_blend: int) -> np.ndarray:
    out = blocks
    for axis in range(3):
        out = np.repeat(out, s_blend, axis=axis)
    return out


def _boundary_mask(s_subv: int, s_blend: int) -> np.ndarray:
    """Voxels on interior faces between s_blend blocks."""
    coords = np.arange(s_subv)
    lo = (coords % s_blend == 0) & (coords > 0)
    hi = (coords % s_blend == s_blend - 1) & (coords < s_subv - 1)
    line = lo | hi
    mask = np.zeros((s_subv,) * 3, dtype=bool)
    mask |= line[:, None, None]
    mask |= line[None, :, None]
    mask |= line[None, None, :]
    return mask


def _stack_slots(state: BlendState, codebook, s_subv: int):
    """(P, mask, weights) stacks over the slots, flattened to (M, s^3)."""
    if not state.slots:
        z = np.zeros((0, s_subv ** 3))
        return z, z.astype(bool), z
    extent = codebook[state.slots[0].patch_id].extent
    s_blend = s_subv // state.slots[0].weight_blocks.shape[0]
    P, mask, W = [], [], []
    for slot in state.slots:
        P.append(_placed_values(slot, codebook, s_subv).ravel())
        mask.append(_window_mask(slot, extent, s_subv).ravel())
        W.append(_expand_blocks(slot.weight_blocks, s_blend).ravel())
    P = np.stack(P)
    mask = np.stack(mask)
    W = np.stack(W) * mask
    return P, mask, W


def blend_eval(state: BlendState, codebook, fallback=None,
               s_subv: int | None = None) -> VoxelGrid:
    """Eq-of-blending: weight-normalized sum of placed candidates; voxels no
    candidate covers take the fallback value (0 if none given)."""
    if fallback is not None:
        s_subv = np.asarray(getattr(fallback, "data", fallback)).shape[0]
    elif s_subv is None:
        raise ValueError("need fallback or s_subv to size the subvolume")
    P, _mask, W = _stack_slots(state, codebook, s_subv)
    xi = W.sum(axis=0)
    num = (W * P).sum(axis=0)
    fall = (np.zeros(s_subv ** 3) if fallback is None
            else np.asarray(getattr(fallback, "data", fallback),
                            dtype=float).ravel())
    out = np.where(xi > 0, num / np.where(xi > 0, xi, 1.0), fall)
    return VoxelGrid(out.reshape((s_subv,) * 3))


def loss_rec(V, V_gt) -> float:
    """Root of the summed squared voxel differences over the subvolume."""
    a = np.asarray(getattr(V, "data", V), dtype=float)
    b = np.asarray(getattr(V_gt, "data", V_gt), dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(((b - a) ** 2).sum()))


def loss_smooth(state: BlendState, codebook, s_subv: int, s_blend: int) -> float:
    """Weighted disagreement of candidate pairs on blend-block boundaries."""
    P, _mask, W = _stack_slots(state, codebook, s_subv)
    if P.shape[0] < 2:
        return 0.0
    bmask = _boundary_mask(s_subv, s_blend).ravel()
    return _smooth_from_stacks(P[:, bmask], W[:, bmask])


def _smooth_from_stacks(Pb: np.ndarray, Wb: np.ndarray) -> float:
    return 0.5 * float(np.einsum("mb,mb->", Wb, _pair_disagreement(Pb, Wb)))


def _pair_disagreement(Pb: np.ndarray, Wb: np.ndarray,
                       binary: bool | None = None) -> np.ndarray:
    """S1[m, b] = sum_n W_n[b] |P_m[b] - P_n[b]|.

    For binary candidate values |P_m - P_n| = P_m + P_n - 2 P_m P_n, which
    avoids materializing the M x M x B pairwise tensor."""
    if binary is None:
        binary = bool(np.isin(Pb, (0.0, 1.0)).all())
    if binary:
        s_w = Wb.sum(axis=0)
        s_wp = (Wb * Pb).sum(axis=0)
        return Pb * (s_w - 2.0 * s_wp) + s_wp
    D = np.abs(Pb[:, None, :] - Pb[None, :, :])
    return np.einsum("nb,mnb->mb", Wb, D)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    return float(np.log(np.expm1(y)))


def _losses_and_grad(theta, P, mask, target, alpha, bmask, s_blend, nb,
                     binary=None, conf=None):
    """L_rec, L_sm, L and dL/dtheta for block-weight parameters theta (M,nb,nb,nb).

    `conf` optionally weights per-voxel reconstruction residuals
    (L_rec = ||conf * (V - target)||_2); None means all-ones."""
    M = P.shape[0]
    W = _softplus(theta)
    for axis in (1, 2, 3):
        W = np.repeat(W, s_blend, axis=axis)
    W = W.reshape(M, -1) * mask
    xi = W.sum(axis=0)
    covered = xi > 0
    xi_safe = np.where(covered, xi, 1.0)
    num = (W * P).sum(axis=0)
    V = np.where(covered, num / xi_safe, target)
    resid = V - target
    if conf is not None:
        resid = resid * conf
    l_rec = float(np.sqrt((resid ** 2).sum()))
    # dL_rec/dW_m[x] = conf*resid/l_rec * (P_m - V)/xi on covered voxels
    gV = resid / l_rec if l_rec > 0 else np.zeros_like(resid)
    if conf is not None:
        gV = gV * conf
    gW = np.where(covered, gV / xi_safe, 0.0)[None, :] * (P - V[None, :]) * mask
    l_sm = 0.0
    if alpha != 0.0 and M >= 2:
        Pb = P[:, bmask]
        Wb = W[:, bmask]
        S1 = _pair_disagreement(Pb, Wb, binary)
        l_sm = 0.5 * float(np.einsum("mb,mb->", Wb, S1))
        gsm = np.zeros_like(gW)
        gsm[:, bmask] = S1 * mask[:, bmask]
        gW = gW + alpha * gsm
    total = l_rec + alpha * l_sm
    # chain to block parameters: sum voxel grads per block, times sigmoid(theta)
    g_theta = np.empty_like(theta)
    s_subv = nb * s_blend
    gW_vol = gW.reshape(M, s_subv, s_subv, s_subv)
    pooled = gW_vol.reshape(M, nb, s_blend, nb, s_blend, nb, s_blend).sum(
        axis=(2, 4, 6))
    sig = 1.0 / (1.0 + np.exp(-theta))
    g_theta[:] = pooled * sig
    return l_rec, l_sm, total, g_theta


def _refine_transforms(state, codebook, target, s_subv, icp_iters=20,
                       conf=None):
    """Per-slot ICP against the occupied target voxels inside each window;
    keep a refined transform only if it improves that window's agreement.
    Voxels at confidence 0 are excluded from both the ICP target and the
    acceptance comparison."""
    tgt = np.asarray(target, dtype=float).reshape((s_subv,) * 3)
    cf = (np.ones_like(tgt) if conf is None
          else np.asarray(conf, dtype=float).reshape((s_subv,) * 3))
    new_slots = []
    for slot in state.slots:
        patch = codebook[slot.patch_id]
        e = patch.extent
        x, y, z = slot.placement
        window = tgt[x:x + e, y:y + e, z:z + e]
        cw = cf[x:x + e, y:y + e, z:z + e]
        occ_idx = np.argwhere((window >= 0.5) & (cw > 0))
        src_idx = np.argwhere(patch.data)
        if occ_idx.shape[0] == 0 or src_idx.shape[0] == 0:
            new_slots.append(slot)
            continue
        src = src_idx.astype(float) + 0.5 - e / 2.0
        dst = occ_idx.astype(float) + 0.5 - e / 2.0
        res = icp_align(src, dst, slot.transform, max_iters=icp_iters)
        old = _placed_values(slot, codebook, s_subv)[x:x + e, y:y + e, z:z + e]
        cand = replace(slot, transform=res.transform)
        new = _placed_values(cand, codebook, s_subv)[x:x + e, y:y + e, z:z + e]
        err_old = (cw * (window - old) ** 2).sum()
        err_new = (cw * (window - new) ** 2).sum()
        new_slots.append(cand if err_new < err_old else slot)
    return replace(state, slots=new_slots)


def optimize_subvolume(state: BlendState, target, params: BlendParams,
                       s_subv: int, codebook, seed: int = 0,
                       conf=None, icp_conf=None) -> BlendState:
    """Minimize L_rec + alpha * L_sm over block weights (and slot transforms).

    Projected descent on softplus-parameterized block weights, multi-start;
    the returned state never has a larger loss than the input state.
    `conf` optionally weights per-voxel reconstruction residuals (voxels at
    confidence 0 do not constrain the weights); `icp_conf` plays the same
    role for the per-slot transform refinement (defaults to `conf`)."""
    target = np.asarray(getattr(target, "data", target), dtype=float).ravel()
    if conf is not None:
        conf = np.asarray(getattr(conf, "data", conf), dtype=float).ravel()
    if icp_conf is None:
        icp_conf = conf
    alpha = params.effective_alpha()
    if not state.slots:
        return replace(state, alpha=alpha, losses=_exact_losses(
            state, codebook, target, alpha, s_subv, params.s_blend, conf))
    if not params.no_deform:
        state = _refine_transforms(state, codebook, target, s_subv,
                                   conf=icp_conf)
    nb = s_subv // params.s_blend
    extent = codebook[state.slots[0].patch_id].extent
    P, mask, _ = _stack_slots(state, codebook, s_subv)
    bmask = _boundary_mask(s_subv, params.s_blend).ravel()
    if conf is not None:
        # Where the reconstruction target is untrustworthy the optimizer
        # has no basis to rank candidates, and the smoothness term alone
        # drifts weights toward a consensus that measurably erodes thin
        # structure; freeze both terms there so the weights keep their
        # uniform initialization.
        bmask = bmask & (conf > 0)
    M = P.shape[0]
    binary = bool(np.isin(P[:, bmask], (0.0, 1.0)).all())

    def run(theta, patience=8, min_gain=1e-6):
        best_t = theta.copy()
        l_rec, l_sm, best_l, g = _losses_and_grad(
            theta, P, mask, target, alpha, bmask, params.s_blend, nb, binary,
            conf)
        stalled = 0
        for it in range(params.opt_iters):
            theta = theta - params.lr * g
            l_rec, l_sm, l, g = _losses_and_grad(
                theta, P, mask, target, alpha, bmask, params.s_blend, nb,
                binary, conf)
            if not np.isfinite(l):
                raise OptimizationError(f"non-finite loss at iteration {it}")
            if l < best_l - min_gain:
                best_l, best_t, stalled = l, theta.copy(), 0
            else:
                stalled += 1
                if stalled >= patience:
                    break
            if best_l <= min_gain:
                break
        return best_l, best_t

    theta0 = np.full((M, nb, nb, nb), _softplus_inv(1.0))
    candidates = [(_losses_and_grad(theta0, P, mask, target, alpha, bmask,
                                    params.s_blend, nb, binary, conf)[2],
                   theta0)]
    if not params.no_blend:
        rng = np.random.default_rng(seed)
        starts = [theta0]
        for _ in range(max(0, params.restarts - 1)):
            starts.append(theta0 + rng.normal(0.0, 1.0, size=theta0.shape))
        for th in starts:
            candidates.append(run(th))
    best_l, best_theta = min(candidates, key=lambda c: c[0])
    new_slots = [replace(slot, weight_blocks=_softplus(best_theta[m]))
                 for m, slot in enumerate(state.slots)]
    out = replace(state, slots=new_slots, alpha=alpha)
    out = replace(out, losses=_exact_losses(out, codebook, target, alpha,
                                            s_subv, params.s_blend, conf))
    return out


def _exact_losses(state, codebook, target, alpha, s_subv, s_blend, conf=None):
    tgt = np.asarray(target, dtype=float).reshape((s_subv,) * 3)
    V = blend_eval(state, codebook, fallback=tgt)
    if conf is None:
        l_rec = loss_rec(V.data, tgt)
        l_sm = (loss_smooth(state, codebook, s_subv, s_blend)
                if state.slots else 0.0)
    else:
        cf = np.asarray(conf, dtype=float).reshape((s_subv,) * 3)
        l_rec = loss_rec(V.data * cf, tgt * cf)
        l_sm = 0.0
        if len(state.slots) >= 2:
            P, _mask, W = _stack_slots(state, codebook, s_subv)
            bm = _boundary_mask(s_subv, s_blend).ravel() & (cf.ravel() > 0)
            l_sm = _smooth_from_stacks(P[:, bm], W[:, bm])
    return (l_rec, l_sm, l_rec + alpha * l_sm)


def assemble(shape_size: int, subvolumes, s_subv: int, stride: int) -> VoxelGrid:
    """Average overlapping optimized subvolumes into the full scalar grid.

    `subvolumes` is a list of (corner, values) with values of shape s_subv^3.
    """
    acc = np.zeros((shape_size,) * 3)
    cnt = np.zeros((shape_size,) * 3)
    for corner, values in subvolumes:
        v = np.asarray(getattr(values, "data", values), dtype=float)
        if v.shape != (s_subv,) * 3:
            raise ValueError(f"subvolume at {corner} has shape {v.shape}")
        x, y, z = corner
        if min(x, y, z) < 0 or max(x, y, z) + s_subv > shape_size:
            raise ValueError(f"subvolume at {corner} outside the grid")
        acc[x:x + s_subv, y:y + s_subv, z:z + s_subv] += v
        cnt[x:x + s_subv, y:y + s_subv, z:z + s_subv] += 1.0
    if (cnt == 0).any():
        raise ValueError("subvolume corners do not cover the grid")
    return VoxelGrid(acc / cnt)


def block_boundary_discontinuity(grid: VoxelGrid, s_blend: int) -> float:
    """Mean |V[x] - V[x']| across voxel pairs straddling blend-block faces."""
    v = np.asarray(grid.data, dtype=float)
    diffs = []
    for axis in range(3):
        idx = np.arange(s_blend, v.shape[axis], s_blend)
        a = np.take(v, idx - 1, axis=axis)
        b = np.take(v, idx, axis=axis)
        diffs.append(np.abs(a - b).ravel())
    return float(np.concatenate(diffs).mean())
