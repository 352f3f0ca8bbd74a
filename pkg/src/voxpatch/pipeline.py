"""End-to-end completion: coarse shape -> patch retrieval -> per-subvolume
deformation/blending -> assembly into the final detailed shape."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import blend as blend_mod
from . import coarse as coarse_mod
from .blend import BlendParams, BlendState, select_candidates, subvolume_corners
from .config import PipelineConfig
from .retrieval import build_codebook, retrieve_exact, retrieve_knn
from .voxelgrid import VoxelGrid, upsample_nearest


class PipelineError(RuntimeError):
    pass


@dataclass
class CompletionResult:
    scalar: VoxelGrid
    binary: VoxelGrid
    coarse: VoxelGrid
    diagnostics: dict


def make_coarse(S: VoxelGrid, cfg: PipelineConfig, S_gt=None) -> VoxelGrid:
    if cfg.coarse_provider == "gt_downsample":
        if S_gt is None:
            raise PipelineError("gt_downsample coarse provider needs the GT shape")
        return coarse_mod.coarse_from_gt(S_gt)
    if cfg.coarse_provider == "heuristic":
        return coarse_mod.coarse_heuristic(S, cfg.closing_radius, cfg.symmetry)
    if not cfg.coarse_path:
        raise PipelineError("external_file coarse provider needs coarse_path")
    return coarse_mod.load_external_coarse(cfg.coarse_path, cfg.s_shape)


def _target_fields(S: VoxelGrid, C_up: VoxelGrid, observe_radius: int):
    """(target, confidence, alignment confidence) for the blending
    optimization.

    Target: the partial input dominates wherever it is observed (within a
    Chebyshev ball of radius `observe_radius` around the input occupancy),
    the upsampled coarse shape elsewhere. The radius (default 3 = upsample
    factor - 1) covers every voxel the 4x coarse blocks fatten into, so on
    a fully observed input the target equals the input exactly.

    Confidence: 0 in and around missing-data blocks (coarse blocks of
    side observe_radius + 1 where the coarse shape asserts occupancy but
    the input shows none — the signature of cropped-away data), 1
    elsewhere. In those regions neither the input's zeros (the data may
    simply be gone) nor the block-fattened coarse values are reliable as
    per-voxel reconstruction targets, so the recon loss ignores them
    instead of erasing retrieved detail or inflating it to the fattened
    coarse blocks.

    Alignment confidence: 0 only in the dilation ring around missing-data
    blocks, 1 elsewhere. Rigid per-slot alignment is robust to block
    fattening (it matches gross position, not per-voxel values), so the
    coarse occupancy inside missing blocks is still a useful ICP target;
    only the ring — where the input's zeros contradict it — is excluded.

    On a fully observed input no missing-data blocks exist and both
    confidences are 1 everywhere."""
    s = S.binarize().data
    c = C_up.binarize().data
    ball = np.ones((3, 3, 3), dtype=bool)
    observed = ndimage.binary_dilation(s, structure=ball,
                                       iterations=observe_radius)
    target = np.where(observed, s, c).astype(float)
    b = observe_radius + 1
    n = s.shape[0] // b

    def per_block_any(v):
        blocks = v.reshape(n, b, n, b, n, b).any(axis=(1, 3, 5))
        return np.repeat(np.repeat(np.repeat(blocks, b, axis=0),
                                   b, axis=1), b, axis=2)

    missing = per_block_any(c) & ~per_block_any(s)
    suspect = ndimage.binary_dilation(missing, structure=ball,
                                      iterations=observe_radius)
    conf = np.where(suspect, 0.0, 1.0)
    conf_icp = np.where(suspect & ~missing, 0.0, 1.0)
    return target, conf, conf_icp


def blend_target(S: VoxelGrid, C_up: VoxelGrid,
                 observe_radius: int = 3) -> np.ndarray:
    """Optimization target volume; see _target_fields."""
    return _target_fields(S, C_up, observe_radius)[0]


def blend_confidence(S: VoxelGrid, C_up: VoxelGrid,
                     observe_radius: int = 3) -> np.ndarray:
    """Per-voxel reconstruction confidence for the blend target; see
    _target_fields."""
    return _target_fields(S, C_up, observe_radius)[1]


def _distance_kwargs(cfg: PipelineConfig) -> dict:
    return {"init_mode": cfg.icp_init_mode, "max_refines": cfg.icp_max_refines}


def complete_shape(S: VoxelGrid, cfg: PipelineConfig, S_gt=None,
                   embedders=None) -> CompletionResult:
    """Run the full pipeline on a partial shape.

    `embedders` is a (coarse, detailed) pair, required in embedding
    retrieval mode. Deterministic for a fixed config, including under
    cfg.threads > 1.
    """
    if S.size != cfg.s_shape:
        raise PipelineError(f"input is {S.size}^3, config expects {cfg.s_shape}^3")
    if S.occupied_count == 0:
        raise PipelineError("input shape is empty")
    timings = {}
    t0 = time.perf_counter()
    C = make_coarse(S, cfg, S_gt)
    C_up = upsample_nearest(C, cfg.s_shape // C.size)
    timings["coarse_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    codebook = build_codebook(S, cfg.s_patch, cfg.gamma_patch)
    if cfg.retrieval_mode == "embedding":
        if embedders is None:
            raise PipelineError("embedding retrieval needs trained embedders")
        ec, ed = embedders
        retrievals = retrieve_knn(C, codebook, ec, ed, cfg.K, cfg.gamma_patch)
    else:
        retrievals = retrieve_exact(C, S, codebook, cfg.K, cfg.gamma_patch,
                                    shortlist=cfg.shortlist,
                                    distance_kwargs=_distance_kwargs(cfg))
    timings["retrieval_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    params = BlendParams(M=cfg.M, alpha=cfg.alpha, s_blend=cfg.s_blend,
                         opt_iters=cfg.opt_iters, restarts=cfg.restarts,
                         lr=cfg.opt_lr, no_deform=cfg.no_deform,
                         no_blend=cfg.no_blend, no_smooth=cfg.no_smooth)
    target_full, conf_full, conf_icp_full = _target_fields(
        S, C_up, observe_radius=3)
    corners = subvolume_corners(cfg.s_shape, cfg.s_subv, cfg.gamma_subv)

    def run_subvolume(corner):
        x, y, z = corner
        sl = (slice(x, x + cfg.s_subv), slice(y, y + cfg.s_subv),
              slice(z, z + cfg.s_subv))
        tgt = target_full[sl]
        slots = select_candidates(retrievals, corner, params, cfg.s_subv,
                                  cfg.s_patch, codebook=codebook, target=tgt)
        state = BlendState(corner, slots, params.effective_alpha())
        state = blend_mod.optimize_subvolume(state, tgt, params, cfg.s_subv,
                                             codebook, seed=cfg.seed,
                                             conf=conf_full[sl],
                                             icp_conf=conf_icp_full[sl])
        values = blend_mod.blend_eval(state, codebook, fallback=tgt)
        return corner, values.data, state.losses, len(slots)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(run_subvolume, corners))
    else:
        results = [run_subvolume(c) for c in corners]
    timings["blend_s"] = time.perf_counter() - t0

    assembled = blend_mod.assemble(
        cfg.s_shape, [(c, v) for c, v, _, _ in results], cfg.s_subv,
        cfg.gamma_subv)
    binary = assembled.binarize(cfg.binarize_threshold)
    diagnostics = {
        "timings": timings,
        "n_codebook": len(codebook),
        "n_retrieval_locations": len(retrievals),
        "subvolumes": [
            {"corner": list(c), "n_slots": n,
             "loss_rec": float(l[0]), "loss_smooth": float(l[1]),
             "loss_total": float(l[2])}
            for c, _, l, n in results
        ],
    }
    return CompletionResult(assembled, binary, C, diagnostics)


def coarse_only_completion(S: VoxelGrid, cfg: PipelineConfig,
                           S_gt=None) -> VoxelGrid:
    """Baseline: the upsampled coarse shape, no retrieval or blending."""
    C = make_coarse(S, cfg, S_gt)
    return upsample_nearest(C, cfg.s_shape // C.size).binarize()
