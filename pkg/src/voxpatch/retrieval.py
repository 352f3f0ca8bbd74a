"""Detail-patch retrieval: codebook construction from the partial input,
metric-embedding training on coarse/detailed triplets, and per-location
K-nearest-neighbor retrieval with a brute-force exact oracle.

Encoders are linear maps over flattened patch occupancy trained by SGD on
the metric embedding objective: the Euclidean distance between a coarse
code and a detailed code should match the pose-invariant geometric distance
of the underlying detailed patches.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .registration import RigidTransform, geometric_distance
from .voxelgrid import Patch, VoxelGrid, extract_patch, sample_patches, upsample_nearest

PRDB_MAGIC = b"PRDB1\x00\x00\x00"


class EmptyCodebookError(ValueError):
    """The partial input contains no non-empty patches."""


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Triplet:
    coarse: Patch
    positive: Patch
    sample: Patch
    target_distance: float


@dataclass
class Embedder:
    """Linear map from flattened extent^3 occupancy to a code vector."""

    kind: str  # "coarse" or "detailed"
    weights: np.ndarray  # (code_dim, extent^3)
    bias: np.ndarray  # (code_dim,)

    @property
    def code_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    def encode(self, patch) -> np.ndarray:
        feat = _features(patch)
        return self.weights @ feat + self.bias

    def encode_many(self, patches) -> np.ndarray:
        feats = np.stack([_features(p) for p in patches])
        return feats @ self.weights.T + self.bias


@dataclass(frozen=True)
class RetrievalSet:
    """Ranked candidates for one query location: (patch_id, transform_hint, score)."""

    location: tuple
    candidates: list
    truncated: bool = False


def _features(patch) -> np.ndarray:
    data = patch.data if isinstance(patch, Patch) else patch
    return np.asarray(data, dtype=float).ravel()


def init_embedder(kind: str, extent: int, code_dim: int, rng) -> Embedder:
    in_dim = extent ** 3
    w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(code_dim, in_dim))
    return Embedder(kind, w, np.zeros(code_dim))


def build_codebook(S: VoxelGrid, extent: int, stride: int) -> list:
    """Non-empty detail patches of S; patch_id is the rank in x,y,z corner order."""
    patches = sample_patches(S, extent, stride, keep_empty=False)
    if not patches:
        raise EmptyCodebookError("partial input has no non-empty patches")
    return patches


def _query_locations(C_up: VoxelGrid, extent: int, stride: int) -> list:
    """Corners of non-empty sliding windows over the upsampled coarse shape."""
    out = []
    n = (C_up.size - extent) // stride + 1
    occ = C_up.binarize().data
    windows = np.lib.stride_tricks.sliding_window_view(occ, (extent,) * 3)
    windows = windows[::stride, ::stride, ::stride]
    counts = windows.reshape(n, n, n, -1).sum(axis=-1)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if counts[i, j, k] > 0:
                    out.append((i * stride, j * stride, k * stride))
    return out


def make_triplets(S: VoxelGrid, C: VoxelGrid, S_gt: VoxelGrid,
                  n_rnd: int, n_true: int, seed: int,
                  extent: int = 18, stride: int = 4,
                  distance_kwargs: dict | None = None) -> list:
    """Training triplets: coarse query, its true detailed patch, and a sample.

    True triplets use the ground-truth patch itself (target 0); random
    triplets draw the sample uniformly from the codebook and compute the
    target by the geometric distance.
    """
    factor = S.size // C.size
    C_up = upsample_nearest(C, factor) if factor > 1 else C
    locations = _query_locations(C_up, extent, stride)
    # a true triplet needs a non-empty GT patch at the query location
    locations = [l for l in locations
                 if extract_patch(S_gt, l, extent).occupied_count > 0]
    if not locations:
        raise ValueError("no non-empty query locations for triplet sampling")
    codebook = build_codebook(S, extent, stride)
    rng = np.random.default_rng(seed)
    kw = distance_kwargs or {}
    triplets = []
    for i in range(n_true + n_rnd):
        loc = locations[rng.integers(0, len(locations))]
        c = extract_patch(C_up.binarize(), loc, extent)
        q = extract_patch(S_gt, loc, extent)
        if i < n_true:
            triplets.append(Triplet(c, q, q, 0.0))
        else:
            p = codebook[rng.integers(0, len(codebook))]
            d = geometric_distance(p, q, **kw).distance
            triplets.append(Triplet(c, q, p, float(d)))
    return triplets


def embedding_loss(ec: Embedder, ed: Embedder, triplets) -> float:
    """Mean | ||E_c(c) - E_d(p)||_2 - target | over the triplets."""
    cf = np.stack([_features(t.coarse) for t in triplets])
    pf = np.stack([_features(t.sample) for t in triplets])
    tgt = np.array([t.target_distance for t in triplets])
    u = (cf @ ec.weights.T + ec.bias) - (pf @ ed.weights.T + ed.bias)
    norms = np.linalg.norm(u, axis=1)
    return float(np.abs(norms - tgt).mean())


def _loss_and_grads(wc, bc, wd, bd, cf, pf, tgt):
    u = (cf @ wc.T + bc) - (pf @ wd.T + bd)
    norms = np.linalg.norm(u, axis=1)
    resid = norms - tgt
    loss = float(np.abs(resid).mean())
    safe = np.where(norms > 0, norms, 1.0)
    # d|r|/du = sign(r) * u / ||u||, with the subgradient at ||u||=0 taken as 0
    gu = (np.sign(resid) / safe)[:, None] * u
    gu[norms == 0] = 0.0
    n = cf.shape[0]
    gwc = gu.T @ cf / n
    gbc = gu.mean(axis=0)
    gwd = -(gu.T @ pf) / n
    gbd = -gu.mean(axis=0)
    return loss, gwc, gbc, gwd, gbd


def train_embedding(triplets, epochs: int = 200, lr: float = 1e-3, seed: int = 0,
                    code_dim: int = 128, batch: int = 32, lr_decay: float = 0.0):
    """SGD on the metric embedding objective; returns (E_c, E_d, loss_history)."""
    if not triplets:
        raise ValueError("need at least one triplet")
    extent = triplets[0].coarse.extent
    rng = np.random.default_rng(seed)
    ec = init_embedder("coarse", extent, code_dim, rng)
    ed = init_embedder("detailed", extent, code_dim, rng)
    cf = np.stack([_features(t.coarse) for t in triplets])
    pf = np.stack([_features(t.sample) for t in triplets])
    tgt = np.array([t.target_distance for t in triplets])
    n = len(triplets)
    history = [embedding_loss(ec, ed, triplets)]
    for epoch in range(epochs):
        step = lr / (1.0 + lr_decay * epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch):
            sel = order[start:start + batch]
            loss, gwc, gbc, gwd, gbd = _loss_and_grads(
                ec.weights, ec.bias, ed.weights, ed.bias, cf[sel], pf[sel], tgt[sel])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
            ec.weights -= step * gwc
            ec.bias -= step * gbc
            ed.weights -= step * gwd
            ed.bias -= step * gbd
        history.append(float(np.mean(losses)))
    return ec, ed, history


def _ranked_candidates(scores, patch_count, K):
    """Indices of the K smallest scores; ties broken by patch id."""
    order = np.argsort(scores, kind="stable")
    return order[:min(K, patch_count)]


def retrieve_knn(C: VoxelGrid, codebook, ec: Embedder, ed: Embedder,
                 K: int, stride: int, up_factor: int = 4) -> list:
    """K nearest codebook entries per non-empty coarse query, by code distance."""
    extent = codebook[0].extent
    if ec.in_dim != extent ** 3:
        raise ValueError("embedder extent does not match codebook patches")
    C_up = upsample_nearest(C, up_factor) if up_factor > 1 else C
    locations = _query_locations(C_up, extent, stride)
    truncated = K > len(codebook)
    if truncated:
        warnings.warn(f"K={K} exceeds codebook size {len(codebook)}; truncating")
    codes_d = ed.encode_many(codebook)
    out = []
    for loc in locations:
        c = extract_patch(C_up.binarize(), loc, extent)
        code_c = ec.encode(c)
        scores = np.linalg.norm(codes_d - code_c, axis=1)
        idx = _ranked_candidates(scores, len(codebook), K)
        cands = [(int(i), RigidTransform.identity(), float(scores[i])) for i in idx]
        out.append(RetrievalSet(loc, cands, truncated))
    return out


def retrieve_exact(C: VoxelGrid, S: VoxelGrid, codebook, K: int, stride: int,
                   up_factor: int = 4, shortlist: int | None = None,
                   distance_kwargs: dict | None = None) -> list:
    """Oracle retrieval by geometric distance, no embeddings.

    The query content is the detailed window of S when it is non-empty there,
    else the upsampled coarse window. A cheap voxel-overlap prescore shortlists
    the codebook before the full geometric distance is evaluated.
    """
    extent = codebook[0].extent
    C_up = upsample_nearest(C, up_factor) if up_factor > 1 else C
    locations = _query_locations(C_up, extent, stride)
    truncated = K > len(codebook)
    if truncated:
        warnings.warn(f"K={K} exceeds codebook size {len(codebook)}; truncating")
    short = shortlist if shortlist is not None else max(4 * K, 16)
    short = min(short, len(codebook))
    kw = distance_kwargs or {}
    feats = np.stack([_features(p) for p in codebook])
    # identical patterns recur heavily (repetitive shapes, blocky coarse
    # windows), so candidate lists are shared per query pattern and distances
    # cached per (query pattern, patch pattern) pair
    pkeys = [np.packbits(f.astype(bool)).tobytes() for f in feats]
    dist_cache: dict = {}
    per_pattern: dict = {}
    out = []
    C_up_bin = C_up.binarize()
    for loc in locations:
        q_det = extract_patch(S, loc, extent)
        query = q_det if q_det.occupied_count > 0 else extract_patch(C_up_bin, loc, extent)
        qf = _features(query)
        qkey = np.packbits(qf.astype(bool)).tobytes()
        cands = per_pattern.get(qkey)
        if cands is None:
            hamming = np.abs(feats - qf).sum(axis=1)
            pre = np.argsort(hamming, kind="stable")[:short]
            scored = []
            for pid in pre:
                pair = (qkey, pkeys[pid])
                hit = dist_cache.get(pair)
                if hit is None:
                    res = geometric_distance(codebook[pid], query, **kw)
                    hit = (float(res.distance), res.transform)
                    dist_cache[pair] = hit
                scored.append((hit[0], int(pid), hit[1]))
            scored.sort(key=lambda s: (s[0], s[1]))
            cands = [(pid, tr, dist)
                     for dist, pid, tr in scored[:min(K, len(codebook))]]
            per_pattern[qkey] = cands
        out.append(RetrievalSet(loc, list(cands), truncated))
    return out


def save_retrieval_db(path, ec: Embedder, ed: Embedder, codebook=None) -> None:
    """PRDB1 container: magic, extent, code_dim, counts, f32 payloads."""
    codebook = codebook or []
    extent = round(ec.in_dim ** (1 / 3))
    with open(path, "wb") as fh:
        fh.write(PRDB_MAGIC)
        fh.write(struct.pack("<IIII", extent, ec.code_dim, len(codebook), 2))
        for emb in (ec, ed):
            fh.write(emb.weights.astype("<f4").tobytes())
            fh.write(emb.bias.astype("<f4").tobytes())
        for p in codebook:
            fh.write(struct.pack("<iii", *p.corner))
            fh.write(np.packbits(p.data.ravel()).tobytes())


def load_retrieval_db(path):
    """Returns (E_c, E_d, codebook)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:8] != PRDB_MAGIC:
        raise ValueError(f"{path}: not a PRDB1 file")
    extent, code_dim, n_patches, n_emb = struct.unpack_from("<IIII", blob, 8)
    if n_emb != 2:
        raise ValueError(f"{path}: expected 2 embedders, found {n_emb}")
    off = 24
    in_dim = extent ** 3
    embs = []
    for kind in ("coarse", "detailed"):
        w = np.frombuffer(blob, dtype="<f4", count=code_dim * in_dim, offset=off)
        off += 4 * code_dim * in_dim
        b = np.frombuffer(blob, dtype="<f4", count=code_dim, offset=off)
        off += 4 * code_dim
        embs.append(Embedder(kind, w.reshape(code_dim, in_dim).astype(float),
                             b.astype(float)))
    nbytes = (in_dim + 7) // 8
    codebook = []
    for _ in range(n_patches):
        corner = struct.unpack_from("<iii", blob, off)
        off += 12
        bits = np.unpackbits(
            np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=off))[:in_dim]
        off += nbytes
        codebook.append(Patch(corner, bits.astype(bool).reshape(extent, extent, extent)))
    return embs[0], embs[1], codebook
