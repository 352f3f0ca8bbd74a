import numpy as np
import pytest

from voxpatch.config import preset_config
from voxpatch.evaluation import crop_cuboid, iou, shape_cd
from voxpatch.pipeline import (CompletionResult, PipelineError, blend_target,
                               coarse_only_completion, complete_shape,
                               make_coarse)
from voxpatch.retrieval import make_triplets, train_embedding
from voxpatch.synthetic import chair, table
from voxpatch.voxelgrid import VoxelGrid, upsample_nearest


@pytest.fixture(scope="module")
def cfg():
    return preset_config("small")


@pytest.fixture(scope="module")
def gt():
    return chair(32, seed=0)


@pytest.fixture(scope="module")
def self_recon(cfg, gt):
    return complete_shape(gt, cfg, S_gt=gt)


class TestBlendTarget:
    def test_uncropped_input_target_equals_input(self, cfg, gt):
        C = make_coarse(gt, cfg, gt)
        tgt = blend_target(gt, upsample_nearest(C, 4))
        assert np.array_equal(tgt.astype(bool), gt.data)

    def test_coarse_fills_cropped_region(self, cfg, gt):
        partial, spec = crop_cuboid(gt, (0.2, 0.3), seed=1)
        C = make_coarse(partial, cfg, gt)
        tgt = blend_target(partial, upsample_nearest(C, 4))
        x, y, z = spec.realized["corner"]
        ex, ey, ez = spec.realized["extent"]
        box = tgt[x:x + ex, y:y + ey, z:z + ez]
        assert box.sum() > 0

    def test_observed_occupancy_dominates(self, cfg, gt):
        C = make_coarse(gt, cfg, gt)
        tgt = blend_target(gt, upsample_nearest(C, 4))
        assert (tgt[gt.data] == 1.0).all()


class TestMakeCoarse:
    def test_gt_downsample_needs_gt(self, cfg, gt):
        with pytest.raises(PipelineError, match="GT"):
            make_coarse(gt, cfg, None)

    def test_external_needs_path(self, cfg, gt):
        with pytest.raises(PipelineError, match="coarse_path"):
            make_coarse(gt, cfg.replace(coarse_provider="external_file"), None)

    def test_heuristic_provider(self, cfg, gt):
        c = make_coarse(gt, cfg.replace(coarse_provider="heuristic"), None)
        assert c.size == 8


class TestCompleteShape:
    def test_self_reconstruction_iou(self, self_recon, gt):
        assert iou(self_recon.binary, gt) >= 0.95

    def test_result_shapes(self, self_recon, cfg):
        assert isinstance(self_recon, CompletionResult)
        assert self_recon.scalar.size == cfg.s_shape
        assert self_recon.binary.size == cfg.s_shape
        assert self_recon.coarse.size == cfg.s_shape // 4

    def test_diagnostics_structure(self, self_recon):
        d = self_recon.diagnostics
        assert {"coarse_s", "retrieval_s", "blend_s"} <= set(d["timings"])
        assert d["n_codebook"] > 0 and d["n_retrieval_locations"] > 0
        assert len(d["subvolumes"]) == 27  # 3 corners per axis at small preset
        for sv in d["subvolumes"]:
            assert sv["loss_total"] >= 0.0 or np.isnan(sv["loss_total"])

    def test_wrong_size_rejected(self, cfg):
        with pytest.raises(PipelineError, match="config expects"):
            complete_shape(VoxelGrid.empty(16), cfg)

    def test_empty_input_rejected(self, cfg):
        with pytest.raises(PipelineError, match="empty"):
            complete_shape(VoxelGrid.empty(32), cfg, S_gt=VoxelGrid.empty(32))

    def test_embedding_mode_needs_embedders(self, cfg, gt):
        with pytest.raises(PipelineError, match="embedders"):
            complete_shape(gt, cfg.replace(retrieval_mode="embedding"), S_gt=gt)


class TestDeterminism:
    def test_rerun_identical(self, cfg, gt, self_recon):
        again = complete_shape(gt, cfg, S_gt=gt)
        assert np.array_equal(again.scalar.data, self_recon.scalar.data)

    def test_threads_do_not_change_output(self, cfg, gt, self_recon):
        threaded = complete_shape(gt, cfg.replace(threads=4), S_gt=gt)
        assert np.array_equal(threaded.scalar.data, self_recon.scalar.data)


class TestCompletionQuality:
    def test_beats_coarse_baseline_on_crop(self, cfg):
        gt = table(32, seed=3)
        partial, _ = crop_cuboid(gt, (0.15, 0.25), seed=2)
        full = complete_shape(partial, cfg, S_gt=gt)
        base = coarse_only_completion(partial, cfg, S_gt=gt)
        assert shape_cd(full.binary, gt) < shape_cd(base, gt)

    def test_embedding_retrieval_runs(self, cfg, gt):
        C = make_coarse(gt, cfg, gt)
        triplets = make_triplets(gt, C, gt, n_rnd=20, n_true=10, seed=0,
                                 extent=cfg.s_patch, stride=cfg.gamma_patch)
        ec, ed, _ = train_embedding(triplets, epochs=5, code_dim=16,
                                    seed=0)
        res = complete_shape(gt, cfg.replace(retrieval_mode="embedding"),
                             S_gt=gt, embedders=(ec, ed))
        assert res.binary.size == 32 and res.binary.occupied_count > 0


class TestCoarseOnly:
    def test_baseline_is_upsampled_coarse(self, cfg, gt):
        base = coarse_only_completion(gt, cfg, S_gt=gt)
        C = make_coarse(gt, cfg, gt)
        assert np.array_equal(base.data, upsample_nearest(C, 4).binarize().data)
