import dataclasses

import pytest

from voxpatch.config import PipelineConfig, SMALL_PRESET, preset_config


class TestDefaults:
    def test_paper_scale_constants(self):
        cfg = PipelineConfig()
        assert (cfg.s_shape, cfg.s_patch, cfg.s_subv) == (128, 18, 40)
        assert (cfg.gamma_patch, cfg.gamma_subv) == (4, 32)
        assert cfg.M == 400 and cfg.alpha == 10.0 and cfg.s_blend == 8
        assert cfg.n_rnd == 800 and cfg.n_true == 400
        assert cfg.code_dim == 128

    def test_small_preset_divisibility(self):
        cfg = preset_config("small")
        assert cfg.s_subv % cfg.s_blend == 0
        assert cfg.s_shape % 4 == 0
        assert cfg.s_patch <= cfg.s_subv <= cfg.s_shape

    def test_small_preset_values(self):
        cfg = preset_config("small")
        assert (cfg.s_shape, cfg.s_patch, cfg.gamma_patch) == (32, 6, 2)
        assert (cfg.s_subv, cfg.gamma_subv, cfg.s_blend, cfg.M) == (16, 12, 4, 32)

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown preset"):
            preset_config("huge")


class TestValidation:
    def test_blend_must_divide_subvolume(self):
        with pytest.raises(ValueError, match="must divide"):
            PipelineConfig(s_blend=7)

    def test_coarse_factor(self):
        with pytest.raises(ValueError):
            PipelineConfig(s_shape=126)

    def test_bad_retrieval_mode(self):
        with pytest.raises(ValueError, match="retrieval_mode"):
            PipelineConfig(retrieval_mode="psychic")

    def test_bad_coarse_provider(self):
        with pytest.raises(ValueError, match="coarse_provider"):
            PipelineConfig(coarse_provider="magic")

    def test_replace_revalidates(self):
        cfg = PipelineConfig()
        with pytest.raises(ValueError):
            cfg.replace(s_blend=3)


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        cfg = preset_config("small").replace(K=7, alpha=2.5, no_blend=True)
        path = tmp_path / "cfg.json"
        cfg.save(path)
        assert PipelineConfig.load(path) == cfg

    def test_save_is_deterministic(self, tmp_path):
        cfg = preset_config("small")
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        cfg.save(a)
        cfg.save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            PipelineConfig.from_dict({"warp_speed": 9})

    def test_all_fields_serialized(self):
        cfg = PipelineConfig()
        d = cfg.to_dict()
        assert set(d) == {f.name for f in dataclasses.fields(PipelineConfig)}

    def test_preset_dict_keys_are_fields(self):
        names = {f.name for f in dataclasses.fields(PipelineConfig)}
        assert set(SMALL_PRESET) <= names
