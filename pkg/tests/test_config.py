"""
Тесты сборки конфигурации конвейера.
"""

import json

import pytest
from pydantic import ValidationError

from config import STAGE_SEED_OFFSETS, PipelineConfig, build_pipeline_config
from errors import ConfigurationError


@pytest.mark.unit
class TestPresets:
    """Пресеты и порядок наложения значений."""

    def test_paper_preset(self):
        config = build_pipeline_config(preset="paper")
        assert config.kmeans.K == 5000
        assert config.kmeans.min_cluster_size == 100
        assert (config.neighbors.k, config.neighbors.g) == (10, 4)
        assert config.train.margin == 0.5
        assert config.train.learning_rate == 0.001
        assert config.batches.batch_size == 100

    def test_desk_preset_is_smaller(self):
        config = build_pipeline_config(preset="desk")
        assert config.kmeans.K < 5000
        assert config.eval.compare_modes is True

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError, match="пресет"):
            build_pipeline_config(preset="huge")

    def test_precedence(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"kmeans": {"K": 30, "max_iters": 7}, "workers": 3}))
        config = build_pipeline_config(
            preset="desk",
            config_path=str(path),
            overrides=["kmeans.K=40", "workers=5"],
            workers=2,
        )
        assert config.kmeans.K == 40
        assert config.kmeans.max_iters == 7
        assert config.workers == 2

    def test_override_value_types(self):
        config = build_pipeline_config(
            overrides=["pairs.mode=union", "batches.ordering_fraction=0.25", "neighbors.max_memberships=2"]
        )
        assert config.pairs.mode == "union"
        assert config.batches.ordering_fraction == 0.25
        assert config.neighbors.max_memberships == 2

    def test_override_without_equals(self):
        with pytest.raises(ConfigurationError, match="key.path=value"):
            build_pipeline_config(overrides=["kmeans.K"])

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="не найден"):
            build_pipeline_config(config_path=str(tmp_path / "absent.json"))

    def test_invalid_json_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{kmeans: 1")
        with pytest.raises(ConfigurationError, match="некорректный JSON"):
            build_pipeline_config(config_path=str(path))

    def test_out_of_range_value(self):
        with pytest.raises(ValidationError):
            build_pipeline_config(overrides=["kmeans.K=0"])

    def test_batch_sizes_must_agree(self):
        with pytest.raises(ValidationError, match="batch_size"):
            build_pipeline_config(overrides=["train.batch_size=50"])

    def test_group_size_needs_enough_neighbors(self):
        with pytest.raises(ValidationError, match="g-1"):
            build_pipeline_config(overrides=["neighbors.k=2", "neighbors.g=4"])


@pytest.mark.unit
class TestStageSeeds:
    """Зёрна этапов выводятся из главного."""

    def test_offsets_applied(self):
        config = build_pipeline_config(master_seed=100)
        assert config.synth.seed == 100 + STAGE_SEED_OFFSETS["synth"]
        assert config.kmeans.seed == 100 + STAGE_SEED_OFFSETS["cluster"]
        assert config.pairs.seed == 100 + STAGE_SEED_OFFSETS["pairs"]
        assert config.batches.seed == 100 + STAGE_SEED_OFFSETS["triplets"]
        assert config.train.seed == 100 + STAGE_SEED_OFFSETS["train"]
        assert config.eval.seed == 100 + STAGE_SEED_OFFSETS["eval"]

    def test_stage_seed_ignores_overrides(self):
        config = build_pipeline_config(master_seed=1, overrides=["kmeans.seed=999"])
        assert config.kmeans.seed == 1 + STAGE_SEED_OFFSETS["cluster"]

    def test_unknown_stage(self):
        with pytest.raises(ConfigurationError, match="этап"):
            PipelineConfig().stage_seed("graph")

    def test_master_seed_upper_bound(self):
        with pytest.raises(ValidationError):
            build_pipeline_config(master_seed=2 ** 64 - 1)


@pytest.mark.unit
class TestConfigHash:
    """Хеш конфигурации."""

    def test_workers_do_not_change_hash(self):
        assert build_pipeline_config(workers=1).config_hash() == build_pipeline_config(
            workers=8
        ).config_hash()

    def test_seed_changes_hash(self):
        assert build_pipeline_config(master_seed=1).config_hash() != build_pipeline_config(
            master_seed=2
        ).config_hash()
