"""
Тесты хранилища признаков и форматов файлов.
"""

import numpy as np
import pytest

from errors import DataValidationError, ParseError
from models import NodeMeta
from services.feature_service import FeatureService
from storage import iter_jsonl, read_matrix, require_field, write_jsonl, write_matrix

# -------------------------------------------------------------------------------------------------
# TIVG
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestMatrixFormat:
    """Двоичный формат матриц."""

    def test_round_trip_is_bit_exact(self, tmp_path):
        matrix = np.arange(12, dtype=np.float32).reshape(3, 4) / 7.0
        write_matrix(tmp_path / "m.tivg", matrix)
        loaded = read_matrix(tmp_path / "m.tivg")
        assert loaded.dtype == np.float32
        assert loaded.tobytes() == matrix.tobytes()

    def test_float64_version(self, tmp_path, rng):
        matrix = rng.standard_normal((5, 3))
        write_matrix(tmp_path / "m.tivg", matrix, version=2)
        np.testing.assert_array_equal(read_matrix(tmp_path / "m.tivg"), matrix)

    def test_empty_matrix(self, tmp_path):
        write_matrix(tmp_path / "empty.tivg", np.zeros((0, 8), dtype=np.float32))
        assert read_matrix(tmp_path / "empty.tivg").shape == (0, 8)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tivg"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ParseError, match="сигнатура"):
            read_matrix(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "m.tivg"
        write_matrix(path, np.ones((2, 2), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ParseError, match="размер"):
            read_matrix(path)


# -------------------------------------------------------------------------------------------------
# JSON-lines
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestJsonLines:
    """Построчные записи с номерами строк в ошибках."""

    def test_bad_line_reports_number(self, tmp_path):
        path = tmp_path / "x.jsonl"
        path.write_text('{"a": 1}\n{"a": 2}\nnot json\n', encoding="utf-8")
        with pytest.raises(ParseError, match="line 3"):
            list(iter_jsonl(path))

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "x.jsonl"
        write_jsonl(path, [{"a": 1}, {"a": 2}])
        path.write_text(path.read_text() + "\n\n", encoding="utf-8")
        assert [record["a"] for _, record in iter_jsonl(path)] == [1, 2]

    def test_bool_is_not_int(self):
        with pytest.raises(ParseError, match="bool"):
            require_field({"node": True}, "node", int, line=4)


# -------------------------------------------------------------------------------------------------
# FeatureService
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestFeatureService:
    """Загрузка, проверка и нормировка признаков."""

    def test_save_load_round_trip(self, tmp_path, rng):
        store = FeatureService.from_array(rng.standard_normal((3, 4)))
        FeatureService.save_features(store, tmp_path / "f.tivg")
        loaded = FeatureService.load_features(tmp_path / "f.tivg", expected_dim=4)
        assert loaded.data.tobytes() == store.data.tobytes()

    def test_empty_file_gives_empty_store(self, tmp_path):
        write_matrix(tmp_path / "f.tivg", np.zeros((0, 4), dtype=np.float32))
        assert FeatureService.load_features(tmp_path / "f.tivg").n == 0

    def test_dimension_mismatch(self, tmp_path, rng):
        FeatureService.save_features(
            FeatureService.from_array(rng.standard_normal((2, 4))), tmp_path / "f.tivg"
        )
        with pytest.raises(DataValidationError, match="размерность"):
            FeatureService.load_features(tmp_path / "f.tivg", expected_dim=5)

    def test_zero_row_is_named(self):
        with pytest.raises(DataValidationError, match="row=1") as info:
            FeatureService.from_array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
        assert info.value.row == 1

    def test_nan_row_is_named(self):
        with pytest.raises(DataValidationError) as info:
            FeatureService.from_array([[1.0, 0.0], [1.0, 1.0], [np.nan, 1.0]])
        assert info.value.row == 2

    def test_normalize_three_four(self):
        store = FeatureService.l2_normalize(FeatureService.from_array([[3.0, 4.0]]))
        np.testing.assert_allclose(store.data[0], [0.6, 0.8], atol=1e-7)

    def test_normalize_is_idempotent(self):
        unit = FeatureService.l2_normalize(FeatureService.from_array([[0.6, 0.8], [1.0, 0.0]]))
        again = FeatureService.l2_normalize(unit)
        np.testing.assert_allclose(again.data, unit.data, atol=1e-6)

    def test_normalize_random_matrix(self, rng):
        store = FeatureService.l2_normalize(FeatureService.from_array(rng.standard_normal((100, 16))))
        norms = np.linalg.norm(store.data.astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)
        assert FeatureService.is_normalized(store)

    def test_store_is_read_only(self, rng):
        store = FeatureService.from_array(rng.standard_normal((2, 2)))
        with pytest.raises(ValueError):
            store.data[0, 0] = 1.0

    def test_meta_round_trip(self, tmp_path, make_nodes):
        meta = NodeMeta(tuple(make_nodes(4, tracks=[(0, 1), (2, 3)])))
        FeatureService.save_meta(meta, tmp_path / "meta.jsonl")
        assert FeatureService.load_meta(tmp_path / "meta.jsonl") == meta

    def test_meta_must_align_with_rows(self, make_nodes, rng):
        meta = NodeMeta(tuple(make_nodes(3)))
        store = FeatureService.from_array(rng.standard_normal((4, 2)))
        with pytest.raises(DataValidationError, match="метаданных 3"):
            FeatureService.attach(meta, store)
