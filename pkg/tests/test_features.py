"""Unit tests for feature tables and their text format."""
import numpy as np
import pytest

from src.errors import DataError, ParseError, ShapeError
from src.features import (
    FeatureTable,
    ModalityFeatures,
    load_feature_table,
    media_features,
    save_feature_table,
)


@pytest.fixture
def table():
    rng = np.random.default_rng(0)
    return FeatureTable("ui", rng.normal(size=(6, 3)) * 1e-3, metadata={"k": 2, "method": "lightgcn"})


class TestFeatureTable:
    """In-memory table behaviour."""

    @pytest.mark.unit
    def test_rejects_one_dimensional(self):
        with pytest.raises(ShapeError):
            FeatureTable("media", np.zeros(4))

    @pytest.mark.unit
    def test_rejects_non_finite(self):
        with pytest.raises(ShapeError, match="non-finite"):
            FeatureTable("media", np.array([[0.0, np.nan]]))

    @pytest.mark.unit
    def test_rows_returns_requested_order(self, table):
        rows = table.rows([4, 1])
        np.testing.assert_array_equal(rows.numpy(), table.matrix[[4, 1]])

    @pytest.mark.unit
    def test_missing_row(self, table):
        with pytest.raises(DataError, match="no row"):
            table.rows([0, 6])

    @pytest.mark.unit
    def test_unknown_modality(self, table):
        features = ModalityFeatures(media=table, ui=table, bi=table)
        with pytest.raises(DataError, match="audio"):
            features.table("audio")

    @pytest.mark.unit
    def test_check_items_flags_short_table(self, table):
        features = ModalityFeatures(media=table, ui=table, bi=table)
        with pytest.raises(DataError, match="6 rows"):
            features.check_items(10)

    @pytest.mark.unit
    def test_media_features_mirror_world(self, small_world):
        media = media_features(small_world)
        assert media.matrix.shape == (small_world.n_items, small_world.gen_config.d_m)
        assert tuple(media.matrix[3]) == small_world.items[3].media_vec


class TestFeatureFile:
    """The `id,dim=<d>` text format."""

    @pytest.mark.unit
    def test_round_trip_is_bitwise_exact(self, table, tmp_path):
        path = save_feature_table(table, tmp_path / "ui.features")
        loaded = load_feature_table(path)
        assert np.array_equal(loaded.matrix, table.matrix)
        assert loaded.name == "ui"
        assert loaded.metadata == {"k": 2, "method": "lightgcn"}

    @pytest.mark.unit
    def test_header_line(self, table, tmp_path):
        path = save_feature_table(table, tmp_path / "ui.features")
        assert path.read_text().splitlines()[0] == "id,dim=3"

    @pytest.mark.unit
    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.features"
        path.write_text("0,1.0,2.0\n")
        with pytest.raises(ParseError) as excinfo:
            load_feature_table(path)
        assert excinfo.value.line == 1

    @pytest.mark.unit
    def test_wrong_column_count_names_line(self, tmp_path):
        path = tmp_path / "bad.features"
        path.write_text("id,dim=2\n0,1.0,2.0\n1,3.0\n")
        with pytest.raises(ParseError) as excinfo:
            load_feature_table(path)
        assert excinfo.value.line == 3

    @pytest.mark.unit
    def test_rows_out_of_order(self, tmp_path):
        path = tmp_path / "bad.features"
        path.write_text("id,dim=1\n1,0.5\n0,0.25\n")
        with pytest.raises(ParseError) as excinfo:
            load_feature_table(path)
        assert excinfo.value.field == "item_id"

    @pytest.mark.unit
    def test_bad_float(self, tmp_path):
        path = tmp_path / "bad.features"
        path.write_text("id,dim=1\n0,abc\n")
        with pytest.raises(ParseError, match="Bad value"):
            load_feature_table(path)
