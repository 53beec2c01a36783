import numpy as np
import pytest

from autofe.data import (
    Dataset,
    IngestionError,
    TargetColumnMissing,
    Task,
    from_arrays,
    infer_task,
    load_csv,
)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestInferTask:
    def test_few_integer_labels_is_classification(self):
        assert infer_task(np.array([0.0, 1.0, 2.0, 1.0])) is Task.CLASSIFICATION

    def test_continuous_is_regression(self):
        assert infer_task(np.array([0.1, 1.7, 2.0])) is Task.REGRESSION

    def test_many_integer_levels_is_regression(self):
        assert infer_task(np.arange(50.0)) is Task.REGRESSION


class TestFromArrays:
    def test_labels_remapped_dense(self):
        X = np.zeros((12, 2))
        X[:, 0] = np.arange(12)
        ds = from_arrays(X, np.array([3.0, 7.0, 3.0] * 4), Task.CLASSIFICATION)
        assert set(np.unique(ds.target)) == {0.0, 1.0}
        assert list(ds.class_labels) == [3.0, 7.0]
        assert ds.n_classes == 2

    def test_default_names(self):
        X = np.random.default_rng(0).normal(size=(15, 3))
        ds = from_arrays(X, X[:, 0], Task.REGRESSION)
        assert ds.feature_names == ["f0", "f1", "f2"]

    def test_too_few_rows_rejected(self):
        with pytest.raises(IngestionError):
            from_arrays(np.zeros((5, 2)), np.zeros(5), Task.REGRESSION)

    def test_nan_rejected(self):
        X = np.ones((12, 2))
        X[0, 0] = np.nan
        with pytest.raises(IngestionError):
            from_arrays(X, np.zeros(12), Task.REGRESSION)


CSV = "x,y label,target\n" + "\n".join(f"{i},{i % 3},{i % 2}" for i in range(20)) + "\n"


class TestLoadCsv:
    def test_basic_roundtrip(self, tmp_path):
        ds = load_csv(write(tmp_path, CSV), "target")
        assert ds.n_rows == 20
        assert ds.feature_names == ["x", "y_label"]  # sanitized
        assert ds.task is Task.CLASSIFICATION
        assert ds.target_name == "target"

    def test_missing_target_column(self, tmp_path):
        with pytest.raises(TargetColumnMissing):
            load_csv(write(tmp_path, CSV), "label")

    def test_missing_rows_dropped_and_counted(self, tmp_path):
        text = "a,b,t\n" + "\n".join(f"{i},{i},0" for i in range(12)) + "\n5,,1\nNA,3,1\n"
        ds = load_csv(write(tmp_path, text), "t")
        assert ds.n_rows == 12
        assert ds.dropped_rows == 2

    def test_string_column_label_encoded(self, tmp_path):
        text = "color,t\n" + "\n".join(
            f"{c},{i}" for i, c in enumerate(["red", "blue", "red", "green"] * 3)
        )
        ds = load_csv(write(tmp_path, text), "t", task="reg")
        # alphabetical coding: blue=0, green=1, red=2
        assert ds.columns[0, 0] == 2.0
        assert ds.columns[1, 0] == 0.0
        assert ds.columns[3, 0] == 1.0

    def test_forced_task_overrides_inference(self, tmp_path):
        ds = load_csv(write(tmp_path, CSV), "target", task="reg")
        assert ds.task is Task.REGRESSION

    def test_forced_classification_needs_integer_labels(self, tmp_path):
        text = "a,t\n" + "\n".join(f"{i},{i}.5" for i in range(12))
        with pytest.raises(IngestionError):
            load_csv(write(tmp_path, text), "t", task="clf")

    def test_ragged_row_rejected(self, tmp_path):
        text = "a,b,t\n1,2,0\n1,2\n"
        with pytest.raises(IngestionError):
            load_csv(write(tmp_path, text), "t")

    def test_empty_file_rejected(self, tmp_path):
        with pytest.raises(IngestionError):
            load_csv(write(tmp_path, ""), "t")

    def test_unknown_task_string_rejected(self, tmp_path):
        with pytest.raises(IngestionError):
            load_csv(write(tmp_path, CSV), "target", task="cluster")
