"""Tests fuer Laden, Validierung und Positivitaets-Diagnostik."""

from __future__ import annotations

import numpy as np
import pytest

from decomposer.data import (
    ColumnSchema,
    dataset_from_arrays,
    empirical_variance,
    load_dataset,
    positivity_report,
    write_dataset,
    write_label_map,
)
from decomposer.errors import DataError


def _write_csv(path, text: str):
    path.write_text(text, encoding="utf-8")
    return path


class TestDatasetFromArrays:
    def test_relabels_numeric_labels_in_numeric_order(self):
        d = dataset_from_arrays(
            y=[0, 1, 1, 0, 1],
            hospital_labels=["10", "2", "2", "10", "2"],
            surgeon_labels=["7", "3", "5", "7", "3"],
            X=np.zeros((5, 0)),
        )
        assert d.hospital.tolist() == [2, 1, 1, 2, 1]
        assert d.surgeon.tolist() == [1, 1, 2, 1, 1]
        assert d.hierarchy.surgeons_per_hospital == (2, 1)
        assert d.label_map == (("2", "3", 1, 1), ("2", "5", 1, 2), ("10", "7", 2, 1))

    def test_strict_ids_reject_gaps(self):
        with pytest.raises(DataError, match="zusammenhaengenden"):
            dataset_from_arrays(
                y=[0, 1, 1],
                hospital_labels=[1, 3, 3],
                surgeon_labels=[1, 1, 2],
                X=np.zeros((3, 0)),
                relabel=False,
            )

    def test_strict_ids_accept_dense_ids(self):
        d = dataset_from_arrays(
            y=[0, 1, 1],
            hospital_labels=[1, 2, 2],
            surgeon_labels=[1, 1, 2],
            X=np.zeros((3, 0)),
            relabel=False,
        )
        assert d.hierarchy.surgeons_per_hospital == (1, 2)
        assert d.cell.tolist() == [0, 1, 2]

    def test_binary_outcome_out_of_range(self):
        with pytest.raises(DataError, match="outcome out of range"):
            dataset_from_arrays(
                y=[0.0, 2.0],
                hospital_labels=[1, 1],
                surgeon_labels=[1, 1],
                X=np.zeros((2, 1)),
                outcome_kind="binary",
            )

    def test_outcome_kind_inferred(self):
        binary = dataset_from_arrays([0, 1, 1], [1, 1, 1], [1, 1, 1], np.zeros((3, 1)))
        continuous = dataset_from_arrays([0.5, 1, 1], [1, 1, 1], [1, 1, 1], np.zeros((3, 1)))
        assert binary.outcome_kind == "binary"
        assert continuous.outcome_kind == "continuous"

    def test_non_finite_values_rejected(self):
        with pytest.raises(DataError):
            dataset_from_arrays([0.0, np.nan], [1, 1], [1, 1], np.zeros((2, 1)))

    def test_records_are_one_based(self):
        d = dataset_from_arrays([1.5, 2.5], ["a", "b"], ["x", "y"], np.array([[1.0], [2.0]]))
        records = d.records
        assert (records[1].z, records[1].s, records[1].x) == (2, 1, (2.0,))


class TestLoadDataset:
    def test_loads_standard_header(self, tmp_path):
        path = _write_csv(
            tmp_path / "data.csv",
            "id,hospital,surgeon,y,age,sex\n"
            "p1,A,s1,1,0.5,1\n"
            "p2,A,s2,0,-1.0,0\n"
            "p3,B,s1,1,2.0,1\n",
        )
        d = load_dataset(path)
        assert d.n == 3
        assert d.covariate_names == ("age", "sex")
        assert d.outcome_kind == "binary"
        assert d.ids == ("p1", "p2", "p3")
        assert d.hierarchy.surgeons_per_hospital == (2, 1)
        np.testing.assert_array_equal(d.X[:, 0], [0.5, -1.0, 2.0])

    def test_custom_schema_and_covariate_subset(self, tmp_path):
        path = _write_csv(
            tmp_path / "data.csv",
            "klinik,arzt,ergebnis,age,sex\n"
            "1,1,0.2,50,1\n"
            "1,2,1.7,60,0\n",
        )
        schema = ColumnSchema(hospital="klinik", surgeon="arzt", y="ergebnis", covariates=("age",))
        d = load_dataset(path, schema)
        assert d.covariate_names == ("age",)
        assert d.outcome_kind == "continuous"
        assert d.ids == ("1", "2")

    def test_unknown_column(self, tmp_path):
        path = _write_csv(tmp_path / "data.csv", "id,hospital,y\n1,1,0\n")
        with pytest.raises(DataError, match="Unbekannte Spalte"):
            load_dataset(path)

    def test_missing_value(self, tmp_path):
        path = _write_csv(tmp_path / "data.csv", "id,hospital,surgeon,y,x1\n1,1,1,0,\n2,1,1,1,0.5\n")
        with pytest.raises(DataError, match="Fehlende Werte"):
            load_dataset(path)

    def test_non_numeric_covariate(self, tmp_path):
        path = _write_csv(tmp_path / "data.csv", "id,hospital,surgeon,y,x1\n1,1,1,0,abc\n")
        with pytest.raises(DataError, match="Nicht-numerischer"):
            load_dataset(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "fehlt.csv")

    def test_written_dataset_loads_back(self, tmp_path, continuous_data):
        path = write_dataset(continuous_data, tmp_path / "out.csv")
        loaded = load_dataset(path)
        np.testing.assert_array_equal(loaded.y, continuous_data.y)
        np.testing.assert_array_equal(loaded.X, continuous_data.X)
        assert loaded.hierarchy == continuous_data.hierarchy
        assert path.read_text(encoding="utf-8").splitlines()[0] == "id,hospital,surgeon,y,x1"


class TestEmpiricalVariance:
    def test_sample_variance(self, continuous_data):
        assert empirical_variance(continuous_data) == pytest.approx(np.var(continuous_data.y, ddof=1))

    def test_needs_two_records(self):
        d = dataset_from_arrays([1.0], [1], [1], np.zeros((1, 0)))
        with pytest.raises(DataError):
            empirical_variance(d)


class TestPositivityReport:
    def test_flags_low_volume_and_empty_strata(self, caplog):
        d = dataset_from_arrays(
            y=[0, 1, 0, 1, 1],
            hospital_labels=[1, 1, 1, 1, 2],
            surgeon_labels=[1, 1, 2, 2, 1],
            X=np.array([[0.0], [1.0], [0.0], [0.0], [1.0]]),
        )
        with caplog.at_level("WARNING"):
            report = positivity_report(d, min_count=2)
        assert report["count"].tolist() == [2, 2, 1]
        assert report["n[x1=0]"].tolist() == [1, 2, 0]
        assert report["flags"].tolist() == ["", "x1=1", "low_volume;x1=0"]
        assert "2 von 3 Zellen markiert" in caplog.text

    def test_label_map_written(self, tmp_path):
        d = dataset_from_arrays([0, 1], ["B", "A"], ["s", "t"], np.zeros((2, 0)))
        path = write_label_map(d, tmp_path / "labels.csv")
        assert path.read_text(encoding="utf-8").splitlines() == [
            "hospital_label,surgeon_label,hospital,surgeon",
            "A,t,1,1",
            "B,s,2,1",
        ]
