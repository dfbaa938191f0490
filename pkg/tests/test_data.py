import json

import numpy as np
import pytest

from app.errors import DataError, ParseError, SchemaError, SplitError
from app.services.data import (
    FeatureSchema,
    SchemaSpec,
    TabularDataset,
    apply_preprocessor,
    dataset_from_records,
    fit_preprocessor,
    label_column,
    load_csv,
    restore_raw,
    stratified_kfold,
)

pytestmark = [pytest.mark.unit, pytest.mark.data]

NUM_NUM_CAT = {
    "label": {"classes": ["0", "1"]},
    "features": [
        {"name": "a", "kind": "numerical"},
        {"name": "b", "kind": "numerical"},
        {"name": "c", "kind": "categorical"},
    ],
}


@pytest.fixture
def write(tmp_path):
    def _write(text, schema=NUM_NUM_CAT):
        csv_path = tmp_path / "d.csv"
        csv_path.write_text(text, encoding="utf-8")
        return csv_path, SchemaSpec.model_validate(schema)

    return _write


class TestLoadCsv:
    """CSV ingestion and the missing sentinels."""

    def test_empty_cell_is_missing(self, write):
        """An empty numerical cell is missing; the rest is present."""
        path, spec = write("a,b,c,label\n1.5,,red,0\n")
        d = load_csv(path, spec)
        np.testing.assert_array_equal(d.present, [[True, False, True]])
        assert d.values[0, 0] == 1.5
        assert d.raw[0, 2] == "red"
        assert d.labels.tolist() == [0]

    def test_na_and_question_mark_are_missing(self, write):
        """'NA' and '?' are missing in both kinds of column."""
        path, spec = write("a,b,c,label\nNA,2,?,1\n ? , 3 , blue ,0\n")
        d = load_csv(path, spec)
        np.testing.assert_array_equal(d.present, [[False, True, False], [False, True, True]])
        assert d.raw[1, 2] == "blue"

    def test_unknown_header(self, write):
        """A header naming an unknown column is a schema error."""
        path, spec = write("a,b,zzz,label\n1,2,red,0\n")
        with pytest.raises(SchemaError):
            load_csv(path, spec)

    def test_header_only(self, write):
        """A header-only file is a valid empty dataset."""
        path, spec = write("a,b,c,label\n")
        d = load_csv(path, spec)
        assert len(d) == 0
        assert d.values.shape == (0, 3)

    def test_unparseable_number_reports_line(self, write):
        """Bad numerics raise a parse error carrying the file line."""
        path, spec = write("a,b,c,label\n1,2,red,0\n1,oops,red,1\n")
        with pytest.raises(ParseError) as exc:
            load_csv(path, spec)
        assert exc.value.line == 3

    def test_missing_label_is_fatal(self, write):
        """A row without a label is rejected."""
        path, spec = write("a,b,c,label\n1,2,red,\n")
        with pytest.raises(ParseError):
            load_csv(path, spec)

    def test_named_label_column(self, write):
        """A named label column may sit anywhere."""
        schema = dict(NUM_NUM_CAT, label={"name": "y", "classes": ["n", "p"]})
        path, spec = write("y,a,b,c\np,1,2,red\nn,3,4,blue\n", schema)
        d = load_csv(path, spec)
        assert d.labels.tolist() == [1, 0]
        assert d.values[1, 1] == 4.0

    def test_schema_file_validation(self, tmp_path):
        """Duplicate feature names in a schema file are rejected."""
        doc = {"label": {"classes": ["0", "1"]}, "features": [{"name": "a", "kind": "numerical"}] * 2}
        path = tmp_path / "s.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError):
            SchemaSpec.from_file(path)

    def test_missing_file(self, tmp_path):
        """A missing data file is a data error."""
        with pytest.raises(DataError):
            load_csv(tmp_path / "nope.csv", SchemaSpec.model_validate(NUM_NUM_CAT))


class TestPreprocessor:
    """Min-max scaling and categorical coding fitted on observed cells."""

    def test_range_over_observed(self, write):
        """min/max ignore missing cells."""
        path, spec = write("a,b,c,label\n2,1,red,0\n4,?,blue,1\n10,1,red,0\n?,1,red,1\n")
        p = fit_preprocessor(load_csv(path, spec))
        assert (p.ranges[0].low, p.ranges[0].high) == (2.0, 10.0)

    def test_sorted_category_codes(self, write):
        """Category codes follow lexicographic label order."""
        path, spec = write("a,b,c,label\n1,1,red,0\n2,2,blue,1\n3,3,red,0\n")
        p = fit_preprocessor(load_csv(path, spec))
        assert p.tables[2] == ("blue", "red")
        encoded = apply_preprocessor(p, load_csv(path, spec))
        assert encoded.values[:, 2].tolist() == [1.0, 0.0, 1.0]
        assert encoded.schema.features[2].k == 2

    def test_scaling_and_clamping(self, write, tmp_path):
        """(x - min) / (max - min), clamped for test values out of range."""
        path, spec = write("a,b,c,label\n2,0,red,0\n10,1,blue,1\n")
        p = fit_preprocessor(load_csv(path, spec))
        test_path = tmp_path / "t.csv"
        test_path.write_text("a,b,c,label\n4,0.5,red,0\n12,-3,red,1\n", encoding="utf-8")
        encoded = apply_preprocessor(p, load_csv(test_path, spec))
        assert encoded.values[0, 0] == 0.25
        assert encoded.values[1, 0] == 1.0
        assert encoded.values[1, 1] == 0.0

    def test_unseen_category_becomes_missing(self, write, tmp_path):
        """Labels absent from training data map to the missing state."""
        path, spec = write("a,b,c,label\n1,1,red,0\n2,2,blue,1\n")
        p = fit_preprocessor(load_csv(path, spec))
        test_path = tmp_path / "t.csv"
        test_path.write_text("a,b,c,label\n1,1,green,0\n", encoding="utf-8")
        encoded = apply_preprocessor(p, load_csv(test_path, spec))
        assert not encoded.present[0, 2]
        assert encoded.present[0, :2].all()

    def test_fully_missing_column_maps_to_half(self, write, tmp_path):
        """A column never observed in training has a degenerate range; values map to 0.5."""
        path, spec = write("a,b,c,label\n1,?,red,0\n2,,blue,1\n")
        p = fit_preprocessor(load_csv(path, spec))
        assert p.ranges[1].degenerate
        test_path = tmp_path / "t.csv"
        test_path.write_text("a,b,c,label\n1,7,red,0\n", encoding="utf-8")
        assert apply_preprocessor(p, load_csv(test_path, spec)).values[0, 1] == 0.5

    def test_present_grid_preserved(self, dataset_files):
        """Applying a fitted preprocessor keeps the present grid (no unseen labels here)."""
        csv_path, schema_path = dataset_files(n=50)
        raw = load_csv(csv_path, SchemaSpec.from_file(schema_path))
        encoded = apply_preprocessor(fit_preprocessor(raw), raw)
        np.testing.assert_array_equal(encoded.present, raw.present)
        observed = encoded.values[:, :2][encoded.present[:, :2]]
        assert observed.min() >= 0.0 and observed.max() <= 1.0

    def test_apply_twice_is_rejected(self, dataset_files):
        """An encoded dataset cannot be preprocessed again."""
        csv_path, schema_path = dataset_files(n=20)
        raw = load_csv(csv_path, SchemaSpec.from_file(schema_path))
        p = fit_preprocessor(raw)
        with pytest.raises(DataError):
            apply_preprocessor(p, apply_preprocessor(p, raw))

    def test_serialisation_round_trip(self, dataset_files):
        """A preprocessor survives to_dict/from_dict."""
        csv_path, schema_path = dataset_files(n=20)
        raw = load_csv(csv_path, SchemaSpec.from_file(schema_path))
        p = fit_preprocessor(raw)
        restored = type(p).from_dict(json.loads(json.dumps(p.to_dict())))
        np.testing.assert_array_equal(apply_preprocessor(restored, raw).values, apply_preprocessor(p, raw).values)

    def test_restore_raw_inverts_scaling(self, write):
        """restore_raw maps codes and scaled values back to original units."""
        path, spec = write("a,b,c,label\n2,5,red,0\n10,7,blue,1\n")
        raw = load_csv(path, spec)
        p = fit_preprocessor(raw)
        frame = restore_raw(p, apply_preprocessor(p, raw))
        assert frame["a"].tolist() == [2.0, 10.0]
        assert frame["c"].tolist() == ["red", "blue"]

    def test_explicit_categories_keep_given_order(self, write):
        """Explicit categories are coded in the order listed, not sorted."""
        schema = json.loads(json.dumps(NUM_NUM_CAT))
        schema["features"][2]["categories"] = ["red", "blue"]
        path, spec = write("a,b,c,label\n1,2,blue,0\n3,4,red,1\n", schema)
        raw = load_csv(path, spec)
        p = fit_preprocessor(raw)
        assert p.tables[2] == ("red", "blue")
        assert apply_preprocessor(p, raw).values[:, 2].tolist() == [1.0, 0.0]

    def test_restore_raw_never_observed_numerical(self, write):
        """A numerical column never observed in fitting is written on the unit scale."""
        path, spec = write("a,b,c,label\n1,,red,0\n2,NA,blue,1\n")
        raw = load_csv(path, spec)
        p = fit_preprocessor(raw)
        encoded = apply_preprocessor(p, raw)
        filled = TabularDataset(
            values=np.where(encoded.present, encoded.values, 0.5),
            present=np.ones_like(encoded.present),
            labels=encoded.labels,
            schema=encoded.schema,
        )
        frame = restore_raw(p, filled)
        assert frame["b"].tolist() == [0.5, 0.5]

    def test_label_column_from_header(self, write):
        """Without label.name the last header column names the label."""
        path, spec = write("a,b,c,y\n1,2,red,0\n")
        schema = FeatureSchema.from_spec(spec)
        assert label_column(path, schema) == "y"
        raw = load_csv(path, spec)
        p = fit_preprocessor(raw)
        frame = restore_raw(p, apply_preprocessor(p, raw), label_column(path, schema))
        assert list(frame.columns) == ["a", "b", "c", "y"]

    def test_records_to_dataset(self, dataset_files):
        """API-style records become an unencoded dataset; None is missing."""
        csv_path, schema_path = dataset_files(n=10)
        schema = FeatureSchema.from_spec(SchemaSpec.from_file(schema_path))
        d = dataset_from_records([{"x0": 1.0, "x1": None, "color": "red"}, {"x0": "?"}], schema)
        np.testing.assert_array_equal(d.present, [[True, False, True], [False, False, False]])

    def test_records_with_unknown_feature(self, dataset_files):
        """Unknown keys in records are a schema error."""
        _, schema_path = dataset_files(n=10)
        schema = FeatureSchema.from_spec(SchemaSpec.from_file(schema_path))
        with pytest.raises(SchemaError):
            dataset_from_records([{"bogus": 1}], schema)


class TestStratifiedKFold:
    """Stratified folds with a validation carve-out."""

    def test_one_of_each_class_per_fold(self):
        """10 samples, 5/5 classes, k=5: each test fold holds one of each."""
        labels = np.array([0] * 5 + [1] * 5)
        plan = stratified_kfold(labels, 5, seed=3)
        for fold in plan.folds:
            assert sorted(labels[fold.test].tolist()) == [0, 1]

    def test_deterministic(self):
        """Same seed, same plan."""
        labels = np.random.default_rng(0).integers(0, 2, size=100)
        a, b = stratified_kfold(labels, 5, seed=11), stratified_kfold(labels, 5, seed=11)
        for fa, fb in zip(a.folds, b.folds):
            np.testing.assert_array_equal(fa.test, fb.test)
            np.testing.assert_array_equal(fa.validation, fb.validation)

    def test_partition_and_disjointness(self):
        """Test folds partition the data; train, validation and test are disjoint."""
        labels = np.random.default_rng(1).integers(0, 3, size=97)
        plan = stratified_kfold(labels, 5, seed=0)
        all_test = np.sort(np.concatenate([f.test for f in plan.folds]))
        np.testing.assert_array_equal(all_test, np.arange(97))
        for f in plan.folds:
            assert not set(f.train) & set(f.validation)
            assert not set(f.train) & set(f.test)
            assert not set(f.validation) & set(f.test)
            assert len(f.train) + len(f.validation) + len(f.test) == 97

    def test_adult_shaped_stratification(self):
        """37155/11687 split into 5 folds stays within one sample of the ideal counts."""
        labels = np.array([0] * 37155 + [1] * 11687)
        plan = stratified_kfold(labels, 5, seed=0)
        for f in plan.folds:
            assert abs((labels[f.test] == 0).sum() - 37155 / 5) <= 1
            assert abs((labels[f.test] == 1).sum() - 11687 / 5) <= 1

    def test_validation_is_a_fifth_per_class(self):
        """The validation carve-out is 20% of each class in the training part."""
        labels = np.array([0] * 50 + [1] * 50)
        plan = stratified_kfold(labels, 5, seed=0)
        f = plan.folds[0]
        assert (labels[f.validation] == 0).sum() == 8
        assert (labels[f.validation] == 1).sum() == 8

    def test_small_class(self):
        """A class smaller than k cannot be stratified."""
        with pytest.raises(SplitError):
            stratified_kfold(np.array([0] * 10 + [1] * 3), 5, seed=0)
