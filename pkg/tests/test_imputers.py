import itertools

import numpy as np
import pytest

from app.errors import ContractError, DataError
from app.services.data import SchemaSpec, apply_preprocessor, fit_preprocessor, load_csv
from app.services.imputers import (
    ImputerEnum,
    KnnImputerState,
    MeanImputerState,
    apply_imputer,
    apply_knn,
    apply_mean,
    fit_imputer,
    fit_knn,
    fit_mean,
    knn_distances,
)
from app.services.model import NaimConfig, init_parameters, predict_proba_batch

from .conftest import make_encoded_dataset

pytestmark = [pytest.mark.unit, pytest.mark.imputers]

NAN = np.nan


@pytest.fixture
def train_set(mixed_schema):
    values = np.array(
        [
            [0.2, 0.0, 0.1, 1.0],
            [0.4, 1.0, NAN, 1.0],
            [NAN, 1.0, 0.5, 0.0],
            [0.9, 2.0, 0.3, NAN],
        ]
    )
    present = ~np.isnan(values)
    return make_encoded_dataset(mixed_schema, np.nan_to_num(values), present, [0, 1, 1, 0])


class TestMeanImputer:
    def test_fill_values(self, train_set):
        """Numerical columns take the mean, categorical the mode."""
        state = fit_mean(train_set)
        np.testing.assert_allclose(state.fill, [0.5, 1.0, 0.3, 1.0])

    def test_mode_tie_goes_to_smallest_code(self, mixed_schema):
        """Equal counts resolve to the smaller code."""
        values = np.array([[0.1, 2.0, 0.1, 1.0], [0.2, 0.0, 0.2, 0.0]])
        state = fit_mean(make_encoded_dataset(mixed_schema, values, np.ones((2, 4), bool), [0, 1]))
        assert state.fill[1] == 0.0
        assert state.fill[3] == 0.0

    def test_fully_missing_column(self, mixed_schema):
        """A column never observed falls back to 0.5 (numerical) or code 0."""
        present = np.array([[False, False, True, True]] * 2)
        state = fit_mean(make_encoded_dataset(mixed_schema, np.ones((2, 4)), present, [0, 1]))
        assert state.fill[0] == 0.5
        assert state.fill[1] == 0.0

    def test_apply_fills_everything(self, train_set, mixed_schema):
        """Applied to a new split, all cells become present and observed cells stay."""
        state = fit_mean(train_set)
        values = np.array([[0.7, 2.0, 0.0, 0.0]])
        present = np.array([[True, False, False, True]])
        out = apply_mean(state, make_encoded_dataset(mixed_schema, values, present, [1]))
        assert out.present.all()
        np.testing.assert_allclose(out.values[0], [0.7, 1.0, 0.3, 0.0])

    def test_raw_dataset_rejected(self, train_set):
        """Imputers refuse datasets that still hold raw strings."""
        raw = np.full(train_set.values.shape, "", dtype=object)
        with pytest.raises(DataError):
            fit_mean(
                type(train_set)(
                    values=train_set.values,
                    present=train_set.present,
                    labels=train_set.labels,
                    schema=train_set.schema,
                    raw=raw,
                )
            )


class TestKnnImputer:
    def test_distance_over_shared_coordinates(self, train_set):
        """RMS over coordinates observed by both rows; categorical mismatch counts 1."""
        state = fit_knn(train_set, k=2)
        query = np.array([0.2, 1.0, 0.0, 1.0])
        present = np.array([True, True, False, True])
        d = knn_distances(state, query, present)
        # row 0 shares n0, c1, c3: diffs 0, mismatch, match
        assert d[0] == pytest.approx(np.sqrt(1.0 / 3.0))
        # row 2 shares c1, c3: match, mismatch
        assert d[2] == pytest.approx(np.sqrt(0.5))

    def test_no_shared_coordinate_is_infinite(self, train_set):
        state = fit_knn(train_set, k=1)
        d = knn_distances(state, np.zeros(4), np.array([False, False, False, False]))
        assert np.isinf(d).all()

    def test_nearest_neighbour_fill(self, train_set, mixed_schema):
        """k=1 copies the closest training row that observes the cell."""
        state = fit_knn(train_set, k=1)
        values = np.array([[0.41, 1.0, 0.0, 1.0]])
        present = np.array([[True, True, False, True]])
        out = apply_knn(state, make_encoded_dataset(mixed_schema, values, present, [0]))
        # row 1 is closest but lacks n2; the next closest observing it is row 0
        assert out.present.all()
        assert out.values[0, 2] == pytest.approx(0.1)
        np.testing.assert_array_equal(out.values[0, [0, 1, 3]], [0.41, 1.0, 1.0])

    def test_categorical_uses_mode(self, mixed_schema):
        """Categorical cells take the mode of the neighbours."""
        values = np.array([[0.1, 2.0, 0.1, 0.0], [0.1, 2.0, 0.1, 0.0], [0.1, 1.0, 0.1, 0.0], [0.9, 0.0, 0.9, 1.0]])
        train = make_encoded_dataset(mixed_schema, values, np.ones((4, 4), bool), [0, 0, 0, 1])
        state = fit_knn(train, k=3)
        query = make_encoded_dataset(
            mixed_schema, np.array([[0.1, 0.0, 0.1, 0.0]]), np.array([[True, False, True, True]]), [0]
        )
        assert apply_knn(state, query).values[0, 1] == 2.0

    def test_fallback_when_nobody_observes(self, mixed_schema):
        """With no usable neighbour the cell falls back to the training mean."""
        values = np.array([[0.2, 0.0, 0.0, 1.0], [0.6, 1.0, 0.0, 0.0]])
        present = np.array([[True, True, False, True], [True, True, False, True]])
        state = fit_knn(make_encoded_dataset(mixed_schema, values, present, [0, 1]), k=2)
        query = make_encoded_dataset(mixed_schema, np.zeros((1, 4)), np.array([[True, True, False, True]]), [0])
        assert apply_knn(state, query).values[0, 2] == 0.5

    def test_k_out_of_range(self, train_set):
        with pytest.raises(ContractError):
            fit_knn(train_set, k=0)
        with pytest.raises(ContractError):
            fit_knn(train_set, k=5)

    def test_complete_rows_untouched(self, train_set, separable_dataset):
        """Rows without missing cells pass through unchanged."""
        state = fit_knn(train_set, k=2)
        d = separable_dataset(20, seed=1)
        np.testing.assert_array_equal(apply_knn(state, d).values, d.values)


class TestDispatch:
    def test_fit_imputer_kinds(self, train_set):
        assert isinstance(fit_imputer(ImputerEnum.mean, train_set), MeanImputerState)
        state = fit_imputer(ImputerEnum.knn, train_set, k=50)
        assert isinstance(state, KnnImputerState)
        assert state.k == len(train_set)

    def test_no_missing_left(self, train_set, separable_dataset):
        """Either imputer leaves a dataset with nothing missing."""
        d = separable_dataset(30, seed=2, missing_rate=0.3)
        for kind in ImputerEnum:
            out = apply_imputer(fit_imputer(kind, train_set, k=3), d)
            assert out.missing_count == 0
            assert np.isfinite(out.values).all()

    def test_never_observed_categorical_stays_missing(self, tmp_path):
        """A categorical column with an empty table stays missing and the model still scores it."""
        csv_path = tmp_path / "blank.csv"
        csv_path.write_text("a,c,y\n0.1,,0\n0.7,?,1\n0.4,,0\n0.9,NA,1\n", encoding="utf-8")
        spec = SchemaSpec.model_validate(
            {"label": {"classes": ["0", "1"]}, "features": [{"name": "a", "kind": "numerical"}, {"name": "c", "kind": "categorical"}]}
        )
        raw = load_csv(csv_path, spec)
        encoded = apply_preprocessor(fit_preprocessor(raw), raw)
        assert encoded.schema.features[1].k == 0
        params = init_parameters(NaimConfig(d_e=4, n_layers=1, n_heads=2, ff_dim=8), encoded.schema, seed=0)
        for kind in ImputerEnum:
            out = apply_imputer(fit_imputer(kind, encoded, k=2), encoded)
            assert out.present[:, 0].all()
            assert not out.present[:, 1].any()
            proba = predict_proba_batch(params, out.values, out.present)
            assert proba.shape == (4, 2)
            np.testing.assert_allclose(proba.sum(axis=1), 1.0)


class TestKnnProperties:
    def test_exact_match_copies_row(self, mixed_schema):
        """A query equal to a complete training row takes that row's values with k=1."""
        values = np.array([[0.3, 1.0, 0.7, 0.0], [0.9, 2.0, 0.1, 1.0], [0.5, 0.0, 0.5, 1.0]])
        state = fit_knn(make_encoded_dataset(mixed_schema, values, np.ones((3, 4), bool), [0, 1, 0]), k=1)
        present = np.array([[True, False, True, False]])
        out = apply_knn(state, make_encoded_dataset(mixed_schema, values[[1]], present, [1]))
        np.testing.assert_array_equal(out.values[0], values[1])

    def test_full_k_matches_mean_on_numerical(self, separable_dataset):
        """With k equal to the training size and complete training data, numerical fills equal the means."""
        train = separable_dataset(12, seed=3)
        query = separable_dataset(6, seed=4, missing_rate=0.5)
        knn = apply_knn(fit_knn(train, k=len(train)), query)
        mean = apply_mean(fit_mean(train), query)
        for col in (0, 2):
            np.testing.assert_allclose(knn.values[:, col], mean.values[:, col], atol=1e-12)

    def test_brute_force_neighbours(self, mixed_schema):
        """k=2 fill equals the mean of the two closest rows found by exhaustive search."""
        rng = np.random.default_rng(7)
        values = np.column_stack(
            [rng.uniform(size=5), rng.integers(0, 3, size=5), rng.uniform(size=5), rng.integers(0, 2, size=5)]
        ).astype(float)
        state = fit_knn(make_encoded_dataset(mixed_schema, values, np.ones((5, 4), bool), [0, 1, 0, 1, 0]), k=2)
        query = np.array([0.5, 1.0, 0.0, 0.0])
        present = np.array([True, True, False, True])
        out = apply_knn(state, make_encoded_dataset(mixed_schema, query[None, :], present[None, :], [0]))

        def distance(row):
            terms = [(row[0] - query[0]) ** 2, float(row[1] != query[1]), float(row[3] != query[3])]
            return np.sqrt(np.mean(terms))

        best = min(
            itertools.combinations(range(5), 2),
            key=lambda pair: (sum(distance(values[i]) for i in pair), pair),
        )
        assert out.values[0, 2] == pytest.approx(values[list(best), 2].mean())
