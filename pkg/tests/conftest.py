import json
import os

import numpy as np
import pytest
import pytest_asyncio
from httpx import ASGITransport, AsyncClient

from app.services.data import (
    FeatureInfo,
    FeatureKindEnum,
    FeatureSchema,
    SchemaSpec,
    TabularDataset,
    apply_preprocessor,
    fit_preprocessor,
    load_csv,
)
from app.services.model import NaimConfig, init_parameters

TEST_KEY = "test-key"


@pytest.fixture(autouse=True, scope="session")
def set_test_env():
    """Set up test environment variables."""
    os.environ["MASTER_API_KEY"] = TEST_KEY
    os.environ.pop("PRODUCTION", None)
    os.environ.pop("NAIM_CHECKPOINT", None)
    os.environ.pop("LOG_TO_FILE", None)


@pytest_asyncio.fixture
async def async_client():
    """Create async test client."""
    from app.main import app

    transport = ASGITransport(app=app)
    async with AsyncClient(transport=transport, base_url="http://test") as client:
        yield client


@pytest.fixture
def valid_headers():
    """Valid API headers for testing."""
    return {"X-API-Key": TEST_KEY, "Content-Type": "application/json"}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mixed_schema():
    """Encoded schema: numerical, categorical(3), numerical, categorical(2)."""
    return FeatureSchema(
        features=(
            FeatureInfo("n0", FeatureKindEnum.numerical, 0),
            FeatureInfo("c1", FeatureKindEnum.categorical, 1, ("a", "b", "c")),
            FeatureInfo("n2", FeatureKindEnum.numerical, 2),
            FeatureInfo("c3", FeatureKindEnum.categorical, 3, ("x", "y")),
        ),
        class_names=("0", "1"),
    )


@pytest.fixture
def tiny_config():
    return NaimConfig(d_e=4, n_layers=2, n_heads=2, ff_dim=8, n_classes=2)


@pytest.fixture
def tiny_params(tiny_config, mixed_schema):
    return init_parameters(tiny_config, mixed_schema, seed=7)


@pytest.fixture
def random_batch(mixed_schema):
    """Factory for encoded (values, present) batches of the mixed schema."""

    def make(rng, n, missing_rate=0.3):
        values = np.empty((n, 4))
        values[:, 0] = rng.uniform(size=n)
        values[:, 1] = rng.integers(0, 3, size=n)
        values[:, 2] = rng.uniform(size=n)
        values[:, 3] = rng.integers(0, 2, size=n)
        present = rng.uniform(size=(n, 4)) >= missing_rate
        return values, present

    return make


def make_encoded_dataset(schema, values, present, labels):
    return TabularDataset(
        values=np.where(present, values, np.nan),
        present=np.asarray(present, dtype=bool),
        labels=np.asarray(labels, dtype=np.intp),
        schema=schema,
    )


@pytest.fixture
def separable_dataset(mixed_schema):
    """Factory: n encoded samples whose label is x0 + x2 > 1."""

    def make(n, seed=0, missing_rate=0.0):
        rng = np.random.default_rng(seed)
        values = np.column_stack(
            [rng.uniform(size=n), rng.integers(0, 3, size=n), rng.uniform(size=n), rng.integers(0, 2, size=n)]
        ).astype(float)
        labels = (values[:, 0] + values[:, 2] > 1.0).astype(int)
        present = rng.uniform(size=(n, 4)) >= missing_rate
        return make_encoded_dataset(mixed_schema, values, present, labels)

    return make


SCHEMA_DOC = {
    "label": {"name": "target", "classes": ["no", "yes"]},
    "features": [
        {"name": "x0", "kind": "numerical"},
        {"name": "x1", "kind": "numerical"},
        {"name": "color", "kind": "categorical"},
    ],
}


@pytest.fixture
def dataset_files(tmp_path):
    """Factory writing a raw CSV (with native missing cells) plus its schema JSON."""

    def write(n=60, seed=0, name="data"):
        rng = np.random.default_rng(seed)
        colors = np.array(["red", "green", "blue"])
        lines = ["x0,x1,color,target"]
        for i in range(n):
            x0, x1 = rng.uniform(0, 10, size=2)
            color = colors[rng.integers(0, 3)]
            label = "yes" if x0 + x1 + (3 if color == "red" else 0) > 10 else "no"
            if i % 3 == 0:
                label = "yes" if i % 2 else "no"
            cells = [f"{x0:.4f}", f"{x1:.4f}", color]
            if i % 7 == 1:
                cells[0] = "?"
            if i % 11 == 2:
                cells[2] = "NA"
            if i % 13 == 3:
                cells[1] = ""
            lines.append(",".join(cells + [label]))
        csv_path = tmp_path / f"{name}.csv"
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        schema_path = tmp_path / f"{name}.schema.json"
        schema_path.write_text(json.dumps(SCHEMA_DOC), encoding="utf-8")
        return csv_path, schema_path

    return write


@pytest.fixture
def served_model(dataset_files):
    """Untrained model + preprocessor over the dataset_files schema."""
    from app.routers.predict import ModelBundle

    csv_path, schema_path = dataset_files(n=40, seed=3)
    raw = load_csv(csv_path, SchemaSpec.from_file(schema_path))
    preprocessor = fit_preprocessor(raw)
    encoded = apply_preprocessor(preprocessor, raw)
    config = NaimConfig(d_e=4, n_layers=1, n_heads=2, ff_dim=8)
    params = init_parameters(config, encoded.schema, seed=0)
    return ModelBundle(params=params, preprocessor=preprocessor, source=str(csv_path))


@pytest.fixture
def override_model(served_model):
    """Serve ``served_model`` from the app for the duration of a test."""
    from app.main import app
    from app.routers.predict import get_bundle

    app.dependency_overrides[get_bundle] = lambda: served_model
    yield served_model
    app.dependency_overrides.pop(get_bundle, None)
