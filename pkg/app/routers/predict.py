import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Union

from fastapi import APIRouter, Body, Depends, HTTPException
from pydantic import BaseModel, Field

from app.errors import DataError, ModelInputError, NaimError
from app.services.checkpoint import load_checkpoint
from app.services.data import Preprocessor, apply_preprocessor, dataset_from_records
from app.services.model import NaimParameters, predict_proba_batch
from app.settings import checkpoint_path

logger = logging.getLogger(__name__)
router = APIRouter()
metadata_router = APIRouter(prefix="/api/v1/metadata/model", tags=["Model Metadata"])

CellValue = Optional[Union[float, str]]


@dataclass(frozen=True)
class ModelBundle:
    params: NaimParameters
    preprocessor: Preprocessor
    source: str


@lru_cache(maxsize=4)
def load_bundle(path: str) -> ModelBundle:
    params, preprocessor = load_checkpoint(path)
    if preprocessor is None:
        raise DataError(f"checkpoint {path} has no preprocessor and cannot score raw rows")
    return ModelBundle(params=params, preprocessor=preprocessor, source=path)


def get_bundle() -> ModelBundle:
    """Model served by this process, loaded once from NAIM_CHECKPOINT."""
    path = checkpoint_path()
    if not path:
        raise HTTPException(
            status_code=503,
            detail={"error": "No model loaded", "message": "Set NAIM_CHECKPOINT to a trained checkpoint"},
        )
    try:
        return load_bundle(path)
    except NaimError as e:
        logger.error(f"❌ Could not load checkpoint {path}: {e.message}")
        raise HTTPException(status_code=503, detail=e.detail)


class PredictRequest(BaseModel):
    rows: List[Dict[str, CellValue]] = Field(
        ...,
        min_length=1,
        max_length=1000,
        description="Raw feature values per row; null, absent keys, '', 'NA' and '?' are missing",
    )


class RowPrediction(BaseModel):
    predicted_class: str
    probabilities: Dict[str, float]
    missing_features: List[str] = Field(default_factory=list)


class PredictResponse(BaseModel):
    predictions: List[RowPrediction]
    model_features: int


@router.post("/predict", response_model=PredictResponse, tags=["Prediction"])
async def predict(
    request: PredictRequest = Body(..., description="Rows to score"),
    bundle: ModelBundle = Depends(get_bundle),
):
    """
    🔮 Class probabilities for raw tabular rows

    Missing values are not imputed: they are routed to the model's padding
    embeddings and masked out of attention.
    """
    schema = bundle.params.schema
    try:
        raw = dataset_from_records(request.rows, bundle.preprocessor.schema)
        encoded = apply_preprocessor(bundle.preprocessor, raw)
        probs = predict_proba_batch(bundle.params, encoded.values, encoded.present)
    except (DataError, ModelInputError) as e:
        logger.warning(f"⚠️ Rejected prediction request: {e.message}")
        raise HTTPException(status_code=422, detail=e.detail)

    if os.getenv("PRODUCTION"):
        logger.info(f"Scored {len(request.rows)} rows")
    else:
        logger.debug(f"Scored {len(request.rows)} rows, {int((~encoded.present).sum())} missing cells")

    predictions = [
        RowPrediction(
            predicted_class=schema.class_names[int(row.argmax())],
            probabilities={name: float(p) for name, p in zip(schema.class_names, row)},
            missing_features=[f.name for f in schema.features if not encoded.present[i, f.index]],
        )
        for i, row in enumerate(probs)
    ]
    return PredictResponse(predictions=predictions, model_features=schema.n_features)


@metadata_router.get("/features")
async def model_features(bundle: ModelBundle = Depends(get_bundle)):
    return {
        "features": [
            {
                "name": f.name,
                "kind": f.kind.value,
                **({"categories": list(f.categories)} if f.is_categorical else {}),
            }
            for f in bundle.params.schema.features
        ]
    }


@metadata_router.get("/classes")
async def model_classes(bundle: ModelBundle = Depends(get_bundle)):
    return {"classes": list(bundle.params.schema.class_names)}
