"""Single-file model checkpoints (.npz).

Entries: ``format_version``, ``config`` (JSON: model config and schema), one
little-endian float64 array per parameter in full table shape (padding rows stored as
zeros), and optionally ``preprocessor`` (JSON).
"""

import json
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from app.errors import DataError, SchemaError
from app.services.data import FeatureSchema, Preprocessor
from app.services.model import NaimConfig, NaimParameters, categorical_table, numerical_row

logger = logging.getLogger(__name__)

FORMAT_VERSION = "naim-ckpt-1"
PARAM_PREFIX = "param:"


def _table_names(schema: FeatureSchema) -> Dict[str, int]:
    return {
        (categorical_table(f.index) if f.is_categorical else numerical_row(f.index)): f.index
        for f in schema.features
    }


def save_checkpoint(
    path: Union[str, Path], params: NaimParameters, preprocessor: Optional[Preprocessor] = None
) -> Path:
    path = Path(path)
    tables = _table_names(params.schema)
    entries = {
        "format_version": np.array(FORMAT_VERSION),
        "config": np.array(json.dumps({"model": params.config.model_dump(), "schema": params.schema.to_dict()})),
    }
    for name, array in params.arrays.items():
        full = params.full_table(tables[name]) if name in tables else array
        entries[PARAM_PREFIX + name] = np.ascontiguousarray(full, dtype="<f8")
    if preprocessor is not None:
        entries["preprocessor"] = np.array(json.dumps(preprocessor.to_dict()))

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **entries)
    tmp.replace(path)
    logger.info(f"💾 Saved checkpoint with {params.n_parameters} parameters to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[NaimParameters, Optional[Preprocessor]]:
    try:
        archive = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}")
    except (OSError, ValueError) as e:
        raise DataError(f"unreadable checkpoint {path}: {e}")

    with archive:
        version = str(archive["format_version"]) if "format_version" in archive.files else None
        if version != FORMAT_VERSION:
            raise SchemaError(f"unsupported checkpoint format {version!r}", expected=FORMAT_VERSION)
        header = json.loads(str(archive["config"]))
        config = NaimConfig.model_validate(header["model"])
        schema = FeatureSchema.from_dict(header["schema"])
        tables = _table_names(schema)

        arrays: Dict[str, np.ndarray] = {}
        for key in archive.files:
            if not key.startswith(PARAM_PREFIX):
                continue
            name = key[len(PARAM_PREFIX):]
            array = np.array(archive[key], dtype=np.float64)
            if name in tables:
                if array.shape[0] == 0 or np.any(array[-1] != 0.0):
                    raise SchemaError(f"padding row of '{name}' is not zero")
                array = array[:-1].copy()
            arrays[name] = array
        preprocessor = None
        if "preprocessor" in archive.files:
            preprocessor = Preprocessor.from_dict(json.loads(str(archive["preprocessor"])))

    logger.info(f"📦 Loaded checkpoint {path} ({len(arrays)} arrays)")
    return NaimParameters(config=config, schema=schema, arrays=arrays), preprocessor
