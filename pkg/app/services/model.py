"""The NAIM network.

Every feature is a token. Missing features map to an all-zero padding embedding, the
attention softmax ignores missing columns, and the rows of missing tokens are zeroed
after the softmax, so missing entries neither attend nor get attended to.

Parameters are plain numpy arrays keyed by name. A forward pass binds them to tensors
(watched on a tape when gradients are needed).
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.errors import EmbeddingIndexError, ModelInputError, SchemaError
from app.services import tensor as T
from app.services.data import FeatureSchema
from app.services.tensor import Tape, Tensor

logger = logging.getLogger(__name__)


class NaimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    d_e: int = Field(6, gt=0, description="Embedding dimension")
    n_layers: int = Field(6, gt=0, description="Encoder layers")
    n_heads: int = Field(3, gt=0, description="Attention heads per layer")
    ff_dim: int = Field(1000, gt=0, description="Feed-forward width")
    use_embedding_bias: bool = Field(False, description="Add a per-feature bias to every embedding")
    n_classes: int = Field(2, ge=2, description="Number of classes")
    layer_norm_eps: float = Field(1e-5, gt=0.0)

    @model_validator(mode="after")
    def heads_divide_embedding(self):
        if self.d_e % self.n_heads:
            raise ValueError(f"d_e={self.d_e} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def d_h(self) -> int:
        return self.d_e // self.n_heads


# Parameter naming


def categorical_table(i: int) -> str:
    return f"embedding.cat.{i}"


def numerical_row(i: int) -> str:
    return f"embedding.num.{i}"


def layer_prefix(layer: int) -> str:
    return f"layers.{layer}."


LAYER_KEYS = (
    "attention.query",
    "attention.key",
    "attention.value",
    "attention.output",
    "norm1.gain",
    "norm1.bias",
    "ff.w1",
    "ff.b1",
    "ff.w2",
    "ff.b2",
    "norm2.gain",
    "norm2.bias",
)


@dataclass
class NaimParameters:
    """Trainable arrays only; padding rows are implicit zeros outside this mapping."""

    config: NaimConfig
    schema: FeatureSchema
    arrays: Dict[str, np.ndarray]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "NaimParameters":
        return NaimParameters(self.config, self.schema, {k: v.copy() for k, v in self.arrays.items()})

    @property
    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def full_table(self, i: int) -> np.ndarray:
        """Lookup table of feature ``i`` with its padding row appended last."""
        feature = self.schema.features[i]
        d_e = self.config.d_e
        trained = self.arrays[categorical_table(i) if feature.is_categorical else numerical_row(i)]
        return np.vstack([trained, np.zeros((1, d_e))])

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        if tape is None:
            return {name: Tensor(array) for name, array in self.arrays.items()}
        return {name: tape.watch(array) for name, array in self.arrays.items()}


def init_parameters(config: NaimConfig, schema: FeatureSchema, seed: int) -> NaimParameters:
    """Glorot-uniform weights and tables, zero biases, unit norm gains."""
    if config.n_classes != schema.n_classes:
        raise SchemaError(f"config has {config.n_classes} classes, schema has {schema.n_classes}")
    rng = np.random.default_rng(seed)
    d_e, d_h, h = config.d_e, config.d_h, config.n_heads
    m = schema.n_features
    arrays: Dict[str, np.ndarray] = {}

    def glorot(shape, fan_in, fan_out):
        return T.glorot_uniform(shape, fan_in, fan_out, rng).data

    for feature in schema.features:
        if feature.is_categorical:
            arrays[categorical_table(feature.index)] = glorot((feature.k, d_e), feature.k + 1, d_e)
        else:
            arrays[numerical_row(feature.index)] = glorot((1, d_e), 2, d_e)
    if config.use_embedding_bias:
        arrays["embedding.bias"] = np.zeros((m, d_e))

    for layer in range(config.n_layers):
        p = layer_prefix(layer)
        for proj in ("query", "key", "value"):
            arrays[f"{p}attention.{proj}"] = glorot((h, d_e, d_h), d_e, d_h)
        arrays[f"{p}attention.output"] = glorot((h * d_h, d_e), h * d_h, d_e)
        arrays[f"{p}norm1.gain"] = np.ones(d_e)
        arrays[f"{p}norm1.bias"] = np.zeros(d_e)
        arrays[f"{p}ff.w1"] = glorot((d_e, config.ff_dim), d_e, config.ff_dim)
        arrays[f"{p}ff.b1"] = np.zeros(config.ff_dim)
        arrays[f"{p}ff.w2"] = glorot((config.ff_dim, d_e), config.ff_dim, d_e)
        arrays[f"{p}ff.b2"] = np.zeros(d_e)
        arrays[f"{p}norm2.gain"] = np.ones(d_e)
        arrays[f"{p}norm2.bias"] = np.zeros(d_e)

    arrays["head.norm.gain"] = np.ones(d_e)
    arrays["head.norm.bias"] = np.zeros(d_e)
    arrays["head.fc.weight"] = glorot((m * d_e, config.n_classes), m * d_e, config.n_classes)
    arrays["head.fc.bias"] = np.zeros(config.n_classes)

    params = NaimParameters(config=config, schema=schema, arrays=arrays)
    logger.debug(f"Initialised NAIM with {params.n_parameters} trainable values (seed {seed})")
    return params


# Input checks


def _check_batch(schema: FeatureSchema, values: np.ndarray, present: np.ndarray):
    values = np.asarray(values, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    if values.ndim != 2 or values.shape != present.shape or values.shape[1] != schema.n_features:
        raise ModelInputError(
            f"expected (batch, {schema.n_features}) values and mask, got {values.shape} and {present.shape}"
        )
    if not np.isfinite(values[present]).all():
        raise ModelInputError("present cells must hold finite values")
    return values, present


def _codes(schema: FeatureSchema, values: np.ndarray, present: np.ndarray, i: int) -> np.ndarray:
    column = values[:, i]
    observed = present[:, i]
    codes = np.full(column.shape, -1, dtype=np.intp)
    if observed.any():
        raw = column[observed]
        if not np.array_equal(raw, np.floor(raw)):
            raise ModelInputError(f"categorical feature {i} holds a non-integer code")
        codes[observed] = raw.astype(np.intp)
    k = schema.features[i].k
    if (codes >= k).any() or (codes[observed] < 0).any():
        raise EmbeddingIndexError(f"code outside [0, {k}) for categorical feature {i}", feature=i)
    return codes


# Embeddings


def embed_batch(
    bound: Mapping[str, Tensor], schema: FeatureSchema, values: np.ndarray, present: np.ndarray
) -> Tensor:
    """(batch, m, d_e) token embeddings in schema order."""
    batch = values.shape[0]
    parts: List[Tensor] = []
    order: List[int] = []

    numerical = schema.numerical_indices
    if numerical.size:
        scaled = np.where(present[:, numerical], values[:, numerical], 0.0)
        rows = T.concat([bound[numerical_row(int(i))] for i in numerical], axis=0)
        parts.append(T.mul(Tensor(scaled[:, :, None]), rows))
        order.extend(int(i) for i in numerical)

    for i in schema.categorical_indices:
        i = int(i)
        looked_up = T.embedding_lookup(bound[categorical_table(i)], _codes(schema, values, present, i))
        parts.append(T.reshape(looked_up, (batch, 1, -1)))
        order.append(i)

    tokens = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    if order != sorted(order):
        tokens = T.take(tokens, np.argsort(order), axis=1)
    if "embedding.bias" in bound:
        tokens = T.add(tokens, bound["embedding.bias"])
    return tokens


def embed_categorical(params: NaimParameters, i: int, code: Optional[int]) -> np.ndarray:
    feature = params.schema.features[i]
    if not feature.is_categorical:
        raise SchemaError(f"feature {i} is not categorical")
    d_e = params.config.d_e
    if code is None:
        vector = np.zeros(d_e)
    elif 0 <= code < feature.k:
        vector = params[categorical_table(i)][code].copy()
    else:
        raise EmbeddingIndexError(f"code {code} outside [0, {feature.k}) for feature {i}", feature=i)
    if "embedding.bias" in params.arrays:
        vector = vector + params["embedding.bias"][i]
    return vector


def embed_numerical(params: NaimParameters, i: int, value: float, present: bool) -> np.ndarray:
    if params.schema.features[i].is_categorical:
        raise SchemaError(f"feature {i} is not numerical")
    if present and not math.isfinite(value):
        raise ModelInputError(f"non-finite value for numerical feature {i}")
    vector = value * params[numerical_row(i)][0] if present else np.zeros(params.config.d_e)
    if "embedding.bias" in params.arrays:
        vector = vector + params["embedding.bias"][i]
    return vector


def embed_sample(params: NaimParameters, values: Sequence[float], present: Sequence[bool]) -> Tensor:
    """(m, d_e) embedding of a single preprocessed sample."""
    batch_values, batch_present = _check_batch(params.schema, np.atleast_2d(values), np.atleast_2d(present))
    tokens = embed_batch(params.bind(), params.schema, batch_values, batch_present)
    return T.reshape(tokens, tokens.shape[1:])


# Attention


def attention_weights(Q: Tensor, K: Tensor, present: np.ndarray, zero_missing_rows: bool = True) -> Tensor:
    """Scaled dot-product weights over present columns.

    ``present`` has shape ``Q.shape[:-2] + (m,)`` or broadcasts to it. With
    ``zero_missing_rows`` the rows of missing tokens are set to exactly zero too.
    """
    present = np.asarray(present, dtype=bool)
    scores = T.scale(T.matmul(Q, T.transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))
    weights = T.softmax_rows(scores, column_blocked=~present)
    if zero_missing_rows:
        weights = T.mul(weights, Tensor(present[..., :, None].astype(np.float64)))
    return weights


def double_masked_attention(Q: Tensor, K: Tensor, V: Tensor, present: np.ndarray) -> Tensor:
    return T.matmul(attention_weights(Q, K, present, zero_missing_rows=True), V)


def classic_masked_attention(Q: Tensor, K: Tensor, V: Tensor, present: np.ndarray) -> Tensor:
    """Column masking only; missing tokens still receive a mixture of the others."""
    return T.matmul(attention_weights(Q, K, present, zero_missing_rows=False), V)


def multi_head_attention(
    x: Tensor,
    present: np.ndarray,
    weights: Mapping[str, Tensor],
    double_mask: bool = True,
    attention_log: Optional[List[np.ndarray]] = None,
) -> Tensor:
    batch, m, d_e = x.shape
    heads = weights["attention.query"].shape[0]
    tokens = T.reshape(x, (batch, 1, m, d_e))
    Q = T.matmul(tokens, weights["attention.query"])
    K = T.matmul(tokens, weights["attention.key"])
    V = T.matmul(tokens, weights["attention.value"])
    A = attention_weights(Q, K, present[:, None, :], zero_missing_rows=double_mask)
    if attention_log is not None:
        attention_log.append(A.data.copy())
    mixed = T.matmul(A, V)
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (batch, m, heads * V.shape[-1]))
    return T.matmul(merged, weights["attention.output"])


def layer_weights(bound: Mapping[str, Tensor], layer: int) -> Dict[str, Tensor]:
    prefix = layer_prefix(layer)
    return {key: bound[prefix + key] for key in LAYER_KEYS}


def encoder_layer(
    x: Tensor,
    present: np.ndarray,
    weights: Mapping[str, Tensor],
    eps: float = 1e-5,
    double_mask: bool = True,
    attention_log: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """Masked attention, then a ReLU feed-forward block, each followed by Add & Norm."""
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
        present = np.asarray(present, dtype=bool)[None, :]
    attended = multi_head_attention(x, present, weights, double_mask, attention_log)
    x = T.layer_norm(T.add(x, attended), weights["norm1.gain"], weights["norm1.bias"], eps)
    hidden = T.relu(T.add(T.matmul(x, weights["ff.w1"]), weights["ff.b1"]))
    ff = T.add(T.matmul(hidden, weights["ff.w2"]), weights["ff.b2"])
    x = T.layer_norm(T.add(x, ff), weights["norm2.gain"], weights["norm2.bias"], eps)
    return T.reshape(x, x.shape[1:]) if single else x


# Network


def forward_batch(
    params: NaimParameters,
    values: np.ndarray,
    present: np.ndarray,
    bound: Optional[Mapping[str, Tensor]] = None,
    double_mask: bool = True,
    attention_log: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """(batch, C) logits. Pass ``bound`` tensors watched on a tape to train."""
    values, present = _check_batch(params.schema, values, present)
    if bound is None:
        bound = params.bind()
    config = params.config
    x = embed_batch(bound, params.schema, values, present)
    for layer in range(config.n_layers):
        x = encoder_layer(
            x, present, layer_weights(bound, layer), config.layer_norm_eps, double_mask, attention_log
        )
    x = T.layer_norm(x, bound["head.norm.gain"], bound["head.norm.bias"], config.layer_norm_eps)
    flat = T.reshape(x, (values.shape[0], -1))
    return T.add(T.matmul(flat, bound["head.fc.weight"]), bound["head.fc.bias"])


def forward(params: NaimParameters, values: Sequence[float], present: Sequence[bool]) -> np.ndarray:
    """Logits of a single preprocessed sample."""
    logits = forward_batch(params, np.atleast_2d(values), np.atleast_2d(present))
    return logits.data[0]


def probabilities(logits: np.ndarray) -> np.ndarray:
    return T.softmax_rows(Tensor(np.atleast_2d(logits))).data


def predict_proba(params: NaimParameters, values: Sequence[float], present: Sequence[bool]) -> np.ndarray:
    return probabilities(forward(params, values, present))[0]


def predict_proba_batch(
    params: NaimParameters, values: np.ndarray, present: np.ndarray, chunk: int = 512
) -> np.ndarray:
    """(n, C) class probabilities, evaluated in chunks."""
    out = np.empty((values.shape[0], params.config.n_classes))
    for start in range(0, values.shape[0], chunk):
        stop = start + chunk
        out[start:stop] = probabilities(forward_batch(params, values[start:stop], present[start:stop]).data)
    return out


def loss_and_gradients(
    params: NaimParameters, values: np.ndarray, present: np.ndarray, labels: np.ndarray
):
    """Mean cross-entropy of a batch and its gradient for every trainable array."""
    tape = Tape()
    bound = params.bind(tape)
    loss = T.cross_entropy_logits(forward_batch(params, values, present, bound=bound), labels)
    grads = tape.backward(loss)
    return loss.item(), {name: grads[tensor] for name, tensor in bound.items()}
