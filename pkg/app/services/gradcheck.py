"""Finite-difference checks of every differentiable primitive and of the full loss."""

import logging
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from app.services import tensor as T
from app.services.data import FeatureInfo, FeatureKindEnum, FeatureSchema
from app.services.model import NaimConfig, forward_batch, init_parameters, layer_weights, encoder_layer
from app.services.tensor import Tensor

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def toy_schema() -> FeatureSchema:
    """Two numerical and two categorical features, binary label."""
    return FeatureSchema(
        features=(
            FeatureInfo("n0", FeatureKindEnum.numerical, 0),
            FeatureInfo("c1", FeatureKindEnum.categorical, 1, ("a", "b", "c")),
            FeatureInfo("n2", FeatureKindEnum.numerical, 2),
            FeatureInfo("c3", FeatureKindEnum.categorical, 3, ("x", "y")),
        ),
        class_names=("0", "1"),
    )


def toy_batch():
    values = np.array([[0.3, 2.0, 0.9, 1.0], [0.7, 0.0, np.nan, 0.0]])
    present = np.array([[True, True, True, False], [True, True, False, True]])
    labels = np.array([1, 0])
    return values, present, labels


def _primitive_checks(rng: np.random.Generator) -> List[GradcheckResult]:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    blocked = np.array([False, True, False, False, True])
    weights = rng.normal(size=(3, 5))
    gain, bias = rng.normal(size=6), rng.normal(size=6)
    labels = np.array([0, 1, 1, 0])
    table = rng.normal(size=(3, 4))
    codes = np.array([0, 2, -1, 2, 1])
    # keep every relu input away from the kink
    kinked = rng.uniform(0.1, 1.0, size=(4, 3)) * rng.choice([-1.0, 1.0], size=(4, 3))

    checks: List[tuple] = [
        ("matmul", lambda x: T.sum_all(T.matmul(x, Tensor(b))), a),
        ("matmul.rhs", lambda x: T.sum_all(T.mul(T.matmul(Tensor(a), x), Tensor(rng_fixed(3, 2)))), b),
        (
            "softmax_rows",
            lambda x: T.sum_all(T.mul(T.softmax_rows(x, blocked), Tensor(weights))),
            rng.normal(size=(3, 5)),
        ),
        ("relu", lambda x: T.sum_all(T.mul(T.relu(x), x)), kinked),
        (
            "layer_norm",
            lambda x: T.sum_all(T.mul(T.layer_norm(x, Tensor(gain), Tensor(bias)), Tensor(rng_fixed(2, 6)))),
            rng.normal(size=(2, 6)),
        ),
        ("cross_entropy_logits", lambda x: T.cross_entropy_logits(x, labels), rng.normal(size=(4, 2))),
        (
            "embedding_lookup",
            lambda x: T.sum_all(T.mul(T.embedding_lookup(x, codes), Tensor(rng_fixed(5, 4)))),
            table,
        ),
    ]
    return [GradcheckResult(name, T.finite_difference_check(f, x)) for name, f, x in checks]


def rng_fixed(*shape: int) -> np.ndarray:
    return np.random.default_rng(sum(shape)).normal(size=shape)


def _model_checks(seed: int) -> List[GradcheckResult]:
    schema = toy_schema()
    config = NaimConfig(d_e=4, n_layers=2, n_heads=2, ff_dim=8, n_classes=2)
    params = init_parameters(config, schema, seed)
    # biases start nonzero
    rng = np.random.default_rng(seed + 1)
    for name, array in params.arrays.items():
        if name.endswith("bias"):
            array[...] = rng.normal(scale=0.1, size=array.shape)
    values, present, labels = toy_batch()
    results = []

    def loss_for(name: str) -> Callable[[Tensor], Tensor]:
        def f(x: Tensor) -> Tensor:
            bound = params.bind()
            bound[name] = x
            return T.cross_entropy_logits(forward_batch(params, values, present, bound=bound), labels)

        return f

    worst = 0.0
    for name, array in params.arrays.items():
        worst = max(worst, T.finite_difference_check(loss_for(name), array))
    results.append(GradcheckResult("naim.loss", worst))

    bound = params.bind()
    weights = layer_weights(bound, 0)
    x0 = np.random.default_rng(seed + 2).normal(size=(4, config.d_e))
    mix = rng_fixed(4, config.d_e)
    results.append(
        GradcheckResult(
            "encoder_layer",
            T.finite_difference_check(
                lambda x: T.sum_all(T.mul(encoder_layer(x, present[0], weights), Tensor(mix))), x0
            ),
        )
    )
    return results


def run_gradcheck(seed: int = 0) -> List[GradcheckResult]:
    rng = np.random.default_rng(seed)
    results = _primitive_checks(rng) + _model_checks(seed)
    for r in results:
        status = "✅" if r.passed else "❌"
        logger.info(f"{status} {r.name}: max relative error {r.max_rel_error:.2e}")
    return results
