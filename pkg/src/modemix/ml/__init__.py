"""Data-driven sub-models: feature encoding, a feed-forward softmax
classifier, Newton-boosted trees, and repetition-averaged prediction."""

from .features import FeatureTable, encode_features, decode_attrs
from .ensembles import ensemble_average
from .mlp import MLPConfig, MLPModel, mlp_train
from .gbt import GBTConfig, GBTModel, gbt_train, leaf_weight, split_gain

__all__ = [
    "FeatureTable",
    "encode_features",
    "decode_attrs",
    "ensemble_average",
    "MLPConfig",
    "MLPModel",
    "mlp_train",
    "GBTConfig",
    "GBTModel",
    "gbt_train",
    "leaf_weight",
    "split_gain",
]
