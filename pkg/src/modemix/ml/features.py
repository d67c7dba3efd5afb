"""Flat per-observation feature encoding for the data-driven models.

Layout, in order: for each alternative its A raw attributes followed by the
same A attributes logged (with the dataset's delta rule); then J availability
flags; then the socio variables; then, only if ``feed_distance`` is on, the
trip distance. The same information the structural models see, no more.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import ChoiceDataset


@dataclass(frozen=True)
class FeatureTable:
    values: np.ndarray  # (N, F)
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "names", tuple(self.names))
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise ValueError("feature values do not match feature names")

    @property
    def width(self) -> int:
        return self.values.shape[1]


def encode_features(dataset: ChoiceDataset, feed_distance: bool = False) -> FeatureTable:
    n, j, a = dataset.attrs.shape
    cols = []
    names = []
    for alt_i, alt in enumerate(dataset.alt_names):
        for attr_i, attr in enumerate(dataset.attr_names):
            cols.append(dataset.attrs[:, alt_i, attr_i])
            names.append(f"{attr}_{alt}")
        for attr_i, attr in enumerate(dataset.attr_names):
            cols.append(np.log(dataset.attrs[:, alt_i, attr_i] + dataset.log_delta))
            names.append(f"log_{attr}_{alt}")
    for alt_i, alt in enumerate(dataset.alt_names):
        cols.append(dataset.avail[:, alt_i].astype(np.float64))
        names.append(f"avail_{alt}")
    for s_i, s in enumerate(dataset.socio_names):
        cols.append(dataset.socio[:, s_i])
        names.append(s)
    if feed_distance:
        cols.append(dataset.distance)
        names.append("distance_km")
    return FeatureTable(values=np.column_stack(cols), names=names)


def decode_attrs(table: FeatureTable, n_alts: int, n_attrs: int) -> np.ndarray:
    """Recover the (N, J, A) attribute matrix from the raw columns."""
    n = table.values.shape[0]
    out = np.empty((n, n_alts, n_attrs))
    per_alt = 2 * n_attrs
    for alt_i in range(n_alts):
        start = alt_i * per_alt
        out[:, alt_i, :] = table.values[:, start : start + n_attrs]
    return out
