"""Choice dataset ingestion, distance-percentile segmentation and the
three-tier estimation / averaging / validation split.

Segments are distance deciles by default. Roles after the split:

* ``sub_train``   -- non-holdout observations in segments 3-8; the only rows
  the individual sub-models ever see in estimation.
* ``ma_only``     -- non-holdout observations in segments 2 and 9; added to
  ``sub_train`` to form the averaging-training set (segments 2-9).
* ``validation``  -- the seeded uniform holdout, drawn over all segments.
* ``excluded``    -- non-holdout observations in segments 1 and 10; used by
  no training stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, DegenerateSchemeError, SchemaError
from .rngs import substream

ROLE_SUB_TRAIN = "sub_train"
ROLE_MA_ONLY = "ma_only"
ROLE_VALIDATION = "validation"
ROLE_EXCLUDED = "excluded"
ROLES = (ROLE_SUB_TRAIN, ROLE_MA_ONLY, ROLE_VALIDATION, ROLE_EXCLUDED)

#: log transforms use log(x + LOG_DELTA); walk/cycle cost is legitimately 0.
LOG_DELTA = 0.01

_MAX_REPORTED_ROWS = 10


def _fmt_rows(rows) -> str:
    rows = list(rows)
    shown = ", ".join(str(r) for r in rows[:_MAX_REPORTED_ROWS])
    if len(rows) > _MAX_REPORTED_ROWS:
        shown += f", ... ({len(rows)} rows total)"
    return shown


@dataclass(frozen=True)
class ObsRecord:
    """A single observation, as a convenience view onto the columnar arrays."""

    obs_id: int
    person_id: int
    chosen: int
    distance: float
    avail: np.ndarray   # (J,) bool
    attrs: np.ndarray   # (J, A)
    socio: np.ndarray   # (S,)


@dataclass(frozen=True)
class ChoiceDataset:
    """Columnar mode-choice data.

    Arrays share the observation axis; ``attrs`` is (N, J, A) with one row of
    A attribute values per alternative. ``log_delta`` is the dataset-wide
    offset used whenever an attribute enters a model through a log transform,
    recorded here so every model shares the same rule.
    """

    obs_id: np.ndarray
    person_id: np.ndarray
    chosen: np.ndarray
    distance: np.ndarray
    avail: np.ndarray
    attrs: np.ndarray
    socio: np.ndarray
    alt_names: tuple
    attr_names: tuple
    socio_names: tuple = ()
    log_delta: float = LOG_DELTA

    def __post_init__(self):
        object.__setattr__(self, "obs_id", np.asarray(self.obs_id, dtype=np.int64))
        object.__setattr__(self, "person_id", np.asarray(self.person_id, dtype=np.int64))
        object.__setattr__(self, "chosen", np.asarray(self.chosen, dtype=np.int64))
        object.__setattr__(self, "distance", np.asarray(self.distance, dtype=np.float64))
        object.__setattr__(self, "avail", np.asarray(self.avail, dtype=bool))
        object.__setattr__(self, "attrs", np.asarray(self.attrs, dtype=np.float64))
        socio = np.asarray(self.socio, dtype=np.float64)
        if socio.size == 0:
            socio = np.zeros((len(self.obs_id), 0))
        elif socio.ndim == 1:
            socio = socio[:, None]
        object.__setattr__(self, "socio", socio)
        object.__setattr__(self, "alt_names", tuple(self.alt_names))
        object.__setattr__(self, "attr_names", tuple(self.attr_names))
        object.__setattr__(self, "socio_names", tuple(self.socio_names))
        self._validate()

    def _validate(self):
        n, j, a = self.attrs.shape if self.attrs.ndim == 3 else (len(self.obs_id), 0, 0)
        if self.attrs.ndim != 3:
            raise DataError("attrs must be a (N, J, A) array")
        if j < 2:
            raise DataError(f"need at least 2 alternatives, got J={j}")
        if len(self.alt_names) != j:
            raise DataError("alt_names length does not match attrs")
        if len(self.attr_names) != a:
            raise DataError("attr_names length does not match attrs")
        for name, arr, shape in (
            ("obs_id", self.obs_id, (n,)),
            ("person_id", self.person_id, (n,)),
            ("chosen", self.chosen, (n,)),
            ("distance", self.distance, (n,)),
            ("avail", self.avail, (n, j)),
        ):
            if arr.shape != shape:
                raise DataError(f"{name} has shape {arr.shape}, expected {shape}")
        if self.socio.shape[0] != n or self.socio.shape[1] != len(self.socio_names):
            raise DataError("socio array does not match socio_names")

        bad = np.flatnonzero(~(self.distance > 0))
        if bad.size:
            raise DataError(f"non-positive distance on rows: {_fmt_rows(bad)}")
        bad = np.flatnonzero(~np.isfinite(self.attrs).all(axis=(1, 2)))
        if bad.size:
            raise DataError(f"non-finite attribute values on rows: {_fmt_rows(bad)}")
        if self.socio.size:
            bad = np.flatnonzero(~np.isfinite(self.socio).all(axis=1))
            if bad.size:
                raise DataError(f"non-finite socio values on rows: {_fmt_rows(bad)}")
        bad = np.flatnonzero((self.chosen < 0) | (self.chosen >= j))
        if bad.size:
            raise DataError(f"chosen index out of range on rows: {_fmt_rows(bad)}")
        bad = np.flatnonzero(~self.avail[np.arange(n), self.chosen])
        if bad.size:
            raise DataError(f"chosen alternative unavailable on rows: {_fmt_rows(bad)}")
        bad = np.flatnonzero(~self.avail.any(axis=1))
        if bad.size:
            raise DataError(f"no available alternative on rows: {_fmt_rows(bad)}")

    @property
    def n_obs(self) -> int:
        return self.attrs.shape[0]

    @property
    def n_alts(self) -> int:
        return self.attrs.shape[1]

    @property
    def n_attrs(self) -> int:
        return self.attrs.shape[2]

    def record(self, i: int) -> ObsRecord:
        return ObsRecord(
            obs_id=int(self.obs_id[i]),
            person_id=int(self.person_id[i]),
            chosen=int(self.chosen[i]),
            distance=float(self.distance[i]),
            avail=self.avail[i],
            attrs=self.attrs[i],
            socio=self.socio[i],
        )

    def subset(self, mask: np.ndarray) -> "ChoiceDataset":
        mask = np.asarray(mask)
        if mask.dtype != bool:
            idx = mask
        else:
            idx = np.flatnonzero(mask)
        return replace(
            self,
            obs_id=self.obs_id[idx],
            person_id=self.person_id[idx],
            chosen=self.chosen[idx],
            distance=self.distance[idx],
            avail=self.avail[idx],
            attrs=self.attrs[idx],
            socio=self.socio[idx],
        )


@dataclass(frozen=True)
class CsvSchema:
    """Column-name mapping for delimited choice data.

    Per-alternative columns follow ``attr_pattern`` / ``avail_pattern`` with
    ``{attr}`` and ``{alt}`` placeholders; the choice column holds the
    alternative label.
    """

    alt_names: tuple
    attr_names: tuple
    choice: str = "choice"
    distance: str = "distance_km"
    avail_pattern: str = "avail_{alt}"
    attr_pattern: str = "{attr}_{alt}"
    socio: tuple = ()
    obs_id: str | None = None
    person_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "alt_names", tuple(self.alt_names))
        object.__setattr__(self, "attr_names", tuple(self.attr_names))
        object.__setattr__(self, "socio", tuple(self.socio))


def load_dataset(path, schema: CsvSchema, log_delta: float = LOG_DELTA) -> ChoiceDataset:
    """Read a comma-separated file into a validated :class:`ChoiceDataset`.

    Raises :class:`SchemaError` for missing columns and :class:`DataError`
    (with offending row indices) for rows violating dataset invariants.
    """
    df = pd.read_csv(path)
    required = [schema.choice, schema.distance]
    required += [schema.avail_pattern.format(alt=a) for a in schema.alt_names]
    required += [
        schema.attr_pattern.format(attr=at, alt=a)
        for at in schema.attr_names
        for a in schema.alt_names
    ]
    required += list(schema.socio)
    for col in (schema.obs_id, schema.person_id):
        if col is not None:
            required.append(col)
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns: {', '.join(sorted(set(missing)))}")

    n = len(df)
    j = len(schema.alt_names)
    a = len(schema.attr_names)
    label_to_idx = {name: i for i, name in enumerate(schema.alt_names)}
    choices = df[schema.choice]
    chosen = np.empty(n, dtype=np.int64)
    bad = []
    for i, lab in enumerate(choices):
        idx = label_to_idx.get(str(lab))
        if idx is None:
            bad.append(i)
            chosen[i] = 0
        else:
            chosen[i] = idx
    if bad:
        raise DataError(f"{path}: unknown choice label on rows: {_fmt_rows(bad)}")

    avail = np.column_stack(
        [df[schema.avail_pattern.format(alt=alt)].to_numpy() != 0 for alt in schema.alt_names]
    )
    attrs = np.empty((n, j, a), dtype=np.float64)
    for ai, at in enumerate(schema.attr_names):
        for ji, alt in enumerate(schema.alt_names):
            attrs[:, ji, ai] = df[schema.attr_pattern.format(attr=at, alt=alt)].to_numpy(dtype=np.float64)
    socio = (
        np.column_stack([df[c].to_numpy(dtype=np.float64) for c in schema.socio])
        if schema.socio
        else np.zeros((n, 0))
    )
    obs_id = (
        df[schema.obs_id].to_numpy(dtype=np.int64) if schema.obs_id else np.arange(n, dtype=np.int64)
    )
    person_id = (
        df[schema.person_id].to_numpy(dtype=np.int64) if schema.person_id else obs_id.copy()
    )
    return ChoiceDataset(
        obs_id=obs_id,
        person_id=person_id,
        chosen=chosen,
        distance=df[schema.distance].to_numpy(dtype=np.float64),
        avail=avail,
        attrs=attrs,
        socio=socio,
        alt_names=schema.alt_names,
        attr_names=schema.attr_names,
        socio_names=schema.socio,
        log_delta=log_delta,
    )


@dataclass(frozen=True)
class SegmentScheme:
    """K half-open distance bands: segment s = {d : b_{s-1} <= d < b_s},
    with b_0 = 0 and b_K = +inf. A distance equal to a boundary belongs to
    the upper segment."""

    boundaries: np.ndarray  # (K-1,) strictly ascending cut points, km

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        object.__setattr__(self, "boundaries", b)
        if b.ndim != 1 or b.size < 1:
            raise ConfigError("boundaries must be a non-empty 1-D array")
        if not np.all(np.diff(b) > 0):
            raise DegenerateSchemeError("segment boundaries are not strictly ascending")

    @property
    def n_segments(self) -> int:
        return self.boundaries.size + 1

    def segment_of(self, distances) -> np.ndarray:
        """1-based segment index for each distance."""
        d = np.asarray(distances, dtype=np.float64)
        return np.searchsorted(self.boundaries, d, side="right") + 1


def nearest_rank_percentile(values: np.ndarray, p: float) -> float:
    """Smallest observed value v with #{x <= v}/N >= p (nearest-rank rule)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.size
    k = int(np.ceil(p * n))
    k = min(max(k, 1), n)
    return float(v[k - 1])


def compute_scheme(distances, n_segments: int = 10) -> SegmentScheme:
    """Decile-style scheme with boundaries at the i/K-th empirical
    percentiles (nearest-rank), i = 1..K-1."""
    d = np.asarray(distances, dtype=np.float64)
    if np.unique(d).size < n_segments:
        raise DegenerateSchemeError(
            f"need at least {n_segments} distinct distances, got {np.unique(d).size}"
        )
    sorted_d = np.sort(d)
    n = d.size
    ks = np.ceil(np.arange(1, n_segments) * n / n_segments).astype(int)
    bounds = sorted_d[np.clip(ks, 1, n) - 1]
    if not np.all(np.diff(bounds) > 0):
        raise DegenerateSchemeError("tied distances collapse adjacent percentile boundaries")
    return SegmentScheme(boundaries=bounds)


@dataclass(frozen=True)
class DataSplit:
    """Segment and role assignment for every observation."""

    segment: np.ndarray  # (N,) int, 1..K
    role: np.ndarray     # (N,) str, one of ROLES
    seed: int
    holdout_frac: float
    level: str = "observation"

    def __post_init__(self):
        object.__setattr__(self, "segment", np.asarray(self.segment, dtype=np.int64))
        object.__setattr__(self, "role", np.asarray(self.role, dtype="U10"))

    def mask(self, *roles) -> np.ndarray:
        out = np.zeros(self.role.shape, dtype=bool)
        for r in roles:
            if r not in ROLES:
                raise ConfigError(f"unknown role {r!r}")
            out |= self.role == r
        return out

    def counts(self) -> dict:
        return {r: int((self.role == r).sum()) for r in ROLES}

    def segment_role_counts(self) -> dict:
        out = {}
        for s in range(1, int(self.segment.max(initial=1)) + 1):
            seg_mask = self.segment == s
            out[s] = {r: int((seg_mask & (self.role == r)).sum()) for r in ROLES}
        return out


# Sub-models train on the middle six deciles; the flanking deciles feed only
# the averaging stage; the extreme deciles never feed any training.
SUB_TRAIN_SEGMENTS = frozenset(range(3, 9))
MA_ONLY_SEGMENTS = frozenset({2, 9})


def make_split(
    dataset: ChoiceDataset,
    scheme: SegmentScheme,
    holdout_frac: float = 0.2,
    seed: int = 0,
    level: str = "observation",
) -> DataSplit:
    """Assign each observation a segment and a role.

    The validation holdout is a single seeded uniform draw of
    round(holdout_frac * N) observations across all segments. ``level`` may
    be "person" to hold out whole persons instead (closest achievable count
    to the target fraction); the default observation level matches how the
    split is used everywhere else in the package.
    """
    if scheme.n_segments != 10:
        raise ConfigError(f"split roles are defined for 10 segments, scheme has {scheme.n_segments}")
    if not 0 <= holdout_frac < 1:
        raise ConfigError(f"holdout_frac must be in [0, 1), got {holdout_frac}")
    if level not in ("observation", "person"):
        raise ConfigError(f"unknown split level {level!r}")

    n = dataset.n_obs
    segment = scheme.segment_of(dataset.distance)
    target = int(round(holdout_frac * n))
    rng = substream(seed, "holdout")
    holdout = np.zeros(n, dtype=bool)
    if target > 0:
        if level == "observation":
            holdout[rng.permutation(n)[:target]] = True
        else:
            persons = np.unique(dataset.person_id)
            order = rng.permutation(persons)
            sizes = np.array([(dataset.person_id == p).sum() for p in order])
            cum = np.cumsum(sizes)
            # cut after the person count closest to the target
            k = int(np.argmin(np.abs(cum - target))) + 1
            held = set(order[:k].tolist())
            holdout = np.isin(dataset.person_id, list(held))

    role = np.full(n, ROLE_EXCLUDED, dtype="U10")
    role[holdout] = ROLE_VALIDATION
    rest = ~holdout
    role[rest & np.isin(segment, list(SUB_TRAIN_SEGMENTS))] = ROLE_SUB_TRAIN
    role[rest & np.isin(segment, list(MA_ONLY_SEGMENTS))] = ROLE_MA_ONLY
    return DataSplit(segment=segment, role=role, seed=seed, holdout_frac=holdout_frac, level=level)


def write_split_manifest(split: DataSplit, dataset: ChoiceDataset, path) -> None:
    """One record per observation: obs_id, segment, role; seed in the header."""
    lines = [
        f"# seed={split.seed} holdout_frac={split.holdout_frac:.12g} level={split.level}",
        "obs_id,segment,role",
    ]
    for i in range(dataset.n_obs):
        lines.append(f"{dataset.obs_id[i]},{split.segment[i]},{split.role[i]}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_split_manifest(path, dataset: ChoiceDataset) -> DataSplit:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise DataError(f"{path}: missing manifest header")
        meta = dict(tok.split("=", 1) for tok in header[1:].split())
        df = pd.read_csv(fh)
    if len(df) != dataset.n_obs:
        raise DataError(
            f"{path}: manifest has {len(df)} rows, dataset has {dataset.n_obs}"
        )
    order = {int(o): i for i, o in enumerate(df["obs_id"].to_numpy())}
    try:
        idx = np.array([order[int(o)] for o in dataset.obs_id])
    except KeyError as exc:
        raise DataError(f"{path}: manifest missing obs_id {exc}") from exc
    return DataSplit(
        segment=df["segment"].to_numpy()[idx],
        role=df["role"].to_numpy()[idx],
        seed=int(meta["seed"]),
        holdout_frac=float(meta["holdout_frac"]),
        level=meta.get("level", "observation"),
    )
