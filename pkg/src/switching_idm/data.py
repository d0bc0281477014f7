"""Trajectory loading, validation, downsampling and standardization.

Canonical CSV schema: ``traj_id,t,v,dv,s,a`` with a header row, SI units,
UTF-8 and LF line endings.  A column-mapping file (``key=value`` lines) can
adapt foreign exports; if it names a leader-speed column instead of ``dv``,
the relative speed is computed as v - v_leader (positive = closing).

Standardization statistics are pooled over all trajectories and apply only
to the scenario-emission view of the covariates; the car-following
likelihood always consumes physical units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import DataError, InvalidArgumentError, SchemaError

#: Canonical column names; ``v_lead`` is an accepted alternative to ``dv``.
CANONICAL_COLUMNS = ("traj_id", "t", "v", "dv", "s", "a")

DEFAULT_SCHEMA = {name: name for name in CANONICAL_COLUMNS}

#: Float format used when writing CSVs; chosen so that save -> load is the
#: identity on the values we emit.
CSV_FLOAT_FORMAT = "%.12g"

#: Minimum car-following duration (seconds) kept by the default filter.
DEFAULT_MIN_DURATION = 50.0


@dataclass(frozen=True)
class Trajectory:
    """One leader-follower pair sampled at a fixed interval.

    ``x`` has columns (v, dv, s) in physical units; ``y`` is the observed
    follower acceleration.
    """

    traj_id: str
    dt: float
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if self.dt <= 0.0:
            raise DataError(f"trajectory {self.traj_id}: dt must be > 0")
        if x.ndim != 2 or x.shape[1] != 3 or y.shape != (x.shape[0],):
            raise DataError(f"trajectory {self.traj_id}: malformed arrays")
        if x.shape[0] < 2:
            raise DataError(f"trajectory {self.traj_id}: need at least 2 steps")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError(f"trajectory {self.traj_id}: non-finite values")
        if np.any(x[:, 0] < 0.0):
            raise DataError(f"trajectory {self.traj_id}: negative speed")
        if np.any(x[:, 2] <= 0.0):
            raise DataError(f"trajectory {self.traj_id}: non-positive gap")

    @property
    def length(self) -> int:
        return self.x.shape[0]

    @property
    def duration(self) -> float:
        return self.length * self.dt


@dataclass(frozen=True)
class Standardizer:
    """Per-feature affine map for the (v, dv, s) covariates."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if np.any(std <= 0.0):
            raise DataError("standardizer std entries must be > 0")

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def destandardize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_dict(data: dict) -> "Standardizer":
        return Standardizer(mean=np.array(data["mean"]), std=np.array(data["std"]))


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of trajectories plus pooled statistics."""

    trajectories: tuple[Trajectory, ...]
    standardizer: Standardizer | None = None

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if not self.trajectories:
            raise DataError("dataset must contain at least one trajectory")

    @property
    def n_steps(self) -> int:
        return sum(t.length for t in self.trajectories)

    def pooled_x(self) -> np.ndarray:
        return np.concatenate([t.x for t in self.trajectories], axis=0)

    def pooled_y(self) -> np.ndarray:
        return np.concatenate([t.y for t in self.trajectories])

    def offsets(self) -> np.ndarray:
        """Start index of each trajectory within the pooled arrays."""
        lengths = [t.length for t in self.trajectories]
        return np.concatenate([[0], np.cumsum(lengths)])


def load_schema(path) -> dict:
    """Read a key=value column-mapping file."""
    schema = dict(DEFAULT_SCHEMA)
    with open(path, encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            schema[key] = value
    return schema


def load_trajectories(path, schema: dict | None = None) -> Dataset:
    """Load the canonical CSV (or a mapped foreign schema) into a Dataset.

    The returned dataset has no standardizer; call :func:`fit_standardizer`
    after any downsampling/filtering.
    """
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc

    dv_col = schema.get("dv", "dv")
    v_lead_col = schema.get("v_lead", "v_lead")
    use_leader_speed = dv_col not in frame.columns and v_lead_col in frame.columns
    required = ["traj_id", "t", "v", "s", "a"]
    required.append("v_lead" if use_leader_speed else "dv")
    columns = {}
    for key in required:
        name = schema.get(key, key)
        if name not in frame.columns:
            raise SchemaError(f"{path}: missing column {name!r} (for {key!r})")
        columns[key] = name

    trajectories = []
    for traj_id, group in frame.groupby(columns["traj_id"], sort=True):
        rows = group.index.to_numpy()
        t = group[columns["t"]].to_numpy(dtype=float)
        if t.shape[0] < 2:
            raise DataError(f"trajectory {traj_id}: need at least 2 rows")
        dts = np.diff(t)
        if np.any(dts <= 0.0):
            bad = rows[1:][dts <= 0.0][0]
            raise DataError(f"trajectory {traj_id}: non-monotone time at row {bad + 2}")
        if not np.allclose(dts, dts[0], rtol=1e-6, atol=1e-9):
            raise DataError(f"trajectory {traj_id}: sampling interval is not constant")
        v = group[columns["v"]].to_numpy(dtype=float)
        s = group[columns["s"]].to_numpy(dtype=float)
        a = group[columns["a"]].to_numpy(dtype=float)
        if use_leader_speed:
            dv = v - group[columns["v_lead"]].to_numpy(dtype=float)
        else:
            dv = group[columns["dv"]].to_numpy(dtype=float)
        for name, values in (("v", v), ("dv", dv), ("s", s), ("a", a)):
            finite = np.isfinite(values)
            if not finite.all():
                bad = rows[~finite][0]
                raise DataError(
                    f"trajectory {traj_id}: non-finite {name} at row {bad + 2}"
                )
        if np.any(s <= 0.0):
            bad = rows[s <= 0.0][0]
            raise DataError(f"trajectory {traj_id}: non-positive gap at row {bad + 2}")
        if np.any(v < 0.0):
            bad = rows[v < 0.0][0]
            raise DataError(f"trajectory {traj_id}: negative speed at row {bad + 2}")
        trajectories.append(
            Trajectory(
                traj_id=str(traj_id),
                dt=float(dts[0]),
                x=np.column_stack([v, dv, s]),
                y=a,
            )
        )
    return Dataset(trajectories=tuple(trajectories))


def save_trajectories(dataset: Dataset, path) -> None:
    """Write the canonical CSV schema; load(save(d)) preserves contents."""
    frames = []
    for traj in dataset.trajectories:
        frames.append(
            pd.DataFrame(
                {
                    "traj_id": traj.traj_id,
                    "t": np.arange(traj.length) * traj.dt,
                    "v": traj.x[:, 0],
                    "dv": traj.x[:, 1],
                    "s": traj.x[:, 2],
                    "a": traj.y,
                }
            )
        )
    pd.concat(frames, ignore_index=True).to_csv(
        path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n"
    )


def save_metadata(dataset: Dataset, path, extra: dict | None = None) -> None:
    """JSON sidecar with dt, standardizer statistics and generator events."""
    meta = {
        "dt": dataset.trajectories[0].dt,
        "n_trajectories": len(dataset.trajectories),
        "n_steps": dataset.n_steps,
        "standardizer": None
        if dataset.standardizer is None
        else dataset.standardizer.to_dict(),
    }
    if extra:
        meta.update(extra)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(meta, handle, indent=2, sort_keys=True)
        handle.write("\n")


def downsample(traj: Trajectory, factor: int) -> Trajectory:
    """Keep every ``factor``-th sample and stretch dt accordingly."""
    if factor < 1 or factor != int(factor):
        raise InvalidArgumentError("downsample factor must be a positive integer")
    factor = int(factor)
    if factor == 1:
        return traj
    if traj.length <= factor:
        raise InvalidArgumentError(
            f"trajectory {traj.traj_id}: length {traj.length} too short for factor {factor}"
        )
    return Trajectory(
        traj_id=traj.traj_id,
        dt=traj.dt * factor,
        x=traj.x[::factor],
        y=traj.y[::factor],
    )


def downsample_dataset(dataset: Dataset, factor: int) -> Dataset:
    return Dataset(
        trajectories=tuple(downsample(t, factor) for t in dataset.trajectories),
        standardizer=None,
    )


def filter_min_duration(dataset: Dataset, min_duration: float = DEFAULT_MIN_DURATION) -> Dataset:
    """Drop trajectories shorter than ``min_duration`` seconds."""
    kept = tuple(t for t in dataset.trajectories if t.duration >= min_duration)
    if not kept:
        raise DataError(
            f"no trajectory lasts >= {min_duration} s; relax --min-duration"
        )
    return Dataset(trajectories=kept, standardizer=None)


def fit_standardizer(dataset: Dataset) -> Dataset:
    """Compute pooled per-feature mean/std (population formula)."""
    pooled = dataset.pooled_x()
    if pooled.shape[0] < 2:
        raise DataError("standardizer needs at least 2 pooled steps")
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    names = ("v", "dv", "s")
    for i, name in enumerate(names):
        if std[i] < 1e-9:
            raise DataError(
                f"feature {name!r} is constant; scenario emission would be singular"
            )
    return replace(dataset, standardizer=Standardizer(mean=mean, std=std))
