"""Trajectory data model, CSV ingestion, history construction, batch splitting.

Conventions baked in here and relied on everywhere else:
  * instruments and actions are encoded as integers in {-1, +1};
  * the stage-k history vector is the concatenation
        [x_1, a_1, r_1, x_2, a_2, r_2, ..., a_{k-1}, r_{k-1}, x_k]
    with past actions cast to +/-1.0 floats, so H_1 = x_1.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Raised on malformed input data (bad header, bad cell, bad shape)."""


@dataclass(frozen=True)
class StageObservation:
    covariates: np.ndarray  # shape (d_k,)
    instrument: int         # in {-1, +1}
    action: int             # in {-1, +1}
    reward: float

    def __post_init__(self):
        object.__setattr__(self, "covariates", np.asarray(self.covariates, dtype=float))
        if self.instrument not in (-1, 1):
            raise DataError(f"instrument not in {{-1,+1}}: {self.instrument}")
        if self.action not in (-1, 1):
            raise DataError(f"action not in {{-1,+1}}: {self.action}")
        if not np.isfinite(self.reward):
            raise DataError(f"reward not finite: {self.reward}")
        if not np.all(np.isfinite(self.covariates)):
            raise DataError("covariates contain non-finite values")


@dataclass(frozen=True)
class Trajectory:
    stages: tuple[StageObservation, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if len(self.stages) < 1:
            raise DataError("trajectory must have at least one stage")

    @property
    def num_stages(self) -> int:
        return len(self.stages)


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    num_stages: int
    covariate_dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "covariate_dims", tuple(int(d) for d in self.covariate_dims))
        if len(self.trajectories) < 1:
            raise DataError("empty dataset")
        if self.num_stages < 1:
            raise DataError("num_stages must be >= 1")
        if len(self.covariate_dims) != self.num_stages:
            raise DataError("covariate_dims length must equal num_stages")
        for traj in self.trajectories:
            if traj.num_stages != self.num_stages:
                raise DataError("all trajectories must share the declared number of stages")
            for k, obs in enumerate(traj.stages):
                if obs.covariates.shape != (self.covariate_dims[k],):
                    raise DataError(
                        f"stage {k + 1} covariate dimension {obs.covariates.shape[0]} "
                        f"!= declared {self.covariate_dims[k]}"
                    )

    @property
    def n(self) -> int:
        return len(self.trajectories)

    # --- column accessors (1-indexed stage k), used by every estimator ---

    def histories(self, k: int) -> np.ndarray:
        """(n, dim_k) matrix of stage-k history vectors."""
        return np.array([history_at(traj, k) for traj in self.trajectories])

    def instruments(self, k: int) -> np.ndarray:
        self._check_stage(k)
        return np.array([t.stages[k - 1].instrument for t in self.trajectories], dtype=float)

    def actions(self, k: int) -> np.ndarray:
        self._check_stage(k)
        return np.array([t.stages[k - 1].action for t in self.trajectories], dtype=float)

    def rewards(self, k: int) -> np.ndarray:
        self._check_stage(k)
        return np.array([t.stages[k - 1].reward for t in self.trajectories], dtype=float)

    def history_dim(self, k: int) -> int:
        self._check_stage(k)
        return sum(self.covariate_dims[:k]) + 2 * (k - 1)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        """Dataset restricted to the given trajectory indices (order kept)."""
        return Dataset(
            trajectories=tuple(self.trajectories[i] for i in indices),
            num_stages=self.num_stages,
            covariate_dims=self.covariate_dims,
        )

    def _check_stage(self, k: int) -> None:
        if not 1 <= k <= self.num_stages:
            raise DataError(f"stage index {k} out of range 1..{self.num_stages}")


def history_at(traj: Trajectory, k: int) -> np.ndarray:
    """Stage-k history vector [x_1, a_1, r_1, ..., a_{k-1}, r_{k-1}, x_k]."""
    if not 1 <= k <= traj.num_stages:
        raise DataError(f"stage index {k} out of range 1..{traj.num_stages}")
    parts = []
    for t in range(k - 1):
        obs = traj.stages[t]
        parts.append(obs.covariates)
        parts.append(np.array([float(obs.action), obs.reward]))
    parts.append(traj.stages[k - 1].covariates)
    return np.concatenate(parts) if parts else np.array([])


@dataclass(frozen=True)
class BatchAssignment:
    batch_index: np.ndarray  # (n,), values in 0..m-1
    m: int

    def __post_init__(self):
        object.__setattr__(self, "batch_index", np.asarray(self.batch_index, dtype=int))

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.batch_index == j)

    def complement(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.batch_index != j)


def assign_batches(n: int, m: int, rng: np.random.Generator) -> BatchAssignment:
    """Random partition of {0..n-1} into m batches with sizes within 1 of n/m."""
    if m < 2:
        raise DataError(f"number of batches must be >= 2, got {m}")
    if m > n:
        raise DataError(f"cannot split {n} samples into {m} batches")
    labels = np.arange(n) % m
    return BatchAssignment(batch_index=labels[rng.permutation(n)], m=m)


# --------------------------- CSV schema ---------------------------
#
# Header: x{k}_{j} (j = 1..dim_k), z{k}, a{k}, r{k}, repeated for k = 1..K.
# One row per trajectory, '.' decimal point, comma separated.


def expected_header(num_stages: int, covariate_dims: Sequence[int]) -> list[str]:
    cols = []
    for k in range(1, num_stages + 1):
        cols.extend(f"x{k}_{j}" for j in range(1, covariate_dims[k - 1] + 1))
        cols.extend([f"z{k}", f"a{k}", f"r{k}"])
    return cols


def _parse_header(header: list[str]) -> tuple[int, tuple[int, ...]]:
    """Infer (K, covariate_dims) from a header, validating the column order."""
    dims: list[int] = []
    pos = 0
    k = 0
    while pos < len(header):
        k += 1
        d = 0
        while pos < len(header) and header[pos] == f"x{k}_{d + 1}":
            d += 1
            pos += 1
        for name in (f"z{k}", f"a{k}", f"r{k}"):
            if pos >= len(header) or header[pos] != name:
                raise DataError(f"malformed header: expected column '{name}' at position {pos}")
            pos += 1
        dims.append(d)
    if k == 0:
        raise DataError("malformed header: no stage columns found")
    return k, tuple(dims)


def _parse_pm1(cell: str, what: str, row: int) -> int:
    try:
        value = float(cell)
    except ValueError as exc:
        raise DataError(f"row {row}: non-numeric {what} '{cell}'") from exc
    if value == 1.0:
        return 1
    if value == -1.0:
        return -1
    raise DataError(f"row {row}: {what} not in {{-1,+1}}: {cell}")


def load_csv(path, schema: tuple[int, Sequence[int]] | None = None) -> Dataset:
    """Load a trajectory dataset from CSV.

    schema, when given, is (num_stages, covariate_dims) and must match the
    file header; when None the schema is inferred from the header.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        return _load_csv_file(fh, schema)


def loads_csv(text: str, schema: tuple[int, Sequence[int]] | None = None) -> Dataset:
    return _load_csv_file(io.StringIO(text), schema)


def _load_csv_file(fh, schema) -> Dataset:
    reader = csv.reader(fh)
    try:
        header = [c.strip() for c in next(reader)]
    except StopIteration:
        raise DataError("empty dataset") from None
    num_stages, dims = _parse_header(header)
    if schema is not None:
        want_k, want_dims = schema
        if (num_stages, dims) != (int(want_k), tuple(int(d) for d in want_dims)):
            raise DataError(
                f"header schema K={num_stages}, dims={dims} does not match "
                f"declared K={want_k}, dims={tuple(want_dims)}"
            )
    width = len(header)

    trajectories = []
    for idx, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != width:
            raise DataError(f"row {idx}: expected {width} cells, got {len(row)}")
        if any(cell.strip() == "" for cell in row):
            raise DataError(f"row {idx}: missing cell")
        pos = 0
        stages = []
        for k in range(1, num_stages + 1):
            d = dims[k - 1]
            try:
                covs = np.array([float(row[pos + j]) for j in range(d)])
            except ValueError as exc:
                raise DataError(f"row {idx}: non-numeric covariate cell") from exc
            pos += d
            z = _parse_pm1(row[pos], "instrument", idx)
            a = _parse_pm1(row[pos + 1], "action", idx)
            try:
                r = float(row[pos + 2])
            except ValueError as exc:
                raise DataError(f"row {idx}: non-numeric reward '{row[pos + 2]}'") from exc
            pos += 3
            stages.append(StageObservation(covariates=covs, instrument=z, action=a, reward=r))
        trajectories.append(Trajectory(stages=tuple(stages)))

    if not trajectories:
        raise DataError("empty dataset")
    return Dataset(trajectories=tuple(trajectories), num_stages=num_stages, covariate_dims=dims)


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _save_csv_file(dataset, fh)


def dumps_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    _save_csv_file(dataset, buf)
    return buf.getvalue()


def _save_csv_file(dataset: Dataset, fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(expected_header(dataset.num_stages, dataset.covariate_dims))
    for traj in dataset.trajectories:
        row: list = []
        for obs in traj.stages:
            row.extend(repr(float(v)) for v in obs.covariates)
            row.extend([obs.instrument, obs.action, repr(float(obs.reward))])
        writer.writerow(row)


def dataset_from_arrays(
    covariates: Sequence[np.ndarray],
    instruments: Sequence[np.ndarray],
    actions: Sequence[np.ndarray],
    rewards: Sequence[np.ndarray],
) -> Dataset:
    """Build a Dataset from per-stage arrays.

    covariates[k] has shape (n, d_{k+1}); instruments/actions/rewards[k] have
    shape (n,). Mostly used by the simulation engine and tests.
    """
    num_stages = len(covariates)
    n = len(np.atleast_2d(covariates[0]))
    trajectories = []
    for i in range(n):
        stages = []
        for k in range(num_stages):
            stages.append(
                StageObservation(
                    covariates=np.atleast_2d(covariates[k])[i],
                    instrument=int(instruments[k][i]),
                    action=int(actions[k][i]),
                    reward=float(rewards[k][i]),
                )
            )
        trajectories.append(Trajectory(stages=tuple(stages)))
    dims = tuple(np.atleast_2d(c).shape[1] for c in covariates)
    return Dataset(trajectories=tuple(trajectories), num_stages=num_stages, covariate_dims=dims)
