"""Parameterized snapshot containers and their CSV + JSON persistence.

Layout of a snapshot directory::

    snapshots.csv   D rows x S columns, one column per snapshot, no header
    meta.json       {dimension, count, parameters, branches, seed, generator}

Trajectories use ``trajectories.json`` plus one ``traj_XXX.csv`` per
trajectory (D rows x m columns).  All floats are written with 17 significant
digits so that doubles survive the round trip bit-exactly.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    CountMismatchError,
    DimensionMismatchError,
    InvariantViolationError,
    SnapshotFileError,
    SnapshotParseError,
    ValidationError,
)

BRANCHES = ("single", "upper", "lower")
SNAPSHOT_CSV = "snapshots.csv"
SNAPSHOT_META = "meta.json"
TRAJECTORY_META = "trajectories.json"


@dataclass(frozen=True)
class ParameterPoint:
    coords: tuple[float, ...]

    def __post_init__(self):
        coords = tuple(float(c) for c in np.atleast_1d(self.coords))
        if not coords:
            raise ValidationError("parameter point needs at least one coordinate")
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite parameter coordinates {coords}")
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self) -> int:
        return len(self.coords)

    def as_array(self) -> np.ndarray:
        return np.array(self.coords)


def as_point(p) -> ParameterPoint:
    return p if isinstance(p, ParameterPoint) else ParameterPoint(p)


@dataclass
class Trajectory:
    """Time-ordered states at one parameter; ``states[k]`` is the state at ``times[k]``."""

    parameter: ParameterPoint
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.parameter = as_point(self.parameter)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states)
        if self.states.ndim != 2:
            raise DimensionMismatchError("states must be an (m, D) array")
        m = self.states.shape[0]
        if m < 2:
            raise ValidationError("a trajectory needs at least two states")
        if self.times.shape != (m,):
            raise CountMismatchError(f"{self.times.size} times for {m} states")
        steps = np.diff(self.times)
        if np.any(steps <= 0):
            raise ValidationError("times must be strictly increasing")
        dt = steps.mean()
        if np.max(np.abs(steps - dt)) > 1e-12 * max(abs(dt), np.max(np.abs(self.times))):
            raise ValidationError("time step is not uniform")

    @property
    def dt(self) -> float:
        return float((self.times[-1] - self.times[0]) / (len(self.times) - 1))

    @property
    def length(self) -> int:
        return self.states.shape[0]

    @property
    def dimension(self) -> int:
        return self.states.shape[1]


@dataclass
class SnapshotEntry:
    parameter: ParameterPoint
    branch: str
    state: np.ndarray

    def __post_init__(self):
        self.parameter = as_point(self.parameter)
        if self.branch not in BRANCHES:
            raise InvariantViolationError(f"unknown branch tag {self.branch!r}")
        self.state = np.asarray(self.state, dtype=np.float64).reshape(-1)


@dataclass
class SnapshotSet:
    entries: list[SnapshotEntry] = field(default_factory=list)
    generator: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        validate_snapshot_set(self)

    def __len__(self):
        return len(self.entries)

    @property
    def dimension(self) -> int | None:
        return self.entries[0].state.size if self.entries else None

    def matrix(self) -> np.ndarray:
        """Snapshot matrix with one column per entry."""
        if not self.entries:
            return np.zeros((0, 0))
        return np.column_stack([e.state for e in self.entries])

    def parameters(self) -> np.ndarray:
        return np.array([e.parameter.coords for e in self.entries])

    def branches(self) -> list[str]:
        return [e.branch for e in self.entries]


def validate_snapshot_set(snapshots: SnapshotSet) -> None:
    if not snapshots.entries:
        return
    dim = snapshots.entries[0].state.size
    pdim = snapshots.entries[0].parameter.dim
    by_param = defaultdict(list)
    for i, e in enumerate(snapshots.entries):
        if e.state.size != dim:
            raise DimensionMismatchError(f"entry {i} has dimension {e.state.size}, expected {dim}")
        if e.parameter.dim != pdim:
            raise DimensionMismatchError(f"entry {i} has a {e.parameter.dim}-D parameter, expected {pdim}")
        by_param[e.parameter.coords].append(e.branch)
    for coords, tags in by_param.items():
        if len(tags) > 2 or len(set(tags)) != len(tags):
            raise InvariantViolationError(f"parameter {coords} has branches {tags}")
        if "single" in tags and len(tags) > 1:
            raise InvariantViolationError(f"parameter {coords} mixes single with {tags}")


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

def format_float(x: float) -> str:
    return "%.17g" % x


def write_matrix_csv(path: Path, M: np.ndarray) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    lines = [",".join(format_float(v) for v in row) for row in M]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def read_matrix_csv(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise SnapshotFileError(path, "file not found")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(tok) for tok in line.split(",")])
        except ValueError as exc:
            raise SnapshotParseError(path, f"line {lineno}: {exc}") from None
    if not rows:
        return np.zeros((0, 0))
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DimensionMismatchError(f"{path}: ragged rows with widths {sorted(widths)}")
    return np.array(rows)


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise SnapshotFileError(path, "file not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SnapshotParseError(path, str(exc)) from None


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# snapshot sets
# ---------------------------------------------------------------------------

def save_snapshot_set(snapshots: SnapshotSet, path) -> None:
    validate_snapshot_set(snapshots)
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        meta = {
            "dimension": snapshots.dimension or 0,
            "count": len(snapshots),
            "parameters": [list(e.parameter.coords) for e in snapshots.entries],
            "branches": snapshots.branches(),
            "seed": snapshots.seed,
            "generator": snapshots.generator,
        }
        csv_path = path / SNAPSHOT_CSV
        if snapshots.entries:
            write_matrix_csv(csv_path, snapshots.matrix())
        elif csv_path.exists():
            csv_path.unlink()
        _write_json(path / SNAPSHOT_META, meta)
    except OSError as exc:
        raise SnapshotFileError(path, f"write failed: {exc}") from exc


def load_snapshot_set(path) -> SnapshotSet:
    path = Path(path)
    meta = _read_json(path / SNAPSHOT_META)
    try:
        count = int(meta["count"])
        dim = int(meta["dimension"])
        params = meta["parameters"]
        branches = meta["branches"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotParseError(path / SNAPSHOT_META, f"bad metadata: {exc}") from None
    if len(params) != count or len(branches) != count:
        raise CountMismatchError(
            f"meta.json lists count={count} but {len(params)} parameters / {len(branches)} branches")
    if count == 0:
        X = np.zeros((dim, 0))
    else:
        X = read_matrix_csv(path / SNAPSHOT_CSV)
        if X.shape[1] != count:
            raise CountMismatchError(f"meta.json lists {count} entries but CSV has {X.shape[1]} columns")
        if X.shape[0] != dim:
            raise DimensionMismatchError(f"meta.json dimension {dim} but CSV has {X.shape[0]} rows")
    entries = [SnapshotEntry(ParameterPoint(p), b, X[:, i].copy())
               for i, (p, b) in enumerate(zip(params, branches))]
    return SnapshotSet(entries, generator=meta.get("generator") or {}, seed=meta.get("seed"))


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def save_trajectories(trajectories: list[Trajectory], path, *, seed=None, generator=None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dims = {t.dimension for t in trajectories}
    if len(dims) > 1:
        raise DimensionMismatchError(f"trajectories have dimensions {sorted(dims)}")
    entries = []
    for i, traj in enumerate(trajectories):
        name = f"traj_{i:03d}.csv"
        write_matrix_csv(path / name, traj.states.T)
        entries.append({"parameter": list(traj.parameter.coords), "file": name,
                        "times": [float(t) for t in traj.times]})
    _write_json(path / TRAJECTORY_META, {
        "dimension": dims.pop() if dims else 0,
        "count": len(trajectories),
        "entries": entries,
        "seed": seed,
        "generator": generator or {},
    })


def load_trajectories(path) -> tuple[list[Trajectory], dict]:
    path = Path(path)
    meta = _read_json(path / TRAJECTORY_META)
    if len(meta.get("entries", [])) != meta.get("count"):
        raise CountMismatchError("trajectories.json count does not match its entries")
    out = []
    for e in meta["entries"]:
        X = read_matrix_csv(path / e["file"])
        if X.shape[0] != meta["dimension"]:
            raise DimensionMismatchError(f"{e['file']} has {X.shape[0]} rows, expected {meta['dimension']}")
        out.append(Trajectory(ParameterPoint(e["parameter"]), np.array(e["times"]), X.T.copy()))
    return out, meta
