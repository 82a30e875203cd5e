"""Interpolation of reduced Koopman operators along a scalar parameter.

Between two bracketing samples the operators are blended on the
log-Euclidean geodesic ``expm((1-t) logm(A1) + t logm(A2))``.  When either
principal logarithm does not exist (an eigenvalue on the closed negative real
axis, or a defective eigenbasis) the pair is blended entrywise instead and the
fallback is reported.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.linalg import expm

from .dmd import DmdModel, fit_dmd
from .errors import DimensionMismatchError, ExtrapolationError, ValidationError
from .snapshot_store import ParameterPoint, format_float, read_matrix_csv, write_matrix_csv

log = logging.getLogger(__name__)

LOG_COND_MAX = 1e10


@dataclass(frozen=True)
class OperatorFamily:
    parameters: np.ndarray
    operators: tuple
    basis_id: str = ""
    modes: np.ndarray | None = field(default=None, repr=False)
    dt: float = 1.0

    def __post_init__(self):
        params = np.asarray(self.parameters, dtype=np.float64).reshape(-1)
        ops = tuple(np.asarray(A) for A in self.operators)
        if len(ops) < 2 or len(ops) != params.size:
            raise ValidationError("a family needs at least two (parameter, operator) samples")
        if np.any(np.diff(params) <= 0):
            raise ValidationError("family parameters must be strictly increasing")
        shape = ops[0].shape
        if len(shape) != 2 or shape[0] != shape[1] or any(A.shape != shape for A in ops):
            raise DimensionMismatchError("family operators must be square and of one size")
        object.__setattr__(self, "parameters", params)
        object.__setattr__(self, "operators", ops)

    @property
    def rank(self) -> int:
        return self.operators[0].shape[0]

    def reversed(self) -> "OperatorFamily":
        """The same family on the mirrored parameter axis p -> -p."""
        return OperatorFamily(-self.parameters[::-1], self.operators[::-1], self.basis_id,
                              self.modes, self.dt)


class Interpolated(NamedTuple):
    operator: np.ndarray
    fallback: bool


def principal_log(A):
    """Principal matrix logarithm through the eigendecomposition, or None.

    Returns None when an eigenvalue lies on the closed negative real axis or
    the eigenbasis is too ill-conditioned to invert reliably.
    """
    A = np.asarray(A)
    lam, W = np.linalg.eig(A)
    on_axis = (np.abs(lam.imag) <= 1e-12 * np.maximum(np.abs(lam), 1.0)) & (lam.real <= 0)
    if np.any(on_axis) or np.linalg.cond(W) > LOG_COND_MAX:
        return None
    L = W @ np.diag(np.log(lam)) @ np.linalg.inv(W)
    if np.isrealobj(A):
        L = L.real
    return L


def interpolate_koopman(family: OperatorFamily, target, expected_basis_id=None) -> Interpolated:
    p = family.parameters
    target = float(target)
    if expected_basis_id is not None and expected_basis_id != family.basis_id:
        raise ValidationError("operator family was built on a different basis")
    if not p[0] <= target <= p[-1]:
        raise ExtrapolationError(f"target {target} outside [{p[0]}, {p[-1]}]")
    hit = np.flatnonzero(p == target)
    if hit.size:
        return Interpolated(family.operators[hit[0]].copy(), False)
    j = int(np.searchsorted(p, target)) - 1
    theta = (target - p[j]) / (p[j + 1] - p[j])
    A1, A2 = family.operators[j], family.operators[j + 1]
    L1, L2 = principal_log(A1), principal_log(A2)
    if L1 is None or L2 is None:
        log.info("log-Euclidean blend inadmissible on [%g, %g]; using entrywise fallback",
                 p[j], p[j + 1])
        return Interpolated((1.0 - theta) * A1 + theta * A2, True)
    return Interpolated(expm((1.0 - theta) * L1 + theta * L2), False)


def interpolated_model(family: OperatorFamily, target) -> DmdModel:
    """Wrap an interpolated operator as a DmdModel sharing the family's modes."""
    Ar = interpolate_koopman(family, target).operator
    lam, W = np.linalg.eig(Ar)
    modes = family.modes if family.modes is not None else np.eye(family.rank)
    return DmdModel(modes, Ar, lam, W, family.dt, ParameterPoint([target]))


def shared_modes(projected_states, rank):
    """Leading left singular vectors of all X1 blocks stacked side by side."""
    X1 = np.hstack([np.asarray(S)[:-1].T for S in projected_states])
    U, s, _ = np.linalg.svd(X1, full_matrices=False)
    U = U[:, :rank]
    idx = np.argmax(np.abs(U), axis=0)
    return U * np.sign(U[idx, np.arange(rank)])


def fit_family(trajectories, rank, pod_basis_id="") -> OperatorFamily:
    """Fit one reduced operator per trajectory on a single shared U_r."""
    trajs = sorted(trajectories, key=lambda t: t.parameter.coords[0])
    Ur = shared_modes([t.states for t in trajs], rank)
    models = [fit_dmd(t, modes=Ur) for t in trajs]
    tag = hashlib.sha256(pod_basis_id.encode() + np.ascontiguousarray(Ur).tobytes()).hexdigest()[:16]
    return OperatorFamily([t.parameter.coords[0] for t in trajs],
                          [m.reduced_operator for m in models], tag, Ur, trajs[0].dt)


def save_family(family: OperatorFamily, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = []
    for i, A in enumerate(family.operators):
        name = f"operator_{i:03d}.csv"
        write_matrix_csv(path / name, A)
        files.append(name)
    if family.modes is not None:
        write_matrix_csv(path / "modes.csv", family.modes)
    index = {"parameters": [format_float(p) for p in family.parameters], "files": files,
             "basis_id": family.basis_id, "r": family.rank, "dt": format_float(family.dt)}
    (path / "family.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_family(path) -> OperatorFamily:
    path = Path(path)
    index = json.loads((path / "family.json").read_text())
    ops = [read_matrix_csv(path / f) for f in index["files"]]
    modes = read_matrix_csv(path / "modes.csv") if (path / "modes.csv").exists() else None
    return OperatorFamily([float(p) for p in index["parameters"]], ops, index["basis_id"],
                          modes, float(index["dt"]))
