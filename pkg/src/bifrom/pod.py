"""Proper orthogonal decomposition of snapshot matrices."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, RankDeficiencyError, ValidationError
from .snapshot_store import format_float, read_matrix_csv, write_matrix_csv


@dataclass(frozen=True)
class PodBasis:
    """Orthonormal modes (D x N) plus every computed singular value."""

    modes: np.ndarray
    singular_values: np.ndarray

    @property
    def N(self) -> int:
        return self.modes.shape[1]

    @property
    def D(self) -> int:
        return self.modes.shape[0]

    def energy_fraction(self) -> float:
        s2 = self.singular_values ** 2
        total = s2.sum()
        return float(s2[: self.N].sum() / total) if total > 0 else 1.0

    def identifier(self) -> str:
        """Content hash of the modes; used to tag operators built on this basis."""
        h = hashlib.sha256(np.ascontiguousarray(self.modes).tobytes())
        return h.hexdigest()[:16]


def _fix_signs(U):
    # largest-magnitude entry of each column positive (first one on ties)
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def energy_rank(singular_values, eta) -> int:
    """Smallest n with sum(s[:n]**2) >= eta * sum(s**2)."""
    s2 = np.asarray(singular_values, dtype=np.float64) ** 2
    total = s2.sum()
    if total == 0:
        return 0
    cum = np.cumsum(s2)
    # small relative slack so eta=1 is reachable despite rounding in cumsum
    return int(np.searchsorted(cum, eta * total * (1 - 1e-14), side="left") + 1)


def compute_pod(snapshots, rank=None, energy=None) -> PodBasis:
    """POD of a D x S snapshot matrix (columns are snapshots, no centering).

    Exactly one of ``rank`` (fixed N) or ``energy`` (fraction eta in (0, 1])
    selects the retained dimension.
    """
    X = np.asarray(snapshots, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValidationError("snapshot matrix must be D x S with S >= 1")
    if (rank is None) == (energy is None):
        raise ValidationError("give exactly one of rank= or energy=")
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    if rank is not None:
        rank = int(rank)
        if rank < 1 or rank > min(X.shape):
            raise ValidationError(f"invalid rank {rank} for a {X.shape[0]}x{X.shape[1]} matrix")
        if s[rank - 1] <= 0 or s[rank - 1] <= s[0] * 1e-15 * max(X.shape):
            raise RankDeficiencyError(f"matrix has numerical rank below {rank}")
        N = rank
    else:
        if not 0 < energy <= 1:
            raise ValidationError(f"energy fraction must lie in (0, 1], got {energy}")
        N = energy_rank(s, energy)
        if N == 0:
            raise RankDeficiencyError("zero snapshot matrix has no POD modes")
    modes = _fix_signs(U[:, :N])
    modes.setflags(write=False)
    s.setflags(write=False)
    return PodBasis(modes, s)


def project(basis: PodBasis, state) -> np.ndarray:
    state = np.asarray(state)
    if state.shape[0] != basis.D:
        raise DimensionMismatchError(f"state has {state.shape[0]} rows, basis has {basis.D}")
    return basis.modes.T @ state


def lift(basis: PodBasis, coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs)
    if coeffs.shape[0] != basis.N:
        raise DimensionMismatchError(f"got {coeffs.shape[0]} coefficients, basis has {basis.N}")
    return basis.modes @ coeffs


def projection_residual(basis_modes, X) -> float:
    """Squared Frobenius norm of X minus its projection onto span(modes)."""
    R = X - basis_modes @ (basis_modes.T @ X)
    return float(np.sum(R * R))


def save_basis(basis: PodBasis, path, stem="pod") -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(path / f"{stem}_modes.csv", basis.modes)
    header = {"N": basis.N, "D": basis.D,
              "singular_values": [format_float(v) for v in basis.singular_values],
              "basis_id": basis.identifier()}
    (path / f"{stem}.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_basis(path, stem="pod") -> PodBasis:
    path = Path(path)
    header = json.loads((path / f"{stem}.json").read_text())
    modes = read_matrix_csv(path / f"{stem}_modes.csv")
    if modes.shape != (header["D"], header["N"]):
        raise DimensionMismatchError(f"modes file has shape {modes.shape}")
    s = np.array([float(v) for v in header["singular_values"]])
    modes.setflags(write=False)
    s.setflags(write=False)
    return PodBasis(modes, s)
