"""Exact, stabilized and Hankel dynamic mode decomposition.

States are stored row-wise (``states[k]`` is x^k) as in ``Trajectory``; the
DMD data matrices are the column-stacked transposes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .errors import (
    DivergenceError,
    IllConditionedError,
    RankDeficiencyError,
    ValidationError,
)
from .pod import energy_rank
from .snapshot_store import (
    ParameterPoint,
    Trajectory,
    format_float,
    read_matrix_csv,
    write_matrix_csv,
)

log = logging.getLogger(__name__)

DEFAULT_RANK_ENERGY = 1.0 - 1e-10
RANK_TOL = 1e-13
COND_MAX = 1e12


def _states(traj):
    if isinstance(traj, Trajectory):
        return traj.states, traj.dt, traj.parameter
    X = np.asarray(traj, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return X, 1.0, ParameterPoint([0.0])


def _sorted_eig(A):
    lam, W = np.linalg.eig(A)
    order = np.lexsort((-lam.imag, -np.abs(lam)))
    return lam[order], W[:, order]


@dataclass(frozen=True)
class DmdModel:
    """Koopman operator A = U_r A_r U_r^T with the eigen-decomposition of A_r."""

    modes: np.ndarray             # U_r, N x r
    reduced_operator: np.ndarray  # A_r, r x r
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray      # W with A_r W = W diag(eigenvalues)
    dt: float = 1.0
    parameter: ParameterPoint = field(default_factory=lambda: ParameterPoint([0.0]))
    residual: float = float("nan")
    dmd_modes: np.ndarray | None = None  # exact-DMD modes X2 V S^-1 W, if fitted

    @property
    def rank(self) -> int:
        return self.reduced_operator.shape[0]

    @property
    def eigenbasis_condition(self) -> float:
        return float(np.linalg.cond(self.eigenvectors))

    def continuous_eigenvalues(self) -> np.ndarray:
        """ln(lambda) / dt, i.e. growth rates and angular frequencies."""
        with np.errstate(divide="ignore"):
            return np.log(self.eigenvalues.astype(complex)) / self.dt


def _exact_dmd(X1, X2, rank):
    U, s, Vh = np.linalg.svd(X1, full_matrices=False)
    if rank is None:
        rank = max(energy_rank(s, DEFAULT_RANK_ENERGY), 1)
    rank = int(rank)
    if rank < 1 or rank > s.size:
        raise ValidationError(f"rank {rank} exceeds the {s.size} available singular values")
    if s[0] == 0 or s[rank - 1] / s[0] < RANK_TOL:
        raise RankDeficiencyError(
            f"sigma_r/sigma_1 = {s[rank - 1] / s[0] if s[0] else 0:.2e} below {RANK_TOL}; reduce r")
    Ur = U[:, :rank]
    Vr = Vh[:rank].conj().T
    Sinv = 1.0 / s[:rank]
    X2V = X2 @ Vr
    Ar = Ur.T @ X2V * Sinv
    return Ur, Ar, X2V * Sinv


def fit_dmd(traj, rank=None, modes=None) -> DmdModel:
    """Exact DMD of a (projected) trajectory.

    With ``modes`` given, the supplied orthonormal U_r is used instead of the
    SVD of X1 and A_r is the least-squares operator in those coordinates; this
    is how operators that must share one basis across parameters are fitted.
    """
    S, dt, param = _states(traj)
    m = S.shape[0]
    X1, X2 = S[:-1].T, S[1:].T
    if modes is None:
        if rank is not None and m < int(rank) + 1:
            raise ValidationError(f"need at least r+1={int(rank) + 1} states, got {m}")
        Ur, Ar, scaled = _exact_dmd(X1, X2, rank)
    else:
        Ur = np.asarray(modes, dtype=np.float64)
        if Ur.shape[0] != S.shape[1]:
            raise ValidationError("supplied modes do not match the state dimension")
        Ar = np.linalg.lstsq((Ur.T @ X1).T, (Ur.T @ X2).T, rcond=None)[0].T
        scaled = None
    lam, W = _sorted_eig(Ar)
    A = Ur @ Ar @ Ur.T
    res = float(np.linalg.norm(X2 - A @ X1))
    return DmdModel(Ur, Ar, lam, W, dt, param, res,
                    None if scaled is None else scaled @ W)


def one_step_residual(model: DmdModel, traj) -> float:
    S, _, _ = _states(traj)
    A = reconstruct_koopman(model)
    return float(np.linalg.norm(S[1:].T - A @ S[:-1].T))


def reconstruct_koopman(model: DmdModel) -> np.ndarray:
    Ur = model.modes
    return Ur @ model.reduced_operator @ Ur.T


def rollout(model: DmdModel, x0, steps) -> Trajectory:
    """Iterate x^{k+1} = A x^k for ``steps`` steps starting from ``x0``."""
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    A = reconstruct_koopman(model)
    x0 = np.asarray(x0, dtype=np.float64)
    states, fail = kernels.active().linear_rollout(A, x0, int(steps))
    if fail >= 0:
        raise DivergenceError(fail, "DMD rollout produced non-finite values")
    return Trajectory(model.parameter, np.arange(steps + 1) * model.dt, states)


def stabilize(model: DmdModel) -> DmdModel:
    """Scale every nonzero eigenvalue of A_r onto the unit circle."""
    W = model.eigenvectors
    cond = np.linalg.cond(W)
    if not np.isfinite(cond) or cond > COND_MAX:
        raise IllConditionedError(f"eigenvector matrix condition number {cond:.3e} > {COND_MAX:.0e}")
    lam = model.eigenvalues
    mag = np.abs(lam)
    zero = mag <= 1e-14 * max(mag.max(initial=0.0), 1e-300)
    new = np.where(zero, 0.0, lam / np.where(zero, 1.0, mag))
    Ar = W @ np.diag(new) @ np.linalg.inv(W)
    if np.isrealobj(model.reduced_operator):
        scale = max(np.abs(Ar).max(), 1.0)
        imag = np.abs(Ar.imag).max() / scale
        if imag > 1e-10:
            raise IllConditionedError(f"stabilized operator has imaginary residue {imag:.2e}")
        Ar = Ar.real.copy()
    log.debug("stabilized %d eigenvalues (cond W = %.3e)", int((~zero).sum()), cond)
    return replace(model, reduced_operator=Ar, eigenvalues=new, residual=float("nan"))


def period_amplitudes(series, period) -> np.ndarray:
    """max |series| over each complete window of ``period`` samples."""
    x = np.abs(np.asarray(series, dtype=np.float64))
    n = x.size // int(period)
    if n < 1:
        raise ValidationError("series shorter than one period")
    return x[: n * int(period)].reshape(n, int(period)).max(axis=1)


def amplitude_drift(series, period) -> float:
    """Largest relative change of the per-period amplitude from the first period."""
    amp = period_amplitudes(series, period)
    return float(np.max(np.abs(amp / amp[0] - 1.0)))


# ---------------------------------------------------------------------------
# Hankel DMD
# ---------------------------------------------------------------------------

def build_hankel(series, rows, cols) -> np.ndarray:
    """H[j, k] = series[j + k] for j < rows, k < cols."""
    x = np.asarray(series)
    if x.ndim != 1:
        raise ValidationError("series must be one-dimensional")
    if rows < 1 or cols < 1 or x.size < rows + cols - 1:
        raise ValidationError(f"series of length {x.size} too short for a {rows}x{cols} Hankel matrix")
    return sliding_window_view(x[: rows + cols - 1], cols).copy()


@dataclass(frozen=True)
class HankelDmdModel:
    delay: int                     # n; each observable is embedded as a window of n+1 values
    n_observables: int
    scaling: np.ndarray            # Frobenius norm of each H^i (1 for dropped observables)
    active: np.ndarray             # bool mask of observables kept in the composite
    modes: np.ndarray              # U_r of the composite data
    reduced_operator: np.ndarray   # A_r
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    koopman_modes: np.ndarray      # exact-DMD modes in the composite space
    eigenfunctions: np.ndarray     # eigenfunction values along the training data (r x columns)
    dt: float = 1.0
    parameter: ParameterPoint = field(default_factory=lambda: ParameterPoint([0.0]))

    @property
    def rank(self) -> int:
        return self.reduced_operator.shape[0]

    @property
    def window(self) -> int:
        return self.delay + 1


def _composite(S, delay, active, scaling, shift):
    M = S.shape[0]
    rows = M - delay - 1
    blocks = [build_hankel(S[shift:, i], rows, delay + 1).T / scaling[i]
              for i in np.flatnonzero(active)]
    return np.vstack(blocks)


def fit_hankel_dmd(traj, delay, rank=None) -> HankelDmdModel:
    """Hankel DMD: delay-embed each observable, scale, stack, run exact DMD."""
    S, dt, param = _states(traj)
    M, N = S.shape
    delay = int(delay)
    if delay < 0:
        raise ValidationError("delay depth must be >= 0")
    r_min = 1 if rank is None else int(rank)
    if M < delay + r_min + 2:
        raise ValidationError(f"trajectory of {M} states too short for delay {delay} and rank {r_min}")
    rows = M - delay - 1
    scaling = np.ones(N)
    active = np.zeros(N, dtype=bool)
    for i in range(N):
        nrm = np.linalg.norm(build_hankel(S[:, i], rows, delay + 1))
        if nrm > 0:
            scaling[i] = nrm
            active[i] = True
        else:
            log.info("observable %d is identically zero on the training window; dropped", i)
    if not active.any():
        raise ValidationError("all observables are identically zero")
    X1 = _composite(S, delay, active, scaling, 0)
    X2 = _composite(S, delay, active, scaling, 1)
    Ur, Ar, scaled = _exact_dmd(X1, X2, rank)
    lam, W = _sorted_eig(Ar)
    phi = scaled @ W
    eigfun = np.linalg.solve(W, Ur.T @ X1) if np.linalg.cond(W) < COND_MAX else np.full((Ar.shape[0], X1.shape[1]), np.nan)
    return HankelDmdModel(delay, N, scaling, active, Ur, Ar, lam, W, phi, eigfun, dt, param)


def rollout_hankel(model: HankelDmdModel, window, steps) -> Trajectory:
    """Predict ``steps`` states past an initial window of ``delay + 1`` states.

    The returned trajectory contains the window followed by the predictions.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 1:
        window = window[:, None]
    if window.shape != (model.window, model.n_observables):
        raise ValidationError(
            f"window must have shape ({model.window}, {model.n_observables}), got {window.shape}")
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    idx = np.flatnonzero(model.active)
    c0 = np.concatenate([window[:, i] / model.scaling[i] for i in idx])
    Ur, Ar = model.modes, model.reduced_operator
    A = Ur @ Ar @ Ur.T
    comp, fail = kernels.active().linear_rollout(A, c0, int(steps))
    if fail >= 0:
        raise DivergenceError(fail, "Hankel-DMD rollout produced non-finite values")
    w = model.window
    last = comp[1:, w - 1::w]          # most recent time slice of each block
    pred = np.zeros((steps, model.n_observables))
    pred[:, idx] = last * model.scaling[idx]
    states = np.vstack([window, pred])
    times = np.arange(states.shape[0]) * model.dt
    return Trajectory(model.parameter, times, states)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _write_complex(path, stem, Z):
    Z = np.atleast_2d(np.asarray(Z))
    write_matrix_csv(path / f"{stem}_re.csv", Z.real)
    write_matrix_csv(path / f"{stem}_im.csv", Z.imag)


def _read_complex(path, stem):
    return read_matrix_csv(path / f"{stem}_re.csv") + 1j * read_matrix_csv(path / f"{stem}_im.csv")


def save_dmd(model: DmdModel, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(path / "modes.csv", model.modes)
    write_matrix_csv(path / "reduced_operator.csv", model.reduced_operator)
    _write_complex(path, "eigenvalues", model.eigenvalues[None, :])
    _write_complex(path, "eigenvectors", model.eigenvectors)
    header = {"kind": "dmd", "r": model.rank, "N": model.modes.shape[0],
              "dt": format_float(model.dt), "parameter": list(model.parameter.coords),
              "residual": format_float(model.residual)}
    (path / "dmd.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_dmd(path) -> DmdModel:
    path = Path(path)
    header = json.loads((path / "dmd.json").read_text())
    lam = _read_complex(path, "eigenvalues")[0]
    W = _read_complex(path, "eigenvectors")
    if np.all(lam.imag == 0) and np.all(W.imag == 0):
        lam, W = lam.real, W.real
    return DmdModel(read_matrix_csv(path / "modes.csv"),
                    read_matrix_csv(path / "reduced_operator.csv"), lam, W,
                    float(header["dt"]), ParameterPoint(header["parameter"]),
                    float(header["residual"]))


def save_hankel(model: HankelDmdModel, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(path / "modes.csv", model.modes)
    write_matrix_csv(path / "reduced_operator.csv", model.reduced_operator)
    _write_complex(path, "eigenvalues", model.eigenvalues[None, :])
    _write_complex(path, "eigenvectors", model.eigenvectors)
    header = {"kind": "hankel-dmd", "r": model.rank, "n": model.delay,
              "observables": model.n_observables, "dt": format_float(model.dt),
              "parameter": list(model.parameter.coords),
              "scaling": [format_float(v) for v in model.scaling],
              "active": [bool(a) for a in model.active]}
    (path / "hankel.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_hankel(path) -> HankelDmdModel:
    path = Path(path)
    h = json.loads((path / "hankel.json").read_text())
    Ur = read_matrix_csv(path / "modes.csv")
    Ar = read_matrix_csv(path / "reduced_operator.csv")
    lam = _read_complex(path, "eigenvalues")[0]
    W = _read_complex(path, "eigenvectors")
    empty = np.zeros((0, 0))
    return HankelDmdModel(int(h["n"]), int(h["observables"]),
                          np.array([float(v) for v in h["scaling"]]), np.array(h["active"]),
                          Ur, Ar, lam, W, empty, empty, float(h["dt"]),
                          ParameterPoint(h["parameter"]))
