"""Synthetic full-order models with known bifurcation structure.

Two lifted normal forms stand in for the fluid solvers:

* ``HopfSystem``: a Stuart-Landau oscillator embedded in R^D through an
  orthonormal D x 2 lifting ``V``; everything off span(V) decays at rate
  ``kappa``.  For ``mu(g) > 0`` the attractor is a circle of radius
  ``sqrt(mu)`` travelled at angular rate ``omega``.
* ``PitchforkSystem``: a steady residual whose stable roots are
  ``u = +-sqrt(mu_eff) v1 + mu_eff v2`` past onset and ``u = 0`` before it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import (
    ConvergenceError,
    DivergenceError,
    SingularJacobianError,
    ValidationError,
)
from .snapshot_store import ParameterPoint, SnapshotEntry, SnapshotSet, Trajectory

TWO_PI = 2.0 * math.pi

# default parameter boxes, (nu, w) and g
NU_RANGE = (0.1, 0.2)
W_RANGE = (0.5, 1.0)
G_RANGE = (100.0, 150.0)


def _orthonormal_frame(D, ncols, seed):
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((D, ncols)))
    # fix the QR sign ambiguity so the frame is a function of the seed only
    return Q * np.sign(np.diag(R))


# ---------------------------------------------------------------------------
# Hopf
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HopfSystem:
    D: int
    V: np.ndarray = field(repr=False)
    omega: float
    kappa: float
    g_c: float
    s: float
    seed: int

    def mu(self, g: float) -> float:
        return (float(g) - self.g_c) / self.s

    def lift(self, z) -> np.ndarray:
        return self.V @ np.asarray(z, dtype=np.float64)

    def latent(self, u) -> np.ndarray:
        return self.V.T @ np.asarray(u)

    def rhs(self, u, g):
        return kernels.hopf_rhs(np.asarray(u, dtype=np.float64), self.V, self.mu(g),
                                self.omega, self.kappa)

    def describe(self) -> dict:
        return {"kind": "hopf", "D": self.D, "omega": self.omega, "kappa": self.kappa,
                "g_c": self.g_c, "s": self.s, "seed": self.seed}


def make_hopf_system(D=50, omega=TWO_PI, kappa=5.0, g_c=90.0, s=100.0, seed=0) -> HopfSystem:
    """Lifted Hopf normal form.  Defaults map g in [100, 150] to mu in [0.1, 0.6]."""
    if int(D) != D or D < 2:
        raise ValidationError(f"D must be an integer >= 2, got {D}")
    for name, val in (("omega", omega), ("kappa", kappa), ("s", s)):
        if not (val > 0 and math.isfinite(val)):
            raise ValidationError(f"{name} must be positive, got {val}")
    V = _orthonormal_frame(int(D), 2, seed)
    V.setflags(write=False)
    return HopfSystem(int(D), V, float(omega), float(kappa), float(g_c), float(s), seed)


def simulate(system: HopfSystem, g, x0, dt=1e-3, steps=1000, record_every=1) -> Trajectory:
    """Integrate the lifted Hopf system with classical RK4.

    Every ``record_every``-th state is kept, so the returned trajectory has
    ``steps // record_every + 1`` states spaced ``dt * record_every`` apart.
    """
    if not dt > 0:
        raise ValidationError("dt must be positive")
    if steps < 1 or record_every < 1 or steps % record_every:
        raise ValidationError("steps must be a positive multiple of record_every")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (system.D,):
        raise ValidationError(f"x0 must have shape ({system.D},)")
    states, fail = kernels.active().rk4_hopf(system.V, system.mu(g), system.omega,
                                            system.kappa, x0, dt, steps, record_every)
    if fail >= 0:
        raise DivergenceError(fail)
    times = np.arange(states.shape[0]) * (dt * record_every)
    return Trajectory(ParameterPoint([g]), times, states)


def hopf_cycle_radius(system: HopfSystem, g) -> float:
    mu = system.mu(g)
    return math.sqrt(mu) if mu > 0 else 0.0


def hopf_trajectories(system, g_values, x0, dt=1e-3, steps=10000, record_every=1):
    return [simulate(system, g, x0, dt, steps, record_every) for g in g_values]


# ---------------------------------------------------------------------------
# pitchfork
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PitchforkSystem:
    D: int
    v1: np.ndarray = field(repr=False)
    v2: np.ndarray = field(repr=False)
    kappa: float
    alpha: float
    beta: float
    nu_star: float
    w_star: float
    seed: int

    def mu_eff(self, nu, w) -> float:
        return self.alpha * (self.nu_star - float(nu)) + self.beta * (self.w_star - float(w))

    def observable(self, u) -> float:
        return float(self.v1 @ u)

    def residual(self, u, nu, w) -> np.ndarray:
        return residual_mu(self, u, self.mu_eff(nu, w))

    def jacobian(self, u, nu, w) -> np.ndarray:
        return jacobian_mu(self, u, self.mu_eff(nu, w))

    def describe(self) -> dict:
        return {"kind": "pitchfork", "D": self.D, "kappa": self.kappa, "alpha": self.alpha,
                "beta": self.beta, "nu_star": self.nu_star, "w_star": self.w_star,
                "seed": self.seed}


def residual_mu(system: PitchforkSystem, u, mu) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v1, v2 = system.v1, system.v2
    y = v1 @ u
    return v1 * (mu * y - y ** 3) - system.kappa * (u - v1 * y - v2 * y * y)


def jacobian_mu(system: PitchforkSystem, u, mu) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v1, v2 = system.v1, system.v2
    y = v1 @ u
    J = (mu - 3.0 * y * y) * np.outer(v1, v1)
    J -= system.kappa * (np.eye(system.D) - np.outer(v1, v1) - 2.0 * y * np.outer(v2, v1))
    return J


def make_pitchfork_system(D=40, kappa=5.0, alpha=10.0, beta=1.0, nu_star=0.155,
                          w_star=0.75, seed=0) -> PitchforkSystem:
    """Lifted pitchfork.  Onset ``mu_eff = 0`` is a line crossing the default box."""
    if int(D) != D or D < 2:
        raise ValidationError(f"D must be an integer >= 2, got {D}")
    for name, val in (("kappa", kappa), ("alpha", alpha), ("beta", beta),
                      ("nu_star", nu_star), ("w_star", w_star)):
        if not (val > 0 and math.isfinite(val)):
            raise ValidationError(f"{name} must be positive, got {val}")
    Q = _orthonormal_frame(int(D), 2, seed)
    v1, v2 = Q[:, 0].copy(), Q[:, 1].copy()
    v1.setflags(write=False)
    v2.setflags(write=False)
    return PitchforkSystem(int(D), v1, v2, float(kappa), float(alpha), float(beta),
                           float(nu_star), float(w_star), seed)


class Branch(NamedTuple):
    state: np.ndarray
    stable: bool
    tag: str


def steady_branches(system: PitchforkSystem, nu, w) -> list[Branch]:
    """Closed-form steady states, stable ones first (upper, lower), then the unstable root."""
    mu = system.mu_eff(nu, w)
    zero = np.zeros(system.D)
    if mu <= 0:
        return [Branch(zero, True, "single")]
    y = math.sqrt(mu)
    return [
        Branch(y * system.v1 + mu * system.v2, True, "upper"),
        Branch(-y * system.v1 + mu * system.v2, True, "lower"),
        Branch(zero, False, "trivial"),
    ]


def newton(residual, jacobian, x0, tol=1e-12, max_iter=50, cond_max=1e13):
    """Plain Newton iteration; returns ``(x, iterations, residual_norm)``."""
    x = np.array(x0, dtype=np.float64)
    for it in range(max_iter + 1):
        F = residual(x)
        J = jacobian(x)
        if not np.all(np.isfinite(F)):
            raise ConvergenceError(it, float("inf"))
        if np.linalg.cond(J) > cond_max:
            raise SingularJacobianError(f"singular Jacobian at iteration {it}")
        nrm = float(np.linalg.norm(F))
        if nrm <= tol:
            return x, it, nrm
        if it == max_iter:
            break
        x = x - np.linalg.solve(J, F)
    raise ConvergenceError(max_iter, nrm)


def newton_solve_steady(system: PitchforkSystem, nu, w, guess, tol=1e-12, max_iter=50,
                        full_output=False):
    if not tol > 0:
        raise ValidationError("tol must be positive")
    mu = system.mu_eff(nu, w)
    x, it, _ = newton(lambda u: residual_mu(system, u, mu),
                      lambda u: jacobian_mu(system, u, mu), guess, tol, max_iter)
    return (x, it) if full_output else x


def parameter_grid(n_nu=10, n_w=11, nu_range=NU_RANGE, w_range=W_RANGE) -> np.ndarray:
    """Uniform (nu, w) grid, nu varying slowest; shape (n_nu * n_w, 2)."""
    nu = np.linspace(*nu_range, n_nu)
    w = np.linspace(*w_range, n_w)
    return np.array([(a, b) for a in nu for b in w])


def pitchfork_snapshots(system: PitchforkSystem, grid) -> SnapshotSet:
    """One snapshot per stable steady state at every grid point."""
    entries = []
    for nu, w in np.asarray(grid):
        for br in steady_branches(system, nu, w):
            if br.stable:
                entries.append(SnapshotEntry(ParameterPoint([nu, w]), br.tag, br.state))
    return SnapshotSet(entries, generator=system.describe(), seed=system.seed)
