"""Localized reduced-order models for multi-branch steady problems.

Snapshots are clustered with k-means, each cluster gets its own POD basis
and Galerkin ROM, and an online parameter is mapped to a cluster either by
the nearest snapshot, by a pair of error-trained classifiers (one per
branch), or by the per-row minimum of the offline error table.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import (
    NumericalError,
    ValidationError,
)
from .pod import PodBasis, compute_pod
from .snapshot_store import SnapshotSet, format_float
from .synthetic_fom import PitchforkSystem, jacobian_mu, newton, residual_mu, steady_branches

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-8
MERGE_TOL = 1e-6
BRANCH_SETS = {"upper": ("single", "upper"), "lower": ("single", "lower")}
GUESS_ORDER = {"upper": (("upper",), ("single",)), "lower": (("lower",), ("single",))}


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    energy: float
    seed: int
    energy_history: list = field(default_factory=list)
    iterations: int = 0

    def members(self, c) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


def _as_points(snapshots) -> np.ndarray:
    if isinstance(snapshots, SnapshotSet):
        return snapshots.matrix().T
    X = np.asarray(snapshots, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return X


def _kmeanspp(X, k, rng):
    S = X.shape[0]
    centers = [int(rng.integers(S))]
    d2 = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(S, p=d2 / total))
        else:
            # every point coincides with a centre; take the first unused index
            nxt = next(i for i in range(S) if i not in centers)
        centers.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[centers].copy()


def kmeans_cluster(snapshots, k, seed=0, max_iter=300) -> ClusterModel:
    """Lloyd iterations from k-means++ seeding.

    Points are rows.  Empty clusters are re-seeded at the point farthest from
    its centroid.  ``energy_history`` records the energy after every
    assignment step and is non-increasing.
    """
    X = _as_points(snapshots)
    S = X.shape[0]
    if not 1 <= int(k) <= S:
        raise ValidationError(f"k must lie in [1, {S}], got {k}")
    k = int(k)
    kern = kernels.active()
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, k, rng)
    labels, d2 = kern.nearest_centroid(X, C)
    history = [float(d2.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        for c in range(k):
            idx = labels == c
            if idx.any():
                C[c] = X[idx].mean(axis=0)
        # empty clusters take the currently worst-served point
        for c in range(k):
            if not np.any(labels == c):
                far = int(np.argmax(((X - C[labels]) ** 2).sum(axis=1)))
                C[c] = X[far]
                labels[far] = c
        new_labels, d2 = kern.nearest_centroid(X, C)
        history.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    energy = float(((X - C[labels]) ** 2).sum())
    return ClusterModel(k, C, labels, energy, seed, history, it)


def silhouette_score(X, labels) -> float:
    """Mean silhouette; points in singleton clusters score 0."""
    X = _as_points(X)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if ids.size < 2:
        return 0.0
    Dm = kernels.active().pairwise_distances(X)
    s = np.zeros(X.shape[0])
    for i in range(X.shape[0]):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own <= 1:
            continue
        a = Dm[i, own].sum() / (n_own - 1)
        b = min(Dm[i, labels == c].mean() for c in ids if c != labels[i])
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(s.mean())


class KSelection(NamedTuple):
    k: int
    ks: list
    energies: list
    silhouettes: list
    notice: str


def select_k(snapshots, k_range, seed=0, max_iter=300) -> KSelection:
    """Pick k by maximum mean silhouette (ties -> smaller k); energies reported too."""
    X = _as_points(snapshots)
    ks = sorted(int(k) for k in k_range)
    if not ks or ks[0] < 1 or ks[-1] > X.shape[0]:
        raise ValidationError(f"k range {ks} invalid for {X.shape[0]} snapshots")
    if np.all(X == X[0]):
        return KSelection(1, ks, [0.0] * len(ks), [0.0] * len(ks),
                          "all snapshots identical; using k=1")
    energies, sils = [], []
    for k in ks:
        model = kmeans_cluster(X, k, seed, max_iter)
        energies.append(model.energy)
        sils.append(silhouette_score(X, model.labels) if k > 1 else 0.0)
    best = int(np.argmax(sils))  # argmax returns the first, i.e. smallest, k on ties
    return KSelection(ks[best], ks, energies, sils, "")


# ---------------------------------------------------------------------------
# local bases and reduced solves
# ---------------------------------------------------------------------------

def build_cluster_bases(snapshots, model: ClusterModel, rank=None, energy=None) -> dict:
    """POD basis per cluster; a fixed rank is capped by the cluster's numerical rank."""
    X = _as_points(snapshots)
    bases = {}
    for c in range(model.k):
        idx = model.members(c)
        if idx.size == 0:
            raise ValidationError(f"cluster {c} is empty")
        Xc = X[idx].T
        if rank is not None:
            s = np.linalg.svd(Xc, compute_uv=False)
            numerical = int(np.sum(s > s[0] * 1e-12)) if s[0] > 0 else 0
            if numerical == 0:
                raise ValidationError(f"cluster {c} holds only zero snapshots")
            bases[c] = compute_pod(Xc, rank=min(rank, numerical))
        else:
            bases[c] = compute_pod(Xc, energy=energy)
    return bases


class RomSolution(NamedTuple):
    coeffs: np.ndarray
    state: np.ndarray
    iterations: int


def solve_local_rom(system: PitchforkSystem, basis: PodBasis, nu, w, guess, tol=1e-12,
                    max_iter=50) -> RomSolution:
    """Galerkin-Newton solve of Phi^T F(Phi a) = 0 with the exact reduced Jacobian."""
    Phi = basis.modes
    mu = system.mu_eff(nu, w)

    def res(a):
        return Phi.T @ residual_mu(system, Phi @ a, mu)

    def jac(a):
        return Phi.T @ jacobian_mu(system, Phi @ a, mu) @ Phi

    a, it, _ = newton(res, jac, np.asarray(guess, dtype=np.float64).reshape(-1), tol, max_iter)
    return RomSolution(a, Phi @ a, it)


def relative_error(u, truth) -> float:
    """||u - truth|| / max(||truth||, NORM_FLOOR); an exactly zero truth is normalized by 1."""
    nrm = np.linalg.norm(truth)
    return float(np.linalg.norm(u - truth) / (1.0 if nrm == 0 else max(nrm, NORM_FLOOR)))


@dataclass
class ErrorTable:
    errors: np.ndarray      # S x k, nan where the solve failed
    failed: np.ndarray      # S x k bool
    parameters: np.ndarray  # S x p raw parameters
    branches: list

    own: np.ndarray | None = None  # k-means cluster of each row

    def best_clusters(self) -> np.ndarray:
        """Per-row argmin over clusters, failed entries excluded.

        Exact ties go to the row's own k-means cluster when it is among the
        minimizers, otherwise to the lowest id.
        """
        E = np.where(self.failed, np.inf, self.errors)
        best = np.argmin(E, axis=1)
        if self.own is not None:
            rows = np.arange(E.shape[0])
            tied = E[rows, self.own] == E[rows, best]
            best = np.where(tied, self.own, best)
        return best

    def oracle_errors(self) -> np.ndarray:
        E = np.where(self.failed, np.inf, self.errors)
        best = E.min(axis=1)
        return np.where(np.isfinite(best), best, 1.0)

    def to_csv(self) -> str:
        k = self.errors.shape[1]
        pcols = [f"p{j}" for j in range(self.parameters.shape[1])]
        head = ["row", *pcols, "branch", *[f"cluster_{c}" for c in range(k)], "best"]
        lines = [",".join(head)]
        best = self.best_clusters()
        for i in range(self.errors.shape[0]):
            errs = ["failed" if self.failed[i, c] else format_float(self.errors[i, c])
                    for c in range(k)]
            lines.append(",".join([str(i), *[format_float(v) for v in self.parameters[i]],
                                   self.branches[i], *errs, str(best[i])]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text, own=None) -> "ErrorTable":
        """Inverse of ``to_csv``; the ``best`` column is recomputed, not trusted."""
        lines = text.strip().splitlines()
        head = lines[0].split(",")
        try:
            b = head.index("branch")
        except ValueError:
            raise ValidationError("error table has no branch column") from None
        k = sum(1 for h in head if h.startswith("cluster_"))
        P, tags, E, F = [], [], [], []
        for line in lines[1:]:
            cells = line.split(",")
            if len(cells) != len(head):
                raise ValidationError(f"ragged error-table row: {line!r}")
            P.append([float(v) for v in cells[1:b]])
            tags.append(cells[b])
            errs = cells[b + 1:b + 1 + k]
            F.append([v == "failed" for v in errs])
            E.append([float("nan") if v == "failed" else float(v) for v in errs])
        return cls(np.array(E).reshape(-1, k), np.array(F, dtype=bool).reshape(-1, k),
                   np.array(P), tags,
                   None if own is None else np.asarray(own, dtype=np.int64))


def build_error_table(snapshots: SnapshotSet, bases: dict, system: PitchforkSystem,
                      tol=1e-12, max_iter=50, labels=None) -> ErrorTable:
    """Solve every local ROM at every snapshot parameter and record relative errors."""
    S, k = len(snapshots), len(bases)
    errors = np.full((S, k), np.nan)
    failed = np.zeros((S, k), dtype=bool)
    for i, e in enumerate(snapshots.entries):
        nu, w = e.parameter.coords
        for c in range(k):
            B = bases[c]
            try:
                sol = solve_local_rom(system, B, nu, w, B.modes.T @ e.state, tol, max_iter)
            except NumericalError as exc:
                log.debug("row %d cluster %d failed: %s", i, c, exc)
                failed[i, c] = True
                continue
            errors[i, c] = relative_error(sol.state, e.state)
    own = None if labels is None else np.asarray(labels, dtype=np.int64)
    return ErrorTable(errors, failed, snapshots.parameters(), snapshots.branches(), own)


# ---------------------------------------------------------------------------
# cluster selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterScaler:
    """Per-axis affine map of the snapshot parameter box onto [0, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, params):
        P = np.atleast_2d(np.asarray(params, dtype=np.float64))
        lo, hi = P.min(axis=0), P.max(axis=0)
        return cls(lo, np.where(hi > lo, hi, lo + 1.0))

    def __call__(self, params):
        return (np.asarray(params, dtype=np.float64) - self.lo) / (self.hi - self.lo)


def nearest_index(point, points, mask=None) -> int:
    """Index of the nearest row of ``points`` (ties -> lowest index)."""
    d2 = ((np.asarray(points) - np.asarray(point)) ** 2).sum(axis=1)
    if mask is not None:
        d2 = np.where(mask, d2, np.inf)
    return int(np.argmin(d2))


def select_cluster_nearest(online, snapshot_params, labels) -> int:
    """Cluster of the snapshot nearest to ``online``; parameters already normalized."""
    return int(np.asarray(labels)[nearest_index(online, snapshot_params)])


# ---------------------------------------------------------------------------
# bifurcation diagrams
# ---------------------------------------------------------------------------

class DiagramEntry(NamedTuple):
    tag: str
    observable: float
    cluster: int
    converged: bool
    state: np.ndarray


@dataclass
class BifurcationDiagram:
    grid: np.ndarray
    entries: list            # one list of DiagramEntry per grid point
    strategy: str

    def missing(self) -> int:
        return sum(1 for row in self.entries for e in row if not e.converged)

    def to_csv(self) -> str:
        lines = ["point,p0,p1,tag,observable,cluster,converged"]
        for i, (p, row) in enumerate(zip(self.grid, self.entries)):
            for e in row:
                obs = format_float(e.observable) if e.converged else "nan"
                lines.append(f"{i},{format_float(p[0])},{format_float(p[1])},{e.tag},{obs},"
                             f"{e.cluster},{int(e.converged)}")
        return "\n".join(lines) + "\n"


@dataclass
class LocalRom:
    """Everything the online phase needs: system, snapshots, clusters and bases."""

    system: PitchforkSystem
    snapshots: SnapshotSet
    clusters: ClusterModel
    bases: dict
    scaler: ParameterScaler
    table: ErrorTable | None = None
    tol: float = 1e-12
    max_iter: int = 50

    @property
    def scaled_params(self):
        return self.scaler(self.snapshots.parameters())

    def guess_snapshot(self, cluster, online_scaled, branches=None) -> int:
        """Nearest snapshot (in parameter) belonging to ``cluster``, optionally on given branches."""
        members = self.clusters.labels == cluster
        tags = np.array(self.snapshots.branches())
        # preference order: the requested branch itself, then the given fallbacks
        for allowed in branches or ():
            on_branch = members & np.isin(tags, allowed)
            if on_branch.any():
                return nearest_index(online_scaled, self.scaled_params, on_branch)
        return nearest_index(online_scaled, self.scaled_params, members)

    def solve(self, cluster, nu, w, guess_row, tag) -> DiagramEntry:
        B = self.bases[cluster]
        guess = B.modes.T @ self.snapshots.entries[guess_row].state
        try:
            sol = solve_local_rom(self.system, B, nu, w, guess, self.tol, self.max_iter)
        except NumericalError:
            return DiagramEntry(tag, float("nan"), cluster, False, np.full(self.system.D, np.nan))
        return DiagramEntry(tag, self.system.observable(sol.state), cluster, True, sol.state)


def _merge(first: DiagramEntry, second: DiagramEntry) -> list:
    if first.converged and second.converged:
        # absolute tolerance for near-zero states, relative otherwise
        scale = max(np.linalg.norm(first.state), np.linalg.norm(second.state), 1.0)
        if np.linalg.norm(first.state - second.state) < MERGE_TOL * scale:
            return [first._replace(tag="single")]
    return [first, second]


def _optimal_entries(rom: LocalRom, nu, w, q) -> list:
    """Best cluster per true stable state, judged against the full-order solution."""
    out = []
    for t in steady_branches(rom.system, nu, w):
        if not t.stable:
            continue
        policies = ("upper", "lower") if t.tag == "single" else (t.tag,)
        best = None
        for c in range(rom.clusters.k):
            for b in policies:
                e = rom.solve(c, nu, w, rom.guess_snapshot(c, q, GUESS_ORDER[b]), t.tag)
                if not e.converged:
                    continue
                err = relative_error(e.state, t.state)
                if best is None or err < best[0]:
                    best = (err, e)
        out.append(best[1] if best else DiagramEntry(t.tag, float("nan"), -1, False,
                                                     np.full(rom.system.D, np.nan)))
    return out


def reconstruct_diagram(rom: LocalRom, grid, strategy="nearest", classifier=None) -> BifurcationDiagram:
    """Solve the local ROMs on ``grid`` using one of the cluster-selection strategies.

    ``nearest``: cluster of the nearest snapshot, one solve per point.
    ``dual``: one solve per branch classifier (``classifier.predict(scaled)`` returning
    the (upper, lower) cluster pair), merged when the states coincide.
    ``table``: per branch, the best cluster of the nearest error-table row on that branch.
    ``oracle``: optimal selection; for every true stable state the cluster whose ROM
    solution is closest to it (needs the closed-form truth of the synthetic system).
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    P = rom.scaled_params
    labels = rom.clusters.labels
    tags = np.array(rom.snapshots.branches())
    if strategy == "dual" and classifier is None:
        raise ValidationError("the dual strategy needs a trained classifier pair")
    if strategy == "table":
        if rom.table is None:
            raise ValidationError("the table strategy needs an error table")
        best = rom.table.best_clusters()
    rows = []
    for nu, w in grid:
        q = rom.scaler([nu, w])
        if strategy == "nearest":
            j = nearest_index(q, P)
            c = int(labels[j])
            rows.append([rom.solve(c, nu, w, rom.guess_snapshot(c, q), tags[j])])
            continue
        if strategy == "oracle":
            rows.append(_optimal_entries(rom, nu, w, q))
            continue
        if strategy == "dual":
            picks = [int(c) for c in classifier.predict(q)]
        elif strategy == "table":
            picks = [int(best[nearest_index(q, P, np.isin(tags, BRANCH_SETS[b]))])
                     for b in ("upper", "lower")]
        else:
            raise ValidationError(f"unknown strategy {strategy!r}")
        sols = [rom.solve(c, nu, w, rom.guess_snapshot(c, q, GUESS_ORDER[b]), b)
                for c, b in zip(picks, ("upper", "lower"))]
        rows.append(_merge(*sols))
    return BifurcationDiagram(grid, rows, strategy)


# ---------------------------------------------------------------------------
# assessment
# ---------------------------------------------------------------------------

def truth_states(system: PitchforkSystem, grid) -> list:
    return [[b for b in steady_branches(system, nu, w) if b.stable] for nu, w in grid]


def match_entries(system, truth, entries):
    """Branch-matched errors for one grid point; unmatched truth states score 1."""
    ok = [e for e in entries if e.converged]
    yt = [system.observable(t.state) for t in truth]
    best_cost, best_assign = None, None
    n = len(truth)
    options = list(range(len(ok))) + [None] * n
    for perm in itertools.permutations(options, n):
        used = [p for p in perm if p is not None]
        if len(used) != len(set(used)):
            continue
        cost = (sum(1 for p in perm if p is None),
                sum(abs(ok[p].observable - yt[i]) for i, p in enumerate(perm) if p is not None))
        if best_cost is None or cost < best_cost:
            best_cost, best_assign = cost, perm
    errs = []
    for i, p in enumerate(best_assign):
        errs.append(1.0 if p is None else relative_error(ok[p].state, truth[i].state))
    return errs, best_assign


def mean_relative_error(diagram: BifurcationDiagram, system: PitchforkSystem) -> float:
    """Mean relative L2 error over all true stable states; a missing branch counts 1."""
    errs = []
    for (nu, w), row in zip(diagram.grid, diagram.entries):
        truth = [b for b in steady_branches(system, nu, w) if b.stable]
        errs.extend(match_entries(system, truth, row)[0])
    return float(np.mean(errs))


def branch_coverage(diagram: BifurcationDiagram, system: PitchforkSystem):
    """(points with both branches recovered, two-solution points)."""
    hit = total = 0
    for (nu, w), row in zip(diagram.grid, diagram.entries):
        truth = [b for b in steady_branches(system, nu, w) if b.stable]
        if len(truth) < 2:
            continue
        total += 1
        ok = [e for e in row if e.converged]
        _, assign = match_entries(system, truth, row)
        if all(p is not None for p in assign) and all(
                np.sign(ok[p].observable) == np.sign(system.observable(truth[i].state))
                for i, p in enumerate(assign)):
            hit += 1
    return hit, total


def branch_separation_violations(table: ErrorTable) -> list:
    """Two-solution parameters whose upper and lower rows share a best cluster.

    Returns ``(upper_row, lower_row, cluster)`` triples.  An empty list means
    no best-error cluster serves both branches at the same parameter.
    """
    best = table.best_clusters()
    upper = {}
    for i, tag in enumerate(table.branches):
        if tag == "upper":
            upper[tuple(table.parameters[i])] = i
    out = []
    for j, tag in enumerate(table.branches):
        i = upper.get(tuple(table.parameters[j])) if tag == "lower" else None
        if i is not None and best[i] == best[j]:
            out.append((i, j, int(best[i])))
    return out
