"""Hot inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``BIFROM_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are always
importable as ``numpy_kernels`` / ``numba_kernels`` so they can be compared
against each other in tests and benchmarks.
"""

import os
import types

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _flag_disabled():
    return os.environ.get("BIFROM_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


# ---------------------------------------------------------------------------
# pure numpy
# ---------------------------------------------------------------------------

def _hopf_rhs_np(u, V, mu, omega, kappa):
    z = V.T @ u
    r2 = z[0] * z[0] + z[1] * z[1]
    dz = np.array([mu * z[0] - omega * z[1] - z[0] * r2,
                   omega * z[0] + mu * z[1] - z[1] * r2])
    return V @ dz - kappa * (u - V @ z)


@np.errstate(over="ignore", invalid="ignore")
def _rk4_hopf_np(V, mu, omega, kappa, x0, dt, steps, record_every):
    n_rec = steps // record_every + 1
    out = np.empty((n_rec, x0.shape[0]))
    u = x0.astype(np.float64).copy()
    out[0] = u
    j = 1
    for k in range(1, steps + 1):
        k1 = _hopf_rhs_np(u, V, mu, omega, kappa)
        k2 = _hopf_rhs_np(u + 0.5 * dt * k1, V, mu, omega, kappa)
        k3 = _hopf_rhs_np(u + 0.5 * dt * k2, V, mu, omega, kappa)
        k4 = _hopf_rhs_np(u + dt * k3, V, mu, omega, kappa)
        u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(u)):
            return out[:j], k
        if k % record_every == 0:
            out[j] = u
            j += 1
    return out, -1


@np.errstate(over="ignore", invalid="ignore")
def _linear_rollout_np(A, x0, steps):
    out = np.empty((steps + 1, x0.shape[0]), dtype=np.result_type(A, x0))
    out[0] = x0
    x = out[0]
    for k in range(1, steps + 1):
        x = A @ x
        if not np.all(np.isfinite(x)):
            return out[:k], k
        out[k] = x
    return out, -1


def _nearest_centroid_np(X, C):
    # squared distances without the expansion trick, so exact ties stay exact
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels.astype(np.int64), d2[np.arange(X.shape[0]), labels]


def _pairwise_distances_np(X):
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


hopf_rhs = _hopf_rhs_np

numpy_kernels = types.SimpleNamespace(
    name="numpy",
    rk4_hopf=_rk4_hopf_np,
    linear_rollout=_linear_rollout_np,
    nearest_centroid=_nearest_centroid_np,
    pairwise_distances=_pairwise_distances_np,
)


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    njit = numba.njit(cache=False, fastmath=False)

    @njit
    def _hopf_rhs_nb(u, V, mu, omega, kappa, out):
        D = u.shape[0]
        z0 = 0.0
        z1 = 0.0
        for i in range(D):
            z0 += V[i, 0] * u[i]
            z1 += V[i, 1] * u[i]
        r2 = z0 * z0 + z1 * z1
        dz0 = mu * z0 - omega * z1 - z0 * r2
        dz1 = omega * z0 + mu * z1 - z1 * r2
        for i in range(D):
            proj = V[i, 0] * z0 + V[i, 1] * z1
            out[i] = V[i, 0] * dz0 + V[i, 1] * dz1 - kappa * (u[i] - proj)

    @njit
    def _rk4_hopf_nb(V, mu, omega, kappa, x0, dt, steps, record_every):
        D = x0.shape[0]
        n_rec = steps // record_every + 1
        out = np.empty((n_rec, D))
        u = x0.astype(np.float64).copy()
        out[0] = u
        k1 = np.empty(D)
        k2 = np.empty(D)
        k3 = np.empty(D)
        k4 = np.empty(D)
        tmp = np.empty(D)
        j = 1
        for k in range(1, steps + 1):
            _hopf_rhs_nb(u, V, mu, omega, kappa, k1)
            for i in range(D):
                tmp[i] = u[i] + 0.5 * dt * k1[i]
            _hopf_rhs_nb(tmp, V, mu, omega, kappa, k2)
            for i in range(D):
                tmp[i] = u[i] + 0.5 * dt * k2[i]
            _hopf_rhs_nb(tmp, V, mu, omega, kappa, k3)
            for i in range(D):
                tmp[i] = u[i] + dt * k3[i]
            _hopf_rhs_nb(tmp, V, mu, omega, kappa, k4)
            finite = True
            for i in range(D):
                u[i] = u[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                if not np.isfinite(u[i]):
                    finite = False
            if not finite:
                return out[:j], k
            if k % record_every == 0:
                out[j] = u
                j += 1
        return out, -1

    @njit
    def _linear_rollout_nb(A, x0, steps):
        n = x0.shape[0]
        out = np.empty((steps + 1, n), dtype=x0.dtype)
        out[0] = x0
        for k in range(1, steps + 1):
            finite = True
            for i in range(n):
                s = out[k - 1, 0] * A[i, 0]
                for j in range(1, n):
                    s += A[i, j] * out[k - 1, j]
                out[k, i] = s
                if not np.isfinite(s):
                    finite = False
            if not finite:
                return out[:k], k
        return out, -1

    @njit
    def _nearest_centroid_nb(X, C):
        S, D = X.shape
        k = C.shape[0]
        labels = np.empty(S, dtype=np.int64)
        best = np.empty(S)
        for s in range(S):
            bl = 0
            bd = np.inf
            for c in range(k):
                d = 0.0
                for i in range(D):
                    t = X[s, i] - C[c, i]
                    d += t * t
                if d < bd:
                    bd = d
                    bl = c
            labels[s] = bl
            best[s] = bd
        return labels, best

    @njit
    def _pairwise_distances_nb(X):
        S, D = X.shape
        out = np.zeros((S, S))
        for a in range(S):
            for b in range(a + 1, S):
                d = 0.0
                for i in range(D):
                    t = X[a, i] - X[b, i]
                    d += t * t
                d = np.sqrt(d)
                out[a, b] = d
                out[b, a] = d
        return out

    def _linear_rollout_nb_dispatch(A, x0, steps):
        # numba wants one dtype for the operator and the state
        dtype = np.result_type(A, x0)
        return _linear_rollout_nb(np.ascontiguousarray(A, dtype=dtype),
                                  np.ascontiguousarray(x0, dtype=dtype), steps)

    def _rk4_hopf_nb_dispatch(V, mu, omega, kappa, x0, dt, steps, record_every):
        return _rk4_hopf_nb(np.ascontiguousarray(V, dtype=np.float64), float(mu),
                            float(omega), float(kappa),
                            np.ascontiguousarray(x0, dtype=np.float64), float(dt),
                            int(steps), int(record_every))

    def _nearest_centroid_nb_dispatch(X, C):
        return _nearest_centroid_nb(np.ascontiguousarray(X, dtype=np.float64),
                                    np.ascontiguousarray(C, dtype=np.float64))

    def _pairwise_distances_nb_dispatch(X):
        return _pairwise_distances_nb(np.ascontiguousarray(X, dtype=np.float64))

    numba_kernels = types.SimpleNamespace(
        name="numba",
        rk4_hopf=_rk4_hopf_nb_dispatch,
        linear_rollout=_linear_rollout_nb_dispatch,
        nearest_centroid=_nearest_centroid_nb_dispatch,
        pairwise_distances=_pairwise_distances_nb_dispatch,
    )
else:  # pragma: no cover
    numba_kernels = None


def active():
    """Return the kernel namespace selected by the environment."""
    if HAS_NUMBA and not _flag_disabled():
        return numba_kernels
    return numpy_kernels
