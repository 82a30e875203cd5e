import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bifrom import kernels, synthetic_fom as sf

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    """Run a test under both kernel paths."""
    if request.param == "numba" and kernels.numba_kernels is None:
        pytest.skip("numba unavailable")
    monkeypatch.setenv("BIFROM_DISABLE_NUMBA", "1" if request.param == "numpy" else "0")
    assert kernels.active().name == request.param
    return request.param


@pytest.fixture(scope="session")
def pitchfork():
    return sf.make_pitchfork_system()


@pytest.fixture(scope="session")
def pitchfork_snaps(pitchfork):
    return sf.pitchfork_snapshots(pitchfork, sf.parameter_grid())


@pytest.fixture(scope="session")
def hopf():
    return sf.make_hopf_system()


def mu_point(system, mu):
    """(nu, w) with w at its reference value and mu_eff(nu, w) == mu up to rounding."""
    return system.nu_star - mu / system.alpha, system.w_star


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


HOPF_G = (100.0, 110.0, 120.0, 130.0, 140.0, 150.0)


@pytest.fixture(scope="session")
def hopf_transients(hopf):
    """Trajectories from one common start (on the g=150 cycle), dt=0.01 after subsampling."""
    from bifrom.pod import compute_pod

    x0 = hopf.lift([sf.hopf_cycle_radius(hopf, HOPF_G[-1]), 0.0])
    trajs = sf.hopf_trajectories(hopf, HOPF_G, x0, 1e-3, 10000, record_every=10)
    basis = compute_pod(np.hstack([t.states.T for t in trajs]), energy=0.9999)
    return trajs, basis


def project_traj(basis, traj):
    from bifrom.snapshot_store import Trajectory

    return Trajectory(traj.parameter, traj.times, traj.states @ basis.modes)


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))
