import numpy as np
import pytest

from diracsc.dynamics import ParticleParams, PhaseState, integrate_flow, kinetic_frame
from diracsc.fields import FieldConfig
from diracsc.orbits import (OrbitError, OrbitSearch, PeriodicOrbit, continue_orbit, find_periodic_orbits,
                            orbit_invariants, orbit_spin_holonomy, relocate, repetition)
from diracsc.spin import spin_trace_factor
from diracsc.trace import NonIsolatedOrbitError, build_test_function, orbit_sum

P = ParticleParams(m=1.0, e=1.0, c=1.0, hbar=0.016)
QUARTIC = FieldConfig.quartic_coupled(g=1.0, confinement=0.05)
E0 = 1.15
FAST = OrbitSearch(T_max=9.5, n_random=0, n_line=6, n_dir=12, box=1.4)


@pytest.fixture(scope="module")
def quartic_orbits():
    return find_periodic_orbits(E0, "+", QUARTIC, P, FAST)


def _omega(n):
    k = n // 2
    return np.block([[np.zeros((k, k)), np.eye(k)], [-np.eye(k), np.zeros((k, k))]])


def test_orbits_close_under_direct_integration(quartic_orbits):
    assert len(quartic_orbits) >= 4
    for o in quartic_orbits:
        traj = integrate_flow(o.initial, "+", QUARTIC, P, o.T, tol=1e-12)
        assert np.linalg.norm(traj.final.as_vector() - o.initial.as_vector()) < 1e-8
        assert traj.energies()[0] == pytest.approx(E0, abs=1e-10)


def test_reduced_monodromy_symplectic_and_hyperbolic(quartic_orbits):
    for o in quartic_orbits:
        M = o.M
        assert M.shape == (2, 2)
        np.testing.assert_allclose(M.T @ _omega(2) @ M, _omega(2), atol=1e-7)
        tr = np.trace(M)
        if abs(tr) > 2:
            lamT = np.arccosh(abs(tr) / 2)
            expected = 4 * np.sinh(lamT / 2) ** 2 if tr > 0 else -4 * np.cosh(lamT / 2) ** 2
            assert o.det_M1 == pytest.approx(-expected if tr > 0 else -expected, rel=1e-9)


def test_hyperbolic_det_formula(quartic_orbits):
    o = min(quartic_orbits, key=lambda q: q.T)
    ev = np.linalg.eigvals(o.M)
    lam = np.log(np.abs(ev).max()) / o.T
    assert np.all(np.isreal(ev)) and np.all(ev > 0)
    assert abs(o.det_M1) == pytest.approx(4 * np.sinh(lam * o.T / 2) ** 2, rel=1e-9)


def test_symmetry_images_share_invariants(quartic_orbits):
    groups = {}
    for o in quartic_orbits:
        groups.setdefault(round(o.T, 6), []).append(o)
    for orbs in groups.values():
        for o in orbs[1:]:
            assert o.S == pytest.approx(orbs[0].S, rel=1e-9)
            assert o.mu == orbs[0].mu
            assert o.det_M1 == pytest.approx(orbs[0].det_M1, rel=1e-6)


def test_orbit_invariants_recomputed(quartic_orbits):
    o = quartic_orbits[0]
    S, T, Tp, M, mu = orbit_invariants(o, QUARTIC, P)
    assert (S, T, Tp, mu) == pytest.approx((o.S, o.T, o.T_prim, o.mu), rel=1e-10)


def test_orbit_invariants_rejects_open_orbit(quartic_orbits):
    o = quartic_orbits[0]
    bad = PeriodicOrbit(branch=1, E=o.E, T=o.T, T_prim=o.T_prim * 0.9, r=1, initial=o.initial, S=0, M=o.M,
                        mu=0, nu=0)
    with pytest.raises(OrbitError):
        orbit_invariants(bad, QUARTIC, P)


def test_relocation_invariance(quartic_orbits):
    o = quartic_orbits[-1]
    moved = relocate(o, QUARTIC, P, 0.37 * o.T)
    assert moved.det_M1 == pytest.approx(o.det_M1, rel=1e-7)
    assert np.trace(moved.M) == pytest.approx(np.trace(o.M), rel=1e-7)
    assert moved.S == pytest.approx(o.S, rel=1e-10)
    assert moved.mu == o.mu


def test_repetition_laws(quartic_orbits):
    o = quartic_orbits[0]
    o2 = repetition(o, 2, QUARTIC, P)
    assert o2.T == pytest.approx(2 * o.T, rel=1e-12)
    assert o2.S == pytest.approx(2 * o.S, rel=1e-9)
    np.testing.assert_allclose(o2.M, o.M @ o.M, rtol=1e-6, atol=1e-6 * np.abs(o.M @ o.M).max())


def test_repetitions_enumerated_up_to_t_max(quartic_orbits):
    o = quartic_orbits[0]
    search = OrbitSearch(T_max=3.5 * o.T_prim, n_random=0, n_line=2, n_dir=4, box=1.4)
    orbs = find_periodic_orbits(E0, "+", QUARTIC, P, search, with_spin=False)
    same = [q for q in orbs if abs(q.T_prim - o.T_prim) < 1e-6
            and np.allclose(q.initial.as_vector(), o.initial.as_vector(), atol=1e-8)]
    assert sorted(q.r for q in same) == [1, 2, 3]


def test_dS_dE_equals_period(quartic_orbits):
    o = quartic_orbits[0]
    h = 1e-3
    S = {k: continue_orbit(o, E0 + k * h, QUARTIC, P).S for k in (-2, -1, 1, 2)}
    dS = (S[-2] - 8 * S[-1] + 8 * S[1] - S[2]) / (12 * h)
    assert dS == pytest.approx(o.T, rel=1e-5)


def test_spin_holonomy_of_diagonal_libration(quartic_orbits):
    # on the diagonals pi is parallel to E, so pi x E = 0 and d(T) = Id
    diag = [o for o in quartic_orbits if abs(abs(o.initial.x[0]) - abs(o.initial.x[1])) < 1e-9
            and abs(abs(o.initial.p[0]) - abs(o.initial.p[1])) < 1e-9]
    assert diag
    for o in diag:
        np.testing.assert_allclose(o.d, np.eye(2), atol=1e-10)
        assert o.spin_factor == pytest.approx(2.0, abs=1e-12)


def test_spin_factor_two_ways(quartic_orbits):
    for o in quartic_orbits:
        assert o.spin_factor == pytest.approx(spin_trace_factor(o.d), abs=1e-10)


def test_cyclotron_holonomy():
    B0 = 0.8
    cfg = FieldConfig.uniform_magnetic([0, 0, B0])
    s0 = PhaseState([0, 0, 0], [0.5, 0, 0])
    eps = kinetic_frame(s0, cfg, P).eps
    T = 2 * np.pi * eps / (P.e * P.c * B0)
    orb = PeriodicOrbit(branch=1, E=eps, T=T, T_prim=T, r=1, initial=s0, S=0.0, M=np.eye(2), mu=0, nu=0)
    theta, eta, factor = orbit_spin_holonomy(orb, cfg, P)
    assert theta == pytest.approx(0.0, abs=1e-8)
    # eta is half the cyclotron phase 2 pi
    assert abs(eta) == pytest.approx(np.pi, abs=1e-8)
    assert factor == pytest.approx(2 * np.cos(eta), abs=1e-12)


def test_isotropic_oscillator_flags_degenerate_family():
    """Radial librations come in a rotation family and must be flagged.

    The circular orbit is a single orbit up to time shift; relativistic
    corrections make its neighbours precess, so it stays isolated.
    """
    cfg = FieldConfig.harmonic_scalar([1.0, 1.0, 1.0])
    search = OrbitSearch(T_max=7.0, n_random=6, n_line=0, n_dir=6, box=1.0)
    orbs = find_periodic_orbits(1.1, "+", cfg, P, search, with_spin=False)
    radial = [o for o in orbs if abs(o.initial.x[0] * o.initial.p[1] - o.initial.x[1] * o.initial.p[0]) < 1e-8]
    assert radial
    assert all(not o.isolated for o in radial)
    with pytest.raises(NonIsolatedOrbitError):
        orbit_sum(1.1, radial, build_test_function(7.0), P)
    kept = [o for o in orbs if o.isolated]
    assert all(o not in radial for o in kept)
