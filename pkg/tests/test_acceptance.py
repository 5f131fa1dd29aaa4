"""Acceptance suite: one test per headline criterion, each reporting PASS/FAIL."""
import dataclasses

import numpy as np
from scipy.linalg import expm

from diracsc.dynamics import (ParticleParams, PhaseState, free_jacobian, integrate_flow, kinetic_frame,
                              linearized_flow)
from diracsc.fields import FieldConfig
from diracsc.orbits import OrbitSearch, continue_orbit, find_periodic_orbits, relocate
from diracsc.propagator import SearchGrid, find_connecting_orbits, principal_function, van_vleck_and_morse
from diracsc.spin import (SIGMA, extract_eta, hopf, phase_decomposition, precess_spin, spin_trace_factor,
                          su2_from_angles, transport_spin)
from diracsc.trace import (OracleQuadrature, build_test_function, build_window, evaluate_oracle, find_loops, orbit_sum,
                           shell_volume_grid, shell_volume_mc, weyl_term)

from .conftest import ACCEPTANCE

P = ParticleParams(m=1.0, e=1.0, c=1.0, hbar=0.05)
QUARTIC = FieldConfig.quartic_coupled(g=1.0, confinement=0.05)


def report(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


# -- 1 ----------------------------------------------------------------------

def _random_scenario(kind, rng):
    """Field, initial state and one characteristic period."""
    p = rng.normal(size=3) * 0.5
    x0 = rng.uniform(-0.5, 0.5, 3)
    if kind == "uniform_magnetic":
        B = rng.normal(size=3)
        return FieldConfig.uniform_magnetic(B), x0, p, 2 * np.pi * np.sqrt(1 + p @ p) / np.linalg.norm(B)
    if kind == "uniform_electric":
        E = rng.normal(size=3) * 0.3
        # time for the field to deliver momentum mc
        return FieldConfig.uniform_electric(E), x0, p, 1 / np.linalg.norm(E)
    if kind == "harmonic_scalar":
        k = rng.uniform(0.5, 2.0, 3)
        return FieldConfig.harmonic_scalar(k), x0, 0.6 * p, 2 * np.pi / np.sqrt(k.min())
    x0[2] = p[2] = 0.0
    return QUARTIC, x0, 0.6 * p, 9.0


def test_criterion_1_spin_identities():
    rng = np.random.default_rng(20240611)
    kinds = ["uniform_magnetic", "uniform_electric", "harmonic_scalar", "quartic_coupled"]
    worst = dict(unitarity=0.0, norm=0.0, hopf=0.0, decomposition=0.0)
    for i in range(20):
        cfg, x0, p0, period = _random_scenario(kinds[i % 4], rng)
        traj = integrate_flow(PhaseState(x0, p0), "+", cfg, P, 10 * period, tol=1e-12)
        d0 = su2_from_angles(rng.uniform(0, np.pi), rng.uniform(-np.pi, np.pi), rng.uniform(-np.pi, np.pi))
        hist = transport_spin(traj, d0=d0)
        s = precess_spin(traj, hopf(d0), hist.t, normalize=False)
        dyn, geo = phase_decomposition(hist)
        gram = np.einsum("nji,njk->nik", hist.d.conj(), hist.d) - np.eye(2)
        worst["unitarity"] = max(worst["unitarity"], np.abs(gram).max())
        worst["norm"] = max(worst["norm"], np.abs(np.linalg.norm(s, axis=1) - 1).max())
        worst["hopf"] = max(worst["hopf"], np.abs(hist.s - s).max())
        worst["decomposition"] = max(worst["decomposition"], abs(_wrap(dyn + geo - (hist.eta[-1] - hist.eta[0]))))
    ok = (worst["unitarity"] <= 1e-10 and worst["norm"] <= 1e-10 and worst["hopf"] <= 1e-8
          and worst["decomposition"] <= 1e-6)
    report(1, ok, ", ".join(f"{k}={v:.2e}" for k, v in worst.items()))


# -- 2 ----------------------------------------------------------------------

def test_criterion_2_uniform_field_closed_forms():
    B0 = 1.3
    cfg = FieldConfig.uniform_magnetic([0, 0, B0])
    s0 = PhaseState([0.1, -0.2, 0.0], [0.7, 0.2, 0.0])
    eps = kinetic_frame(s0, cfg, P).eps
    omega = P.e * P.c * B0 / eps
    # orbital frequency from the rotation angle of pi over several turns
    traj = integrate_flow(s0, "+", cfg, P, 5 * 2 * np.pi / omega * 1.03, tol=1e-13)
    kin = np.array([kinetic_frame(traj.state(t), cfg, P).pi[:2] for t in traj.t])
    ang = np.unwrap(np.arctan2(kin[:, 1], kin[:, 0]))
    omega_num = abs(np.polyfit(traj.t, ang, 1)[0])
    rel = abs(omega_num / omega - 1)

    T = 2 * np.pi / omega
    hist = transport_spin(integrate_flow(s0, "+", cfg, P, T, tol=1e-13))
    dT = hist.d[-1]
    oracle = expm(1j * (P.e * P.c * B0 / (2 * eps)) * T * SIGMA[2])
    err_expm = np.abs(dT - oracle).max()
    err_id = np.abs(dT + np.eye(2)).max()
    err_eta = abs(hist.eta[-1] - np.pi)
    err_tr = abs(spin_trace_factor(dT) + 2)
    ok = rel <= 1e-8 and max(err_expm, err_id, err_eta, err_tr) <= 1e-9
    report(2, ok, f"omega rel={rel:.2e}, |d(T)-expm|={err_expm:.2e}, |d(T)+1|={err_id:.2e}, "
                  f"|eta-pi|={err_eta:.2e}, |tr+2|={err_tr:.2e}")


# -- 3 ----------------------------------------------------------------------

def test_criterion_3_geometric_phase():
    B0 = 1.0
    cfg = FieldConfig.uniform_magnetic([0, 0, B0])
    T = 2 * np.pi * P.rest_energy / (P.e * P.c * B0)
    traj = integrate_flow(PhaseState([0, 0, 0], [0, 0, 0]), "+", cfg, P, T, tol=1e-13)
    errs, switched = [], []
    for th0 in (np.pi / 6, np.pi / 3, np.pi / 2 - 0.2, np.pi / 2 + 0.2):
        hist = transport_spin(traj, d0=su2_from_angles(th0, 0.0))
        if th0 > np.pi / 2:
            # s stays in the south: start in the north gauge to force a switch
            extract_eta(hist, start="north")
            switched.append(len(hist.switches) > 0)
        _, geo = phase_decomposition(hist)
        half = 0.5 * (1 - np.cos(th0)) * 2 * np.pi
        errs.append(min(abs(_wrap(geo - half)), abs(_wrap(geo + half))))
    ok = max(errs) <= 1e-6 and all(switched)
    report(3, ok, "errors " + ", ".join(f"{e:.2e}" for e in errs) + f", gauge switch={all(switched)}")


# -- 4 ----------------------------------------------------------------------

GRID = SearchGrid(extent=1.0, n=3)


def _orbit_near(x, y, t, cfg, p_ref):
    orbs = find_connecting_orbits(x, y, t, "+", cfg, P, GRID)
    return min(orbs, key=lambda o: np.linalg.norm(o.p0 - p_ref))


def _hj_errors(cfg, x, y, t, h=1e-5):
    o = _orbit_near(x, y, t, cfg, np.zeros(3) if cfg.kind.value == "zero" else
                    find_connecting_orbits(x, y, t, "+", cfg, P, GRID)[0].p0)
    R = lambda xx, yy, tt: principal_function(_orbit_near(xx, yy, tt, cfg, o.p0))  # noqa: E731
    dRdt = (R(x, y, t + h) - R(x, y, t - h)) / (2 * h)
    H = traj_energy(o)
    dx, dy = np.empty(3), np.empty(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        dx[k] = (R(x + e, y, t) - R(x - e, y, t)) / (2 * h)
        dy[k] = (R(x, y + e, t) - R(x, y - e, t)) / (2 * h)
    return o, abs(dRdt + H), np.abs(dx - o.pt).max(), np.abs(dy + o.p0).max()


def traj_energy(o):
    return float(o.trajectory.energies()[0])


def test_criterion_4_hamilton_jacobi():
    cases = [FieldConfig.harmonic_scalar([1.0, 1.5, 0.7]), FieldConfig.uniform_magnetic([0.3, -0.2, 1.1])]
    x, y, t = np.array([0.3, -0.2, 0.1]), np.array([-0.1, 0.25, 0.0]), 1.2
    hj, vv = 0.0, 0.0
    for cfg in cases:
        o, et, ex, ey = _hj_errors(cfg, x, y, t)
        hj = max(hj, et, ex, ey)
        # Van Vleck amplitude against an independent, tighter variational integration
        D, _ = van_vleck_and_morse(o)
        J = linearized_flow(integrate_flow(PhaseState(y, o.p0), "+", cfg, P, t, tol=1e-13)).jacobians[-1]
        vv = max(vv, abs(D**2 * abs(np.linalg.det(J[:3, 3:])) - 1))
    # free particle: closed-form R and Jacobian
    free = FieldConfig.zero()
    xf, yf, tf = np.array([0.5, -0.3, 0.8]), np.array([0.1, 0.2, -0.1]), 2.0
    (of,) = find_connecting_orbits(xf, yf, tf, "+", free, P, GRID)
    r = np.linalg.norm(xf - yf)
    err_free = abs(principal_function(of) + P.m * P.c * np.sqrt(P.c**2 * tf**2 - r**2))
    D, _ = van_vleck_and_morse(of)
    vv = max(vv, abs(D**2 * abs(np.linalg.det(free_jacobian(of.p0, tf, P)[:3, 3:])) - 1))
    _, et, ex, ey = _hj_errors(free, xf, yf, tf)
    hj = max(hj, et, ex, ey)
    ok = hj <= 1e-6 and vv <= 1e-10 and err_free <= 1e-9
    report(4, ok, f"HJ gradients max err={hj:.2e}, Van Vleck err={vv:.2e}, free R err={err_free:.2e}")


# -- 5 ----------------------------------------------------------------------

def _omega(n):
    k = n // 2
    return np.block([[np.zeros((k, k)), np.eye(k)], [-np.eye(k), np.zeros((k, k))]])


def test_criterion_5_periodic_orbit_thermodynamics():
    params = ParticleParams(m=1.0, e=1.0, c=1.0, hbar=0.016)
    E0 = 1.15
    orbs = find_periodic_orbits(E0, "+", QUARTIC, params,
                                OrbitSearch(T_max=9.5, n_random=0, n_line=6, n_dir=12, box=1.4))
    families = {}
    for o in orbs:
        families.setdefault(round(o.T, 6), o)
    h = 1e-3
    dS = 0.0
    for E in E0 + np.array([-0.02, -0.01, 0.0, 0.01, 0.02]):
        for o in families.values():
            base = continue_orbit(o, E, QUARTIC, params)
            S = {k: continue_orbit(base, E + k * h, QUARTIC, params).S for k in (-2, -1, 1, 2)}
            deriv = (S[-2] - 8 * S[-1] + 8 * S[1] - S[2]) / (12 * h)
            dS = max(dS, abs(deriv / base.T - 1))
    sym = max(np.abs(o.M.T @ _omega(2) @ o.M - _omega(2)).max() for o in orbs)
    reloc = 0.0
    for o in families.values():
        for frac in (0.21, 0.37, 0.73):
            moved = relocate(o, QUARTIC, params, frac * o.T)
            reloc = max(reloc, abs(np.sqrt(abs(moved.det_M1)) / np.sqrt(abs(o.det_M1)) - 1))
    ok = dS <= 1e-5 and sym <= 1e-7 and reloc <= 1e-7
    report(5, ok, f"{len(families)} families; dS/dE vs T rel={dS:.2e}, symplecticity={sym:.2e}, "
                  f"relocation={reloc:.2e}")


# -- 6 ----------------------------------------------------------------------

def test_criterion_6_oracle_vs_orbit_sum():
    energies = [1.13, 1.14, 1.15, 1.16, 1.17]
    hbars = (0.016, 0.008)
    window = build_window((0.9, 1.45), 0.12, "smooth")
    tf = build_test_function(11.0, "plateau", T_flat=10.3)
    params = ParticleParams(m=1.0, e=1.0, c=1.0, hbar=hbars[0])
    # closed loops do not depend on hbar, flood them once
    loops = find_loops(QUARTIC, params, window, 11.0, OracleQuadrature())
    errs = {}
    s_min = np.inf
    for E in energies:
        orbs = find_periodic_orbits(E, "+", QUARTIC, params, OrbitSearch(T_max=11.0, n_random=100, box=1.7))
        s_min = min(s_min, min(o.S for o in orbs))
        for hb in hbars:
            ph = dataclasses.replace(params, hbar=hb)
            oracle = evaluate_oracle(loops, [E], QUARTIC, ph, window, tf).one_sided[0]
            osum = sum(c for _, c in orbit_sum(E, orbs, tf, ph, paired=False))
            errs[E, hb] = abs(oracle - osum) / abs(osum)
    assert s_min / hbars[0] >= 50
    worst = max(errs.values())
    monotone = all(errs[E, hbars[1]] < errs[E, hbars[0]] for E in energies)
    ok = worst <= 0.1 and monotone
    table = ", ".join(f"E={E}: {errs[E, hbars[0]]:.1%}/{errs[E, hbars[1]]:.1%}" for E in energies)
    report(6, ok, f"S_min/hbar={s_min / hbars[0]:.0f}; rel err at hbar/hbar2 {table}; "
                  f"worst={worst:.1%}, monotone={monotone}")


# -- 7 ----------------------------------------------------------------------

def test_criterion_7_weyl_term():
    E = 1.15
    params = ParticleParams(m=1.0, e=1.0, c=1.0, hbar=0.016)
    mc, se = shell_volume_mc(E, QUARTIC, params, "+", box=1.8, samples=400_000, seed=5)
    grid = shell_volume_grid(E, QUARTIC, params, "+", box=1.8, n=3000)
    z = abs(mc - grid) / se
    # hbar^-2 scaling of the spatial term, same samples
    cfg3 = FieldConfig.harmonic_scalar([1.0, 1.5, 2.0])
    tf = build_test_function(6.0)
    a = weyl_term(1.2, cfg3, params, tf, 20_000, seed=3, box=1.0, dim=3, branches=("+",))
    ratios = [weyl_term(1.2, cfg3, dataclasses.replace(params, hbar=params.hbar / k), tf, 20_000, seed=3,
                        box=1.0, dim=3, branches=("+",)).value / a.value for k in (2, 4)]
    scaling = max(abs(ratios[0] / 4 - 1), abs(ratios[1] / 16 - 1))
    ok = z <= 3 and scaling <= 1e-12
    report(7, ok, f"MC {mc:.6g} +- {se:.2g} vs grid {grid:.6g} ({z:.2f} SE); hbar^-2 scaling err={scaling:.1e}")


# -- 8 ----------------------------------------------------------------------

def test_criterion_8_spinless_reduction():
    params = ParticleParams(m=1.0, e=1.0, c=1.0, hbar=0.016)
    E0 = 1.15
    orbs = find_periodic_orbits(E0, "+", QUARTIC, params,
                                OrbitSearch(T_max=11.0, n_random=0, n_line=6, n_dir=12, box=1.4))
    tf = build_test_function(11.0, "plateau", T_flat=10.3)
    forced = [dataclasses.replace(o, theta=0.0, eta=0.0, d=np.eye(2, dtype=complex)) for o in orbs]
    spin_id = orbit_sum(E0, forced, tf, params, paired=False)
    spinless = orbit_sum(E0, orbs, tf, params, spinless=True, paired=False)
    err = 0.0
    for o, (_, a), (_, b) in zip(orbs, spin_id, spinless):
        gutz = (tf.rho_hat(o.T) / (2 * np.pi) * o.T_prim / np.sqrt(abs(np.linalg.det(o.M - np.eye(2))))
                * np.exp(1j * o.S / params.hbar - 0.5j * np.pi * o.mu))
        err = max(err, abs(a / gutz - 2), abs(b / gutz - 2))
    spinful = any(abs(o.spin_factor - 2) > 1e-3 for o in orbs)
    ok = err <= 1e-9 and spinful
    report(8, ok, f"{len(orbs)} orbits; max |ratio - 2|={err:.1e}; spin factor differs from 2 on some orbits: "
                  f"{spinful}")
