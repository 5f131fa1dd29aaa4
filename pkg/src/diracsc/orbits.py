"""Periodic orbits at fixed energy and their trace-formula invariants.

Orbits are found by Newton iteration on (z0, T) for the closure condition
z(T) = z0 with an energy constraint and a phase condition along the flow,
seeded from close returns of trial trajectories. Planar mode works in the
z = 0 plane with a 2x2 reduced monodromy; spatial mode in full phase space
with a 4x4 one.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import null_space
from scipy.optimize import minimize_scalar

from . import _kernels
from .dynamics import ParticleParams, PhaseState, branch_sign, hamiltonian, integrate_flow
from .fields import FieldConfig, FieldKind, eval_em
from .spin import hopf, spin_trace_factor, transport_spin

ISOLATION_TOL = 1e-6


class OrbitError(RuntimeError):
    """Orbit fails closure or cannot be continued."""


@dataclass(frozen=True)
class OrbitSearch:
    """Seeding and tolerances of the periodic-orbit search.

    Parameters
    ----------
    T_max : float
        Largest period kept (support of the test function).
    n_random : int
        Random seeds (position in the allowed region, random direction).
    n_line : int
        Seeds per symmetry line (planar quartic scenario only).
    box : float
        Half-width of the sampling box for seed positions.
    t_min : float
        Shortest period considered.
    """

    T_max: float = 12.0
    n_random: int = 100
    n_line: int = 12
    n_dir: int = 24
    box: float = 3.0
    t_min: float = 0.5
    return_frac: float = 0.2
    closure_tol: float = 1e-9
    seed: int = 0
    planar: bool = True


@dataclass
class PeriodicOrbit:
    branch: int
    E: float
    T: float
    T_prim: float
    r: int
    initial: PhaseState
    S: float
    M: np.ndarray
    mu: int
    nu: int
    theta: float = 0.0
    eta: float = 0.0
    d: np.ndarray = field(default=None, repr=False)
    stable: bool = False
    det_M1: float = np.nan
    closure: float = np.nan
    planar: bool = True
    label: str = ""

    @property
    def isolated(self) -> bool:
        return bool(abs(self.det_M1) > ISOLATION_TOL)

    @property
    def spin_factor(self) -> float:
        return 2 * np.cos(self.theta / 2) * np.cos(self.eta)


class _Flow:
    """Thin wrapper of the compiled right-hand sides for one scenario."""

    def __init__(self, config: FieldConfig, params: ParticleParams, sgn: int, planar: bool):
        if planar and not config.planar_compatible():
            raise ValueError("field is not compatible with planar mode")
        self.config, self.params, self.sgn, self.planar = config, params, sgn, planar
        self.n = 2 if planar else 3
        self.code, self.fp = config.code, config.kernel_params()

    # phase vector <-> 3D state
    def state(self, z) -> PhaseState:
        if self.planar:
            return PhaseState([z[0], z[1], 0.0], [z[2], z[3], 0.0])
        return PhaseState(z[:3], z[3:6])

    def H(self, z) -> float:
        return hamiltonian(self.state(z), self.sgn, self.config, self.params)

    def vector_field(self, z) -> np.ndarray:
        pr = self.params
        if self.planar:
            y = np.zeros(22)
            y[:4] = z
            out = np.zeros(22)
            _kernels.planar_rhs(y, self.sgn, self.code, self.fp, pr.m, pr.e, pr.c, False, out)
            return out[:4]
        y = np.zeros(7)
        y[:6] = z
        out = np.zeros(7)
        _kernels.flow_rhs(y, self.sgn, self.code, self.fp, pr.m, pr.e, pr.c, False, out)
        return out[:6]

    def grad_H(self, z) -> np.ndarray:
        # dH/dx = -pdot, dH/dp = xdot
        f = self.vector_field(z)
        n = self.n
        return np.concatenate([-f[n:], f[:n]])

    def integrate(self, z0, T, jac=True, dense=False, rtol=1e-12):
        """Integrate (z, J, R[, eta]) over [0, T] with DOP853."""
        pr = self.params
        n2 = 2 * self.n
        if self.planar:
            def rhs(_, y):
                out = np.empty(22)
                _kernels.planar_rhs(y, self.sgn, self.code, self.fp, pr.m, pr.e, pr.c, True, out)
                return out
            y0 = np.zeros(22)
            y0[:4] = z0
            y0[4:20] = np.eye(4).ravel()
        else:
            def rhs(_, y):
                out = np.empty(43)
                _kernels.flow_rhs(y, self.sgn, self.code, self.fp, pr.m, pr.e, pr.c, True, out)
                return out
            y0 = np.zeros(43)
            y0[:6] = z0
            y0[6:42] = np.eye(6).ravel()
        res = solve_ivp(rhs, (0.0, T), y0, method="DOP853", rtol=rtol, atol=rtol * 0.1,
                        dense_output=dense)
        if res.status != 0:
            raise OrbitError(f"integration failed: {res.message}")
        y = res.y[:, -1]
        J = y[n2:n2 + n2 * n2].reshape(n2, n2)
        R = y[n2 + n2 * n2]
        return y[:n2], J, R, res

    def positions(self, z0, T):
        """Dense solution of the bare flow (for close-return detection)."""
        return solve_ivp(lambda _, z: self.vector_field(z), (0.0, T), z0, method="DOP853",
                         rtol=1e-9, atol=1e-11, dense_output=True)

    def jacobian_blocks(self, J):
        n = self.n
        return J[:n, :n], J[:n, n:], J[n:, :n], J[n:, n:]


def _closure_newton(flow: _Flow, z, T, E, maxit=40, tol=1e-11):
    """Newton on (z0, T): z(T) = z0, H(z0) = E, f(z0).dz = 0."""
    z = np.array(z, float)
    T = float(T)
    n2 = 2 * flow.n
    res = np.inf
    for _ in range(maxit):
        zT, J, _, _ = flow.integrate(z, T)
        f0 = flow.vector_field(z)
        F = np.concatenate([zT - z, [flow.H(z) - E, 0.0]])
        res = np.linalg.norm(F)
        if res < tol:
            return z, T, True
        Jac = np.zeros((n2 + 2, n2 + 1))
        Jac[:n2, :n2] = J - np.eye(n2)
        Jac[:n2, n2] = flow.vector_field(zT)
        Jac[n2, :n2] = flow.grad_H(z)
        Jac[n2 + 1, :n2] = f0
        d = np.linalg.lstsq(Jac, -F, rcond=None)[0]
        lam = min(1.0, 0.2 / max(np.linalg.norm(d), 1e-300))
        z = z + lam * d[:n2]
        T = T + lam * d[n2]
        if not (T > 0 and np.all(np.isfinite(z))):
            return z, T, False
    return z, T, res < 1e-9


def _on_energy_shell(flow: _Flow, x, E, direction) -> np.ndarray | None:
    """Phase point at position x with kinetic momentum along ``direction``."""
    pr = flow.params
    x3 = np.zeros(3)
    x3[:flow.n] = x
    em = eval_em(flow.config, x3)
    eps = flow.sgn * (E - pr.e * em.phi)
    if eps <= pr.rest_energy:
        return None
    pim = np.sqrt(eps**2 - pr.rest_energy**2) / pr.c
    p = pim * np.asarray(direction) + (pr.e / pr.c) * em.A[:flow.n]
    return np.concatenate([x, p])


def _same_orbit(flow: _Flow, a: tuple, b: tuple, tol=1e-6) -> bool:
    (_, Ta, sol_a), (zb, Tb, _) = a, b
    if abs(Ta - Tb) > 1e-6 * max(1.0, Ta):
        return False
    ts = np.linspace(0.0, Ta, 4001)
    zz = sol_a(ts)[:2 * flow.n]
    dist = np.linalg.norm(zz - zb[:, None], axis=0)
    i = int(np.argmin(dist))
    if dist[i] > 0.05:
        return False
    r = minimize_scalar(lambda t: np.linalg.norm(sol_a(t)[:2 * flow.n] - zb),
                        bounds=(ts[max(i - 1, 0)], ts[min(i + 1, len(ts) - 1)]),
                        method="bounded", options={"xatol": 1e-12})
    return bool(r.fun < tol)


def _symmetry_images(flow: _Flow, z) -> list[np.ndarray]:
    """Images of a phase point under the planar point group and time reversal."""
    if not flow.planar:
        return []
    out = []
    has_b = flow.config.kind == FieldKind.UNIFORM_MAGNETIC
    for G in flow.config.planar_symmetries():
        out.append(np.concatenate([G @ z[:2], G @ z[2:]]))
        if not has_b:
            out.append(np.concatenate([G @ z[:2], -(G @ z[2:])]))
    return out


def _seeds(flow: _Flow, E: float, search: OrbitSearch, rng) -> list[np.ndarray]:
    n = flow.n
    seeds = []
    pr = flow.params

    def allowed(x):
        x3 = np.zeros(3)
        x3[:n] = x
        return flow.sgn * (E - pr.e * eval_em(flow.config, x3).phi) > pr.rest_energy

    L = search.box
    if flow.planar and flow.config.kind in (FieldKind.QUARTIC_COUPLED, FieldKind.HARMONIC_SCALAR):
        # points on the axis and the diagonal, all directions
        for u in np.linspace(0.0, 1.0, search.n_line, endpoint=False):
            for base in (np.array([u * L, 0.0]), np.array([u * L, u * L]) / np.sqrt(2)):
                if not allowed(base):
                    continue
                for ang in np.linspace(0.0, np.pi, search.n_dir, endpoint=False):
                    z = _on_energy_shell(flow, base, E, [np.cos(ang), np.sin(ang)])
                    if z is not None:
                        seeds.append(z)
    count = 0
    tries = 0
    while count < search.n_random and tries < 100 * max(search.n_random, 1):
        tries += 1
        x = rng.uniform(-L, L, n)
        if not allowed(x):
            continue
        d = rng.normal(size=n)
        d /= np.linalg.norm(d)
        z = _on_energy_shell(flow, x, E, d)
        if z is not None:
            seeds.append(z)
            count += 1
    return seeds


def find_periodic_orbits(E: float, branch, config: FieldConfig, params: ParticleParams,
                         search: OrbitSearch | None = None, with_spin: bool = True) -> list[PeriodicOrbit]:
    """Periodic orbits with period up to ``search.T_max`` at energy E.

    Primitive orbits are collected from Newton-corrected close returns of
    seed trajectories, completed by the symmetry images of the scenario and
    deduplicated geometrically (same period and one orbit passing through
    the other's initial point). Each primitive orbit is then listed with its
    repetitions r = 1, 2, ... up to ``T_max``. Sorted by period.
    """
    search = search or OrbitSearch()
    sgn = branch_sign(branch)
    flow = _Flow(config, params, sgn, search.planar)
    rng = np.random.default_rng(search.seed)
    found: list[tuple] = []

    def add(z, T):
        _, _, _, res = flow.integrate(z, T, jac=False, dense=True)
        cand = (z, T, res.sol)
        for q in found:
            if _same_orbit(flow, q, cand):
                return False
        found.append(cand)
        return True

    horizon = search.T_max + search.t_min
    for z0 in _seeds(flow, E, search, rng):
        sol = flow.positions(z0, horizon)
        ts = np.linspace(search.t_min, horizon, 4001)
        zz = sol.sol(ts)
        d = np.linalg.norm(zz - z0[:, None], axis=0)
        scale = search.return_frac * search.box
        idx = [i for i in range(1, len(d) - 1) if d[i] < d[i - 1] and d[i] < d[i + 1] and d[i] < scale]
        for i in idx:
            z, T, ok = _closure_newton(flow, z0, ts[i], E)
            if not ok or not (search.t_min < T <= search.T_max):
                continue
            Tp = _primitive_period(flow, z, T)
            if Tp < T - 1e-6:
                z, T, ok = _closure_newton(flow, z, Tp, E)
                if not ok:
                    continue
            if add(z, T):
                for zi in _symmetry_images(flow, z):
                    add(zi, T)
    orbits = []
    for k, (z, T, _) in enumerate(sorted(found, key=lambda q: (q[1], tuple(q[0])))):
        nrep = int(np.floor(search.T_max / T + 1e-12))
        for r in range(1, nrep + 1):
            orb = orbit_invariants_from(flow, E, z, T, r)
            orb.label = f"p{k}" + (f"^{r}" if r > 1 else "")
            if with_spin:
                orbit_spin_holonomy(orb, config, params)
            orbits.append(orb)
    orbits.sort(key=lambda o: (o.T, o.label))
    return orbits


def _primitive_period(flow: _Flow, z, T) -> float:
    """Smallest divisor T/k (k >= 1) over which the orbit already closes."""
    for k in range(8, 1, -1):
        zT, _, _, _ = flow.integrate(z, T / k, jac=False)
        if np.linalg.norm(zT - z) < 1e-6:
            return T / k
    return T


def _symplectic_basis(flow: _Flow, f, g):
    """Symplectic basis of the complement of span{f, g}.

    Returns rows (e_1..e_k, f_1..f_k) with omega(e_i, f_j) = delta_ij.
    """
    n2 = 2 * flow.n
    Om = _omega(flow.n)
    U = null_space(np.vstack([f @ Om, g @ Om]))
    vecs = [U[:, i] for i in range(U.shape[1])]
    es, fs = [], []
    while vecs:
        a = vecs.pop(0)
        j = max(range(len(vecs)), key=lambda i: abs(a @ Om @ vecs[i]))
        b = vecs.pop(j)
        b = b / (a @ Om @ b)
        out = []
        for v in vecs:
            v = v - (v @ Om @ b) * a + (v @ Om @ a) * b
            out.append(v)
        vecs = out
        es.append(a)
        fs.append(b)
    B = np.array(es + fs)
    assert B.shape == (n2 - 2, n2)
    return B


def _omega(n):
    return np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])


def reduced_monodromy(flow: _Flow, z0, J) -> np.ndarray:
    """Monodromy restricted to the energy shell modulo the flow direction.

    J maps the symplectic complement U of span{f, g} (f the flow vector,
    g = grad H / |grad H|^2) to itself up to components along f and g,
    which the projection along span{f, g} removes. In a symplectic basis of
    U the result is a symplectic matrix of size 2n - 2.
    """
    n = flow.n
    Om = _omega(n)
    f = flow.vector_field(z0)
    gH = flow.grad_H(z0)
    g = gH / (gH @ gH)
    Bas = _symplectic_basis(flow, f, g)
    k = n - 1
    e_, f_ = Bas[:k], Bas[k:]
    wfg = f @ Om @ g

    def proj(v):
        return v - ((v @ Om @ g) / wfg) * f - ((f @ Om @ v) / wfg) * g

    M = np.zeros((2 * k, 2 * k))
    for j, u in enumerate(Bas):
        v = proj(J @ u)
        M[:k, j] = [v @ Om @ fi for fi in f_]
        M[k:, j] = [-(v @ Om @ ei) for ei in e_]
    return M


def maslov_index(flow: _Flow, z0, J, zT, nu: int) -> int:
    """Maslov index of a closed orbit as nu + n_-.

    nu counts conjugate points of det(dx/dp0) along the orbit and n_- is
    the number of negative eigenvalues of the Hessian of R(x, x, t) + E t
    in the directions transverse to the orbit (positions normal to the
    initial velocity, and time). This is the phase picked up when the
    orbit's contribution to the time-domain trace is evaluated by
    stationary phase.
    """
    n = flow.n
    A, B, _, D = flow.jacobian_blocks(J)
    Bi = np.linalg.inv(B)
    Hxx = D @ Bi + Bi @ A - Bi - Bi.T
    Hxx = 0.5 * (Hxx + Hxx.T)
    f0 = flow.vector_field(z0)
    fT = flow.vector_field(zT)
    xd0, pd0, xdT = f0[:n], f0[n:], fT[:n]
    dEx = xd0 @ Bi
    dEy = -pd0 - xd0 @ Bi @ A
    Hxt = -(dEx + dEy)
    Htt = xd0 @ Bi @ xdT
    Hs = np.zeros((n + 1, n + 1))
    Hs[:n, :n] = Hxx
    Hs[:n, n] = Hs[n, :n] = Hxt
    Hs[n, n] = Htt
    u = xd0 / np.linalg.norm(xd0)
    perp = null_space(u[None, :])
    Bas = np.zeros((n + 1, n))
    Bas[:n, :n - 1] = perp
    Bas[n, n - 1] = 1.0
    Hr = Bas.T @ Hs @ Bas
    return int(nu + np.sum(np.linalg.eigvalsh(Hr) < 0))


def _count_conjugate(flow: _Flow, sol, T, nsample=20000) -> int:
    n = flow.n
    n2 = 2 * n
    ts = np.linspace(0.0, T, nsample)[1:-1]
    Y = sol(ts)
    J = Y[n2:n2 + n2 * n2].T.reshape(-1, n2, n2)
    det = np.linalg.det(J[:, :n, n:])
    return int(np.sum(np.sign(det[1:]) != np.sign(det[:-1])))


def orbit_invariants_from(flow: _Flow, E, z, T_prim, r=1) -> PeriodicOrbit:
    T = r * T_prim
    zT, J, R, res = flow.integrate(z, T, dense=True)
    closure = float(np.linalg.norm(zT - z))
    nu = _count_conjugate(flow, res.sol, T)
    mu = maslov_index(flow, z, J, zT, nu)
    M = reduced_monodromy(flow, z, J)
    dm = float(np.linalg.det(M - np.eye(M.shape[0])))
    ev = np.linalg.eigvals(M)
    stable = bool(np.all(np.abs(np.abs(ev) - 1) < 1e-6))
    return PeriodicOrbit(branch=flow.sgn, E=float(E), T=float(T), T_prim=float(T_prim), r=int(r),
                         initial=flow.state(z), S=float(R + E * T), M=M, mu=mu, nu=nu,
                         stable=stable, det_M1=dm, closure=closure, planar=flow.planar)


def _phase_vector(orbit: PeriodicOrbit) -> np.ndarray:
    s = orbit.initial
    return np.concatenate([s.x[:2], s.p[:2]]) if orbit.planar else s.as_vector()


def orbit_invariants(orbit: PeriodicOrbit, config: FieldConfig, params: ParticleParams,
                     closure_tol: float = 1e-9):
    """Recompute (S, T, T#, M, mu) from the orbit's initial point.

    Raises
    ------
    OrbitError
        If the orbit does not close within ``closure_tol``.
    """
    flow = _Flow(config, params, orbit.branch, orbit.planar)
    new = orbit_invariants_from(flow, orbit.E, _phase_vector(orbit), orbit.T_prim, orbit.r)
    if new.closure > closure_tol:
        raise OrbitError(f"orbit {orbit.label} does not close (residual {new.closure:.3g})")
    return new.S, new.T, new.T_prim, new.M, new.mu


def relocate(orbit: PeriodicOrbit, config: FieldConfig, params: ParticleParams, tau: float) -> PeriodicOrbit:
    """Same orbit started a time ``tau`` further along."""
    flow = _Flow(config, params, orbit.branch, orbit.planar)
    z, _, _, _ = flow.integrate(_phase_vector(orbit), tau, jac=False)
    out = orbit_invariants_from(flow, orbit.E, z, orbit.T_prim, orbit.r)
    out.label = orbit.label
    return out


def continue_orbit(orbit: PeriodicOrbit, E_new: float, config: FieldConfig,
                   params: ParticleParams) -> PeriodicOrbit:
    """Newton-continue a primitive orbit to a nearby energy."""
    flow = _Flow(config, params, orbit.branch, orbit.planar)
    z, T, ok = _closure_newton(flow, _phase_vector(orbit), orbit.T_prim, E_new, tol=1e-12)
    if not ok:
        raise OrbitError(f"continuation of {orbit.label} to E={E_new} failed")
    out = orbit_invariants_from(flow, E_new, z, T, orbit.r)
    out.label = orbit.label
    return out


def orbit_spin_holonomy(orbit: PeriodicOrbit, config: FieldConfig, params: ParticleParams):
    """Transport d over the orbit from the identity.

    Fills ``orbit.d``, ``theta`` (polar angle of hopf(d(T))) and ``eta``
    (arg of d[0, 0]) and returns (theta, eta, 2 cos(theta/2) cos(eta)).
    """
    traj = integrate_flow(orbit.initial, orbit.branch, config, params, orbit.T, tol=1e-12)
    hist = transport_spin(traj)
    d = hist.d[-1]
    hopf(d)  # unitarity check
    theta = float(2 * np.arctan2(abs(d[1, 0]), abs(d[0, 0])))
    eta = float(np.angle(d[0, 0]))
    orbit.d, orbit.theta, orbit.eta = d, theta, eta
    factor = 2 * np.cos(theta / 2) * np.cos(eta)
    if abs(factor - spin_trace_factor(d)) > 1e-8:
        raise OrbitError("spin factor disagrees with Re tr d")
    return theta, eta, float(factor)


def repetition(orbit: PeriodicOrbit, r: int, config: FieldConfig, params: ParticleParams) -> PeriodicOrbit:
    """The r-th traversal of a primitive orbit, recomputed from scratch."""
    if orbit.r != 1:
        raise ValueError("start from a primitive orbit")
    flow = _Flow(config, params, orbit.branch, orbit.planar)
    out = orbit_invariants_from(flow, orbit.E, _phase_vector(orbit), orbit.T_prim, r)
    out.label = f"{orbit.label}^{r}"
    return replace(out)
