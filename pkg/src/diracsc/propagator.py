"""Leading-order semiclassical kernel from connecting classical orbits.

Each orbit from y to x in time t contributes

    (2 pi i hbar)^(-3/2) F_t d F_0^+ D exp(i R / hbar - i pi nu / 2),

with F = V on the positive branch and F = W on the negative one, d the
spin transport along the orbit, R the principal function, D the Van Vleck
amplitude and nu the Morse index.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import _kernels
from .dynamics import (IntegrationError, ParticleParams, PhaseState, Trajectory,
                       _integrate, branch_sign, kinetic_frame)
from .fields import FieldConfig
from .spin import eigenframe, transport_spin


class CausticError(RuntimeError):
    """The endpoint is conjugate to the start point (det dx_t/dp0 = 0)."""


@dataclass(frozen=True)
class SearchGrid:
    """Seeds and tolerances of the boundary-value search.

    Parameters
    ----------
    extent : float
        Half-width of the cubic box of initial momenta, in units of m c.
    n : int
        Grid points per momentum axis.
    planar : bool
        Restrict seeds to p_z = 0 (for planar-compatible fields and
        endpoints in the z = 0 plane).
    steps_per_time : float
        RK4 steps per unit time in the Newton iterations.
    """

    extent: float = 3.0
    n: int = 5
    planar: bool = False
    steps_per_time: float = 200.0
    maxit: int = 60
    tol: float = 1e-9
    dedupe: float = 1e-6
    integ_tol: float = 1e-12

    def __post_init__(self):
        if self.n < 1 or self.extent <= 0:
            raise ValueError("search grid must be nonempty")

    def seeds(self, params: ParticleParams) -> np.ndarray:
        ax = np.linspace(-self.extent, self.extent, self.n) * params.m * params.c
        if self.planar:
            P = np.array([(a, b, 0.0) for a in ax for b in ax])
        else:
            P = np.array([(a, b, cc) for a in ax for b in ax for cc in ax])
        return P


@dataclass
class ConnectingOrbit:
    branch: int
    x: np.ndarray
    y: np.ndarray
    t: float
    p0: np.ndarray
    trajectory: Trajectory
    R: float
    D: float
    nu: int
    residual: float
    d_holonomy: np.ndarray = field(default=None)
    frames: tuple = field(default=None)

    @property
    def pt(self) -> np.ndarray:
        return self.trajectory.z[-1, 3:6]


@dataclass
class KernelValue:
    matrix: np.ndarray
    contributions: list


def _free_seed(x, y, t, sgn, params):
    v = (x - y) / t
    beta2 = (v @ v) / params.c**2
    if beta2 >= 1:
        return None
    return sgn * params.m * v / np.sqrt(1 - beta2)


def _newton_rk4(x, y, t, p, sgn, config, params, grid):
    code, fp = config.code, config.kernel_params()
    m, e, c = params.m, params.e, params.c
    nsteps = max(16, int(np.ceil(abs(t) * grid.steps_per_time)))
    p = np.array(p, float)
    limit = 1e3 * grid.extent * m * c
    for _ in range(grid.maxit):
        z = _kernels.spatial_rk4(y, p, t, nsteps, sgn, code, fp, m, e, c)
        r = z[:3] - x
        if not np.all(np.isfinite(z)):
            return None
        if np.linalg.norm(r) < 1e-11 * max(1.0, np.linalg.norm(x)):
            return p
        B = z[6:42].reshape(6, 6)[:3, 3:]
        try:
            dp = np.linalg.solve(B, r)
        except np.linalg.LinAlgError:
            return None
        cap = max(0.5 * m * c, 0.5 * np.linalg.norm(p))
        nd = np.linalg.norm(dp)
        if nd > cap:
            dp *= cap / nd
        p -= dp
        if np.linalg.norm(p) > limit:
            return None
    return p


def _polish(x, y, t, p, sgn, config, params, grid):
    """A few Newton steps with the adaptive integrator; returns (p, traj, res)."""
    traj = None
    res = np.inf
    for _ in range(4):
        traj = _integrate(PhaseState(y, p), sgn, config, params, t, grid.integ_tol, True)
        r = traj.z[-1, :3] - x
        res = float(np.linalg.norm(r))
        if res <= 0.1 * grid.tol:
            break
        B = traj.jacobians[-1][:3, 3:]
        p = p - np.linalg.solve(B, r)
    return p, traj, res


def _det_b(traj: Trajectory, tau):
    J = traj.jacobian_at(np.asarray(tau, float))
    return np.linalg.det(J[..., :3, 3:])


def morse_count(traj: Trajectory, nsample: int = 2000) -> int:
    """Zeros of det(dx_tau/dp0) for tau in (0, t), with multiplicity.

    Sign changes on a dense sample of the interpolant are refined by root
    bracketing; the multiplicity is the number of singular values of the
    block that vanish at the refined zero. Touching zeros without a sign
    change (even rank) are picked up from local minima of the smallest
    singular value.
    """
    T = traj.t_final
    tau = np.unique(np.concatenate([np.linspace(0, T, nsample + 1)[1:-1], traj.t[1:-1]]))
    if tau.size == 0:
        return 0
    Jb = traj.jacobian_at(tau)[:, :3, 3:]
    sv = np.linalg.svd(Jb, compute_uv=False)
    scale = max(float(sv[:, 0].max()), 1e-300)
    det = np.linalg.det(Jb)

    def smin(s):
        return np.linalg.svd(traj.jacobian_at(s)[:3, 3:], compute_uv=False)[-1]

    def rank_deficit(s):
        v = np.linalg.svd(traj.jacobian_at(s)[:3, 3:], compute_uv=False)
        return max(1, int(np.sum(v < 1e-6 * scale)))

    nu = 0
    for k in np.nonzero(np.sign(det[1:]) * np.sign(det[:-1]) < 0)[0]:
        s = brentq(lambda q: _det_b(traj, q), tau[k], tau[k + 1], xtol=1e-14)
        nu += rank_deficit(s)
    small = sv[:, -1] / scale
    for k in range(1, len(tau) - 1):
        if small[k] < small[k - 1] and small[k] <= small[k + 1] and small[k] < 1e-3:
            if np.sign(det[k - 1]) != np.sign(det[k + 1]):
                continue
            r = minimize_scalar(smin, bounds=(tau[k - 1], tau[k + 1]), method="bounded",
                                options={"xatol": 1e-13})
            if r.fun < 1e-7 * scale:
                v = np.linalg.svd(traj.jacobian_at(r.x)[:3, 3:], compute_uv=False)
                nu += int(np.sum(v < 1e-5 * scale))
    return nu


def van_vleck_and_morse(orbit: ConnectingOrbit, caustic_tol: float = 1e-8) -> tuple[float, int]:
    """Van Vleck amplitude D = |det dx_t/dp0|^(-1/2) and Morse index nu.

    Raises
    ------
    CausticError
        If dx_t/dp0 is numerically singular at the endpoint.
    """
    traj = orbit.trajectory
    J = traj.jacobians[-1]
    B = J[:3, 3:]
    sv = np.linalg.svd(B, compute_uv=False)
    # relative to the whole Jacobian, so a full-rank collapse (isotropic focus) is caught too
    if sv[-1] <= caustic_tol * np.linalg.norm(J, 2):
        raise CausticError(f"endpoint is conjugate at t={orbit.t} (smallest singular value {sv[-1]:.3g})")
    D = 1.0 / np.sqrt(abs(np.linalg.det(B)))
    return float(D), morse_count(traj)


def principal_function(orbit: ConnectingOrbit) -> float:
    """R = int (p.xdot - H) dt, integrated jointly with the orbit."""
    return float(orbit.trajectory.R[-1])


def find_connecting_orbits(x, y, t: float, branch, config: FieldConfig, params: ParticleParams,
                           search: SearchGrid | None = None, with_spin: bool = False) -> list[ConnectingOrbit]:
    """All classical orbits of one branch from y to x in time t.

    Multi-start damped Newton on the initial momentum, seeded from a
    momentum grid plus the straight-line guess, then polished with the
    adaptive integrator. Roots with initial momenta within
    ``search.dedupe`` are merged; the result is sorted by p0.
    An empty list means no orbit was found (e.g. |x - y| > c t).
    """
    search = search or SearchGrid()
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, float).reshape(3)
    y = np.asarray(y, float).reshape(3)
    sgn = branch_sign(branch)
    seeds = list(search.seeds(params))
    guess = _free_seed(x, y, t, sgn, params)
    if guess is not None:
        seeds.insert(0, guess)
    roots: list[np.ndarray] = []
    for p in seeds:
        p = _newton_rk4(x, y, t, p, sgn, config, params, search)
        if p is None:
            continue
        if any(np.linalg.norm(p - q) < 1e-4 * max(1.0, np.linalg.norm(q)) for q in roots):
            continue
        roots.append(p)
    orbits: list[ConnectingOrbit] = []
    for p in roots:
        try:
            p, traj, res = _polish(x, y, t, p, sgn, config, params, search)
        except (IntegrationError, np.linalg.LinAlgError):
            continue
        if res > search.tol:
            continue
        if any(np.linalg.norm(p - o.p0) < search.dedupe for o in orbits):
            continue
        orb = ConnectingOrbit(branch=sgn, x=x, y=y, t=float(t), p0=p, trajectory=traj,
                              R=float(traj.R[-1]), D=np.nan, nu=-1, residual=res)
        orbits.append(orb)
    orbits.sort(key=lambda o: tuple(o.p0))
    for orb in orbits:
        try:
            orb.D, orb.nu = van_vleck_and_morse(orb)
        except CausticError:
            orb.nu = morse_count(orb.trajectory)
        if with_spin:
            attach_spin(orb)
    return orbits


def attach_spin(orbit: ConnectingOrbit) -> ConnectingOrbit:
    """Fill the spin holonomy and the endpoint eigenframes."""
    traj = orbit.trajectory
    hist = transport_spin(traj)
    orbit.d_holonomy = hist.d[-1]
    f0 = eigenframe(kinetic_frame(traj.initial, traj.config, traj.params), traj.params)
    ft = eigenframe(kinetic_frame(traj.final, traj.config, traj.params), traj.params)
    orbit.frames = (f0, ft)
    return orbit


def _contribution(orbit: ConnectingOrbit, params: ParticleParams) -> np.ndarray:
    f0, ft = orbit.frames
    F0, Ft = (f0.V, ft.V) if orbit.branch > 0 else (f0.W, ft.W)
    hb = params.hbar
    pref = (2j * np.pi * hb) ** -1.5
    phase = np.exp(1j * orbit.R / hb - 0.5j * np.pi * orbit.nu)
    return pref * orbit.D * phase * (Ft @ orbit.d_holonomy @ F0.conj().T)


def semiclassical_kernel(x, y, t: float, config: FieldConfig, params: ParticleParams,
                         search: SearchGrid | None = None, branches=(1, -1)) -> KernelValue:
    """Assemble the 4x4 kernel K(x, y, t) from both branch sums.

    Raises
    ------
    CausticError
        If any connecting orbit ends on a caustic.
    """
    total = np.zeros((4, 4), complex)
    contribs = []
    for b in branches:
        for orb in find_connecting_orbits(x, y, t, b, config, params, search, with_spin=True):
            if not np.isfinite(orb.D):
                van_vleck_and_morse(orb)
            k = _contribution(orb, params)
            contribs.append((orb, k))
            total += k
    return KernelValue(matrix=total, contributions=contribs)
