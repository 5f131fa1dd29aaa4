"""Spin-weighted trace formula: windows, test functions, Weyl term, orbit sum
and a brute-force time-domain oracle built from the semiclassical kernel.

Conventions: rho(w) = (1/2 pi) int rho_hat(t) exp(-i w t) dt, so the quantum
side is sum_n chi(E_n) rho((E_n - E)/hbar). Orbit contributions are listed
for positive traversal times together with their t < 0 partners, which are
complex conjugates; the branch-summed total is therefore real.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from . import _kernels
from .dynamics import ParticleParams, branch_sign
from .fields import FieldConfig, FieldDomainError, eval_em_batch

TEST_SHAPES = ("cosine_window", "smooth_bump", "plateau")


def smoothstep_c2(u):
    """Quintic smoothstep: 0 for u <= 0, 1 for u >= 1, C^2, odd about 1/2."""
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10 - 15 * u + 6 * u**2)


def smooth_step(u):
    """C-infinity step from 0 (u <= 0) to 1 (u >= 1)."""
    u = np.clip(np.asarray(u, float), 0.0, 1.0)

    def f(s):
        return np.where(s > 0, np.exp(-1.0 / np.maximum(s, 1e-300)), 0.0)
    return f(u) / (f(u) + f(1 - u))


@dataclass(frozen=True)
class SpectralWindow:
    """chi(E): 1 on [E_a + w, E_b - w], 0 outside (E_a, E_b).

    ``kind='c2'`` uses quintic smoothstep transitions, ``'smooth'`` the
    C-infinity step. Both equal 1/2 at the middle of each transition band.
    """

    Ea: float
    Eb: float
    w: float
    kind: str = "c2"

    def __post_init__(self):
        if not (self.Eb - self.Ea > 2 * self.w > 0):
            raise ValueError("need E_b - E_a > 2 w > 0")
        if self.kind not in ("c2", "smooth"):
            raise ValueError(f"unknown window kind {self.kind!r}")

    def __call__(self, E):
        step = smoothstep_c2 if self.kind == "c2" else smooth_step
        E = np.asarray(E, float)
        out = step((E - self.Ea) / self.w) * step((self.Eb - E) / self.w)
        return float(out) if out.ndim == 0 else out


def build_window(interval, w: float, kind: str = "c2") -> SpectralWindow:
    Ea, Eb = interval
    return SpectralWindow(float(Ea), float(Eb), float(w), kind)


@dataclass(frozen=True)
class TestFunction:
    """Even test function with rho_hat supported on [-T_max, T_max].

    Shapes
    ------
    cosine_window
        cos^2(pi t / 2 T_max).
    smooth_bump
        exp(-1 / (1 - (t/T_max)^2)).
    plateau
        1 for |t| <= T_flat, then a C-infinity roll-off to 0 at T_max.
    """

    T_max: float
    shape: str = "smooth_bump"
    T_flat: float = 0.0
    epsabs: float = 1e-13

    def __post_init__(self):
        if not self.T_max > 0:
            raise ValueError("T_max must be positive")
        if self.shape not in TEST_SHAPES:
            raise ValueError(f"unknown test-function shape {self.shape!r}")
        if self.shape == "plateau" and not (0 <= self.T_flat < self.T_max):
            raise ValueError("plateau needs 0 <= T_flat < T_max")

    def rho_hat(self, t):
        t = np.abs(np.asarray(t, float))
        u = t / self.T_max
        inside = u < 1
        if self.shape == "cosine_window":
            out = np.where(inside, np.cos(0.5 * np.pi * np.minimum(u, 1)) ** 2, 0.0)
        elif self.shape == "smooth_bump":
            out = np.where(inside, np.exp(-1.0 / np.maximum(1 - u * u, 1e-300)), 0.0)
        else:
            ramp = smooth_step((self.T_max - t) / (self.T_max - self.T_flat))
            out = np.where(inside, np.where(t <= self.T_flat, 1.0, ramp), 0.0)
        return float(out) if out.ndim == 0 else out

    def rho(self, omega):
        """(1/pi) int_0^T_max rho_hat(t) cos(omega t) dt by adaptive quadrature."""
        omega = np.atleast_1d(np.asarray(omega, float))
        out = np.empty(omega.shape)
        for i, w in enumerate(omega):
            if w == 0.0:
                val = quad(self.rho_hat, 0.0, self.T_max, epsabs=self.epsabs, epsrel=1e-12, limit=400)[0]
            else:
                val = quad(self.rho_hat, 0.0, self.T_max, weight="cos", wvar=w,
                           epsabs=self.epsabs, limit=800)[0]
            out[i] = val / np.pi
        return out if out.size > 1 else float(out[0])


def build_test_function(T_max: float, shape: str = "smooth_bump", **kw) -> TestFunction:
    return TestFunction(float(T_max), shape, **kw)


# ---------------------------------------------------------------------------
# Weyl term


@dataclass
class WeylResult:
    value: float
    volumes: dict
    stderr: dict
    dim: int


def _shell_density(config: FieldConfig, params: ParticleParams, E: float, X: np.ndarray, sgn: int):
    """Momentum-space shell measure at each position, dim = X.shape[1]."""
    dim = X.shape[1]
    X3 = np.zeros((X.shape[0], 3))
    X3[:, :dim] = X
    phi = eval_em_batch(config, X3)["phi"]
    eps = sgn * (E - params.e * phi)
    mc2 = params.rest_energy
    ok = eps > mc2
    c = params.c
    if dim == 2:
        dens = 2 * np.pi * eps / c**2
    else:
        p = np.sqrt(np.maximum(eps**2 - mc2**2, 0.0)) / c
        dens = 4 * np.pi * p * eps / c**2
    return np.where(ok, dens, 0.0)


def _check_box(config, params, E, sgn, box, dim):
    s = np.linspace(-box, box, 101)
    edges = []
    for k in range(dim):
        for side in (-box, box):
            g = np.meshgrid(*([s] * (dim - 1)), indexing="ij")
            pts = np.zeros((g[0].size if dim > 1 else 1, dim))
            cols = [gg.ravel() for gg in g]
            j = 0
            for q in range(dim):
                if q == k:
                    pts[:, q] = side
                else:
                    pts[:, q] = cols[j]
                    j += 1
            edges.append(pts)
    P = np.vstack(edges)
    if np.any(_shell_density(config, params, E, P, sgn) > 0):
        raise FieldDomainError(f"energy shell of branch {'+' if sgn > 0 else '-'} reaches the sampling box")


def shell_volume_mc(E: float, config: FieldConfig, params: ParticleParams, branch="+",
                    box: float = 3.0, samples: int = 100_000, seed: int = 0, dim: int = 2):
    """|Omega_E| by Monte Carlo over positions; returns (volume, standard error).

    The momentum integral of the delta shell is done in closed form
    (2 pi eps / c^2 in the plane, 4 pi |pi| eps / c^2 in space).
    """
    sgn = branch_sign(branch)
    _check_box(config, params, E, sgn, box, dim)
    rng = np.random.default_rng(seed)
    X = rng.uniform(-box, box, size=(samples, dim))
    f = _shell_density(config, params, E, X, sgn)
    vol = (2 * box) ** dim
    return float(vol * f.mean()), float(vol * f.std(ddof=1) / np.sqrt(samples))


def shell_volume_grid(E: float, config: FieldConfig, params: ParticleParams, branch="+",
                      box: float = 3.0, n: int = 2000, dim: int = 2) -> float:
    """|Omega_E| by the midpoint rule on an n^dim position grid."""
    sgn = branch_sign(branch)
    _check_box(config, params, E, sgn, box, dim)
    h = 2 * box / n
    s = -box + h * (np.arange(n) + 0.5)
    total = 0.0
    if dim == 2:
        for row in np.array_split(s, max(1, n // 200)):
            X = np.stack(np.meshgrid(row, s, indexing="ij"), -1).reshape(-1, 2)
            total += _shell_density(config, params, E, X, sgn).sum()
    else:
        for a in s:
            X = np.stack(np.meshgrid([a], s, s, indexing="ij"), -1).reshape(-1, 3)
            total += _shell_density(config, params, E, X, sgn).sum()
    return float(total * h**dim)


def weyl_term(E: float, config: FieldConfig, params: ParticleParams, tf: TestFunction,
              mc_samples: int = 100_000, seed: int = 0, box: float = 3.0, dim: int = 2,
              branches=("+", "-"), spin_multiplicity: int = 2) -> WeylResult:
    """rho_hat(0)/2pi * g_s * sum_branches |Omega_E| / (2 pi hbar)^(dim-1).

    Smoothing the Weyl density |Omega_E| / (2 pi hbar)^dim with
    rho((E' - E)/hbar) contributes one factor hbar, hence the exponent
    dim - 1: hbar^-2 in space, hbar^-1 in the plane. ``g_s = 2`` counts
    the two spin states of each branch.

    Raises
    ------
    FieldDomainError
        If an energy shell is not contained in the sampling box.
    """
    vols, errs = {}, {}
    for b in branches:
        v, se = shell_volume_mc(E, config, params, b, box, mc_samples, seed, dim)
        key = "+" if branch_sign(b) > 0 else "-"
        vols[key], errs[key] = v, se
    pref = tf.rho_hat(0.0) / (2 * np.pi) * spin_multiplicity / (2 * np.pi * params.hbar) ** (dim - 1)
    return WeylResult(value=float(pref * sum(vols.values())), volumes=vols, stderr=errs, dim=dim)


# ---------------------------------------------------------------------------
# orbit sum


class NonIsolatedOrbitError(ValueError):
    pass


@dataclass
class TraceResult:
    E: float
    weyl: float
    orbit_contributions: list
    total: float
    oracle: float | None = None
    notice: str = ""


def orbit_amplitude(orbit, spinless: bool = False) -> float:
    """2 T# cos(theta/2) cos(eta) / sqrt|det(M - 1)|; spin factor 2 if spinless."""
    spin = 2.0 if spinless else 2 * np.cos(orbit.theta / 2) * np.cos(orbit.eta)
    return float(orbit.T_prim * spin / np.sqrt(abs(orbit.det_M1)))


def orbit_sum(E: float, orbits, tf: TestFunction, params: ParticleParams,
              spinless: bool = False, paired: bool = True) -> list:
    """Per-orbit contributions (rho_hat(T)/2pi) A exp(i S/hbar - i pi mu/2).

    With ``paired`` each orbit is followed by its t < 0 partner (label with
    a trailing ``~``), the complex conjugate, so the sum is real.

    Raises
    ------
    NonIsolatedOrbitError
        If any orbit has |det(M - 1)| <= 1e-6.
    """
    out = []
    hb = params.hbar
    for o in orbits:
        if not o.isolated:
            raise NonIsolatedOrbitError(f"orbit {o.label} (T={o.T:.6g}) is not isolated: det(M-1)={o.det_M1:.3g}")
        if abs(o.E - E) > 1e-8 * max(1.0, abs(E)):
            raise ValueError(f"orbit {o.label} belongs to E={o.E}, not {E}")
        w = tf.rho_hat(o.T)
        if w == 0.0:
            c = 0j
        else:
            c = w / (2 * np.pi) * orbit_amplitude(o, spinless) * np.exp(1j * o.S / hb - 0.5j * np.pi * o.mu)
        out.append((o.label, complex(c)))
        if paired:
            out.append((o.label + "~", complex(np.conj(c))))
    return out


def evaluate_trace(E: float, orbits, tf: TestFunction, params: ParticleParams, weyl: float,
                   spinless: bool = False) -> TraceResult:
    contribs = orbit_sum(E, orbits, tf, params, spinless=spinless)
    notice = ""
    if not any(o.T <= tf.T_max for o in orbits):
        notice = "no orbits in support"
    total = weyl + sum(c.real for _, c in contribs)
    return TraceResult(E=float(E), weyl=float(weyl), orbit_contributions=contribs, total=float(total),
                       notice=notice)


def quantum_side(levels, window: SpectralWindow, tf: TestFunction, E: float, params: ParticleParams) -> float:
    """sum_n chi(E_n) rho((E_n - E)/hbar)."""
    levels = np.asarray(levels, float).ravel()
    if levels.size == 0:
        return 0.0
    chi = np.atleast_1d(window(levels))
    keep = chi != 0
    if not keep.any():
        return 0.0
    rho = np.atleast_1d(tf.rho((levels[keep] - E) / params.hbar))
    return float(np.sum(chi[keep] * rho))


# ---------------------------------------------------------------------------
# time-domain oracle


@dataclass(frozen=True)
class OracleQuadrature:
    """Discretization of the oracle's x and t integrals (planar mode).

    Positions are square cells of side ``h``, times cells of width ``dt``
    starting at ``t_min``; the integrand is multiplied by a C-infinity ramp
    from 0 at ``t_min`` to 1 at ``t_ramp``, which removes the t = 0 (Weyl)
    region smoothly. Inside each cell the phase is taken linear in x and t
    (Filon-type sinc factors). Closed loops are found per cell and time by
    damped Newton from a momentum scan, continuation in t and flood fill
    across neighbouring cells.
    """

    h: float = 0.05
    dt: float = 0.1
    t_min: float = 3.0
    t_ramp: float = 6.5
    box: float = 3.0
    n_radial: int = 8
    n_angle: int = 48
    steps_per_time: float = 30.0
    margin: float = 0.02
    newton_tol: float = 1e-10
    newton_maxit: int = 6
    max_flood: int = 50

    def __post_init__(self):
        if not (self.h > 0 and self.dt > 0 and 0 <= self.t_min < self.t_ramp):
            raise ValueError("invalid oracle quadrature")


@dataclass
class LoopSet:
    """Closed loops x -> x in time t on the oracle grid; independent of hbar and E."""

    X: np.ndarray
    weight: np.ndarray
    tgrid: np.ndarray
    cell: np.ndarray
    tidx: np.ndarray
    p0: np.ndarray
    Z: np.ndarray
    nu: np.ndarray
    h: float
    dt: float
    quad: OracleQuadrature
    T_max: float
    energy_range: tuple
    elapsed: float = 0.0
    newton_calls: int = 0


@dataclass
class OracleResult:
    E: np.ndarray
    one_sided: np.ndarray
    value: np.ndarray
    error_estimate: np.ndarray
    loops: LoopSet = field(repr=False, default=None)


def _dedupe(P: np.ndarray, tol: float) -> np.ndarray:
    keep = []
    for i in range(len(P)):
        if all(np.abs(P[i] - P[j]).max() > tol for j in keep):
            keep.append(i)
    return np.array(keep, int)


class _Grid:
    """Cell grid on [-L, L]^2, reduced to a fundamental wedge when the
    scenario has the full square symmetry group."""

    def __init__(self, config, params, L, h, Emax):
        self.h = h
        self.wedge = len(config.planar_symmetries()) == 8
        n = int(np.ceil(L / h))
        self.n = n
        cand = [(i, j) for i in range(n) for j in range(i + 1)] if self.wedge else \
            [(i, j) for i in range(-n, n) for j in range(-n, n)]
        C = (np.array(cand, float) + 0.5) * h
        X3 = np.zeros((len(C), 3))
        X3[:, :2] = C
        phi = eval_em_batch(config, X3)["phi"]
        ok = params.e * phi + params.rest_energy < Emax
        self.pts = np.array(cand)[ok]
        self.X = C[ok]
        self.idx = {tuple(p): k for k, p in enumerate(self.pts)}
        if self.wedge:
            self.weight = np.where(self.pts[:, 0] == self.pts[:, 1], 0.5, 1.0) * 8
        else:
            self.weight = np.ones(len(self.pts))

    def to_rep(self, i, j):
        """Representative cell of (i, j) and the map (sx, sy, swap) from it."""
        if not self.wedge:
            return (i, j), 1, 1, False
        sx = sy = 1
        if i < 0:
            i, sx = -i - 1, -1
        if j < 0:
            j, sy = -j - 1, -1
        swap = j > i
        if swap:
            i, j = j, i
        return (i, j), sx, sy, swap

    @staticmethod
    def apply_inv(v, sx, sy, swap):
        w = v * np.array([sx, sy])
        return w[..., ::-1] if swap else w


def find_loops(config: FieldConfig, params: ParticleParams, window: SpectralWindow, T_max: float,
               quad_: OracleQuadrature | None = None, verbose: bool = False) -> LoopSet:
    """Closed positive-branch loops on the oracle grid for t in (t_min, T_max)."""
    q = quad_ or OracleQuadrature()
    if not config.planar_compatible():
        raise ValueError("the oracle works in planar mode")
    m, e, c = params.m, params.e, params.c
    code, fp = config.code, config.kernel_params()
    Elo, Ehi = window.Ea - q.margin, window.Eb + q.margin
    grid = _Grid(config, params, q.box, q.h, Ehi)
    X = grid.X
    npt = len(X)
    tgrid = np.arange(q.t_min + q.dt / 2, T_max, q.dt)
    nt = len(tgrid)
    X3 = np.zeros((npt, 3))
    X3[:, :2] = X
    em = eval_em_batch(config, X3)
    phi0, A0 = em["phi"], em["A"][:, :2]
    t_start = time.time()

    # momentum scan of x_t - x on a polar grid of kinetic momenta
    scanP, scanF = [], []
    sub = max(1, int(np.ceil(q.dt * q.steps_per_time)))
    for ip in range(npt):
        emin = max(Elo - e * phi0[ip], params.rest_energy)
        emax = Ehi - e * phi0[ip]
        pmin = np.sqrt(max(emin**2 - params.rest_energy**2, 0.0)) / c
        pmax = np.sqrt(max(emax**2 - params.rest_energy**2, 0.0)) / c
        rr = np.linspace(pmin, pmax, q.n_radial)
        aa = np.linspace(0.0, 2 * np.pi, q.n_angle + 1)
        R_, A_ = np.meshgrid(rr, aa, indexing="ij")
        P = np.stack([R_ * np.cos(A_), R_ * np.sin(A_)], -1).reshape(-1, 2) + (e / c) * A0[ip]
        F = _kernels.planar_positions(X[ip, 0], X[ip, 1], P, tgrid, sub, 1, code, fp, m, e, c)
        scanP.append(P.reshape(q.n_radial, q.n_angle + 1, 2))
        scanF.append(F.reshape(q.n_radial, q.n_angle + 1, nt, 2) - X[ip])

    def velocity(Z):
        Xt = np.zeros((len(Z), 3))
        Xt[:, :2] = Z[:, :2]
        A = eval_em_batch(config, Xt)["A"][:, :2]
        pi = Z[:, 2:4] - (e / c) * A
        eps = np.sqrt(c**2 * np.sum(pi * pi, 1) + params.rest_energy**2)
        return c**2 * pi / eps[:, None]

    roots = [None] * npt
    rec_cell, rec_t, rec_p, rec_z, rec_nu = [], [], [], [], []
    ncalls = 0

    def newton_store(allX, allP, own, new, t):
        nonlocal ncalls
        if not allP:
            return
        Xa = np.vstack(allX)
        Pa = np.vstack(allP).copy()
        Oa = np.concatenate(own)
        ncalls += len(Pa)
        Pa, Za, NUa, oka = _kernels.planar_newton_loops(Xa, Pa, t, q.steps_per_time, q.newton_maxit,
                                                        q.newton_tol, 1, code, fp, m, e, c)
        Xa3 = np.zeros((len(Xa), 3))
        Xa3[:, :2] = Xa
        emx = eval_em_batch(config, Xa3)
        pi = Pa - (e / c) * emx["A"][:, :2]
        Eg = e * emx["phi"] + np.sqrt(c**2 * np.sum(pi * pi, 1) + params.rest_energy**2)
        oka &= (Eg > Elo) & (Eg < Ehi)
        for ip in np.unique(Oa[oka]):
            sel = np.nonzero(oka & (Oa == ip))[0]
            if new[ip] is None:
                new[ip] = dict(P=np.empty((0, 2)), Z=np.empty((0, 22)), NU=np.empty(0, int))
            r = new[ip]
            for i in sel:
                if len(r["P"]) and np.abs(r["P"] - Pa[i]).max(1).min() < 1e-6:
                    continue
                r["P"] = np.vstack([r["P"], Pa[i]])
                r["Z"] = np.vstack([r["Z"], Za[i]])
                r["NU"] = np.append(r["NU"], NUa[i])

    for k, t in enumerate(tgrid):
        cand = [[] for _ in range(npt)]
        for ip in range(npt):
            Pg, Fk = scanP[ip], scanF[ip][:, :, k, :]
            Nr, Na = q.n_radial, q.n_angle
            for tri in (((0, 0), (1, 0), (0, 1)), ((1, 1), (0, 1), (1, 0))):
                (i0, j0), (i1, j1), (i2, j2) = tri
                F0 = Fk[i0:Nr - 1 + i0, j0:Na + j0]
                F1 = Fk[i1:Nr - 1 + i1, j1:Na + j1]
                F2 = Fk[i2:Nr - 1 + i2, j2:Na + j2]
                P0 = Pg[i0:Nr - 1 + i0, j0:Na + j0]
                P1 = Pg[i1:Nr - 1 + i1, j1:Na + j1]
                P2 = Pg[i2:Nr - 1 + i2, j2:Na + j2]
                a1, a2 = F1 - F0, F2 - F0
                det = a1[..., 0] * a2[..., 1] - a1[..., 1] * a2[..., 0]
                with np.errstate(all="ignore"):
                    l1 = (-F0[..., 0] * a2[..., 1] + F0[..., 1] * a2[..., 0]) / det
                    l2 = (-a1[..., 0] * F0[..., 1] + a1[..., 1] * F0[..., 0]) / det
                    hit = (l1 >= 0) & (l2 >= 0) & (l1 + l2 <= 1) & np.isfinite(l1)
                if hit.any():
                    pc = P0[hit] + l1[hit][:, None] * (P1[hit] - P0[hit]) + l2[hit][:, None] * (P2[hit] - P0[hit])
                    cand[ip].extend(pc)
            r = roots[ip]
            if r is not None and len(r["P"]):
                Z = r["Z"]
                B = Z[:, [6, 7, 10, 11]].reshape(-1, 2, 2)
                dp = -np.linalg.solve(B, velocity(Z)[..., None])[..., 0] * q.dt
                cand[ip].extend(r["P"] + dp)
        new = [None] * npt
        allX, allP, own = [], [], []
        for ip in range(npt):
            if cand[ip]:
                C = np.array(cand[ip])
                C = C[_dedupe(C, 1e-4)]
                allP.append(C)
                allX.append(np.repeat(X[ip][None], len(C), 0))
                own.append(np.full(len(C), ip))
        newton_store(allX, allP, own, new, t)
        frontier = {ip for ip in range(npt) if new[ip] is not None}
        it = 0
        while frontier and it < q.max_flood:
            it += 1
            allX, allP, own = [], [], []
            for ip in frontier:
                i, j = grid.pts[ip]
                r = new[ip]
                A = r["Z"][:, [4, 5, 8, 9]].reshape(-1, 2, 2)
                B = r["Z"][:, [6, 7, 10, 11]].reshape(-1, 2, 2)
                for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    rep, sx, sy, sw = grid.to_rep(i + di, j + dj)
                    jp = grid.idx.get(rep)
                    if jp is None:
                        continue
                    dx = np.array([di, dj]) * q.h
                    pred = r["P"] - np.linalg.solve(B, ((A - np.eye(2)) @ dx)[..., None])[..., 0]
                    pw = grid.apply_inv(pred, sx, sy, sw)
                    if new[jp] is not None and len(new[jp]["P"]):
                        d = np.abs(pw[:, None, :] - new[jp]["P"][None]).max(2).min(1)
                        pw = pw[d > 1e-3]
                    if len(pw):
                        pw = pw[_dedupe(pw, 1e-4)]
                        allP.append(pw)
                        allX.append(np.repeat(X[jp][None], len(pw), 0))
                        own.append(np.full(len(pw), jp))
            before = [0 if new[s] is None else len(new[s]["P"]) for s in range(npt)]
            newton_store(allX, allP, own, new, t)
            frontier = {s for s in range(npt) if (0 if new[s] is None else len(new[s]["P"])) > before[s]}
        roots = new
        for ip in range(npt):
            if new[ip] is not None:
                n_ = len(new[ip]["P"])
                rec_cell.append(np.full(n_, ip))
                rec_t.append(np.full(n_, k))
                rec_p.append(new[ip]["P"])
                rec_z.append(new[ip]["Z"])
                rec_nu.append(new[ip]["NU"])
        if verbose and k % 10 == 0:
            tot = sum(len(r["P"]) for r in new if r is not None)
            print(f"t={t:.2f} loops={tot} newton={ncalls} elapsed={time.time() - t_start:.0f}s", flush=True)

    def cat(lst, shape):
        return np.concatenate(lst) if lst else np.empty(shape)

    return LoopSet(X=X, weight=grid.weight, tgrid=tgrid, cell=cat(rec_cell, (0,)).astype(int),
                   tidx=cat(rec_t, (0,)).astype(int), p0=cat(rec_p, (0, 2)), Z=cat(rec_z, (0, 22)),
                   nu=cat(rec_nu, (0,)).astype(int), h=q.h, dt=q.dt, quad=q, T_max=float(T_max),
                   energy_range=(Elo, Ehi), elapsed=time.time() - t_start, newton_calls=ncalls)


def _loop_terms(loops: LoopSet, config: FieldConfig, params: ParticleParams, window: SpectralWindow):
    """hbar-independent pieces of every loop: E_gamma, chi, spin trace, D, R, nu."""
    e, c = params.e, params.c
    mc2 = params.rest_energy
    x = loops.X[loops.cell]
    X3 = np.zeros((len(x), 3))
    X3[:, :2] = x
    em0 = eval_em_batch(config, X3)
    Xt = np.zeros((len(x), 3))
    Xt[:, :2] = loops.Z[:, :2]
    emt = eval_em_batch(config, Xt)
    pi0 = loops.p0 - (e / c) * em0["A"][:, :2]
    pit = loops.Z[:, 2:4] - (e / c) * emt["A"][:, :2]
    e0 = np.sqrt(c**2 * np.sum(pi0**2, 1) + mc2**2)
    et = np.sqrt(c**2 * np.sum(pit**2, 1) + mc2**2)
    Eg = e * em0["phi"] + e0
    det = loops.Z[:, 6] * loops.Z[:, 11] - loops.Z[:, 7] * loops.Z[:, 10]
    eta = loops.Z[:, 21]
    # tr(V_t d V_0^+) with d = diag(e^{i eta}, e^{-i eta})
    alpha = (e0 + mc2) * (et + mc2) + c**2 * np.sum(pi0 * pit, 1)
    cz = pi0[:, 0] * pit[:, 1] - pi0[:, 1] * pit[:, 0]
    norm = np.sqrt(2 * e0 * (e0 + mc2) * 2 * et * (et + mc2))
    spin = 2 * (alpha * np.cos(eta) - c**2 * cz * np.sin(eta)) / norm
    return dict(Eg=Eg, chi=np.atleast_1d(window(Eg)), spin=spin, D=1 / np.sqrt(np.abs(det)),
                R=loops.Z[:, 20], gx=loops.Z[:, 2:4] - loops.p0, t=loops.tgrid[loops.tidx],
                w=loops.weight[loops.cell], det=det)


def evaluate_oracle(loops: LoopSet, E, config: FieldConfig, params: ParticleParams,
                    window: SpectralWindow, tf: TestFunction, spinless: bool = False) -> OracleResult:
    """(1/2pi) int b(t) rho_hat(t) e^{iEt/hbar} int tr K_sc(x, x, t) d^2x dt on a loop set.

    ``b`` is the small-t ramp of the quadrature. Returns the t > 0 integral
    (complex) and the full real value 2 Re of it; the error estimate is the
    change when the Filon factors are dropped (plain midpoint rule).
    """
    E = np.atleast_1d(np.asarray(E, float))
    hb = params.hbar
    q = loops.quad
    L = _loop_terms(loops, config, params, window)
    if np.any(np.abs(L["det"]) < 1e-12):
        bad = np.nonzero(np.abs(L["det"]) < 1e-12)[0]
        cells = [(tuple(loops.X[loops.cell[i]]), float(L["t"][i])) for i in bad[:10]]
        from .propagator import CausticError
        raise CausticError(f"loops on caustics at (x, t) = {cells}")
    spin = 2.0 * np.ones_like(L["spin"]) if spinless else L["spin"]
    ramp = smooth_step((L["t"] - q.t_min) / (q.t_ramp - q.t_min))
    amp = L["chi"] * spin * L["D"] * L["w"] * ramp * tf.rho_hat(L["t"]) / (2j * np.pi * hb)
    fil_x = np.sinc(L["gx"][:, 0] * loops.h / (2 * np.pi * hb)) * np.sinc(L["gx"][:, 1] * loops.h / (2 * np.pi * hb))
    base = amp * np.exp(-0.5j * np.pi * loops.nu)
    scale = loops.h**2 * loops.dt / (2 * np.pi)
    out = np.empty(len(E), complex)
    err = np.empty(len(E))
    for i, En in enumerate(E):
        ph = np.exp(1j * (L["R"] + En * L["t"]) / hb)
        fil_t = np.sinc((En - L["Eg"]) * loops.dt / (2 * np.pi * hb))
        terms = base * ph
        out[i] = np.sum(terms * fil_x * fil_t) * scale
        err[i] = abs(np.sum(terms) * scale - out[i])
    return OracleResult(E=E, one_sided=out, value=2 * out.real, error_estimate=2 * err, loops=loops)


def direct_trace_oracle(E, config: FieldConfig, params: ParticleParams, window: SpectralWindow,
                        tf: TestFunction, quad_: OracleQuadrature | None = None,
                        loops: LoopSet | None = None) -> OracleResult:
    """Brute-force oscillatory trace from the semiclassical kernel (planar, branch +).

    The spatial trace runs over the square ``[-box, box]^2`` cut to the
    classically allowed region, the time integral over (t_min, T_max) with
    the smooth ramp; the t = 0 neighbourhood is left to the Weyl term.
    Pass ``loops`` to reuse a loop set across hbar values and energies.
    """
    if loops is None:
        loops = find_loops(config, params, window, tf.T_max, quad_)
    return evaluate_oracle(loops, E, config, params, window, tf)
