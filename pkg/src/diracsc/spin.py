"""SU(2) spin transport along classical orbits.

The transport matrix d solves d' + i M2 d = 0 with M2 = (1/2) sigma.w, where
w is the precession vector of the branch,

    w = -s (e c / eps) B + (e c^2 / (eps (eps + m c^2))) pi x E,

s = +1 for H+ and -1 for H-. The classical spin s = hopf(d) then obeys
s' = w x s. The phase eta of the upper-left entry of d splits into a
dynamical part -1/2 int w.s dt and a geometric part fixed by the path of s.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson, simpson, solve_ivp

from .dynamics import KineticFrame, ParticleParams, Trajectory, branch_sign
from .fields import EMSample, eval_em_batch

SIGMA = np.array([
    [[0, 1], [1, 0]],
    [[0, -1j], [1j, 0]],
    [[1, 0], [0, -1]],
], dtype=complex)

# hysteresis band of the hemisphere gauge switch (|cos theta| < band)
GAUGE_BAND = 0.1


class GaugePoleError(ValueError):
    """The active gauge's reference component vanished."""


class NotUnitaryError(ValueError):
    """Input matrix is not in SU(2) within tolerance."""


def sigma_dot(v) -> np.ndarray:
    v = np.asarray(v)
    return np.tensordot(v, SIGMA, axes=([-1], [0]))


def precession_vector(pi, eps, E, B, params: ParticleParams, branch=1) -> np.ndarray:
    """Spin precession vector w with M2 = sigma.w / 2 (broadcasts over rows)."""
    s = branch_sign(branch)
    m, e, c = params.m, params.e, params.c
    eps = np.asarray(eps, float)[..., None]
    return (-s * (e * c / eps) * B
            + (e * c**2 / (eps * (eps + m * c**2))) * np.cross(pi, E))


def coupling_m2(kin: KineticFrame, em: EMSample, params: ParticleParams, branch=1) -> np.ndarray:
    """Hermitian traceless 2x2 coupling matrix M2."""
    w = precession_vector(kin.pi, kin.eps, em.E, em.B, params, branch)
    return 0.5 * sigma_dot(w)


def _kinematics(traj: Trajectory, t: np.ndarray):
    """pi, eps, E, B at times t along the trajectory (dense output)."""
    z = traj(t)
    if z.ndim == 1:
        z = z[None]
    em = eval_em_batch(traj.config, z[:, :3])
    pr = traj.params
    pi = z[:, 3:6] - (pr.e / pr.c) * em["A"]
    eps = np.sqrt(pr.c**2 * np.sum(pi * pi, axis=1) + pr.m**2 * pr.c**4)
    return pi, eps, em["E"], em["B"]


def precession_along(traj: Trajectory, t) -> np.ndarray:
    pi, eps, E, B = _kinematics(traj, np.atleast_1d(np.asarray(t, float)))
    return precession_vector(pi, eps, E, B, traj.params, traj.branch)


def su2_exp(omega: np.ndarray) -> np.ndarray:
    """exp(-i sigma.omega / 2) for rows of rotation vectors omega."""
    omega = np.atleast_2d(omega)
    ang = np.linalg.norm(omega, axis=1)
    half = 0.5 * ang
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(ang[:, None] > 0, omega / ang[:, None], 0.0)
    out = np.empty((omega.shape[0], 2, 2), complex)
    cs, sn = np.cos(half), np.sin(half)
    out[:, 0, 0] = cs - 1j * sn * n[:, 2]
    out[:, 1, 1] = cs + 1j * sn * n[:, 2]
    out[:, 0, 1] = -1j * sn * (n[:, 0] - 1j * n[:, 1])
    out[:, 1, 0] = -1j * sn * (n[:, 0] + 1j * n[:, 1])
    return out


@dataclass
class SpinHistory:
    """Transported frames on a uniform time grid.

    ``eta`` is the continuous phase track: arg of d[0,0] in the north gauge
    and arg of d[1,0] (the phase lambda) in the south gauge. ``switches``
    lists (index, new_gauge, phi) for every gauge change.
    """

    t: np.ndarray
    d: np.ndarray
    s: np.ndarray
    w: np.ndarray
    eta: np.ndarray = field(default=None)
    gauge: np.ndarray = field(default=None)
    switches: list = field(default_factory=list)

    @property
    def theta(self) -> np.ndarray:
        return np.arccos(np.clip(self.s[:, 2], -1.0, 1.0))

    @property
    def phi_angle(self) -> np.ndarray:
        return np.arctan2(self.s[:, 1], self.s[:, 0])

    def frame(self, k: int) -> "SpinFrame":
        return SpinFrame(d=self.d[k], s=self.s[k], eta=float(self.eta[k]), gauge=str(self.gauge[k]),
                         theta=float(self.theta[k]), phi_angle=float(self.phi_angle[k]))


@dataclass(frozen=True)
class SpinFrame:
    d: np.ndarray
    s: np.ndarray
    eta: float
    gauge: str
    theta: float
    phi_angle: float


def transport_spin(traj: Trajectory, d0=None, max_step: float | None = None,
                   gauge: str = "auto") -> SpinHistory:
    """Transport d along ``traj`` with a fourth-order Magnus scheme.

    Each step multiplies by the exact exponential of the two-point Gauss
    Magnus generator, so d stays in SU(2) up to roundoff however long the
    trajectory. The step is uniform, at most ``max_step``; by default it
    keeps the rotation angle per step below 0.02 rad and is no longer than
    the mean step of the trajectory integrator.

    Parameters
    ----------
    d0 : (2, 2) complex, optional
        Initial frame; identity if omitted.
    gauge : {'auto', 'north', 'south'}
        Passed to :func:`extract_eta`.
    """
    T = traj.t_final
    if d0 is None:
        d0 = np.eye(2, dtype=complex)
    d0 = np.asarray(d0, complex)
    if T == 0.0:
        t = np.array([0.0])
        d = d0[None].copy()
        w = precession_along(traj, t)
    else:
        if max_step is None:
            probe = np.linspace(0.0, T, 257)
            wmax = np.linalg.norm(precession_along(traj, probe), axis=1).max()
            max_step = abs(T) / max(len(traj.t) - 1, 1)
            if wmax > 0:
                max_step = min(max_step, 0.02 / wmax)
        n = max(16, int(np.ceil(abs(T) / max_step)))
        t = np.linspace(0.0, T, n + 1)
        h = t[1] - t[0]
        c1, c2 = 0.5 - np.sqrt(3) / 6, 0.5 + np.sqrt(3) / 6
        w1 = precession_along(traj, t[:-1] + c1 * h)
        w2 = precession_along(traj, t[:-1] + c2 * h)
        # Omega = -i h/2 (M1 + M2) - (sqrt3/12) h^2 [M2, M1] with M = sigma.w/2,
        # i.e. exp(-i sigma.omega/2) with the rotation vector below
        omega = 0.5 * h * (w1 + w2) + (np.sqrt(3) / 12) * h**2 * np.cross(w2, w1)
        steps = su2_exp(omega)
        d = np.empty((n + 1, 2, 2), complex)
        d[0] = d0
        for k in range(n):
            d[k + 1] = steps[k] @ d[k]
        w = precession_along(traj, t)
    s = hopf(d, tol=None)
    hist = SpinHistory(t=t, d=d, s=s, w=w)
    extract_eta(hist, gauge=gauge)
    return hist


def hopf(d, tol: float | None = 1e-8) -> np.ndarray:
    """Spin vector psi^+ sigma psi of the first column psi = (u, v).

    Components (2 Re u* v, 2 Im u* v, |u|^2 - |v|^2); this orientation is
    the one that precesses as s' = w x s.

    Accepts a single matrix or a stack. With ``tol`` set, non-unitary input
    raises :class:`NotUnitaryError`.
    """
    d = np.asarray(d, complex)
    single = d.ndim == 2
    dd = d[None] if single else d
    if tol is not None:
        dev = np.abs(np.einsum("nji,njk->nik", dd.conj(), dd) - np.eye(2)).max()
        if dev > tol:
            raise NotUnitaryError(f"matrix deviates from unitarity by {dev:.3g}")
    u, v = dd[:, 0, 0], dd[:, 1, 0]
    uv = u.conj() * v
    s = np.stack([2 * uv.real, 2 * uv.imag, np.abs(u) ** 2 - np.abs(v) ** 2], axis=1)
    return s[0] if single else s


def su2_from_angles(theta: float, eta: float, phi: float = 0.0) -> np.ndarray:
    """SU(2) matrix with first column (e^{i eta} cos(theta/2), e^{i(eta+phi)} sin(theta/2)).

    Its spin vector has polar angles (theta, phi).
    """
    u = np.exp(1j * eta) * np.cos(theta / 2)
    v = np.exp(1j * (eta + phi)) * np.sin(theta / 2)
    return np.array([[u, -v.conjugate()], [v, u.conjugate()]])


def precess_spin(traj: Trajectory, s0, t=None, rtol: float = 1e-12, normalize: bool = True) -> np.ndarray:
    """Integrate s' = w x s directly.

    Parameters
    ----------
    t : array_like, optional
        Output times; defaults to the trajectory's stored times.
    normalize : bool
        Rescale the output to |s| = 1. Turn off to see the integrator's norm drift.
    """
    s0 = np.asarray(s0, float)
    if abs(np.linalg.norm(s0) - 1.0) > 1e-12:
        raise ValueError("s0 must be a unit vector")
    t = traj.t if t is None else np.asarray(t, float)
    T = traj.t_final
    if T == 0.0:
        return np.repeat(s0[None], len(t), axis=0)

    def rhs(tt, s):
        return np.cross(precession_along(traj, tt)[0], s)

    res = solve_ivp(rhs, (0.0, T), s0, method="DOP853", rtol=rtol, atol=rtol * 1e-2, t_eval=t)
    s = res.y.T
    return s / np.linalg.norm(s, axis=1)[:, None] if normalize else s


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def extract_eta(hist: SpinHistory, gauge: str = "auto", start: str | None = None) -> SpinHistory:
    """Fill ``hist.eta``, ``hist.gauge`` and ``hist.switches``.

    In ``auto`` mode the gauge starts in the hemisphere of s(0) and switches
    once s crosses the equator by more than the hysteresis band (``start``
    overrides the initial gauge of ``auto`` mode). At a
    switch the phases are matched through lambda - eta = phi, so the track
    jumps by +phi (north to south) or -phi (south to north).

    Raises
    ------
    GaugePoleError
        If a fixed gauge is requested and its reference entry drops below
        1e-6 in modulus.
    """
    d = hist.d
    u, v = d[:, 0, 0], d[:, 1, 0]
    sz = hist.s[:, 2]
    n = len(u)
    eta = np.empty(n)
    gauges = np.empty(n, dtype=object)
    switches = []
    if gauge == "auto":
        cur = start or ("north" if sz[0] >= 0 else "south")
        if cur not in ("north", "south"):
            raise ValueError(f"unknown start gauge {start!r}")
    elif gauge in ("north", "south"):
        cur = gauge
    else:
        raise ValueError(f"unknown gauge {gauge!r}")
    ref = u if cur == "north" else v
    if abs(ref[0]) < 1e-6:
        raise GaugePoleError(f"{cur} gauge reference vanishes at t={hist.t[0]}")
    eta[0] = np.angle(ref[0])
    gauges[0] = cur
    for k in range(1, n):
        if gauge == "auto":
            if cur == "north" and sz[k] < -GAUGE_BAND:
                phi_k = _wrap(np.angle(v[k]) - np.angle(u[k]))
                prev = eta[k - 1] + _wrap(np.angle(u[k]) - np.angle(u[k - 1]))
                cur = "south"
                eta[k] = prev + phi_k
                switches.append((k, cur, float(phi_k)))
                gauges[k] = cur
                continue
            if cur == "south" and sz[k] > GAUGE_BAND:
                phi_k = _wrap(np.angle(v[k]) - np.angle(u[k]))
                prev = eta[k - 1] + _wrap(np.angle(v[k]) - np.angle(v[k - 1]))
                cur = "north"
                eta[k] = prev - phi_k
                switches.append((k, cur, float(phi_k)))
                gauges[k] = cur
                continue
        ref = u if cur == "north" else v
        if abs(ref[k]) < 1e-6:
            raise GaugePoleError(f"{cur} gauge reference vanishes at t={hist.t[k]}")
        eta[k] = eta[k - 1] + _wrap(np.angle(ref[k]) - np.angle(ref[k - 1]))
        gauges[k] = cur
    hist.eta = eta
    hist.gauge = gauges
    hist.switches = switches
    return hist


def phase_decomposition(hist: SpinHistory) -> tuple[float, float]:
    """Dynamical and geometric parts of the phase change over ``hist``.

    eta_dyn = -1/2 int w.s dt. eta_geo collects -1/2 int (1 - cos theta) dphi
    on northern stretches, 1/2 int (1 + cos theta) dphi on southern ones,
    and the matching jumps at gauge switches, so that
    eta_dyn + eta_geo = eta[-1] - eta[0] up to quadrature error.
    """
    t, s, w = hist.t, hist.s, hist.w
    if len(t) < 3:
        return 0.0, 0.0
    eta_dyn = -0.5 * simpson(np.sum(w * s, axis=1), x=t)
    sdot = np.cross(w, s)
    ang = s[:, 0] * sdot[:, 1] - s[:, 1] * sdot[:, 0]
    bounds = [0] + [k for k, _, _ in hist.switches] + [len(t) - 1]
    eta_geo = 0.0
    for j in range(len(bounds) - 1):
        i0, i1 = bounds[j], bounds[j + 1]
        # gauge active on [i0, i1]; at a switch index it is the new gauge
        g_seg = hist.gauge[i0]
        seg = slice(i0, i1 + 1)
        if g_seg == "north":
            f = -0.5 * ang[seg] / (1.0 + s[seg, 2])
        else:
            f = 0.5 * ang[seg] / (1.0 - s[seg, 2])
        if i1 - i0 >= 2:
            eta_geo += simpson(f, x=t[seg])
        elif i1 > i0:
            eta_geo += 0.5 * (f[0] + f[-1]) * (t[i1] - t[i0])
    for k, new, phi_k in hist.switches:
        eta_geo += phi_k if new == "south" else -phi_k
    return float(eta_dyn), float(eta_geo)


def dynamical_phase_track(hist: SpinHistory) -> np.ndarray:
    """Running -1/2 int w.s dt on the history grid."""
    return -0.5 * cumulative_simpson(np.sum(hist.w * hist.s, axis=1), x=hist.t, initial=0.0)


@dataclass(frozen=True)
class EigenFrame:
    V: np.ndarray
    W: np.ndarray


def eigenframe(kin: KineticFrame, params: ParticleParams) -> EigenFrame:
    """Orthonormal eigenvectors of the symbol c alpha.pi + beta m c^2.

    Columns of V belong to +eps, columns of W to -eps.
    """
    mc2 = params.m * params.c**2
    eps = kin.eps
    if eps + mc2 <= 0:
        raise ValueError("eps + m c^2 must be positive")
    norm = 1.0 / np.sqrt(2 * eps * (eps + mc2))
    sp = params.c * sigma_dot(kin.pi)
    I2 = np.eye(2)
    V = norm * np.vstack([(eps + mc2) * I2, sp])
    W = norm * np.vstack([-sp, (eps + mc2) * I2])
    return EigenFrame(V=V.astype(complex), W=W.astype(complex))


def symbol_matrix(kin: KineticFrame, params: ParticleParams) -> np.ndarray:
    """c alpha.pi + beta m c^2 as a 4x4 matrix (scalar potential omitted)."""
    mc2 = params.m * params.c**2
    sp = params.c * sigma_dot(kin.pi)
    I2 = np.eye(2)
    return np.block([[mc2 * I2, sp], [sp, -mc2 * I2]]).astype(complex)


def spin_trace_factor(d) -> float:
    """Re tr d, which equals 2 cos(theta/2) cos(eta) for d in SU(2)."""
    d = np.asarray(d, complex)
    return float(np.real(np.trace(d)))


def trace_factor_from_angles(theta: float, eta: float) -> float:
    return float(2 * np.cos(theta / 2) * np.cos(eta))
