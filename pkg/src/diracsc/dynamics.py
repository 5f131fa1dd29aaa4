"""Classical relativistic dynamics generated by H = e phi +/- eps.

The flow and its linearization are integrated jointly with an adaptive
Dormand-Prince 5(4) pair (``scipy.integrate.solve_ivp``, method RK45). The
principal function R = int (p.xdot - H) dt rides along as an extra component.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from . import _kernels
from .fields import FieldConfig, eval_em


class IntegrationError(RuntimeError):
    """Integration failed; ``last_state`` holds the last good (t, x, p)."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


@dataclass(frozen=True)
class ParticleParams:
    m: float = 1.0
    e: float = 1.0
    c: float = 1.0
    hbar: float = 1.0

    def __post_init__(self):
        for name in ("m", "c", "hbar"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        if not np.isfinite(self.e):
            raise ValueError("e must be finite")

    @property
    def rest_energy(self) -> float:
        return self.m * self.c**2


@dataclass(frozen=True)
class PhaseState:
    x: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, float).reshape(3)
        p = np.asarray(self.p, float).reshape(3)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
            raise ValueError("phase state must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "p", p)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.p])

    @classmethod
    def from_vector(cls, z) -> "PhaseState":
        z = np.asarray(z, float)
        return cls(z[:3], z[3:6])


@dataclass(frozen=True)
class KineticFrame:
    pi: np.ndarray
    eps: float


def branch_sign(branch) -> int:
    """Map '+', '-', +1, -1 to the integer sign of the branch."""
    if branch in ("+", 1, +1.0):
        return 1
    if branch in ("-", -1, -1.0):
        return -1
    raise ValueError(f"unknown branch {branch!r}")


def kinetic_frame(state: PhaseState, config: FieldConfig, params: ParticleParams) -> KineticFrame:
    em = eval_em(config, state.x)
    pi = state.p - (params.e / params.c) * em.A
    eps = np.sqrt(params.c**2 * (pi @ pi) + params.m**2 * params.c**4)
    return KineticFrame(pi=pi, eps=float(eps))


def hamiltonian(state: PhaseState, branch, config: FieldConfig, params: ParticleParams) -> float:
    """e phi(x) + s eps with s the branch sign."""
    em = eval_em(config, state.x)
    kin = kinetic_frame(state, config, params)
    return params.e * em.phi + branch_sign(branch) * kin.eps


def _hamiltonian_batch(z: np.ndarray, sgn: int, config: FieldConfig, params: ParticleParams) -> np.ndarray:
    out = np.empty(z.shape[0])
    for i, zi in enumerate(z):
        out[i] = hamiltonian(PhaseState(zi[:3], zi[3:6]), sgn, config, params)
    return out


@dataclass
class Trajectory:
    """Integrated phase-space path.

    ``z`` has rows (x, p) at times ``t``; ``R`` is the principal function at
    those times. ``jacobians`` (if present) holds J(t) = d(x,p)_t/d(x,p)_0.
    Calling the trajectory evaluates the dense interpolant.
    """

    branch: int
    params: ParticleParams
    config: FieldConfig
    t: np.ndarray
    z: np.ndarray
    R: np.ndarray
    sol: object
    jacobians: Optional[np.ndarray] = None
    tol: float = 1e-10
    energy: float = field(default=np.nan)

    def __call__(self, t) -> np.ndarray:
        """Phase-space point(s) (x, p) at time(s) t from the dense output."""
        y = self.sol(t)
        return y[:6].T if np.ndim(t) else y[:6]

    def jacobian_at(self, t) -> np.ndarray:
        if self.jacobians is None:
            raise ValueError("trajectory has no linearized flow; call linearized_flow")
        y = self.sol(t)
        if y.shape[0] < 42:
            raise ValueError("dense output does not carry the Jacobian")
        return y[6:42].reshape(6, 6) if np.ndim(t) == 0 else y[6:42].T.reshape(-1, 6, 6)

    def state(self, t) -> PhaseState:
        return PhaseState.from_vector(self(t))

    @property
    def t_final(self) -> float:
        return float(self.t[-1])

    @property
    def initial(self) -> PhaseState:
        return PhaseState.from_vector(self.z[0])

    @property
    def final(self) -> PhaseState:
        return PhaseState.from_vector(self.z[-1])

    def energies(self) -> np.ndarray:
        return _hamiltonian_batch(self.z, self.branch, self.config, self.params)


def _integrate(state0: PhaseState, sgn: int, config: FieldConfig, params: ParticleParams,
               t_final: float, tol: float, with_jac: bool, t_eval=None, J0=None) -> Trajectory:
    code = config.code
    fp = config.kernel_params()
    m, e, c = params.m, params.e, params.c
    n = 43 if with_jac else 7

    def rhs(_, y):
        out = np.empty(n)
        _kernels.flow_rhs(y, sgn, code, fp, m, e, c, with_jac, out)
        return out

    y0 = np.zeros(n)
    y0[:6] = state0.as_vector()
    if with_jac:
        y0[6:42] = (np.eye(6) if J0 is None else J0).ravel()
    if t_final == 0.0:
        t = np.array([0.0])
        Y = y0[:, None]

        def sol(tt, _y=y0):
            tt = np.asarray(tt, float)
            return np.repeat(_y[:, None], tt.size, axis=1) if tt.ndim else _y.copy()
    else:
        res = solve_ivp(rhs, (0.0, t_final), y0, method="RK45", rtol=tol,
                        atol=tol * 1e-2, dense_output=True, t_eval=t_eval)
        if res.status != 0:
            last = (res.t[-1], res.y[:3, -1], res.y[3:6, -1]) if res.t.size else None
            raise IntegrationError(f"integration failed: {res.message}", last)
        t, Y, sol = res.t, res.y, res.sol
    traj = Trajectory(branch=sgn, params=params, config=config, t=t, z=Y[:6].T.copy(),
                      R=Y[-1].copy(), sol=sol, tol=tol,
                      jacobians=Y[6:42].T.reshape(-1, 6, 6).copy() if with_jac else None)
    traj.energy = hamiltonian(state0, sgn, config, params)
    return traj


def integrate_flow(state0: PhaseState, branch, config: FieldConfig, params: ParticleParams,
                   t_final: float, tol: float = 1e-10, t_eval=None) -> Trajectory:
    """Integrate Hamilton's equations of H+ or H- from ``state0``.

    Parameters
    ----------
    t_final : float
        End time, either sign.
    tol : float
        Relative tolerance of the embedded 5(4) pair; absolute tolerance is
        ``tol/100``.
    t_eval : array_like, optional
        Times at which samples are stored; defaults to the integrator steps.

    Raises
    ------
    IntegrationError
        On step-size underflow or other solver failure.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not np.isfinite(t_final):
        raise ValueError("t_final must be finite")
    return _integrate(state0, branch_sign(branch), config, params, float(t_final), tol, False, t_eval)


def linearized_flow(traj: Trajectory) -> Trajectory:
    """Return a copy of ``traj`` with the variational equations integrated.

    The base flow is re-integrated jointly with J so both share the same
    adaptive steps; the result replaces the dense output as well.
    """
    new = _integrate(traj.initial, traj.branch, traj.config, traj.params, traj.t_final,
                     traj.tol, True, t_eval=traj.t if traj.t.size > 1 else None)
    return new


def free_jacobian(p: np.ndarray, t: float, params: ParticleParams) -> np.ndarray:
    """Closed-form J(t) of free motion on branch +."""
    c, m = params.c, params.m
    eps = np.sqrt(c**2 * (p @ p) + m**2 * c**4)
    J = np.eye(6)
    J[:3, 3:] = t * c**2 * (eps**2 * np.eye(3) - c**2 * np.outer(p, p)) / eps**3
    return J


SYMPLECTIC_FORM = np.block([[np.zeros((3, 3)), np.eye(3)], [-np.eye(3), np.zeros((3, 3))]])


def symplectic_defect(J: np.ndarray) -> float:
    return float(np.abs(J.T @ SYMPLECTIC_FORM @ J - SYMPLECTIC_FORM).max())
