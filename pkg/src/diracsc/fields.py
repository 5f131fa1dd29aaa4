"""Closed catalog of static electromagnetic field configurations.

Every entry supplies the potentials (phi, A) in Coulomb gauge together with
their first and second spatial derivatives in closed form, which is what the
variational equations of the flow need.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class FieldKind(str, Enum):
    ZERO = "zero"
    UNIFORM_MAGNETIC = "uniform_magnetic"
    UNIFORM_ELECTRIC = "uniform_electric"
    HARMONIC_SCALAR = "harmonic_scalar"
    QUARTIC_COUPLED = "quartic_coupled"


# integer codes used by the compiled kernels
KIND_CODES = {
    FieldKind.ZERO: 0,
    FieldKind.UNIFORM_MAGNETIC: 1,
    FieldKind.UNIFORM_ELECTRIC: 2,
    FieldKind.HARMONIC_SCALAR: 3,
    FieldKind.QUARTIC_COUPLED: 4,
}


class FieldDomainError(ValueError):
    """Raised for non-finite positions or invalid field parameters."""


@dataclass(frozen=True)
class FieldConfig:
    """A static field scenario.

    Parameters
    ----------
    kind : FieldKind
        Catalog entry.
    vector : ndarray, shape (3,)
        Field vector B for ``uniform_magnetic``, E for ``uniform_electric``
        and per-axis stiffness k for ``harmonic_scalar``. Unused otherwise.
    g : float
        Coupling of the ``quartic_coupled`` potential ``g x^2 y^2``.
    confinement : float
        Coefficient ``a`` of the additional ``a (x^4 + y^4)`` term of
        ``quartic_coupled``. With ``a = 0`` the potential has open channels
        along the axes and the energy shell has infinite volume.
    """

    kind: FieldKind
    vector: np.ndarray = field(default_factory=lambda: np.zeros(3))
    g: float = 0.0
    confinement: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float).reshape(3)
        if not np.all(np.isfinite(v)):
            raise FieldDomainError("field vector must be finite")
        object.__setattr__(self, "vector", v)
        object.__setattr__(self, "kind", FieldKind(self.kind))
        if not (np.isfinite(self.g) and np.isfinite(self.confinement)):
            raise FieldDomainError("field parameters must be finite")

    @classmethod
    def zero(cls) -> "FieldConfig":
        return cls(FieldKind.ZERO)

    @classmethod
    def uniform_magnetic(cls, B) -> "FieldConfig":
        return cls(FieldKind.UNIFORM_MAGNETIC, np.asarray(B, float))

    @classmethod
    def uniform_electric(cls, E) -> "FieldConfig":
        return cls(FieldKind.UNIFORM_ELECTRIC, np.asarray(E, float))

    @classmethod
    def harmonic_scalar(cls, k) -> "FieldConfig":
        return cls(FieldKind.HARMONIC_SCALAR, np.asarray(k, float))

    @classmethod
    def quartic_coupled(cls, g: float = 1.0, confinement: float = 0.0) -> "FieldConfig":
        return cls(FieldKind.QUARTIC_COUPLED, g=float(g), confinement=float(confinement))

    @property
    def code(self) -> int:
        return KIND_CODES[self.kind]

    def kernel_params(self) -> np.ndarray:
        """Flat parameter vector consumed by the compiled kernels."""
        return np.array([*self.vector, self.g, self.confinement], dtype=float)

    def planar_compatible(self) -> bool:
        """True if motion started in the z=0 plane stays there.

        This needs B along z and E in the plane at z=0.
        """
        if self.kind == FieldKind.UNIFORM_MAGNETIC:
            return bool(self.vector[0] == 0.0 and self.vector[1] == 0.0)
        if self.kind == FieldKind.UNIFORM_ELECTRIC:
            return bool(self.vector[2] == 0.0)
        return True

    def planar_symmetries(self) -> list[np.ndarray]:
        """Orthogonal 2x2 maps of the plane leaving phi and B_z invariant.

        Only reflections that preserve B_z are included when B is nonzero,
        so time reversal must be combined separately by the caller.
        """
        if self.kind == FieldKind.QUARTIC_COUPLED:
            ops = []
            for swap in (False, True):
                for sx in (1.0, -1.0):
                    for sy in (1.0, -1.0):
                        m = np.diag([sx, sy])
                        if swap:
                            m = m[::-1]
                        ops.append(m)
            return ops
        if self.kind == FieldKind.HARMONIC_SCALAR:
            ops = [np.diag([sx, sy]) for sx in (1.0, -1.0) for sy in (1.0, -1.0)]
            if self.vector[0] == self.vector[1]:
                ops += [m[::-1] for m in ops]
            return ops
        return [np.eye(2)]


@dataclass(frozen=True)
class EMSample:
    """Potentials, fields and derivatives at one point.

    ``gradA[j, k]`` holds dA_j/dx_k. ``hessPhi`` is the Hessian of phi,
    carried along because the linearized flow needs it.
    """

    phi: float
    A: np.ndarray
    E: np.ndarray
    B: np.ndarray
    gradA: np.ndarray
    gradPhi: np.ndarray
    hessPhi: np.ndarray


def _cross_matrix(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def curl_from_gradient(gradA: np.ndarray) -> np.ndarray:
    """B = curl A from the matrix dA_j/dx_k."""
    return np.array([
        gradA[2, 1] - gradA[1, 2],
        gradA[0, 2] - gradA[2, 0],
        gradA[1, 0] - gradA[0, 1],
    ])


def _potentials(config: FieldConfig, x: np.ndarray):
    kind = config.kind
    phi = 0.0
    gphi = np.zeros(3)
    hphi = np.zeros((3, 3))
    A = np.zeros(3)
    gA = np.zeros((3, 3))
    if kind == FieldKind.UNIFORM_MAGNETIC:
        gA = 0.5 * _cross_matrix(config.vector)
        A = gA @ x
    elif kind == FieldKind.UNIFORM_ELECTRIC:
        phi = -float(config.vector @ x)
        gphi = -config.vector.copy()
    elif kind == FieldKind.HARMONIC_SCALAR:
        k = config.vector
        phi = 0.5 * float(k @ (x * x))
        gphi = k * x
        hphi = np.diag(k)
    elif kind == FieldKind.QUARTIC_COUPLED:
        g, a = config.g, config.confinement
        X, Y = x[0], x[1]
        phi = g * X * X * Y * Y + a * (X**4 + Y**4)
        gphi = np.array([2 * g * X * Y * Y + 4 * a * X**3, 2 * g * X * X * Y + 4 * a * Y**3, 0.0])
        hphi = np.array([
            [2 * g * Y * Y + 12 * a * X * X, 4 * g * X * Y, 0.0],
            [4 * g * X * Y, 2 * g * X * X + 12 * a * Y * Y, 0.0],
            [0.0, 0.0, 0.0],
        ])
    return phi, gphi, hphi, A, gA


def potential_only(config: FieldConfig, x) -> tuple[float, np.ndarray]:
    """Cheap (phi, A) evaluation used by finite-difference checks."""
    phi, _, _, A, _ = _potentials(config, np.asarray(x, float))
    return phi, A


def eval_em(config: FieldConfig, x) -> EMSample:
    """Evaluate potentials, fields and their derivatives at ``x``.

    Raises
    ------
    FieldDomainError
        If ``x`` has non-finite components.
    """
    x = np.asarray(x, dtype=float).reshape(3)
    if not np.all(np.isfinite(x)):
        raise FieldDomainError("position must be finite")
    phi, gphi, hphi, A, gA = _potentials(config, x)
    return EMSample(phi=float(phi), A=A, E=-gphi, B=curl_from_gradient(gA),
                    gradA=gA, gradPhi=gphi, hessPhi=hphi)


@dataclass(frozen=True)
class FieldResidualReport:
    div_A: float
    E_residual: float
    B_residual: float

    def max(self) -> float:
        return max(self.div_A, self.E_residual, self.B_residual)


def verify_field_consistency(config: FieldConfig, sample_points, h: float = 1e-4) -> FieldResidualReport:
    """Central-difference check of Coulomb gauge and field/potential relations.

    Returns the maxima over all points of |div A|, |E + grad phi| and
    |B - curl A|, with derivatives of the potentials taken numerically.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    div_max = e_max = b_max = 0.0
    for x in np.atleast_2d(np.asarray(sample_points, float)):
        em = eval_em(config, x)
        gphi = np.zeros(3)
        gA = np.zeros((3, 3))
        for k in range(3):
            dx = np.zeros(3)
            dx[k] = h
            phi_p, A_p = potential_only(config, x + dx)
            phi_m, A_m = potential_only(config, x - dx)
            gphi[k] = (phi_p - phi_m) / (2 * h)
            gA[:, k] = (A_p - A_m) / (2 * h)
        div_max = max(div_max, abs(np.trace(gA)))
        e_max = max(e_max, np.abs(em.E + gphi).max())
        b_max = max(b_max, np.abs(em.B - curl_from_gradient(gA)).max())
    return FieldResidualReport(float(div_max), float(e_max), float(b_max))


def eval_em_batch(config: FieldConfig, X) -> dict:
    """Vectorized evaluation at positions ``X`` of shape (n, 3).

    Returns a dict of arrays with keys phi, A, E, B, gradPhi (first axis n).
    Used on trajectory samples where building one ``EMSample`` per point
    would dominate the cost.
    """
    X = np.atleast_2d(np.asarray(X, float))
    n = X.shape[0]
    phi = np.zeros(n)
    gphi = np.zeros((n, 3))
    A = np.zeros((n, 3))
    gA = np.zeros((3, 3))
    kind = config.kind
    if kind == FieldKind.UNIFORM_MAGNETIC:
        gA = 0.5 * _cross_matrix(config.vector)
        A = X @ gA.T
    elif kind == FieldKind.UNIFORM_ELECTRIC:
        phi = -X @ config.vector
        gphi[:] = -config.vector
    elif kind == FieldKind.HARMONIC_SCALAR:
        phi = 0.5 * (X * X) @ config.vector
        gphi = X * config.vector
    elif kind == FieldKind.QUARTIC_COUPLED:
        g, a = config.g, config.confinement
        x, y = X[:, 0], X[:, 1]
        phi = g * x * x * y * y + a * (x**4 + y**4)
        gphi[:, 0] = 2 * g * x * y * y + 4 * a * x**3
        gphi[:, 1] = 2 * g * x * x * y + 4 * a * y**3
    B = np.broadcast_to(curl_from_gradient(gA), (n, 3)).copy()
    return {"phi": phi, "A": A, "E": -gphi, "B": B, "gradPhi": gphi}
