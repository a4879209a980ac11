"""Energy-equivalent lumped-mass transform for linear elastic actuators.

A uniform one-dimensional elastic actuator of mass m, stiffness k, damping c
and rest length l0 is replaced by three point masses (m/6, 2m/3, m/6 at the
ends and midpoint), two spring-damper-force segments (2k, 2c, rest l0/2,
sharing the drive force F), and one constraint forcing both segment
elongations to stay equal.  With the midpoint held at the geometric center,
the discrete assembly reproduces the continuous actuator's gravitational
potential energy, kinetic energy, elastic potential energy and virtual work
exactly, for arbitrary endpoint kinematics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, NoSolution, SingularSystem

_DUPLICATE_TOL = 1e-12
_MIN_LENGTH = 1e-9


@dataclass(frozen=True)
class MassFractionProblem:
    """Normalized positions xi in [0, 1] at which point masses are placed."""

    xi: tuple[float, ...]

    @property
    def count(self) -> int:
        return len(self.xi)


@dataclass(frozen=True)
class EquivalentAssembly:
    """The 3-2-1 discrete realization of one elastic actuator.

    masses sit at normalized positions (0, 1/2, 1); both segments share the
    stiffness, damping, rest length and drive force channel listed here, and
    an equality constraint keeps the two segment elongations identical.
    """

    masses: tuple[float, float, float]
    k_seg: float
    c_seg: float
    l_seg0: float
    shared_force: bool = True
    equal_elongation: bool = True

    @property
    def total_mass(self) -> float:
        return sum(self.masses)


def solve_mass_fractions(problem: MassFractionProblem) -> np.ndarray:
    """Solve the moment conditions for mass fractions mu at positions xi.

    The fractions must satisfy sum(mu) = 1, sum(mu*xi) = 1/2 and
    sum(mu*xi^2) = 1/3 so that the point-mass array matches the continuous
    actuator's gravitational and kinetic energies.  Three distinct positions
    give the unique solution; more than three give the minimum-norm one.

    Raises NoSolution for fewer than three points and SingularSystem for
    duplicate positions.  Warns if any fraction is negative (assembly not
    physically realizable).
    """
    xi = np.asarray(problem.xi, dtype=float)
    n = xi.size
    if n < 3:
        raise NoSolution(f"need at least 3 mass points, got {n}")
    for i in range(n):
        for j in range(i + 1, n):
            if abs(xi[i] - xi[j]) < _DUPLICATE_TOL:
                raise SingularSystem(
                    f"positions xi[{i}] and xi[{j}] coincide within {_DUPLICATE_TOL}"
                )
    a = np.vstack([np.ones(n), xi, xi**2])
    b = np.array([1.0, 0.5, 1.0 / 3.0])
    if n == 3:
        mu = np.linalg.solve(a, b)
    else:
        mu, *_ = np.linalg.lstsq(a, b, rcond=None)
    if np.any(mu < -1e-12):
        warnings.warn(
            "mass-fraction solution has negative entries; assembly is not "
            "physically realizable",
            stacklevel=2,
        )
    return mu


def equivalize(spec) -> EquivalentAssembly:
    """Map an ElasticActuatorSpec onto its 3-2-1 equivalent assembly."""
    m = spec.m
    return EquivalentAssembly(
        masses=(m / 6.0, 2.0 * m / 3.0, m / 6.0),
        k_seg=2.0 * spec.k,
        c_seg=2.0 * spec.c,
        l_seg0=spec.l0 / 2.0,
    )


def grav_pe_continuous(m: float, r_a, r_b, g: float) -> float:
    """Gravitational PE of the uniform actuator: m*g*(y_a + y_b)/2."""
    return 0.5 * m * g * (r_a[1] + r_b[1])


def grav_pe_discrete(asm: EquivalentAssembly, r_a, r_b, g: float) -> float:
    """Gravitational PE of the three point masses, midpoint at the center."""
    m1, m2, m3 = asm.masses
    y_mid = 0.5 * (r_a[1] + r_b[1])
    return g * (m1 * r_a[1] + m2 * y_mid + m3 * r_b[1])


def kinetic_continuous(m: float, v_a, v_b) -> float:
    """Kinetic energy of the uniformly stretching actuator.

    Integrating the linearly interpolated velocity profile over the length
    gives (m/6) * (v_a . v_b + |v_a|^2 + |v_b|^2).
    """
    va = np.asarray(v_a, dtype=float)
    vb = np.asarray(v_b, dtype=float)
    return (m / 6.0) * (va @ vb + va @ va + vb @ vb)


def kinetic_discrete(asm: EquivalentAssembly, v_a, v_b) -> float:
    """Kinetic energy of the three point masses, midpoint velocity averaged."""
    va = np.asarray(v_a, dtype=float)
    vb = np.asarray(v_b, dtype=float)
    vm = 0.5 * (va + vb)
    m1, m2, m3 = asm.masses
    return 0.5 * (m1 * va @ va + m2 * vm @ vm + m3 * vb @ vb)


def elastic_pe(k: float, l: float, l0: float) -> float:
    """Elastic PE of the continuous actuator, 0.5*k*(l - l0)^2."""
    return 0.5 * k * (l - l0) ** 2


def elastic_pe_discrete(asm: EquivalentAssembly, s1: float, s2: float) -> float:
    """Elastic PE of the two segments at lengths s1, s2.

    Equals the continuous value when s1 = s2 = l/2; strictly larger for any
    unequal split with the same total length (convexity).
    """
    return 0.5 * asm.k_seg * ((s1 - asm.l_seg0) ** 2 + (s2 - asm.l_seg0) ** 2)


def actuator_generalized_force(
    f: float, c: float, l: float, ldot: float, dl_dq
) -> np.ndarray:
    """Generalized force of one actuator on the joint coordinates.

    Virtual work of the drive force and the damper is (f - c*ldot) * delta_l,
    so Q = (f - c*ldot) * dl_dq.  Positive f is extensile: it does positive
    work on elongation.  Requires l > 1e-9 m; the elongation direction (and
    with it dl_dq) is undefined for a zero-length actuator.
    """
    if l <= _MIN_LENGTH:
        raise GeometryError(f"actuator length {l} below {_MIN_LENGTH} m")
    return (f - c * ldot) * np.asarray(dl_dq, dtype=float)
