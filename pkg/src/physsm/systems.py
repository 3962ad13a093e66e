"""Ground-truth dynamical systems: controlled damped pendulum and SIR epidemic.

Everything here is plain numpy and serves as the simulation/oracle side of the
package; the differentiable model lives elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, IntegrationDivergedError

__all__ = [
    "PendulumParams",
    "SirParams",
    "pendulum_derivative",
    "pendulum_control",
    "pendulum_energy",
    "sir_derivative",
    "integrate_rk4",
]


@dataclass(frozen=True)
class PendulumParams:
    """Physical parameters of the controlled damped pendulum."""

    mass: float = 1.0                # kg
    gravity: float = 10.0           # m/s^2
    damping: float = 0.7            # N*m*s
    length: float = 1.0             # m
    control_amplitude: float = 0.0  # N*m
    control_frequency: float = 0.5  # Hz

    def __post_init__(self) -> None:
        if not (self.mass > 0 and self.gravity > 0 and self.length > 0):
            raise ConfigurationError(
                f"mass, gravity, length must be positive, got {self}"
            )
        if self.damping < 0:
            raise ConfigurationError(f"damping must be >= 0, got {self.damping}")


@dataclass(frozen=True)
class SirParams:
    """Parameters of the SIR compartment model.

    ``contact_profile`` / ``removal_profile`` optionally make the rates
    time-varying; each is a pair (knot_times, knot_values) interpolated
    piecewise-linearly (constant extrapolation outside the knots).
    """

    contact_rate: float = 0.3    # 1/day
    removal_rate: float = 0.1    # 1/day
    population: float = 1.0      # persons
    contact_profile: Optional[tuple[np.ndarray, np.ndarray]] = None
    removal_profile: Optional[tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self) -> None:
        if self.contact_rate < 0 or self.removal_rate < 0:
            raise ConfigurationError("contact_rate and removal_rate must be >= 0")
        if not self.population > 0:
            raise ConfigurationError("population must be positive")

    def contact_rate_at(self, t: float) -> float:
        if self.contact_profile is None:
            return self.contact_rate
        knots, values = self.contact_profile
        return float(np.interp(t, knots, values))

    def removal_rate_at(self, t: float) -> float:
        if self.removal_profile is None:
            return self.removal_rate
        knots, values = self.removal_profile
        return float(np.interp(t, knots, values))


def pendulum_control(params: PendulumParams, t: float) -> float:
    """External torque A*cos(2*pi*alpha*t) driving the pendulum."""
    return params.control_amplitude * np.cos(
        2.0 * np.pi * params.control_frequency * t
    )


def pendulum_derivative(
    params: PendulumParams, state: np.ndarray, t: float
) -> np.ndarray:
    """Time derivative of (theta, omega) for the controlled damped pendulum.

    theta' = omega
    omega' = -(g/l) sin(theta) - (b/m) omega + A cos(2 pi alpha t) / (m l^2)
    """
    theta, omega = state
    torque = pendulum_control(params, t)
    domega = (
        -(params.gravity / params.length) * np.sin(theta)
        - (params.damping / params.mass) * omega
        + torque / (params.mass * params.length**2)
    )
    return np.array([omega, domega])


def pendulum_energy(params: PendulumParams, state: np.ndarray) -> float:
    """Total mechanical energy 0.5 m l^2 w^2 + m g l (1 - cos theta)."""
    theta, omega = state
    kinetic = 0.5 * params.mass * params.length**2 * omega**2
    potential = params.mass * params.gravity * params.length * (1.0 - np.cos(theta))
    return float(kinetic + potential)


def sir_derivative(params: SirParams, state: np.ndarray, t: float) -> np.ndarray:
    """Time derivative of (S, I, R) under the SIR flow."""
    s, i, _ = state
    beta = params.contact_rate_at(t)
    gamma = params.removal_rate_at(t)
    n = params.population
    infection = beta * s * i / n
    removal = gamma * i
    return np.array([-infection, infection - removal, removal])


Derivative = Callable[[np.ndarray, Optional[np.ndarray], float], np.ndarray]


def integrate_rk4(
    derivative: Derivative,
    z0: np.ndarray,
    times: np.ndarray,
    controls: Optional[np.ndarray] = None,
    max_step: Optional[float] = None,
) -> np.ndarray:
    """Integrate ``dz/dt = derivative(z, u, t)`` through ``times`` with classic RK4.

    Each inter-sample gap is split into substeps no larger than ``max_step``
    (default: one tenth of the gap). Controls, when given, are sampled at
    ``times`` and held constant across the substeps of the following gap.

    Returns the state at every timestamp, including ``times[0]``.
    Raises IntegrationDivergedError if the state or derivative goes non-finite.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 1:
        raise ConfigurationError("times must be a non-empty 1-d array")
    if np.any(np.diff(times) <= 0):
        raise ConfigurationError("times must be strictly increasing")

    z = np.array(z0, dtype=float)
    out = np.empty((len(times),) + z.shape, dtype=float)
    out[0] = z
    for k in range(len(times) - 1):
        t0, t1 = times[k], times[k + 1]
        u = None if controls is None else controls[k]
        gap = t1 - t0
        step_cap = gap / 10.0 if max_step is None else max_step
        n_sub = max(1, int(np.ceil(gap / step_cap - 1e-12)))
        h = gap / n_sub
        t = t0
        for _ in range(n_sub):
            k1 = derivative(z, u, t)
            k2 = derivative(z + 0.5 * h * k1, u, t + 0.5 * h)
            k3 = derivative(z + 0.5 * h * k2, u, t + 0.5 * h)
            k4 = derivative(z + h * k3, u, t + h)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
            if not np.all(np.isfinite(z)):
                raise IntegrationDivergedError(
                    f"integration diverged near t={t:.6g}"
                )
        out[k + 1] = z
    return out
