"""Reference problems shared by the tests, the CLI and the reproduction targets."""

from __future__ import annotations

import numpy as np

from rkadjoint.ode import OdeSystem, PartitionedSystem

LOTKA_X0 = np.array([15.0, 10.0])


def lotka_volterra() -> OdeSystem:
    """Two-species predator/prey model, x(0) = (15, 10) in the reference runs."""

    def f(x, t):
        x1, x2 = x
        return np.array([x1 - 0.2 * x1 * x2, -2.0 * x2 + 0.2 * x1 * x2])

    def jac(x, t):
        x1, x2 = x
        return np.array([[1.0 - 0.2 * x2, -0.2 * x1], [0.2 * x2, -2.0 + 0.2 * x1]])

    return OdeSystem(2, f, jac, name="lotka")


def harmonic_oscillator() -> OdeSystem:
    """``dy1/dt = -y2``, ``dy2/dt = y1``; conserves ``(y1^2 + y2^2) / 2``."""
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    return OdeSystem(2, lambda y, t: J @ y, lambda y, t: J, name="oscillator")


def pendulum() -> OdeSystem:
    return OdeSystem(
        2,
        lambda y, t: np.array([y[1], -np.sin(y[0])]),
        lambda y, t: np.array([[0.0, 1.0], [-np.cos(y[0]), 0.0]]),
        name="pendulum",
    )


def rigid_body() -> OdeSystem:
    """Euler's free rigid body; ``|y|^2`` is a quadratic invariant."""
    I1, I2, I3 = 2.0, 1.0, 2.0 / 3.0
    a1, a2, a3 = (I2 - I3) / (I2 * I3), (I3 - I1) / (I3 * I1), (I1 - I2) / (I1 * I2)

    def f(y, t):
        return np.array([a1 * y[1] * y[2], a2 * y[2] * y[0], a3 * y[0] * y[1]])

    def jac(y, t):
        return np.array(
            [[0.0, a1 * y[2], a1 * y[1]], [a2 * y[2], 0.0, a2 * y[0]], [a3 * y[1], a3 * y[0], 0.0]]
        )

    return OdeSystem(3, f, jac, name="rigid-body")


def time_dependent_matrix(t: float) -> np.ndarray:
    return np.array([[0.0, 1.0 + t], [-1.0, 0.0]])


def linear_adjoint_pair(M=time_dependent_matrix) -> PartitionedSystem:
    """``dq/dt = M(t) q``, ``dp/dt = -M(t)^T p``; ``q^T p`` is invariant."""
    return PartitionedSystem(
        2,
        2,
        lambda q, p, t: M(t) @ q,
        lambda q, p, t: -M(t).T @ p,
        f_q=lambda q, p, t: M(t),
        f_p=lambda q, p, t: np.zeros((2, 2)),
        g_q=lambda q, p, t: np.zeros((2, 2)),
        g_p=lambda q, p, t: -M(t).T,
        name="linear-pair",
    )


def separable_oscillator(mass: float = 2.0, stiffness: float = 3.0) -> PartitionedSystem:
    """``dq/dt = p / m``, ``dp/dt = -k q``."""
    return PartitionedSystem(
        1,
        1,
        lambda q, p, t: p / mass,
        lambda q, p, t: -stiffness * q,
        f_q=lambda q, p, t: np.zeros((1, 1)),
        f_p=lambda q, p, t: np.array([[1.0 / mass]]),
        g_q=lambda q, p, t: np.array([[-stiffness]]),
        g_p=lambda q, p, t: np.zeros((1, 1)),
        name="separable-oscillator",
    )


def forced_oscillator(omega: float = 1.3) -> OdeSystem:
    """``dq/dt = p``, ``dp/dt = -q + cos(omega t)`` on ``y = (q, p)``.

    The kinetic energy ``p^2 / 2`` changes at the rate ``p (cos(omega t) - q)``.
    """
    J = np.array([[0.0, 1.0], [-1.0, 0.0]])
    return OdeSystem(
        2,
        lambda y, t: J @ y + np.array([0.0, np.cos(omega * t)]),
        lambda y, t: J,
        name="forced-oscillator",
    )


def cubic_oscillator() -> PartitionedSystem:
    """``dq/dt = p``, ``dp/dt = -q - q^3``; ``S = q p`` has ``dS/dt = p^2 - q^2 - q^4``."""
    return PartitionedSystem(
        1,
        1,
        lambda q, p, t: p.copy(),
        lambda q, p, t: -q - q**3,
        f_q=lambda q, p, t: np.zeros((1, 1)),
        f_p=lambda q, p, t: np.eye(1),
        g_q=lambda q, p, t: np.array([[-1.0 - 3.0 * q[0] ** 2]]),
        g_p=lambda q, p, t: np.zeros((1, 1)),
        name="cubic-oscillator",
    )


ODE_PROBLEMS = {
    "lotka": (lotka_volterra, LOTKA_X0, 1.0),
    "oscillator": (harmonic_oscillator, np.array([1.0, 0.0]), 2 * np.pi),
    "pendulum": (pendulum, np.array([1.0, 0.0]), 5.0),
    "rigid-body": (rigid_body, np.array([np.cos(1.1), 0.0, np.sin(1.1)]), 5.0),
}


def ode_problem(name: str):
    """``(system, x0, T)`` for a named problem."""
    try:
        factory, x0, T = ODE_PROBLEMS[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; available: {', '.join(ODE_PROBLEMS)}") from None
    return factory(), x0.copy(), T
