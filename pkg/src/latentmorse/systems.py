"""Benchmark controlled systems with a common "propagate for tau steps" interface.

Two systems are provided:

* ``PendulumSystem``: torque-limited pendulum stabilized upright by LQR,
  observed through the position and velocity of its mass ``(x, y, xdot, ydot)``.
* ``BistableSystem``: the N-dimensional map ``(arctan(4 x1), x2/2, ..., xN/2)``.

Both act on batches of observation-space states of shape ``(n, state_dim)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class SynthesisError(RuntimeError):
    """Raised when the Riccati recursion does not reach a fixed point."""


@dataclass(frozen=True)
class PendulumParams:
    m: float = 1.0
    l: float = 1.0
    G: float = 9.8
    beta: float = 0.1
    u_max: float = 2.0
    dt: float = 0.01

    def __post_init__(self):
        for name in ("m", "l", "G", "dt", "u_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"pendulum parameter {name} must be positive")
        if self.beta < 0:
            raise ValueError("pendulum friction beta must be non-negative")


@dataclass(frozen=True)
class LqrGain:
    """Feedback gain ``k`` over the internal state ``(theta, theta_dot)``."""

    k: tuple[float, float]

    def __post_init__(self):
        if len(self.k) != 2 or not all(math.isfinite(v) for v in self.k):
            raise ValueError(f"invalid LQR gain {self.k!r}")

    def control(self, internal: np.ndarray, u_max: float) -> np.ndarray:
        theta, omega = internal[..., 0], internal[..., 1]
        u = -(self.k[0] * theta + self.k[1] * omega)
        return np.clip(u, -u_max, u_max)


ZERO_GAIN = LqrGain((0.0, 0.0))


def wrap_angle(theta):
    """Wrap angles to ``(-pi, pi]``."""
    return np.pi - np.mod(np.pi - theta, 2.0 * np.pi)


def linearize_upright(params: PendulumParams) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time linearization ``(A, B)`` at the upright equilibrium."""
    inertia = params.m * params.l**2
    A = np.array([[0.0, 1.0], [params.G / params.l, -params.beta / inertia]])
    B = np.array([[0.0], [1.0 / inertia]])
    return A, B


def discretize_zoh(A: np.ndarray, B: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    n, m = B.shape
    block = np.zeros((n + m, n + m))
    block[:n, :n] = A
    block[:n, n:] = B
    expm = scipy.linalg.expm(block * dt)
    return expm[:n, :n], expm[:n, n:]


def lqr_synthesize(
    params: PendulumParams,
    Q=None,
    R: float = 1.0,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> LqrGain:
    """Discrete LQR gain for the pendulum linearized at upright.

    The linearization is discretized with a zero-order hold of step ``params.dt``
    and the Riccati recursion is iterated from ``P = Q`` until the relative
    change drops below ``tol``.
    """
    Q = np.diag([10.0, 1.0]) if Q is None else np.asarray(Q, dtype=float)
    if Q.shape != (2, 2):
        raise ValueError("state cost Q must be 2x2")
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
        raise ValueError("state cost Q must be positive semidefinite")
    if not R > 0:
        raise ValueError("input cost R must be positive")

    Ad, Bd = discretize_zoh(*linearize_upright(params), params.dt)
    P = Q.copy()
    for _ in range(max_iter):
        BtP = Bd.T @ P
        gain = np.linalg.solve(R + BtP @ Bd, BtP @ Ad)
        P_next = Q + Ad.T @ P @ Ad - Ad.T @ P @ Bd @ gain
        change = np.max(np.abs(P_next - P))
        scale = max(np.max(np.abs(P_next)), np.finfo(float).tiny)
        P = P_next
        if change <= tol * scale:
            break
    else:
        raise SynthesisError(f"Riccati iteration did not converge in {max_iter} iterations")

    BtP = Bd.T @ P
    k = np.linalg.solve(R + BtP @ Bd, BtP @ Ad).ravel()
    return LqrGain((float(k[0]), float(k[1])))


def closed_loop_spectral_radius(params: PendulumParams, gain: LqrGain) -> float:
    Ad, Bd = discretize_zoh(*linearize_upright(params), params.dt)
    closed = Ad - Bd @ np.asarray(gain.k).reshape(1, 2)
    return float(np.max(np.abs(np.linalg.eigvals(closed))))


def pendulum_observe(internal, l: float = 1.0) -> np.ndarray:
    """Map ``(theta, theta_dot)`` to ``(x, y, xdot, ydot)`` of the pendulum mass."""
    internal = np.asarray(internal, dtype=float)
    theta, omega = internal[..., 0], internal[..., 1]
    s, c = np.sin(theta), np.cos(theta)
    return np.stack([l * s, l * c, l * omega * c, -l * omega * s], axis=-1)


def pendulum_lift(obs, l: float = 1.0) -> np.ndarray:
    """Inverse of :func:`pendulum_observe` on its image."""
    obs = np.asarray(obs, dtype=float)
    x, y, xd, yd = (obs[..., i] for i in range(4))
    theta = np.arctan2(x, y)
    omega = (xd * np.cos(theta) - yd * np.sin(theta)) / l
    return np.stack([wrap_angle(theta), omega], axis=-1)


def _pendulum_rhs(state: np.ndarray, params: PendulumParams, gain: LqrGain) -> np.ndarray:
    theta, omega = state[..., 0], state[..., 1]
    u = gain.control(state, params.u_max)
    inertia = params.m * params.l**2
    accel = (params.m * params.G * params.l * np.sin(theta) - params.beta * omega + u) / inertia
    return np.stack([omega, accel], axis=-1)


def pendulum_step(internal, params: PendulumParams, gain: LqrGain) -> np.ndarray:
    """One RK4 step of the closed-loop pendulum; theta is wrapped to ``(-pi, pi]``."""
    s = np.asarray(internal, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ValueError("pendulum state must be finite")
    h = params.dt
    k1 = _pendulum_rhs(s, params, gain)
    k2 = _pendulum_rhs(s + 0.5 * h * k1, params, gain)
    k3 = _pendulum_rhs(s + 0.5 * h * k2, params, gain)
    k4 = _pendulum_rhs(s + h * k3, params, gain)
    out = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[..., 0] = wrap_angle(out[..., 0])
    return out


def pendulum_energy(internal, params: PendulumParams) -> np.ndarray:
    """Mechanical energy, with the potential maximal at upright."""
    internal = np.asarray(internal, dtype=float)
    theta, omega = internal[..., 0], internal[..., 1]
    return 0.5 * params.m * params.l**2 * omega**2 + params.m * params.G * params.l * np.cos(theta)


def bistable_step(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = 0.5 * x
    out[..., 0] = np.arctan(4.0 * x[..., 0])
    return out


def bistable_fixed_point() -> float:
    """Positive fixed point of ``arctan(4x)``."""
    from scipy.optimize import brentq

    return brentq(lambda v: math.atan(4.0 * v) - v, 1.0, 2.0, xtol=1e-14)


class System:
    """Base class: a deterministic map on observation-space states."""

    name = "system"
    map_kind = "discrete-map"
    state_dim: int
    lower: np.ndarray
    upper: np.ndarray

    def step(self, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def in_domain(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        return np.all((states >= self.lower) & (states <= self.upper), axis=-1) & np.all(
            np.isfinite(states), axis=-1
        )

    @property
    def params(self) -> dict[str, float]:
        return {}


class BistableSystem(System):
    name = "bistable"
    map_kind = "discrete-map"

    def __init__(self, dim: int = 2):
        if dim < 1:
            raise ValueError("bistable dimension must be >= 1")
        self.state_dim = dim
        self.lower = np.array([-3.0] + [-2.0] * (dim - 1))
        self.upper = -self.lower

    def step(self, states):
        return bistable_step(states)

    @property
    def params(self):
        return {"dim": float(self.state_dim)}


@dataclass
class PendulumSystem(System):
    """LQR-controlled pendulum acting on 4-dim observations.

    ``omega_max`` bounds the angular velocity of the domain box.
    """

    pendulum: PendulumParams = field(default_factory=PendulumParams)
    gain: LqrGain | None = None
    omega_max: float = 12.0

    name = "pendulum"
    map_kind = "continuous-ode"
    state_dim = 4

    def __post_init__(self):
        if self.gain is None:
            self.gain = lqr_synthesize(self.pendulum)
        l, w = self.pendulum.l, self.omega_max
        self.lower = np.array([-l, -l, -l * w, -l * w])
        self.upper = -self.lower

    def lift(self, obs):
        return pendulum_lift(obs, self.pendulum.l)

    def observe(self, internal):
        return pendulum_observe(internal, self.pendulum.l)

    def step_internal(self, internal):
        return pendulum_step(internal, self.pendulum, self.gain)

    def step(self, states):
        return self.observe(self.step_internal(self.lift(states)))

    def internal_in_domain(self, internal):
        return np.isfinite(internal).all(axis=-1) & (np.abs(internal[..., 1]) <= self.omega_max)

    def in_domain(self, states):
        states = np.asarray(states, dtype=float)
        finite = np.all(np.isfinite(states), axis=-1)
        internal = self.lift(np.where(np.isfinite(states), states, 0.0))
        return finite & self.internal_in_domain(internal)

    @property
    def params(self):
        p = self.pendulum
        return {"m": p.m, "l": p.l, "G": p.G, "beta": p.beta, "u_max": p.u_max, "dt": p.dt,
                "k0": self.gain.k[0], "k1": self.gain.k[1]}


def propagate_batch(system: System, states, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply the system step ``steps`` times to each row of ``states``.

    Rows whose trajectory leaves the domain are frozen at their last in-domain
    state and reported ``False`` in the returned mask.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    X = np.array(states, dtype=float, ndmin=2)
    ok = system.in_domain(X)
    if isinstance(system, PendulumSystem):
        cur = system.lift(X)
        for _ in range(steps):
            live = np.flatnonzero(ok)
            if live.size == 0:
                break
            nxt = system.step_internal(cur[live])
            good = system.internal_in_domain(nxt)
            cur[live[good]] = nxt[good]
            ok[live[~good]] = False
        out = system.observe(cur)
        # untouched rows keep their exact input bits
        if steps == 0:
            out = X.copy()
        return out, ok
    cur = X.copy()
    for _ in range(steps):
        live = np.flatnonzero(ok)
        if live.size == 0:
            break
        nxt = system.step(cur[live])
        good = system.in_domain(nxt)
        cur[live[good]] = nxt[good]
        ok[live[~good]] = False
    return cur, ok


def propagate(system: System, x0, steps: int) -> tuple[np.ndarray, bool]:
    """Image of ``x0`` after ``steps`` applications of the system step.

    Returns ``(state, in_domain)``; when the orbit leaves the domain the last
    in-domain state is returned with ``in_domain=False``.
    """
    x0 = np.asarray(x0, dtype=float)
    out, ok = propagate_batch(system, x0.reshape(1, -1), steps)
    return out[0], bool(ok[0])


def make_system(name: str, **kwargs) -> System:
    if name == "pendulum":
        keys = {"m", "l", "G", "beta", "u_max", "dt"}
        pend = PendulumParams(**{k: float(v) for k, v in kwargs.items() if k in keys})
        Q = kwargs.get("Q")
        R = float(kwargs.get("R", 1.0))
        gain = lqr_synthesize(pend, Q=Q, R=R)
        return PendulumSystem(pend, gain, float(kwargs.get("omega_max", 12.0)))
    if name == "bistable":
        return BistableSystem(int(kwargs.get("dim", 2)))
    raise ValueError(f"unknown system {name!r}")
