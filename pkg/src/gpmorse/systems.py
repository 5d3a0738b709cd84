"""Built-in benchmark systems and the flow-map factory.

Each system ships with a default state box, per-dimension periodicity flags,
a goal region, and controller constants.  All right-hand sides are
vectorized over batches of states, shape ``(B, dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import ContinuousFlowMap, DiscreteFlowMap, FlowMap, FlowMapSpec
from .grid import StateBox

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return np.mod(a + np.pi, TWO_PI) - np.pi


class ArctanMap(DiscreteFlowMap):
    """1-D discrete map ``y = arctan(x)``; the origin is the only attractor."""

    def __init__(self, tau: float = 1.0):
        super().__init__(dim=1, tau=tau)

    def apply(self, X):
        return np.arctan(X)


class PendulumLqr(ContinuousFlowMap):
    """Torque-limited pendulum under an LQR law about the upright pose.

    Dynamics: ``m l^2 th'' = m G l sin(th) - damping * th' + u`` with
    ``u = clip(-k1 * wrap(th) - k2 * th', +-torque_limit)``.  The gain was
    computed offline from the upright linearization with Q = I, R = 1 and is
    shipped as a constant.  theta is periodic; the feedback uses the wrapped
    angle, so the closed loop is equivariant under full turns.
    """

    GAIN = (19.650888284819764, 5.8680276828575009)

    def __init__(
        self,
        tau: float = 0.35,
        step_size: float | None = None,
        mass: float = 1.0,
        length: float = 1.0,
        gravity: float = 9.8,
        damping: float = 1.0,
        torque_limit: float = 11.0,
        gain: tuple[float, float] = GAIN,
    ):
        super().__init__(dim=2, tau=tau, step_size=step_size)
        self.mass = mass
        self.length = length
        self.gravity = gravity
        self.damping = damping
        self.torque_limit = torque_limit
        self.gain = gain

    def control(self, X):
        u = -self.gain[0] * wrap_angle(X[..., 0]) - self.gain[1] * X[..., 1]
        return np.clip(u, -self.torque_limit, self.torque_limit)

    def rhs(self, X):
        ml2 = self.mass * self.length**2
        th, om = X[..., 0], X[..., 1]
        dom = (
            self.mass * self.gravity * self.length * np.sin(th)
            - self.damping * om
            + self.control(X)
        ) / ml2
        return np.stack([om, dom], axis=-1)

    def closed_loop_matrix(self) -> np.ndarray:
        """Linearization of the (unsaturated) closed loop about upright."""
        ml2 = self.mass * self.length**2
        return np.array(
            [
                [0.0, 1.0],
                [
                    self.gravity / self.length - self.gain[0] / ml2,
                    -(self.damping + self.gain[1]) / ml2,
                ],
            ]
        )


class AckermannCorke(ContinuousFlowMap):
    """Forward-only car-like kinematics with a polar pose controller.

    State ``(x, y, th)``; the controller steers toward the goal pose using the
    polar errors (distance rho, bearing alpha, goal-heading beta) with gains
    ``(k_rho, k_alpha, k_beta)`` and saturated speed/turn-rate.  Near the goal
    the bearing becomes undefined and the vehicle orbits in a small
    neighborhood instead of parking exactly.
    """

    def __init__(
        self,
        tau: float = 1.0,
        step_size: float | None = None,
        k_rho: float = 1.0,
        k_alpha: float = 4.0,
        k_beta: float = -1.5,
        v_max: float = 3.0,
        omega_max: float = 2.0,
        goal_pose: tuple[float, float, float] = (0.0, 0.0, np.pi / 2),
    ):
        super().__init__(dim=3, tau=tau, step_size=step_size)
        self.k_rho = k_rho
        self.k_alpha = k_alpha
        self.k_beta = k_beta
        self.v_max = v_max
        self.omega_max = omega_max
        self.goal_pose = np.asarray(goal_pose, dtype=float)

    def rhs(self, X):
        gx, gy, gth = self.goal_pose
        dx, dy = gx - X[..., 0], gy - X[..., 1]
        th = X[..., 2]
        rho = np.hypot(dx, dy)
        lam = np.arctan2(dy, dx)
        alpha = wrap_angle(lam - th)
        beta = wrap_angle(gth - lam)
        v = np.clip(self.k_rho * rho, 0.0, self.v_max)
        omega = np.clip(
            self.k_alpha * alpha + self.k_beta * beta, -self.omega_max, self.omega_max
        )
        return np.stack([v * np.cos(th), v * np.sin(th), omega], axis=-1)


class LanderToc(ContinuousFlowMap):
    """Lunar-lander vertical descent with a bang-off-bang thrust switch.

    State ``(h, v, m)``; ``h'' = -k m' / m - g`` with mass flow
    ``m' in [-mdot_max, 0]`` and moon gravity ``g = 1.62``.  Descent is
    free fall until the stopping distance under full thrust (computed with the
    current-mass net deceleration) reaches the altitude, then full thrust
    until touchdown.  Out of fuel (``m <= dry_mass``) the engine cuts out.
    """

    def __init__(
        self,
        tau: float = 0.5,
        step_size: float | None = None,
        gravity: float = 1.62,
        exhaust_velocity: float = 3050.0,
        mdot_max: float = 9.765625,
        dry_mass: float = 2134.0,
    ):
        super().__init__(dim=3, tau=tau, step_size=step_size)
        self.gravity = gravity
        self.exhaust_velocity = exhaust_velocity
        self.mdot_max = mdot_max
        self.dry_mass = dry_mass

    def thrust_on(self, X):
        h, v, m = X[..., 0], X[..., 1], X[..., 2]
        a_net = self.exhaust_velocity * self.mdot_max / np.maximum(m, self.dry_mass) - self.gravity
        stopping = np.where(a_net > 0, v**2 / (2.0 * np.maximum(a_net, 1e-12)), np.inf)
        return (v < 0.0) & (h > 0.0) & (h <= stopping) & (m > self.dry_mass)

    def rhs(self, X):
        h, v, m = X[..., 0], X[..., 1], X[..., 2]
        mdot = np.where(self.thrust_on(X), -self.mdot_max, 0.0)
        dv = -self.exhaust_velocity * mdot / m - self.gravity
        return np.stack([v, dv, mdot], axis=-1)


class DuffingTwoWell(ContinuousFlowMap):
    """Damped double-well oscillator ``x'' = x - x^3 - damping * x'``.

    Two point attractors at ``(+-1, 0)`` separated by the stable manifold of
    the saddle at the origin; the standard multi-basin test case.
    """

    def __init__(self, tau: float = 2.0, step_size: float | None = None, damping: float = 1.0):
        super().__init__(dim=2, tau=tau, step_size=step_size)
        self.damping = damping

    def rhs(self, X):
        x, v = X[..., 0], X[..., 1]
        return np.stack([v, x - x**3 - self.damping * v], axis=-1)


@dataclass(frozen=True)
class SystemInfo:
    """Registry entry: defaults a config needs to analyze a system."""

    name: str
    dim: int
    bounds: StateBox
    periodic: tuple
    goal: StateBox
    default_tau: float
    factory: Callable[..., FlowMap]


SYSTEMS = {
    "arctan-1d": SystemInfo(
        name="arctan-1d",
        dim=1,
        bounds=StateBox([-3.0], [3.0]),
        periodic=(False,),
        goal=StateBox([-0.1], [0.1]),
        default_tau=1.0,
        factory=lambda tau, step_size, **p: ArctanMap(tau=tau),
    ),
    "pendulum-lqr": SystemInfo(
        name="pendulum-lqr",
        dim=2,
        bounds=StateBox([-np.pi, -TWO_PI], [np.pi, TWO_PI]),
        periodic=(True, False),
        goal=StateBox([-0.25, -0.25], [0.25, 0.25]),
        default_tau=0.35,
        factory=lambda tau, step_size, **p: PendulumLqr(tau=tau, step_size=step_size, **p),
    ),
    "ackermann-corke": SystemInfo(
        name="ackermann-corke",
        dim=3,
        bounds=StateBox([-10.0, -10.0, -np.pi], [10.0, 10.0, np.pi]),
        periodic=(False, False, True),
        goal=StateBox([-0.5, -0.5, np.pi / 2 - 0.3], [0.5, 0.5, np.pi / 2 + 0.3]),
        default_tau=1.0,
        factory=lambda tau, step_size, **p: AckermannCorke(tau=tau, step_size=step_size, **p),
    ),
    "lander-toc": SystemInfo(
        name="lander-toc",
        dim=3,
        bounds=StateBox([-1.0, -10.0, 2134.0], [10.0, 10.0, 10334.0]),
        periodic=(False, False, False),
        goal=StateBox([-0.2, -1.0, 2134.0], [0.2, 0.2, 10334.0]),
        default_tau=0.5,
        factory=lambda tau, step_size, **p: LanderToc(tau=tau, step_size=step_size, **p),
    ),
    "duffing-2well": SystemInfo(
        name="duffing-2well",
        dim=2,
        bounds=StateBox([-2.0, -3.0], [2.0, 3.0]),
        periodic=(False, False),
        goal=StateBox([0.7, -0.3], [1.3, 0.3]),
        default_tau=2.0,
        factory=lambda tau, step_size, **p: DuffingTwoWell(tau=tau, step_size=step_size, **p),
    ),
}


def system_info(name: str) -> SystemInfo:
    try:
        return SYSTEMS[name]
    except KeyError:
        raise ValueError(
            f"unknown system {name!r}; built-ins: {sorted(SYSTEMS)}"
        ) from None


def make_flow_map(spec: FlowMapSpec) -> FlowMap:
    """Build a flow map from a spec; dispatches built-ins and oracles."""
    if spec.oracle_command or spec.system == "external":
        if not spec.oracle_command:
            raise ValueError("external system needs an oracle command")
        from .oracle import OracleFlowMap

        dim = spec.parameters.get("dim")
        if dim is None:
            raise ValueError("external system needs parameters: {'dim': M}")
        return OracleFlowMap(spec.oracle_command, dim=int(dim), tau=spec.tau)
    info = system_info(spec.system)
    try:
        return info.factory(spec.tau, spec.step_size, **spec.parameters)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {spec.system}: {exc}") from exc


def default_spec(name: str, tau: float | None = None, step_size: float | None = None, **params) -> FlowMapSpec:
    info = system_info(name)
    return FlowMapSpec(
        system=name,
        tau=tau if tau is not None else info.default_tau,
        step_size=step_size,
        parameters=params,
    )
