"""Time-tau flow maps and trajectory data generation.

A flow map advances a state by a fixed duration ``tau`` under the closed-loop
dynamics.  Continuous systems integrate with fixed-step classical Runge-Kutta
(deterministic propagation counts); discrete systems apply their map once per
call.  Every true-dynamics evaluation is counted, because data efficiency is
measured in forward propagations.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .grid import StateBox


class NonFiniteStateError(RuntimeError):
    """A forward propagation produced a non-finite state."""


@dataclass
class FlowMapSpec:
    """Recipe for building a flow map.

    ``system`` names a built-in (see :mod:`gpmorse.systems`) or is ``"external"``
    for an oracle subprocess.  ``tau`` is the flow duration in seconds (one map
    step for discrete systems); ``step_size`` is the integrator step.
    """

    system: str
    tau: float
    step_size: float | None = None
    parameters: dict = field(default_factory=dict)
    oracle_command: str | None = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.step_size is not None:
            if self.step_size <= 0:
                raise ValueError("step_size must be positive")
            if self.step_size > self.tau:
                raise ValueError("step_size must not exceed tau")


class FlowMap:
    """Base class: maps states to their position ``tau`` seconds later.

    Subclasses implement :meth:`_advance`.  Propagation accounting is a shared
    counter incremented atomically once per evaluated state.
    """

    def __init__(self, dim: int, tau: float):
        self.dim = dim
        self.tau = tau
        self._count = 0
        self._lock = threading.Lock()

    @property
    def propagations(self) -> int:
        return self._count

    def _tally(self, n: int):
        with self._lock:
            self._count += n

    def _advance(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def flow_batch(self, X: np.ndarray) -> np.ndarray:
        """Propagate a batch of states, shape ``(B, dim)``.

        Non-finite outputs are returned as-is (callers decide how to treat
        escapes); the count increases by ``B``.
        """
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValueError(f"expected states of dimension {self.dim}")
        self._tally(len(X))
        return self._advance(X)

    def flow(self, x) -> np.ndarray:
        """Propagate one state; raises :class:`NonFiniteStateError` on blow-up."""
        y = self.flow_batch(np.asarray(x, dtype=float)[None, :])[0]
        if not np.all(np.isfinite(y)):
            raise NonFiniteStateError(f"flow from {np.asarray(x)} produced {y}")
        return y


class ContinuousFlowMap(FlowMap):
    """Fixed-step RK4 integration of a vectorized vector field."""

    def __init__(self, dim: int, tau: float, step_size: float | None = None):
        super().__init__(dim, tau)
        self.step_size = step_size if step_size is not None else tau / 100.0
        if self.step_size > tau:
            raise ValueError("step_size must not exceed tau")

    def rhs(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, X: np.ndarray) -> np.ndarray:
        return rk4(self.rhs, X, self.tau, self.step_size)

    def propagate(self, X: np.ndarray, duration: float) -> np.ndarray:
        """Integrate for an arbitrary duration without propagation accounting.

        Used by ground-truth rollouts which keep their own budget.
        """
        return rk4(self.rhs, np.asarray(X, dtype=float), duration, self.step_size)


class DiscreteFlowMap(FlowMap):
    """One application of a discrete map per flow call."""

    def apply(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, X: np.ndarray) -> np.ndarray:
        return self.apply(X)


def rk4(rhs, X: np.ndarray, duration: float, step_size: float) -> np.ndarray:
    """Classical 4th-order Runge-Kutta with a fixed step.

    The step is shrunk minimally so that an integer number of steps covers
    ``duration`` exactly.
    """
    n = max(1, int(np.ceil(duration / step_size - 1e-9)))
    h = duration / n
    for _ in range(n):
        k1 = rhs(X)
        k2 = rhs(X + 0.5 * h * k1)
        k3 = rhs(X + 0.5 * h * k2)
        k4 = rhs(X + h * k3)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return X


@dataclass
class TrajectoryDataset:
    """Training pairs ``(x, y)`` with ``y`` the flow image of ``x``.

    ``propagation_count`` tracks how many true-dynamics propagations were
    consumed to build the dataset (at least one per pair).
    """

    x: np.ndarray
    y: np.ndarray
    propagation_count: int = 0
    tau: float | None = None
    system: str = ""

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.x.shape != self.y.shape:
            raise ValueError("x and y must have matching shapes")
        if self.propagation_count < len(self.x):
            self.propagation_count = len(self.x)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def extended(self, x_new: np.ndarray, y_new: np.ndarray, propagations: int) -> "TrajectoryDataset":
        """New dataset with extra pairs appended and the budget increased."""
        return TrajectoryDataset(
            np.vstack([self.x, np.atleast_2d(x_new)]),
            np.vstack([self.y, np.atleast_2d(y_new)]),
            self.propagation_count + propagations,
            tau=self.tau,
            system=self.system,
        )

    def save(self, path):
        """Plain-text dump: header ``M tau system`` then one pair per line."""
        with open(path, "w") as fh:
            tau = self.tau if self.tau is not None else float("nan")
            fh.write(f"{self.dim} {tau:.17g} {self.system or 'unknown'}\n")
            for xi, yi in zip(self.x, self.y):
                nums = np.concatenate([xi, yi])
                fh.write(" ".join(f"{v:.17g}" for v in nums) + "\n")

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) != 3:
                raise ValueError(f"{path}: line 1: malformed header")
            try:
                dim = int(header[0])
                tau = float(header[1])
            except ValueError as exc:
                raise ValueError(f"{path}: line 1: {exc}") from exc
            xs, ys = [], []
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                parts = line.split()
                if len(parts) != 2 * dim:
                    raise ValueError(
                        f"{path}: line {lineno}: expected {2 * dim} numbers, got {len(parts)}"
                    )
                try:
                    vals = [float(p) for p in parts]
                except ValueError as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from exc
                xs.append(vals[:dim])
                ys.append(vals[dim:])
        if not xs:
            raise ValueError(f"{path}: no data lines")
        return cls(np.array(xs), np.array(ys), len(xs), tau=tau, system=header[2])


def sample_short_trajectories(
    flow_map: FlowMap,
    region: StateBox,
    count: int,
    rng,
    noise_std: float = 0.0,
) -> TrajectoryDataset:
    """``count`` pairs ``(x, flow(x))`` with ``x`` uniform over ``region``.

    ``rng`` is a seed or a :class:`numpy.random.Generator`; runs are
    deterministic for a fixed seed.  ``noise_std`` optionally adds i.i.d.
    Gaussian observation noise to the outputs.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng)
    X = rng.uniform(region.lower, region.upper, size=(count, region.dim))
    Y = flow_map.flow_batch(X)
    if noise_std > 0.0:
        Y = Y + rng.normal(0.0, noise_std, size=Y.shape)
    return TrajectoryDataset(X, Y, count, tau=flow_map.tau)


def decompose_long_trajectory(
    flow_map: FlowMap, x0, total_time: float
) -> TrajectoryDataset:
    """One rollout sampled every ``tau``, decomposed into consecutive pairs.

    Produces ``floor(total_time / tau)`` pairs; a non-finite state truncates
    the dataset at the last finite sample.
    """
    if total_time < flow_map.tau:
        raise ValueError("total_time must be at least tau")
    n = int(np.floor(total_time / flow_map.tau + 1e-9))
    xs, ys = [], []
    calls = 0
    state = np.asarray(x0, dtype=float)
    for _ in range(n):
        nxt = flow_map.flow_batch(state[None, :])[0]
        calls += 1
        if not np.all(np.isfinite(nxt)):
            break
        xs.append(state)
        ys.append(nxt)
        state = nxt
    if not xs:
        raise NonFiniteStateError(f"rollout from {np.asarray(x0)} diverged immediately")
    return TrajectoryDataset(np.array(xs), np.array(ys), calls, tau=flow_map.tau)
