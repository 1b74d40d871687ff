"""Discrete-time paths on a uniform time grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Trajectory:
    """A path sampled at the uniform times ``t0 + k * step``, k = 0..N.

    ``nodes`` has shape (N + 1, dim).
    """

    t0: float
    T: float
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        if nodes.shape[0] < 2:
            raise ValueError("a trajectory needs at least two nodes")
        if not self.T > self.t0:
            raise ValueError(f"T={self.T} must exceed t0={self.t0}")
        object.__setattr__(self, "nodes", nodes)

    @property
    def n_steps(self) -> int:
        return self.nodes.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def step(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.n_steps + 1)

    @property
    def velocities(self) -> np.ndarray:
        """Forward difference quotients, one per time interval (shape (N, dim))."""
        return np.diff(self.nodes, axis=0) / self.step

    def node_velocities(self) -> np.ndarray:
        """Velocity estimate at every node: central differences inside, one-sided at the ends."""
        return np.gradient(self.nodes, self.step, axis=0, edge_order=2) if self.n_steps >= 2 else np.repeat(self.velocities, 2, axis=0)

    def at(self, s: float) -> np.ndarray:
        """Piecewise-linear interpolation of the path at time ``s``."""
        u = (s - self.t0) / self.step
        k = int(np.clip(np.floor(u), 0, self.n_steps - 1))
        theta = u - k
        return (1.0 - theta) * self.nodes[k] + theta * self.nodes[k + 1]

    def sup_distance(self, other: "Trajectory") -> float:
        return float(np.max(np.linalg.norm(self.nodes - other.nodes, axis=1)))
