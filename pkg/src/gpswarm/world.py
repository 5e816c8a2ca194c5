"""World geometry: axis-aligned domain, box obstacles, lock-step agent motion.

The domain is a closed set (boundary points are legal); obstacles are closed
boxes (their boundary collides).  Collision checking along a motion segment
samples intermediate points at quarter-step resolution so thin walls cannot
be jumped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass
class Agent:
    id: int
    position: np.ndarray
    speed: float = 1.0


@dataclass
class World:
    """Axis-aligned bounds (d, 2), box obstacles [(d, 2), ...], agents, and
    the simulation clock `k` advancing by dt per step."""

    bounds: np.ndarray
    obstacles: list
    agents: list
    d_comm: float
    dt: float = 1.0
    k: int = 0

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float)
        if self.bounds.ndim != 2 or self.bounds.shape[1] != 2:
            raise InputError(f"bounds must have shape (d, 2), got {self.bounds.shape}")
        if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
            raise InputError("bounds lower edge must be below the upper edge")
        self.obstacles = [np.asarray(o, dtype=float) for o in self.obstacles]
        for o in self.obstacles:
            if o.shape != self.bounds.shape:
                raise InputError(f"obstacle shape {o.shape} does not match bounds")

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]


def collision_check(world: World, x) -> bool:
    """True iff x is inside any obstacle or outside the closed domain."""
    p = np.asarray(x, dtype=float)
    if np.any(p < world.bounds[:, 0]) or np.any(p > world.bounds[:, 1]):
        return True
    for o in world.obstacles:
        if np.all(p >= o[:, 0]) and np.all(p <= o[:, 1]):
            return True
    return False


def segment_collides(world: World, start, delta, resolution_fraction: float = 0.25) -> bool:
    """Collision test for the straight move start -> start + delta, sampling
    the segment at `resolution_fraction` of its length (endpoints included)."""
    start = np.asarray(start, dtype=float)
    delta = np.asarray(delta, dtype=float)
    length = float(np.linalg.norm(delta))
    if length == 0.0:
        return collision_check(world, start)
    n_samples = max(1, int(np.ceil(1.0 / resolution_fraction)))
    for s in range(1, n_samples + 1):
        if collision_check(world, start + delta * (s / n_samples)):
            return True
    return False


def step_world(world: World, displacements) -> World:
    """Advance every agent simultaneously by its chosen displacement.

    An illegal destination is a planner contract violation and raises hard;
    it is never silently clamped.
    """
    if len(displacements) != len(world.agents):
        raise InputError("need one displacement per agent")
    new_agents = []
    for agent, delta in zip(world.agents, displacements):
        delta = np.asarray(delta, dtype=float)
        # planner positions are lattice-quantized; allow the rounding slack
        max_step = agent.speed * world.dt * (1.0 + 1e-5) + 1e-12
        if np.linalg.norm(delta) > max_step:
            raise InputError(
                f"agent {agent.id}: displacement {np.linalg.norm(delta):.6f} exceeds "
                f"speed*dt = {max_step:.6f}")
        if segment_collides(world, agent.position, delta):
            raise InputError(
                f"agent {agent.id}: move into an obstacle or out of bounds "
                f"(planner contract violation)")
        new_agents.append(Agent(id=agent.id, position=agent.position + delta,
                                speed=agent.speed))
    return World(bounds=world.bounds, obstacles=world.obstacles, agents=new_agents,
                 d_comm=world.d_comm, dt=world.dt, k=world.k + 1)
