"""Lock-step multi-agent simulation: measurement, IIR fusion, consensus,
planning with trajectory exchange, synchronized motion, and evaluation.

Every random draw comes from a named, seed-derived stream, so a run is a
pure function of (config, seed): agent streams do not depend on how many
agents exist, and baseline modes consume their own stream family without
perturbing the main run.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from .consensus import build_comm_graph, metropolis_weights, run_consensus
from .errors import ConfigError, InputError, PlanningInfeasibleError
from .fields import EnvironmentField, measure
from .gp import GpState, NoiseModel, Posterior, gp_state_update, merge_trajectories, zero_state
from .kernel import EigenBasis, basis_eval
from .planner import (Planner, PlannerConfig, Trajectory, _logdet_reward,
                      informational_reward, make_action_space)
from .world import Agent, World, collision_check, segment_collides, step_world

MODE_DISTRIBUTED = "distributed"
MODE_INDEPENDENT = "independent"
MODE_CENTRALIZED = "centralized"

# the paper-style budget handicap for the joint-action search
CENTRALIZED_ITERATION_FACTOR = 22
CENTRALIZED_MAX_AGENTS = 3


def stream(seed: int, *parts) -> np.random.Generator:
    """Deterministic named RNG stream derived from (seed, parts)."""
    tag = "/".join(str(p) for p in parts)
    digest = hashlib.blake2s(tag.encode(), digest_size=16).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + words))


@dataclass
class MetricsRow:
    step: int
    time_s: float
    agent_id: int
    rmse: float
    disagreement_vs_agent0: float
    consensus_residual: float


def _grid_points(bounds: np.ndarray, resolution: int) -> np.ndarray:
    if resolution < 2:
        raise InputError(f"grid resolution must be >= 2 per axis, got {resolution}")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1).reshape(-1, bounds.shape[0])


def evaluate_rmse(agent_gp_states, basis: EigenBasis, noise: NoiseModel,
                  env: EnvironmentField, t: float, world: World,
                  grid_resolution: int, phi_grid=None, grid=None,
                  step: int = 0, posteriors_out=None):
    """Per-agent RMSE against ground truth on an evaluation grid, plus each
    agent's posterior-mean RMSE against agent 0's (estimate disagreement)."""
    if grid is None:
        grid = _grid_points(world.bounds, grid_resolution)
    if phi_grid is None:
        phi_grid = basis_eval(basis, grid)
    truth = np.asarray(env.field_eval(grid, t), dtype=float)
    means = []
    for st in agent_gp_states:
        post = Posterior(st, basis, noise)
        if st.m == 0:
            means.append(np.zeros(grid.shape[0]))
        else:
            means.append(phi_grid @ post._h)
        if posteriors_out is not None:
            posteriors_out.append(post)
    rows = []
    for i, (agent, mu) in enumerate(zip(world.agents, means)):
        rmse = float(np.sqrt(np.mean((mu - truth) ** 2)))
        dis = 0.0 if i == 0 else float(np.sqrt(np.mean((mu - means[0]) ** 2)))
        rows.append(MetricsRow(step=step, time_s=world.k * world.dt, agent_id=agent.id,
                               rmse=rmse, disagreement_vs_agent0=dis,
                               consensus_residual=0.0))
    return rows


@dataclass
class SimConfig:
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    r_mode: str = "running-mean"      # or "fixed"
    r_value: float = 0.2
    merge_mode: str = "as-printed"
    consensus_rounds: int = 10
    drop_prob: float = 0.0
    eval_grid: int = 50
    eval_interval: int = 1
    snapshot_interval: int = 10
    replan_interval: int = 1


class Simulation:
    """One seeded run of one mode (distributed, independent or centralized)."""

    def __init__(self, world: World, env: EnvironmentField, basis: EigenBasis,
                 noise: NoiseModel, cfg: SimConfig, seed: int,
                 mode: str = MODE_DISTRIBUTED, stream_prefix=("main",),
                 network_size: int | None = None):
        if mode not in (MODE_DISTRIBUTED, MODE_INDEPENDENT, MODE_CENTRALIZED):
            raise ConfigError(f"unknown simulation mode {mode!r}")
        if mode == MODE_CENTRALIZED and len(world.agents) > CENTRALIZED_MAX_AGENTS:
            raise ConfigError(
                f"centralized mode supports at most {CENTRALIZED_MAX_AGENTS} agents "
                f"(joint action space grows as |A|^n)")
        self.world = world
        self.env = env
        self.basis = basis
        self.noise = noise
        self.cfg = cfg
        self.seed = seed
        self.mode = mode
        self.prefix = tuple(stream_prefix)
        n = len(world.agents)
        self.network_size = network_size if network_size is not None else n
        self.comm_messages = 0          # agent-visible cross-agent exchanges
        self.planned_violations = 0
        self.clamp_events = 0
        self.max_clamp_excursion = 0.0
        self._residual = 0.0

        self._measure_rng = {a.id: stream(seed, *self.prefix, "measure", a.id)
                             for a in world.agents}
        self._drop_rng = stream(seed, *self.prefix, "consensus-drop")
        self.states = [zero_state(basis.E, self.network_size) for _ in world.agents]

        if mode == MODE_CENTRALIZED:
            self.pooled = zero_state(basis.E, 1)
            self._joint = _JointPlanner(world, basis, noise, cfg.planner,
                                        stream(seed, *self.prefix, "planner", "joint"))
        else:
            self.planners = [
                Planner(a.id, world, basis, noise, cfg.planner,
                        stream(seed, *self.prefix, "planner", a.id),
                        step_length=a.speed * world.dt)
                for a in world.agents]
        self._queued = [[] for _ in world.agents]   # pending moves between replans
        self.last_trajectories = [None] * n

        grid_res = cfg.eval_grid
        self._grid = _grid_points(world.bounds, grid_res) if grid_res >= 2 else None
        self._phi_grid = basis_eval(basis, self._grid) if self._grid is not None else None

    # -- one lock-step round ------------------------------------------------

    def _forgetting_factor(self, m: int) -> float:
        if self.cfg.r_mode == "running-mean":
            return 1.0 / (m + 1)
        if self.cfg.r_mode == "fixed":
            return self.cfg.r_value
        raise ConfigError(f"unknown r_mode {self.cfg.r_mode!r}")

    def step(self) -> None:
        world = self.world
        t = world.k * world.dt

        # (1)-(2) measure at the current position, fuse into the GP state
        for i, agent in enumerate(world.agents):
            y = measure(self.env, agent.position, t, self.noise,
                        self._measure_rng[agent.id])
            r = self._forgetting_factor(self.states[i].m)
            self.states[i] = gp_state_update(self.states[i], self.basis,
                                             agent.position, y, r)
            if self.mode == MODE_CENTRALIZED:
                self.pooled = gp_state_update(self.pooled, self.basis,
                                              agent.position, y,
                                              1.0 / (self.pooled.m + 1))

        # (3) rebuild the communication graph and run consensus
        neighbors = [[] for _ in world.agents]
        if self.mode == MODE_DISTRIBUTED:
            positions = np.array([a.position for a in world.agents])
            graph = build_comm_graph(positions, world.d_comm)
            weights = metropolis_weights(graph)
            links = int(np.count_nonzero(graph.adjacency))
            self.comm_messages += links * self.cfg.consensus_rounds
            self.states, trace = run_consensus(
                self.states, weights, self.cfg.consensus_rounds,
                drop_prob=self.cfg.drop_prob,
                rng=self._drop_rng if self.cfg.drop_prob > 0 else None)
            self._residual = trace[-1]
            for i in range(len(world.agents)):
                neighbors[i] = [j for j in range(len(world.agents))
                                if graph.adjacency[i, j]]
        else:
            self._residual = 0.0

        # (4) plan with trajectory exchange at outer-round barriers
        if not self._queued[0]:
            self._plan(neighbors)

        # (5) advance every agent by its next queued move
        moves = [q.pop(0) for q in self._queued]
        self.world = step_world(world, moves)

    def _plan(self, neighbors) -> None:
        world = self.world
        if self.mode == MODE_CENTRALIZED:
            merged = merge_trajectories(self.pooled, [], self.basis)
            trajs = self._joint.plan(merged, [a.position for a in world.agents])
        else:
            for i, agent in enumerate(world.agents):
                self.planners[i].begin_timestep(agent.position)
            published = {}
            trajs = [None] * len(world.agents)
            for tau in range(1, self.cfg.planner.n_search + 1):
                fresh = {}
                for i in range(len(world.agents)):
                    incoming = [published[j] for j in neighbors[i] if j in published]
                    self.comm_messages += len(incoming)
                    trajs[i] = self.planners[i].plan_round(self.states[i], incoming, tau)
                    fresh[i] = trajs[i]
                published = fresh
        self.last_trajectories = trajs
        interval = max(1, self.cfg.replan_interval)
        for i, traj in enumerate(trajs):
            for pt in traj.points:
                if collision_check(world, pt):
                    self.planned_violations += 1
            pts = traj.points[:interval]
            pos = world.agents[i].position
            queue = []
            for pt in pts:
                queue.append(np.asarray(pt) - pos)
                pos = np.asarray(pt)
            self._queued[i] = queue

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, step: int):
        if self._grid is None:
            return []
        states = ([self.pooled] * len(self.world.agents)
                  if self.mode == MODE_CENTRALIZED else self.states)
        posts = []
        rows = evaluate_rmse(states, self.basis, self.noise, self.env,
                             self.world.k * self.world.dt, self.world,
                             self.cfg.eval_grid, phi_grid=self._phi_grid,
                             grid=self._grid, step=step, posteriors_out=posts)
        for post in posts:
            self.clamp_events += post.clamp_events
            self.max_clamp_excursion = max(self.max_clamp_excursion, post.max_excursion)
        for row in rows:
            row.consensus_residual = self._residual
        return rows

    def snapshot(self):
        """(truth grid, agent-0 posterior-mean grid) at the current time."""
        t = self.world.k * self.world.dt
        truth = np.asarray(self.env.field_eval(self._grid, t), dtype=float)
        st = self.pooled if self.mode == MODE_CENTRALIZED else self.states[0]
        post = Posterior(st, self.basis, self.noise)
        est = (self._phi_grid @ post._h if st.m > 0
               else np.zeros(self._grid.shape[0]))
        return truth, est

    def positions_row(self, step: int):
        return [(step, a.id, tuple(a.position)) for a in self.world.agents]

    def run(self, steps: int):
        """Run `steps` lock-step rounds; returns (metrics rows, position log,
        snapshots dict step -> (truth, estimate))."""
        metrics = list(self.evaluate(0))
        poslog = list(self.positions_row(0))
        snaps = {}
        for j in range(1, steps + 1):
            self.step()
            poslog.extend(self.positions_row(j))
            due = self.cfg.eval_interval and j % self.cfg.eval_interval == 0
            if due or j == steps:
                metrics.extend(self.evaluate(j))
            if (self.cfg.snapshot_interval and self._grid is not None
                    and j % self.cfg.snapshot_interval == 0):
                snaps[j] = self.snapshot()
        if self.mode == MODE_INDEPENDENT and self.comm_messages != 0:
            raise RuntimeError("independent mode exchanged agent state")
        return metrics, poslog, snaps


def run_timestep(sim: Simulation, step: int):
    """Execute one lock-step round of an existing simulation and return its
    metrics rows for this step (the spec-level operation surface)."""
    sim.step()
    return sim.evaluate(step)


class _JointPlanner:
    """Joint-action tree search over the product action space (comparison
    baseline; exponential in the number of agents, capped at 3)."""

    def __init__(self, world: World, basis: EigenBasis, noise: NoiseModel,
                 cfg: PlannerConfig, rng):
        self.world = world
        self.basis = basis
        self.noise = noise
        self.cfg = cfg
        self.rng = rng
        self.spaces = [make_action_space(cfg.action_set, a.speed * world.dt, world.dim)
                       for a in world.agents]
        self.joint_moves = list(itertools.product(*[range(len(s.moves))
                                                    for s in self.spaces]))

    def _legal_joint(self, positions, joint) -> bool:
        for pos, space, a in zip(positions, self.spaces, joint):
            if segment_collides(self.world, pos, space.moves[a]):
                return False
        return True

    def plan(self, merged, positions):
        n = len(positions)
        T = self.cfg.T
        n_iter = self.cfg.n_iteration * CENTRALIZED_ITERATION_FACTOR
        root = _JointNode(tuple(tuple(p) for p in positions), 0, None, -1,
                          len(self.joint_moves))
        jitter = 1e-9 * self.basis.params.signal_variance
        for _ in range(n_iter):
            node = root
            # selection with closing
            while True:
                if node.depth >= T or node.untried:
                    break
                open_idx = [a for a in range(len(self.joint_moves))
                            if not node.closed[a]]
                if not open_idx:
                    if node.parent is None:
                        raise PlanningInfeasibleError("joint root fully closed")
                    node.parent.closed[node.parent_action] = True
                    node = node.parent
                    continue
                tot = sum(node.N[a] for a in open_idx)
                ln_tot = np.log(tot) if tot > 1 else 0.0
                node = node.children[max(
                    open_idx,
                    key=lambda a: (node.W[a] / node.N[a]
                                   + np.sqrt(ln_tot / node.N[a])) if node.N[a] > 0
                    else np.inf)]
            if node.depth < T and node.untried:
                pick = int(self.rng.integers(len(node.untried)))
                action = node.untried.pop(pick)
                joint = self.joint_moves[action]
                if not self._legal_joint(node.positions, joint):
                    node.closed[action] = True
                    continue
                child_pos = tuple(
                    tuple(np.asarray(p) + s.moves[a])
                    for p, s, a in zip(node.positions, self.spaces, joint))
                child = _JointNode(child_pos, node.depth + 1, node, action,
                                   len(self.joint_moves))
                node.children[action] = child
                node = child
            # rollout
            paths = [[] for _ in range(n)]
            cur = node
            while cur.parent is not None:
                for i in range(n):
                    paths[i].append(cur.positions[i])
                cur = cur.parent
            for p in paths:
                p.reverse()
            pos_now = [np.asarray(p) for p in node.positions]
            for _ in range(node.depth, T):
                stuck = False
                for i in range(n):
                    legal = [a for a in range(len(self.spaces[i].moves))
                             if not segment_collides(self.world, pos_now[i],
                                                     self.spaces[i].moves[a])]
                    if not legal:
                        stuck = True
                        break
                    mv = self.spaces[i].moves[legal[int(self.rng.integers(len(legal)))]]
                    pos_now[i] = pos_now[i] + mv
                    paths[i].append(tuple(pos_now[i]))
                if stuck:
                    break
            union = np.array([pt for path in paths for pt in path])
            from .gp import merged_variance
            cov = merged_variance(merged, self.basis, self.noise, union)
            reward = _logdet_reward(cov, jitter)
            cur = node
            while cur.parent is not None:
                parent, a = cur.parent, cur.parent_action
                parent.N[a] += 1.0
                parent.W[a] += reward
                cur = parent
        # extract per-agent trajectories by most-valued descent
        trajs = [[] for _ in range(n)]
        node = root
        while node.depth < T:
            best, best_val = -1, -np.inf
            for a in range(len(self.joint_moves)):
                if node.closed[a] or node.N[a] <= 0 or node.children[a] is None:
                    continue
                val = node.W[a] / node.N[a]
                if val > best_val:
                    best, best_val = a, val
            if best < 0:
                break
            node = node.children[best]
            for i in range(n):
                trajs[i].append(node.positions[i])
        if not trajs[0]:
            raise PlanningInfeasibleError("joint search produced no trajectory")
        return [Trajectory(agent_id=self.world.agents[i].id,
                           points=np.array(trajs[i])) for i in range(n)]


class _JointNode:
    __slots__ = ("positions", "depth", "parent", "parent_action",
                 "children", "N", "W", "closed", "untried")

    def __init__(self, positions, depth, parent, parent_action, n_actions):
        self.positions = positions
        self.depth = depth
        self.parent = parent
        self.parent_action = parent_action
        self.children = [None] * n_actions
        self.N = [0.0] * n_actions
        self.W = [0.0] * n_actions
        self.closed = [False] * n_actions
        self.untried = list(range(n_actions))
