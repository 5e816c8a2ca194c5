"""Per-agent informative path planning: discounted-UCB Monte Carlo tree search
with node closing, scored by the log-det information reward of the
trajectory-merged GP posterior.

Tree positions live on an integer lattice (step_length / 2^21 resolution) so
that positions reached through different action orders coincide exactly; this
keeps feature and legality caches exact and the whole search bit-reproducible.

The outer planning loop runs `n_search` rounds per timestep.  Between rounds,
agents exchange their current best trajectories; the discount factor `gamma`
ages statistics collected under stale neighbor predictions instead of
rebuilding the tree.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericalError, PlanningInfeasibleError
from .gp import GpState, MergedGpState, NoiseModel, _merged_factor, merge_trajectories, merged_variance
from .kernel import EigenBasis, basis_eval
from .world import World, segment_collides

_LATTICE_BITS = 21
_TRAJ_HEAD = struct.Struct("<IQH")   # agent id, round index, point count

_LOG_2PIE = math.log(2.0 * math.pi * math.e)


class AllClosedSignal(Exception):
    """Raised by ducb_select when every action at a node is closed."""


@dataclass(frozen=True, eq=False)
class ActionSpace:
    """Finite displacement set; every non-zero move has magnitude step_length."""

    name: str
    moves: np.ndarray
    step_length: float


def make_action_space(name: str, step_length: float, dim: int = 2) -> ActionSpace:
    if step_length <= 0:
        raise InputError(f"step_length must be positive, got {step_length}")
    if name == "compass4":
        dirs = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    elif name == "compass8":
        ang = np.arange(8) * (np.pi / 4.0)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        dirs[np.abs(dirs) < 1e-15] = 0.0
    elif name == "axis6":
        dirs = np.vstack([np.eye(3), -np.eye(3)])
    else:
        raise InputError(f"unknown action set {name!r}")
    if dirs.shape[1] != dim:
        raise InputError(f"action set {name!r} is {dirs.shape[1]}-D, world is {dim}-D")
    return ActionSpace(name=name, moves=dirs * step_length, step_length=float(step_length))


@dataclass
class EdgeStats:
    """Discounted visit count, discounted total value, last-update round,
    closed flag of one tree edge."""

    N: float
    W: float
    tau: int
    closed: bool


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Predicted sensing positions x_{k+1..k+L}, L <= search depth."""

    agent_id: int
    points: np.ndarray

    def __len__(self):
        return self.points.shape[0]


class _Node:
    __slots__ = ("key", "pos", "depth", "parent", "parent_action",
                 "children", "N", "W", "tau", "closed", "untried")

    def __init__(self, key, pos, depth, parent, parent_action, n_actions):
        self.key = key
        self.pos = pos
        self.depth = depth
        self.parent = parent
        self.parent_action = parent_action
        self.children = [None] * n_actions
        self.N = [0.0] * n_actions
        self.W = [0.0] * n_actions
        self.tau = [0] * n_actions
        self.closed = [False] * n_actions
        self.untried = list(range(n_actions))

    def edge_stats(self, action: int) -> EdgeStats:
        return EdgeStats(N=self.N[action], W=self.W[action],
                         tau=self.tau[action], closed=self.closed[action])


class SearchTree:
    """Root node plus the lattice bookkeeping shared by all its nodes."""

    def __init__(self, position, actions: ActionSpace, T: int):
        if T < 1:
            raise InputError(f"search depth T must be >= 1, got {T}")
        self.actions = actions
        self.T = T
        self.quant = actions.step_length / float(2 ** _LATTICE_BITS)
        self.move_keys = [tuple(int(round(c / self.quant)) for c in mv)
                          for mv in actions.moves]
        key = tuple(int(round(float(c) / self.quant)) for c in np.asarray(position, dtype=float))
        self.root = _Node(key, self._pos_of(key), 0, None, -1, len(actions.moves))

    def _pos_of(self, key) -> tuple:
        return tuple(k * self.quant for k in key)

    def child_key(self, key, action: int) -> tuple:
        mk = self.move_keys[action]
        return tuple(k + d for k, d in zip(key, mk))


def new_tree(position, actions: ActionSpace, T: int) -> SearchTree:
    return SearchTree(position, actions, T)


class _WorldCache:
    """Per-agent legality cache: lattice key -> list of legal action indices.

    Legality of an action is the quarter-step segment collision test from the
    canonical lattice position.
    """

    def __init__(self, world: World, tree: SearchTree):
        self.world = world
        self.tree = tree
        self.table = {}

    def legal(self, key) -> list:
        got = self.table.get(key)
        if got is None:
            pos = np.array(self.tree._pos_of(key))
            got = [a for a, mv in enumerate(self.tree.actions.moves)
                   if not segment_collides(self.world, pos, mv)]
            self.table[key] = got
        return got


class _RandPool:
    """Block-buffered uniform draws over a numpy Generator; same sequence as
    consuming the generator directly in blocks, much cheaper per draw."""

    __slots__ = ("rng", "buf", "i")

    def __init__(self, rng, block: int = 4096):
        self.rng = rng
        self.buf = rng.random(block)
        self.i = 0

    def integers(self, n: int) -> int:
        i = self.i
        if i >= self.buf.shape[0]:
            self.buf = self.rng.random(self.buf.shape[0])
            i = 0
        self.i = i + 1
        return int(self.buf[i] * n)


class _RewardCtx:
    """Per-merged-state context: the factored covariance form plus feature
    rows (phi and Q phi) cached by lattice position."""

    def __init__(self, merged: MergedGpState, basis: EigenBasis, noise: NoiseModel,
                 phi_cache: dict, tree: SearchTree):
        self.merged = merged
        self.basis = basis
        self.noise = noise
        self.phi_cache = phi_cache
        self.tree = tree
        self.jitter = 1e-9 * basis.params.signal_variance
        self.prior = merged.effective_count == 0
        self.vq_cache = {}
        if not self.prior:
            self.q_sym = _merged_factor(merged, basis, noise)[2]

    def phi_row(self, key) -> np.ndarray:
        row = self.phi_cache.get(key)
        if row is None:
            row = basis_eval(self.basis, np.array(self.tree._pos_of(key)))
            self.phi_cache[key] = row
        return row

    def _vq_row(self, key) -> np.ndarray:
        row = self.vq_cache.get(key)
        if row is None:
            row = self.q_sym @ self.phi_row(key)
            self.vq_cache[key] = row
        return row

    def reward_of_keys(self, keys) -> float:
        L = len(keys)
        if L == 0:
            return 0.0
        if self.prior:
            pts = np.array([self.tree._pos_of(k) for k in keys])
            cov = merged_variance(self.merged, self.basis, self.noise, pts)
            return _logdet_reward(cov, self.jitter)
        E = self.basis.E
        B = np.empty((L, E))
        V = np.empty((L, E))
        phi_row = self.phi_row
        vq_row = self._vq_row
        for i, k in enumerate(keys):
            B[i] = phi_row(k)
            V[i] = vq_row(k)
        cov = B @ V.T
        return _logdet_reward(cov, self.jitter)


def _logdet_reward(cov: np.ndarray, jitter: float) -> float:
    """0.5 L log(2 pi e) + 0.5 log det(cov + jitter I) via Cholesky; a small
    unrolled factorization handles the typical tiny trajectory sizes."""
    L = cov.shape[0]
    if L <= 8:
        a = cov.tolist()
        logdet = 0.0
        try:
            for j in range(L):
                aj = a[j]
                s = aj[j] + jitter
                for k in range(j):
                    s -= aj[k] * aj[k]
                d = math.sqrt(s)
                logdet += math.log(d)
                inv = 1.0 / d
                aj[j] = d
                for i in range(j + 1, L):
                    ai = a[i]
                    s2 = ai[j]
                    for k in range(j):
                        s2 -= ai[k] * aj[k]
                    ai[j] = s2 * inv
            return 0.5 * (L * _LOG_2PIE) + logdet
        except ValueError:
            pass  # not positive definite at this jitter; fall through
    cov = cov + jitter * np.eye(L)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"reward covariance factorization failed: {exc}") from exc
    return 0.5 * (L * _LOG_2PIE) + float(np.sum(np.log(np.diag(chol))))


def informational_reward(merged: MergedGpState, basis: EigenBasis, noise: NoiseModel,
                         traj) -> float:
    """Entropy-style reward 0.5 log det(2 pi e (cov + jitter I)) of the merged
    posterior covariance along a candidate trajectory."""
    pts = traj.points if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    pts = np.atleast_2d(pts)
    if pts.shape[0] == 0:
        raise InputError("informational_reward requires a non-empty trajectory")
    cov = merged_variance(merged, basis, noise, pts)
    return _logdet_reward(cov, 1e-9 * basis.params.signal_variance)


def ducb_select(node, actions: ActionSpace, tau: int, gamma: float) -> int:
    """Discounted-UCB argmax over the node's open actions.

    Unvisited open actions take priority (lowest index).  The log total in
    the exploration bonus is clamped at zero: heavy discounting can push the
    effective total below one, where the printed formula would go complex.
    """
    closed = node.closed
    N = node.N
    W = node.W
    taus = node.tau
    n_actions = len(closed)
    total = 0.0
    seen_open = False
    for a in range(n_actions):
        if closed[a]:
            continue
        n_a = N[a]
        if n_a == 0.0:
            return a
        seen_open = True
        total += n_a if taus[a] == tau else n_a * gamma ** (tau - taus[a])
    if not seen_open:
        raise AllClosedSignal
    ln_total = math.log(total) if total > 1.0 else 0.0
    best, best_score = -1, -math.inf
    for a in range(n_actions):
        if closed[a]:
            continue
        g = 1.0 if taus[a] == tau else gamma ** (tau - taus[a])
        n_eff = N[a] * g
        if n_eff <= 0.0:
            return a
        score = (W[a] * g) / n_eff + math.sqrt(ln_total / n_eff)
        if score > best_score:
            best, best_score = a, score
    return best


def selection(tree: SearchTree, tau: int, gamma: float):
    """Descend by D-UCB to a node with an untried action or at depth T.

    A node whose actions are all closed closes its incoming edge and the
    descent resumes from the parent; an all-closed root means the agent is
    boxed in.
    """
    node = tree.root
    while True:
        if node.depth >= tree.T or node.untried:
            return node
        try:
            a = ducb_select(node, tree.actions, tau, gamma)
        except AllClosedSignal:
            parent = node.parent
            if parent is None:
                raise PlanningInfeasibleError("every root action is closed") from None
            parent.closed[node.parent_action] = True
            node = parent
            continue
        node = node.children[a]


def expand(tree: SearchTree, leaf, rng):
    """Create a child for one uniformly sampled untried action of the leaf.
    Collision vetting of the new edge is the caller's job."""
    if leaf.depth >= tree.T:
        raise InputError("cannot expand a node at the search depth")
    if not leaf.untried:
        raise InputError("leaf has no untried action")
    pick = int(rng.integers(len(leaf.untried)))
    action = leaf.untried.pop(pick)
    key = tree.child_key(leaf.key, action)
    child = _Node(key, tree._pos_of(key), leaf.depth + 1, leaf, action,
                  len(tree.actions.moves))
    leaf.children[action] = child
    return child, action


def _path_keys(node) -> list:
    keys = []
    cur = node
    while cur.parent is not None:
        keys.append(cur.key)
        cur = cur.parent
    keys.reverse()
    return keys


def simulate(node, T: int, merged: MergedGpState, basis: EigenBasis, noise: NoiseModel,
             world: World, rng, tree: SearchTree, ctx: _RewardCtx | None = None,
             legal: _WorldCache | None = None) -> float:
    """Reward of the root-to-node path extended by a uniform random legal walk
    to depth T; a step with no legal action truncates the rollout."""
    if ctx is None:
        ctx = _RewardCtx(merged, basis, noise, {}, tree)
    if legal is None:
        legal = _WorldCache(world, tree)
    keys = _path_keys(node)
    key = node.key
    for _ in range(node.depth, T):
        moves = legal.legal(key)
        if not moves:
            break
        key = tree.child_key(key, moves[int(rng.integers(len(moves)))])
        keys.append(key)
    return ctx.reward_of_keys(keys)


def backprop(tree: SearchTree, node, reward: float, gamma: float, tau: int) -> None:
    """Decay-and-add update of every edge on the root path."""
    cur = node
    while cur.parent is not None:
        parent, a = cur.parent, cur.parent_action
        g = gamma ** (tau - parent.tau[a])
        parent.N[a] = parent.N[a] * g + 1.0
        parent.W[a] = parent.W[a] * g + reward
        parent.tau[a] = tau
        cur = parent


def tree_search(tree: SearchTree, tau: int, merged: MergedGpState, basis: EigenBasis,
                noise: NoiseModel, world: World, n_iteration: int, gamma: float,
                rng, ctx: _RewardCtx | None = None,
                legal: _WorldCache | None = None) -> SearchTree:
    """n_iteration rounds of selection, expansion, collision vetting (closing
    blocked edges), rollout, and discounted backpropagation."""
    if ctx is None:
        ctx = _RewardCtx(merged, basis, noise, {}, tree)
    if legal is None:
        legal = _WorldCache(world, tree)
    for _ in range(n_iteration):
        leaf = selection(tree, tau, gamma)
        if leaf.depth < tree.T:
            node, action = expand(tree, leaf, rng)
            if action not in legal.legal(leaf.key):
                leaf.closed[action] = True
                continue
        else:
            node = leaf
        reward = simulate(node, tree.T, merged, basis, noise, world, rng,
                          tree, ctx=ctx, legal=legal)
        backprop(tree, node, reward, gamma, tau)
    return tree


def best_trajectory(tree: SearchTree, agent_id: int) -> Trajectory:
    """Root descent by maximal mean value W/N over open visited edges,
    ties broken by lowest action index."""
    node = tree.root
    pts = []
    while node.depth < tree.T:
        best, best_val = -1, -math.inf
        for a in range(len(node.closed)):
            if node.closed[a] or node.N[a] <= 0.0 or node.children[a] is None:
                continue
            val = node.W[a] / node.N[a]
            if val > best_val:
                best, best_val = a, val
        if best < 0:
            break
        node = node.children[best]
        pts.append(node.pos)
    if not pts:
        raise PlanningInfeasibleError("search tree holds no visited open root action")
    return Trajectory(agent_id=agent_id, points=np.array(pts))


@dataclass(frozen=True)
class PlannerConfig:
    T: int = 5
    n_iteration: int = 300
    n_search: int = 3
    gamma: float = 0.9
    action_set: str = "compass8"
    merge_mode: str = "as-printed"


class Planner:
    """One agent's planner: owns the lattice caches for the whole run and a
    fresh search tree per timestep."""

    def __init__(self, agent_id: int, world: World, basis: EigenBasis,
                 noise: NoiseModel, cfg: PlannerConfig, rng, step_length: float):
        self.agent_id = agent_id
        self.world = world
        self.basis = basis
        self.noise = noise
        self.cfg = cfg
        self.rng = rng
        self.actions = make_action_space(cfg.action_set, step_length, world.dim)
        self.tree = None
        self._legal = None
        self._phi_cache = {}
        self._pool = _RandPool(rng)

    def begin_timestep(self, position) -> None:
        reuse = self.tree is not None and self.tree.quant == self.actions.step_length / 2 ** _LATTICE_BITS
        self.tree = new_tree(position, self.actions, self.cfg.T)
        if self._legal is None or not reuse:
            self._legal = _WorldCache(self.world, self.tree)
            self._phi_cache = {}
        else:
            self._legal.tree = self.tree

    def plan_round(self, gp_state: GpState, neighbor_trajs, tau: int) -> Trajectory:
        merged = merge_trajectories(gp_state, neighbor_trajs, self.basis,
                                    self.cfg.merge_mode)
        ctx = _RewardCtx(merged, self.basis, self.noise, self._phi_cache, self.tree)
        tree_search(self.tree, tau, merged, self.basis, self.noise, self.world,
                    self.cfg.n_iteration, self.cfg.gamma, self._pool,
                    ctx=ctx, legal=self._legal)
        return best_trajectory(self.tree, self.agent_id)


def plan_step(agent_id: int, position, gp_state: GpState, neighbor_trajs,
              world: World, basis: EigenBasis, noise: NoiseModel,
              cfg: PlannerConfig, rng, step_length: float = 1.0,
              exchange=None) -> Trajectory:
    """Full per-timestep planning: n_search rounds of re-merge, tree search and
    trajectory publication.  `exchange(best, tau)` returns the refreshed
    neighbor trajectories; without it the provided list is used throughout."""
    planner = Planner(agent_id, world, basis, noise, cfg, rng, step_length)
    planner.begin_timestep(position)
    best = None
    for tau in range(1, cfg.n_search + 1):
        best = planner.plan_round(gp_state, neighbor_trajs, tau)
        if exchange is not None:
            neighbor_trajs = exchange(best, tau)
    if best is None:
        raise PlanningInfeasibleError("plan_step produced no trajectory")
    return best


def pack_trajectory(traj: Trajectory, round_index: int) -> bytes:
    """Wire format: agent id u32, round u64, point count u16, points f64."""
    pts = np.ascontiguousarray(traj.points, dtype="<f8")
    return _TRAJ_HEAD.pack(traj.agent_id, round_index, pts.shape[0]) + pts.tobytes()


def unpack_trajectory(buf: bytes, dim: int | None = None):
    agent_id, round_index, count = _TRAJ_HEAD.unpack_from(buf, 0)
    body = buf[_TRAJ_HEAD.size:]
    if count == 0:
        pts = np.zeros((0, dim if dim else 0))
    else:
        if dim is None:
            if len(body) % (8 * count):
                raise InputError("trajectory payload size is not a multiple of the point count")
            dim = len(body) // (8 * count)
        pts = np.frombuffer(body, dtype="<f8").reshape(count, dim).copy()
    return Trajectory(agent_id=agent_id, points=pts), round_index
