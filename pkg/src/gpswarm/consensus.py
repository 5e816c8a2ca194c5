"""Range-limited communication graphs and average-consensus state fusion.

Mixing uses Metropolis-Hastings weights: doubly stochastic on any undirected
graph from neighbor degrees alone, so repeated rounds drive every agent's
(alpha, beta) to the network mean on connected graphs and to per-component
means on disconnected ones.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import InputError
from .gp import GpState, state_from_bytes, state_to_bytes

_MSG_TAIL = struct.Struct("<IQ")    # sender id, round index


@dataclass(frozen=True, eq=False)
class CommGraph:
    """Symmetric, irreflexive adjacency under the strict range test
    ||x_i - x_j|| < d_comm."""

    n: int
    adjacency: np.ndarray
    d_comm: float


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Doubly stochastic mixing matrix; zero off the graph edges."""

    W: np.ndarray


def build_comm_graph(positions, d_comm: float) -> CommGraph:
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    if d_comm <= 0:
        raise InputError(f"d_comm must be positive, got {d_comm}")
    n = pos.shape[0]
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    adj = dist < d_comm
    np.fill_diagonal(adj, False)
    return CommGraph(n=n, adjacency=adj, d_comm=float(d_comm))


def metropolis_weights(graph: CommGraph) -> WeightMatrix:
    adj = graph.adjacency
    deg = adj.sum(axis=1)
    n = graph.n
    W = np.zeros((n, n))
    ii, jj = np.nonzero(adj)
    W[ii, jj] = 1.0 / (1.0 + np.maximum(deg[ii], deg[jj]))
    W[np.arange(n), np.arange(n)] = 1.0 - W.sum(axis=1)
    return WeightMatrix(W=W)


def _check_states(states) -> int:
    E = states[0].beta.shape[0]
    m = states[0].m
    for s in states[1:]:
        if s.beta.shape[0] != E:
            raise InputError("consensus requires a common basis size E across states")
        if s.m != m:
            raise InputError("consensus requires lock-step sample counts across states")
    return E


def consensus_round(states, weights: WeightMatrix, row_override=None):
    """One synchronous mixing round: state_i' = sum_j W[i,j] state_j.

    Linear and mean-preserving for doubly stochastic W.  `row_override`
    substitutes per-receiver rows (used by the lossy-link simulation).
    """
    _check_states(states)
    W = weights.W if row_override is None else row_override
    if W.shape != (len(states), len(states)):
        raise InputError("weight matrix size does not match the state list")
    A = np.stack([s.alpha for s in states])
    B = np.stack([s.beta for s in states])
    A2 = np.einsum("ij,jkl->ikl", W, A)
    B2 = W @ B
    return [GpState(alpha=A2[i], beta=B2[i], m=s.m, n=s.n)
            for i, s in enumerate(states)]


def _disagreement(states) -> float:
    A = np.stack([s.alpha for s in states])
    B = np.stack([s.beta for s in states])
    dA = A - A.mean(axis=0)
    dB = B - B.mean(axis=0)
    per = np.sqrt(np.sum(dA * dA, axis=(1, 2)) + np.sum(dB * dB, axis=1))
    return float(per.max())


def run_consensus(states, weights: WeightMatrix, rounds: int,
                  drop_prob: float = 0.0, rng=None):
    """Apply `rounds` mixing rounds; returns (states, max-disagreement trace).

    The trace has rounds+1 entries, starting from the pre-mixing value.  With
    drop_prob > 0 each directed message is lost independently; the receiver
    folds the lost weight back into its self weight for that round.
    """
    if rounds < 0:
        raise InputError(f"rounds must be >= 0, got {rounds}")
    if drop_prob > 0 and rng is None:
        raise InputError("drop_prob > 0 requires an rng")
    trace = [_disagreement(states)]
    cur = list(states)
    n = len(cur)
    for _ in range(rounds):
        override = None
        if drop_prob > 0:
            override = weights.W.copy()
            drops = rng.random((n, n)) < drop_prob
            np.fill_diagonal(drops, False)
            lost = np.where(drops, override, 0.0)
            override -= lost
            override[np.arange(n), np.arange(n)] += lost.sum(axis=1)
        cur = consensus_round(cur, weights, row_override=override)
        trace.append(_disagreement(cur))
    return cur, trace


def graph_components(graph: CommGraph):
    """Connected-component labels, length n."""
    n_comp, labels = connected_components(graph.adjacency, directed=False)
    return labels


def pack_message(state: GpState, sender: int, round_index: int) -> bytes:
    """Wire payload: GP state record, then sender id u32 and round index u64."""
    return state_to_bytes(state) + _MSG_TAIL.pack(sender, round_index)


def unpack_message(buf: bytes):
    body, tail = buf[:-_MSG_TAIL.size], buf[-_MSG_TAIL.size:]
    sender, round_index = _MSG_TAIL.unpack(tail)
    return state_from_bytes(body), sender, round_index
