"""Distributed E-dimensional GP estimation on top of the KL feature basis.

Each agent carries a sufficient-statistic pair (alpha, beta): the running
average of feature outer products and of feature-weighted measurements.
These are the only quantities ever exchanged over the network.  Posterior
queries solve an E x E system regularized by the inverse basis eigenvalues.

Centralized estimators (full-Gram GP and pooled E-dimensional form) are
implemented independently as test oracles and are O(N^3) / O(N E^2).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import EmptyStateError, InputError, NumericalError
from .kernel import EigenBasis, KernelParams, basis_eval, kernel_eval, kernel_gram, truncated_gram

MERGE_AS_PRINTED = "as-printed"
MERGE_CONSISTENT = "consistent"

CHECKPOINT_MAGIC = b"DGPS"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIII")   # magic, version, E, reserved
_COUNTS = struct.Struct("<QQ")      # m, n


@dataclass(frozen=True)
class NoiseModel:
    """Additive white Gaussian measurement noise variance."""

    sigma_v_sq: float

    def __post_init__(self):
        if not np.isfinite(self.sigma_v_sq) or self.sigma_v_sq <= 0:
            raise InputError(f"sigma_v_sq must be positive, got {self.sigma_v_sq}")


@dataclass(frozen=True, eq=False)
class GpState:
    """Per-agent sufficient statistics: feature second moment `alpha`,
    feature-weighted measurements `beta`, sample count `m`, network size `n`."""

    alpha: np.ndarray
    beta: np.ndarray
    m: int
    n: int


def zero_state(E: int, n: int) -> GpState:
    if n < 1:
        raise InputError(f"network size must be >= 1, got {n}")
    return GpState(alpha=np.zeros((E, E)), beta=np.zeros(E), m=0, n=n)


def gp_state_update(state: GpState, basis: EigenBasis, x, y: float, r: float) -> GpState:
    """One IIR fusion step: new sample mixed in with weight r.

    r = 1/(m+1) keeps a running mean over all samples (static fields);
    a fixed r > 1/(m+1) forgets old data (dynamic fields).
    """
    if not (0.0 < r <= 1.0):
        raise InputError(f"forgetting factor r must be in (0, 1], got {r}")
    if not np.isfinite(y):
        raise InputError("measurement y is not finite")
    phi = basis_eval(basis, np.asarray(x, dtype=float))
    keep = 1.0 - r
    return GpState(alpha=keep * state.alpha + r * np.outer(phi, phi),
                   beta=keep * state.beta + r * phi * y,
                   m=state.m + 1, n=state.n)


def _chol_with_jitter(S: np.ndarray):
    """Cholesky with an additive jitter ladder; raises NumericalError when
    even 1e-4 * trace/E on the diagonal does not help."""
    scale = np.trace(S) / S.shape[0]
    try:
        return cho_factor(S, lower=True)
    except LinAlgError:
        pass
    jit = 1e-10 * scale
    while jit <= 1e-4 * scale:
        try:
            return cho_factor(S + jit * np.eye(S.shape[0]), lower=True)
        except LinAlgError:
            jit *= 2.0
    raise NumericalError("factorization failed beyond the jitter ladder")


class Posterior:
    """Factorization cache for repeated queries against one GpState.

    At m = 0 the estimator returns the prior (mean 0, variance kappa(x,x))
    without forming the inverse.  Negative variance excursions are clamped at
    zero and tracked for the experiment report.
    """

    def __init__(self, state: GpState, basis: EigenBasis, noise: NoiseModel):
        self.state = state
        self.basis = basis
        self.noise = noise
        self.clamp_events = 0
        self.max_excursion = 0.0
        self._p = None
        if state.m > 0:
            lam = basis.eigenvalues
            c = noise.sigma_v_sq / (state.m * state.n)
            S = state.alpha + np.diag(c / lam)
            self._chol = _chol_with_jitter(S)
            self._h = cho_solve(self._chol, state.beta)

    def mean(self, x) -> np.ndarray | float:
        phi = basis_eval(self.basis, x)
        if self.state.m == 0:
            return 0.0 if phi.ndim == 1 else np.zeros(phi.shape[0])
        out = phi @ self._h
        return float(out) if phi.ndim == 1 else out

    def variance(self, x) -> np.ndarray | float:
        phi = basis_eval(self.basis, x)
        single = phi.ndim == 1
        P = np.atleast_2d(phi)
        sig = self.basis.params.signal_variance
        if self.state.m == 0:
            out = np.full(P.shape[0], sig)
            return float(out[0]) if single else out
        if self._p is None:
            self._p = cho_solve(self._chol, self.state.alpha * self.basis.eigenvalues)
        out = sig - np.einsum("ne,ef,nf->n", P, self._p, P)
        neg = out < 0.0
        if np.any(neg):
            self.clamp_events += int(np.count_nonzero(neg))
            self.max_excursion = max(self.max_excursion, float(-out[neg].min()))
            out = np.where(neg, 0.0, out)
        return float(out[0]) if single else out


def posterior_mean(state: GpState, basis: EigenBasis, noise: NoiseModel, x):
    """Distributed-form posterior mean at x; requires at least one sample."""
    if state.m == 0:
        raise EmptyStateError("posterior_mean requires m >= 1; the prior mean is 0")
    return Posterior(state, basis, noise).mean(x)


def posterior_variance(state: GpState, basis: EigenBasis, noise: NoiseModel, x):
    """Distributed-form posterior variance at x, clamped below at zero.
    m = 0 returns the prior variance kappa(x, x)."""
    return Posterior(state, basis, noise).variance(x)


@dataclass(eq=False)
class MergedGpState:
    """GpState with neighbors' predicted sensing points temporarily folded in.

    `alpha_hat` reweights the base alpha against the outer-product sum of the
    merged points; `effective_count` is m*n plus the merged point count.  The
    merge never touches the base state.
    """

    alpha_hat: np.ndarray
    effective_count: float
    base: GpState
    _factor: tuple | None = field(default=None, repr=False)


def merge_trajectories(state: GpState, neighbor_trajs, basis: EigenBasis,
                       mode: str = MERGE_AS_PRINTED) -> MergedGpState:
    """Fold neighbor trajectory points into a temporary copy of the GP state.

    `as-printed` weights the raw outer-product sum by n(X)/(mn + n(X));
    `consistent` weights it by 1/(mn + n(X)), which keeps alpha_hat a proper
    average.  Empty input returns the base alpha unchanged.
    """
    if mode not in (MERGE_AS_PRINTED, MERGE_CONSISTENT):
        raise InputError(f"unknown merge mode {mode!r}")
    pts = [np.atleast_2d(np.asarray(t.points, dtype=float))
           for t in neighbor_trajs if len(t.points) > 0]
    n_x = sum(p.shape[0] for p in pts)
    mn = float(state.m * state.n)
    if n_x == 0:
        return MergedGpState(alpha_hat=state.alpha, effective_count=mn, base=state)
    allp = np.vstack(pts)
    if not np.all(np.isfinite(allp)):
        raise InputError("neighbor trajectories contain non-finite points")
    phi = basis_eval(basis, allp)
    outer_sum = phi.T @ phi
    denom = mn + n_x
    w2 = (n_x / denom) if mode == MERGE_AS_PRINTED else (1.0 / denom)
    return MergedGpState(alpha_hat=(mn / denom) * state.alpha + w2 * outer_sum,
                         effective_count=denom, base=state)


def _merged_factor(merged: MergedGpState, basis: EigenBasis, noise: NoiseModel):
    """Lazy per-merge cache: S = alpha_hat + c*Lam^-1, P = S^-1 alpha_hat Lam,
    and the symmetrized covariance core Q = diag(Lam) - (P + P^T)/2 so that
    the symmetrized posterior covariance is phi Q phi^T."""
    if merged._factor is None:
        lam = basis.eigenvalues
        c = noise.sigma_v_sq / merged.effective_count
        S = merged.alpha_hat + np.diag(c / lam)
        chol = _chol_with_jitter(S)
        P = cho_solve(chol, merged.alpha_hat * lam)
        q_sym = np.diag(lam) - 0.5 * (P + P.T)
        merged._factor = (chol, P, q_sym)
    return merged._factor


def merged_variance(merged: MergedGpState, basis: EigenBasis, noise: NoiseModel,
                    points) -> np.ndarray:
    """Posterior covariance of the merged estimator over a point list.

    The Gram term uses the truncated kernel, so the result is PSD up to
    rounding; the output is symmetrized.  With no data at all (m = 0 and no
    merged points) the exact-kernel prior Gram is returned, matching the
    m = 0 convention of posterior_variance.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[0] == 0:
        raise InputError("merged_variance requires a non-empty point list")
    if merged.effective_count == 0:
        return kernel_gram(basis.params, P, P)
    phi = np.atleast_2d(basis_eval(basis, P))
    q_sym = _merged_factor(merged, basis, noise)[2]
    return phi @ q_sym @ phi.T


def centralized_gp_posterior(X, y, params: KernelParams, noise: NoiseModel, x):
    """Exact full-Gram GP posterior (test oracle, O(N^3)).

    Returns (mean, variance) at x; x may be a single point or a batch.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0] or X.shape[0] < 1:
        raise InputError("need equally many inputs and outputs, at least one")
    K = kernel_gram(params, X, X) + noise.sigma_v_sq * np.eye(X.shape[0])
    chol = _chol_with_jitter(K)
    xq = np.asarray(x, dtype=float)
    single = xq.ndim == 1
    Q = np.atleast_2d(xq)
    ks = kernel_gram(params, X, Q)          # (N, q)
    mean = ks.T @ cho_solve(chol, y)
    var = params.signal_variance - np.sum(ks * cho_solve(chol, ks), axis=0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def centralized_edim_posterior(X, y, basis: EigenBasis, noise: NoiseModel, x):
    """Pooled E-dimensional estimator built directly from the stacked feature
    matrix (test oracle; the convergence target of the distributed form)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0] or X.shape[0] < 1:
        raise InputError("need equally many inputs and outputs, at least one")
    mn = X.shape[0]
    G = np.atleast_2d(basis_eval(basis, X))             # row per sample
    lam = basis.eigenvalues
    A = G.T @ G / mn + np.diag(noise.sigma_v_sq / (mn * lam))
    H = np.linalg.solve(A, G.T / mn)                    # H_E
    xq = np.asarray(x, dtype=float)
    single = xq.ndim == 1
    Phi = np.atleast_2d(basis_eval(basis, xq))
    mean = Phi @ (H @ y)
    M = H @ G * lam                                     # H_E G Lam_E
    var = basis.params.signal_variance - np.einsum("qe,ef,qf->q", Phi, M, Phi)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


# --- wire & checkpoint format -------------------------------------------------

def state_to_bytes(state: GpState) -> bytes:
    """Flat little-endian record with a 16-byte header; also the on-disk
    checkpoint layout."""
    E = state.beta.shape[0]
    return (_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, E, 0)
            + _COUNTS.pack(state.m, state.n)
            + np.ascontiguousarray(state.alpha, dtype="<f8").tobytes()
            + np.ascontiguousarray(state.beta, dtype="<f8").tobytes())


def state_from_bytes(buf: bytes) -> GpState:
    if len(buf) < _HEADER.size + _COUNTS.size:
        raise InputError("buffer too short for a GP state record")
    magic, version, E, _ = _HEADER.unpack_from(buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise InputError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise InputError(f"unsupported version {version}")
    off = _HEADER.size
    m, n = _COUNTS.unpack_from(buf, off)
    off += _COUNTS.size
    need = off + 8 * E * E + 8 * E
    if len(buf) != need:
        raise InputError(f"expected {need} bytes for E={E}, got {len(buf)}")
    alpha = np.frombuffer(buf, dtype="<f8", count=E * E, offset=off).reshape(E, E).copy()
    beta = np.frombuffer(buf, dtype="<f8", count=E, offset=off + 8 * E * E).copy()
    return GpState(alpha=alpha, beta=beta, m=m, n=n)


def save_state(state: GpState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(state_to_bytes(state))


def load_state(path) -> GpState:
    with open(path, "rb") as fh:
        return state_from_bytes(fh.read())
