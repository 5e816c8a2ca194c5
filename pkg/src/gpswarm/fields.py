"""Ground-truth environmental fields: synthetic Gaussian-bump maps (static or
drifting) and station-dataset interpolants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .gp import NoiseModel


class EnvironmentField:
    """Interface: field_eval(x, t) finite on the domain and simulated times."""

    kind = "abstract"

    def field_eval(self, x, t: float = 0.0):
        raise NotImplementedError


@dataclass
class BumpField(EnvironmentField):
    """Sum of Gaussian bumps; a common drift velocity makes it time-varying,
    so field(x, t) = field(x - drift*t, 0)."""

    centers: np.ndarray      # (B, d)
    widths: np.ndarray       # (B,)
    weights: np.ndarray      # (B,)
    drift: np.ndarray | None = None

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.widths = np.atleast_1d(np.asarray(self.widths, dtype=float))
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if self.drift is not None:
            self.drift = np.asarray(self.drift, dtype=float)

    @property
    def kind(self):
        return "synthetic-static" if self.drift is None else "synthetic-dynamic"

    def field_eval(self, x, t: float = 0.0):
        p = np.asarray(x, dtype=float)
        single = p.ndim == 1
        pts = np.atleast_2d(p)
        if self.centers.shape[0] == 0:
            out = np.zeros(pts.shape[0])
            return float(out[0]) if single else out
        centers = self.centers
        if self.drift is not None:
            centers = centers + self.drift * t
        diff = pts[:, None, :] - centers[None, :, :]
        q = np.sum(diff * diff, axis=-1) / (2.0 * self.widths ** 2)
        out = np.exp(-q) @ self.weights
        return float(out[0]) if single else out


@dataclass
class StationField(EnvironmentField):
    """Inverse-distance-weighted (power 2) spatial interpolation of station
    values, linear in time between snapshots, constant outside the time range.
    Exact at station locations; missing values drop out of the IDW sum."""

    positions: np.ndarray    # (S, d)
    times: np.ndarray        # (K,) strictly increasing
    values: np.ndarray       # (K, S) with NaN for missing

    kind = "dataset"

    def _snapshot(self, t: float) -> np.ndarray:
        times = self.times
        if t <= times[0]:
            return self.values[0]
        if t >= times[-1]:
            return self.values[-1]
        hi = int(np.searchsorted(times, t, side="right"))
        lo = hi - 1
        w = (t - times[lo]) / (times[hi] - times[lo])
        a, b = self.values[lo], self.values[hi]
        # a missing endpoint falls back to the other one
        out = np.where(np.isnan(a), b, np.where(np.isnan(b), a, (1 - w) * a + w * b))
        return out

    def field_eval(self, x, t: float = 0.0):
        p = np.asarray(x, dtype=float)
        single = p.ndim == 1
        pts = np.atleast_2d(p)
        vals = self._snapshot(float(t))
        ok = ~np.isnan(vals)
        if not np.any(ok):
            raise InputError(f"no station has a value at t={t}")
        pos = self.positions[ok]
        v = vals[ok]
        diff = pts[:, None, :] - pos[None, :, :]
        d2 = np.sum(diff * diff, axis=-1)
        out = np.empty(pts.shape[0])
        for i in range(pts.shape[0]):
            hit = d2[i] <= 1e-18
            if np.any(hit):
                out[i] = v[np.argmax(hit)]
            else:
                w = 1.0 / d2[i]
                out[i] = float(w @ v / w.sum())
        return float(out[0]) if single else out


def field_eval(env: EnvironmentField, x, t: float, bounds=None):
    """Ground-truth value at x; raises when x leaves the given bounds."""
    if bounds is not None:
        b = np.asarray(bounds, dtype=float)
        p = np.atleast_2d(np.asarray(x, dtype=float))
        if np.any(p < b[:, 0]) or np.any(p > b[:, 1]):
            raise InputError(f"query outside the domain bounds")
    return env.field_eval(x, t)


def measure(env: EnvironmentField, x, t: float, noise: NoiseModel, rng) -> float:
    """One noisy sample y = f(x) + v, v ~ N(0, sigma_v^2) from the caller's
    per-agent stream."""
    return float(env.field_eval(x, t)) + rng.normal(0.0, np.sqrt(noise.sigma_v_sq))


def make_bump_field(bounds, rng, n_bumps=None, amplitude: float = 1.0,
                    drift=None) -> BumpField:
    """Seeded synthetic field: 3..6 bumps with widths tied to the domain span
    and peak weights rescaled so max |f| over a probe grid equals `amplitude`."""
    bounds = np.asarray(bounds, dtype=float)
    d = bounds.shape[0]
    span = bounds[:, 1] - bounds[:, 0]
    nb = int(n_bumps) if n_bumps is not None else int(rng.integers(3, 7))
    centers = bounds[:, 0] + rng.random((nb, d)) * span
    widths = (0.10 + 0.15 * rng.random(nb)) * span.min()
    weights = rng.uniform(-1.0, 1.0, nb)
    weights[rng.integers(0, nb)] = 1.0      # ensure a dominant peak
    f = BumpField(centers=centers, widths=widths, weights=weights,
                  drift=None if drift is None else np.asarray(drift, dtype=float))
    axes = [np.linspace(lo, hi, 41) for lo, hi in bounds]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    peak = np.abs(f.field_eval(grid, 0.0)).max()
    if peak > 0:
        f.weights = f.weights * (amplitude / peak)
    return f
