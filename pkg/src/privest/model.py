"""System model: private Markov chain, conditional-linear-Gaussian dynamics,
measurement channel, quantizer, output tessellation, and closed-loop sampling.

The private process is a finite Markov chain Y.  The scalar state evolves as

    x[t+1] = a * x[t] + b * y[t] + w[t],      w ~ N(0, sigma_w^2)
    z[t]   = c * x[t] + v[t],                 v ~ N(0, sigma_v^2)

The estimator sees the quantizer cell of z[t] and emits a tessellation cell.
All sampling is driven by per-rollout Philox substreams (see `seeding`), so a
(master seed, configuration) pair reproduces batches bit-identically in any
execution order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .seeding import derive_key, substream

_ATOL = 1e-12


def _as_prob_matrix(rows, name: str) -> np.ndarray:
    m = np.asarray(rows, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"{name} must be a square matrix, got shape {m.shape}")
    if np.any(m < -_ATOL) or np.any(m > 1 + _ATOL):
        raise ConfigError(f"{name} entries must lie in [0, 1]")
    bad = np.where(np.abs(m.sum(axis=1) - 1.0) > _ATOL)[0]
    if bad.size:
        raise ConfigError(f"{name} row {bad[0]} sums to {m[bad[0]].sum()!r}, not 1")
    return m


@dataclass(frozen=True)
class PrivateChain:
    """First-order Markov private process.

    Parameters
    ----------
    states : tuple of int
        Numeric labels (the values that enter the dynamics through ``b * y``).
    transition : ndarray, shape (ny, ny)
        Row-stochastic matrix, ``transition[i, j] = P(Y[t+1]=j | Y[t]=i)``.
    initial : ndarray, shape (ny,)
        Distribution of Y[0].
    """

    states: tuple
    transition: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))
        t = _as_prob_matrix(self.transition, "transition")
        if t.shape[0] != len(self.states):
            raise ConfigError("transition size does not match number of states")
        init = np.asarray(self.initial, dtype=float)
        if init.shape != (len(self.states),):
            raise ConfigError("initial distribution has wrong length")
        if np.any(init < -_ATOL) or abs(init.sum() - 1.0) > _ATOL:
            raise ConfigError("initial distribution must be a probability vector")
        t.setflags(write=False)
        init.setflags(write=False)
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "initial", init)

    @property
    def n(self) -> int:
        return len(self.states)

    @staticmethod
    def stationary_distribution(transition: np.ndarray) -> np.ndarray:
        """Stationary distribution of a row-stochastic matrix.

        Returns the unique unit-eigenvalue left eigenvector when one exists;
        falls back to the uniform distribution otherwise.
        """
        t = np.asarray(transition, dtype=float)
        n = t.shape[0]
        vals, vecs = np.linalg.eig(t.T)
        idx = np.where(np.abs(vals - 1.0) < 1e-9)[0]
        if idx.size != 1:
            return np.full(n, 1.0 / n)
        v = np.real(vecs[:, idx[0]])
        v = np.abs(v)
        s = v.sum()
        if s <= 0:
            return np.full(n, 1.0 / n)
        return v / s

    @classmethod
    def from_transition(cls, states, transition, initial=None) -> "PrivateChain":
        """Build a chain; Y[0] defaults to the stationary distribution."""
        t = _as_prob_matrix(transition, "transition")
        if initial is None:
            initial = cls.stationary_distribution(t)
        return cls(states=tuple(states), transition=t, initial=np.asarray(initial, float))


@dataclass(frozen=True)
class LinGaussDynamics:
    """Scalar conditional-linear-Gaussian state update x' = a x + b y + w."""

    a: float
    b: float
    sigma_w: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ConfigError("dynamics coefficients must be finite")
        if not self.sigma_w > 0:
            raise ConfigError("sigma_w must be positive")


@dataclass(frozen=True)
class MeasurementModel:
    """Scalar measurement z = c x + v."""

    c: float
    sigma_v: float

    def __post_init__(self):
        if not self.sigma_v > 0:
            raise ConfigError("sigma_v must be positive")


class _UniformCells:
    """Shared behaviour of the measurement quantizer and output tessellation.

    Cells are half-open intervals [lo + i*width, lo + (i+1)*width) with values
    below/above the bounds clipped to the first/last cell; centers sit at
    lo + (i + 0.5) * width.
    """

    def __init__(self, width: float, lo: float, hi: float, n: int):
        if not width > 0:
            raise ConfigError("cell width must be positive")
        if n < 1:
            raise ConfigError("need at least one cell")
        if abs((hi - lo) - n * width) > _ATOL * max(1.0, abs(hi), abs(lo)):
            raise ConfigError(f"bounds [{lo}, {hi}] do not equal {n} cells of width {width}")
        self.width = float(width)
        self.lo = float(lo)
        self.hi = float(hi)
        self.n = int(n)
        self.centers = self.lo + (np.arange(self.n) + 0.5) * self.width
        self.centers.setflags(write=False)

    @property
    def edges(self) -> np.ndarray:
        return self.lo + np.arange(self.n + 1) * self.width

    def cell_of(self, value):
        """Cell index of a value (array-friendly), clipped to [0, n-1]."""
        idx = np.floor((np.asarray(value) - self.lo) / self.width).astype(int)
        return np.clip(idx, 0, self.n - 1)

    def center(self, idx):
        return self.centers[np.asarray(idx)]


class Quantizer(_UniformCells):
    """Uniform measurement quantizer with clipping at the bounds."""

    def __init__(self, delta: float, z_min: float, z_max: float, n_cells: int | None = None):
        if n_cells is None:
            n_cells = int(round((z_max - z_min) / delta))
        super().__init__(delta, z_min, z_max, n_cells)

    @property
    def delta(self) -> float:
        return self.width


class Tessellation(_UniformCells):
    """Uniform tessellation of the state space; the estimator outputs cells."""

    def __init__(self, delta_x: float, x_min: float, x_max: float, n_cells: int | None = None):
        if n_cells is None:
            n_cells = int(round((x_max - x_min) / delta_x))
        super().__init__(delta_x, x_min, x_max, n_cells)

    @property
    def delta_x(self) -> float:
        return self.width


@dataclass(frozen=True)
class SystemModel:
    """Bundle of every model component plus the initial state constant."""

    chain: PrivateChain
    dynamics: LinGaussDynamics
    measurement: MeasurementModel
    quantizer: Quantizer
    tessellation: Tessellation
    x0: float = 0.0


def sample_private_path(chain: PrivateChain, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Sample y[0..T] from the chain; returns state labels.

    y[0] follows the chain's initial distribution and each step follows the
    transition row of the current state.
    """
    if horizon < 0:
        raise ConfigError("horizon must be nonnegative")
    u = rng.random(horizon + 1)
    idx = np.empty(horizon + 1, dtype=int)
    cum_init = np.cumsum(chain.initial)
    cum_rows = np.cumsum(chain.transition, axis=1)
    idx[0] = np.searchsorted(cum_init, u[0], side="right")
    for t in range(horizon):
        idx[t + 1] = np.searchsorted(cum_rows[idx[t]], u[t + 1], side="right")
    idx = np.minimum(idx, chain.n - 1)
    return np.asarray(chain.states)[idx]


def step_dynamics(dyn: LinGaussDynamics, x: float, y_label: float, rng: np.random.Generator) -> float:
    """One state transition a*x + b*y + w with w ~ N(0, sigma_w^2)."""
    return dyn.a * x + dyn.b * y_label + dyn.sigma_w * rng.standard_normal()


def measure_and_quantize(meas: MeasurementModel, quantizer: Quantizer, x: float,
                         rng: np.random.Generator) -> tuple[float, int]:
    """Noisy measurement of x and its quantizer cell index."""
    z = meas.c * x + meas.sigma_v * rng.standard_normal()
    return z, int(quantizer.cell_of(z))


@dataclass
class TrajectoryBatch:
    """K closed-loop rollouts over t = 0..T.

    Arrays are (K, T+1); ``y`` holds chain labels, ``y_idx`` the corresponding
    chain state indices.  ``seeds`` records the derived per-rollout key.
    """

    y: np.ndarray
    y_idx: np.ndarray
    x: np.ndarray
    z: np.ndarray
    z_cell: np.ndarray
    xhat_cell: np.ndarray
    seeds: np.ndarray
    master_seed: int
    pad_z: int = field(default=-1)
    pad_x: int = field(default=-1)

    @property
    def n_rollouts(self) -> int:
        return self.y.shape[0]

    @property
    def horizon(self) -> int:
        return self.y.shape[1] - 1


def draw_rollout_randoms(master_seed: int, n_rollouts: int, horizon: int) -> dict:
    """Pre-draw every random block used by a batch of rollouts.

    Per rollout the substream is consumed in a fixed order: chain uniforms
    (T+1), process noise (T), measurement noise (T+1), action uniforms (T+1).
    This ordering is part of the reproducibility contract.
    """
    T = horizon
    u_chain = np.empty((n_rollouts, T + 1))
    w = np.empty((n_rollouts, max(T, 0)))
    v = np.empty((n_rollouts, T + 1))
    u_act = np.empty((n_rollouts, T + 1))
    seeds = np.empty(n_rollouts, dtype=np.uint64)
    for k in range(n_rollouts):
        rng = substream(master_seed, k)
        seeds[k] = derive_key(master_seed, k)
        u_chain[k] = rng.random(T + 1)
        if T > 0:
            w[k] = rng.standard_normal(T)
        v[k] = rng.standard_normal(T + 1)
        u_act[k] = rng.random(T + 1)
    return {"u_chain": u_chain, "w": w, "v": v, "u_act": u_act, "seeds": seeds}


def _sample_rows(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse-CDF sample per row; cum_rows (K, n), u (K,)
    idx = (u[:, None] >= cum_rows).sum(axis=1)
    return np.minimum(idx, cum_rows.shape[1] - 1)


def sample_open_loop(system: SystemModel, horizon: int, master_seed: int,
                     n_rollouts: int, randoms: dict | None = None):
    """Sample (y_idx, x, z, z_cell) paths for all rollouts, no estimator.

    Uses the same substreams and draw order as `rollout`, so the open-loop
    part of a closed-loop batch with the same seed is identical.
    """
    T = horizon
    K = n_rollouts
    r = randoms if randoms is not None else draw_rollout_randoms(master_seed, K, T)
    chain, dyn, meas, q = system.chain, system.dynamics, system.measurement, system.quantizer

    cum_init = np.cumsum(chain.initial)[None, :].repeat(K, axis=0)
    cum_rows = np.cumsum(chain.transition, axis=1)
    labels = np.asarray(chain.states, dtype=float)

    y_idx = np.empty((K, T + 1), dtype=int)
    x = np.empty((K, T + 1))
    z = np.empty((K, T + 1))

    y_idx[:, 0] = _sample_rows(cum_init, r["u_chain"][:, 0])
    x[:, 0] = system.x0
    z[:, 0] = meas.c * x[:, 0] + meas.sigma_v * r["v"][:, 0]
    for t in range(T):
        x[:, t + 1] = dyn.a * x[:, t] + dyn.b * labels[y_idx[:, t]] + dyn.sigma_w * r["w"][:, t]
        y_idx[:, t + 1] = _sample_rows(cum_rows[y_idx[:, t]], r["u_chain"][:, t + 1])
        z[:, t + 1] = meas.c * x[:, t + 1] + meas.sigma_v * r["v"][:, t + 1]
    z_cell = q.cell_of(z)
    return y_idx, x, z, z_cell, r


def rollout(system: SystemModel, policy, horizon: int, master_seed: int,
            n_rollouts: int) -> TrajectoryBatch:
    """Closed-loop batch: at each t the policy emits a tessellation cell.

    The policy consumes a window of the last d+1 measurement cells and the
    last d output cells (pad symbol before the window fills; see `policy`).
    Rollout k uses the substream derived from (master_seed, k), so batches
    are bit-identical for identical (configuration, master_seed).
    """
    if policy.n_outputs != system.tessellation.n:
        raise ConfigError("policy output count does not match tessellation cells")
    if getattr(policy, "n_z_cells", system.quantizer.n) != system.quantizer.n:
        raise ConfigError("policy window alphabet does not match quantizer cells")
    T = horizon
    K = n_rollouts
    y_idx, x, z, z_cell, r = sample_open_loop(system, T, master_seed, K)

    d = policy.window_depth
    pad_z = system.quantizer.n
    pad_x = policy.n_outputs
    z_win = np.full((K, d + 1), pad_z, dtype=int)
    x_win = np.full((K, max(d, 1)), pad_x, dtype=int) if d > 0 else np.empty((K, 0), dtype=int)
    xhat = np.empty((K, T + 1), dtype=int)
    for t in range(T + 1):
        if d > 0:
            z_win[:, :-1] = z_win[:, 1:]
            z_win[:, -1] = z_cell[:, t]
        else:
            z_win[:, 0] = z_cell[:, t]
        dist = policy.dist_batch(z_win, x_win)
        xhat[:, t] = _sample_rows(np.cumsum(dist, axis=1), r["u_act"][:, t])
        if d > 0:
            x_win[:, :-1] = x_win[:, 1:]
            x_win[:, -1] = xhat[:, t]
    labels = np.asarray(system.chain.states)
    return TrajectoryBatch(
        y=labels[y_idx], y_idx=y_idx, x=x, z=z, z_cell=np.asarray(z_cell),
        xhat_cell=xhat, seeds=r["seeds"], master_seed=master_seed,
        pad_z=pad_z, pad_x=pad_x,
    )


def batch_to_csv(batch: TrajectoryBatch, tessellation: Tessellation) -> str:
    """Render a batch as CSV with the canonical column set."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rollout", "t", "y", "x", "z", "z_cell", "xhat_cell", "xhat_center"])
    centers = tessellation.centers
    for k in range(batch.n_rollouts):
        for t in range(batch.horizon + 1):
            w.writerow([
                k, t, batch.y[k, t], repr(float(batch.x[k, t])), repr(float(batch.z[k, t])),
                int(batch.z_cell[k, t]), int(batch.xhat_cell[k, t]),
                repr(float(centers[batch.xhat_cell[k, t]])),
            ])
    return buf.getvalue()
