"""Maximum-likelihood inference of the private path from shared observations.

The adversary decodes with a hidden Markov model over the product states
(private value, state-grid cell): transitions combine the private chain with
the state kernel, and emissions are either a Gaussian density evaluated at
the cell centers (continuous observations such as raw or noise-perturbed
estimates) or an empirical table estimated from held-out rollouts
(categorical privacy-aware outputs).  Decoding is exact joint-path maximum
likelihood (Viterbi) with deterministic tie-breaking toward the lower state
index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ImpossibleObservationError
from .finite import FiniteSystem

_EMISSION_FLOOR = 1e-12


@dataclass(frozen=True)
class DecoderHMM:
    """Product-chain decoder.

    ``log_trans[s, s']`` over hidden states s = y * nx + x_cell; emissions
    are resolved per mode when decoding.
    """

    ny: int
    nx: int
    log_trans: np.ndarray
    log_init: np.ndarray
    mode: str                      # "gaussian" | "table"
    centers: np.ndarray | None = None
    sigma_adv: float | None = None
    table: np.ndarray | None = None   # (n_states, n_obs) for mode "table"

    @property
    def n_states(self) -> int:
        return self.ny * self.nx

    def log_emission(self, obs: np.ndarray) -> np.ndarray:
        """(len(obs), n_states) log-likelihood columns for one sequence."""
        obs = np.asarray(obs)
        if self.mode == "gaussian":
            diff = obs[:, None] - np.tile(self.centers, self.ny)[None, :]
            dens = np.exp(-0.5 * (diff / self.sigma_adv) ** 2) / (
                self.sigma_adv * np.sqrt(2 * np.pi)
            )
            return np.log(np.maximum(dens, _EMISSION_FLOOR))
        if self.mode == "table":
            return np.log(np.maximum(self.table[:, obs.astype(int)].T, _EMISSION_FLOOR))
        raise ConfigError(f"unknown emission mode {self.mode!r}")


def _product_transitions(fs: FiniteSystem) -> tuple[np.ndarray, np.ndarray]:
    ny, nx = fs.ny, fs.nx
    # hidden (y, x) -> (y', x'): P(y'|y) * P(x'|x, y)
    trans = np.einsum("yv,xwy->yxvw", fs.py, fs.px).reshape(ny * nx, ny * nx)
    init = (fs.mu_y0[:, None] * fs.mu_x0[None, :]).reshape(ny * nx)
    with np.errstate(divide="ignore"):
        return np.log(np.maximum(trans, 0.0)), np.log(np.maximum(init, 0.0))


def gaussian_decoder(fs: FiniteSystem, sigma_adv: float) -> DecoderHMM:
    """Decoder for continuous observations centered on the state-cell value."""
    if sigma_adv <= 0:
        raise ConfigError("sigma_adv must be positive")
    log_trans, log_init = _product_transitions(fs)
    return DecoderHMM(ny=fs.ny, nx=fs.nx, log_trans=log_trans, log_init=log_init,
                      mode="gaussian", centers=fs.centers, sigma_adv=float(sigma_adv))


def estimate_emission_table(x_cells: np.ndarray, obs_cells: np.ndarray, nx: int,
                            n_obs: int, smoothing: float = 1.0) -> np.ndarray:
    """Laplace-smoothed empirical table P(observation cell | state cell)."""
    counts = np.zeros((nx, n_obs))
    np.add.at(counts, (x_cells.reshape(-1), obs_cells.reshape(-1)), 1.0)
    counts += smoothing
    return counts / counts.sum(axis=1, keepdims=True)


def empirical_decoder(fs: FiniteSystem, x_cells: np.ndarray, obs_cells: np.ndarray,
                      n_obs: int, smoothing: float = 1.0) -> DecoderHMM:
    """Decoder whose emissions are estimated from held-out rollouts."""
    table_x = estimate_emission_table(x_cells, obs_cells, fs.nx, n_obs, smoothing)
    table = np.tile(table_x, (fs.ny, 1))
    log_trans, log_init = _product_transitions(fs)
    return DecoderHMM(ny=fs.ny, nx=fs.nx, log_trans=log_trans, log_init=log_init,
                      mode="table", table=table)


def viterbi(hmm: DecoderHMM, obs: np.ndarray) -> dict:
    """Exact ML hidden path for one observation sequence.

    Returns the decoded private path (projection of the hidden path), the
    hidden path itself, and the joint log-likelihood.  Ties break toward the
    lower state index.
    """
    log_e = hmm.log_emission(np.asarray(obs))
    n_t, n_s = log_e.shape
    if not np.isfinite(log_e).any(axis=1).all():
        raise ImpossibleObservationError("an observation has zero likelihood everywhere")
    score = hmm.log_init + log_e[0]
    back = np.empty((n_t, n_s), dtype=int)
    for t in range(1, n_t):
        cand = score[:, None] + hmm.log_trans
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(n_s)] + log_e[t]
    path = np.empty(n_t, dtype=int)
    path[-1] = int(np.argmax(score))
    for t in range(n_t - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return {
        "y_path": path // hmm.nx,
        "hidden_path": path,
        "log_likelihood": float(score[path[-1]]),
    }


def decode_batch(hmm: DecoderHMM, obs: np.ndarray) -> np.ndarray:
    """Viterbi-decoded private paths for a (K, T+1) observation batch."""
    return np.stack([viterbi(hmm, row)["y_path"] for row in np.asarray(obs)])


def accuracy(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Fraction of time steps with correctly inferred private value."""
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise ConfigError("decoded and true paths must have equal length")
    return float((y_hat == y).mean())


def misdetections(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Indicator series 1{decoded != true} per time step."""
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise ConfigError("decoded and true paths must have equal length")
    return (y_hat != y).astype(int)
