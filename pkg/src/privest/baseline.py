"""Classical grid-MMSE estimation and the additive-noise privacy mechanism.

The baseline estimator is the conditional mean of the state given the
quantized measurement history, computed exactly on the finite surrogate by a
forward filter over the (private value, state cell) product chain.  Privacy
is then bought by perturbing the estimates with zero-mean Gaussian noise;
``baseline_sweep`` traces the resulting distortion/adversary-accuracy curve.
"""

from __future__ import annotations

import numpy as np

from .adversary import accuracy, decode_batch, gaussian_decoder
from .errors import ConfigError, ImpossibleObservationError
from .finite import FiniteSystem
from .model import SystemModel, sample_open_loop
from .seeding import derive_key, substream


def grid_mmse(fs: FiniteSystem, z_cells: np.ndarray) -> np.ndarray:
    """Conditional means E[X_t | measurement cells up to t] on the grid.

    Accepts one sequence (T+1,) or a batch (K, T+1); returns matching shape.
    """
    obs = np.asarray(z_cells, dtype=int)
    single = obs.ndim == 1
    if single:
        obs = obs[None, :]
    k, n_t = obs.shape
    alpha = (fs.mu_y0[None, :, None] * fs.mu_x0[None, None, :]
             * fs.pz.T[obs[:, 0]][:, None, :])
    out = np.empty((k, n_t))
    for t in range(n_t):
        norm = alpha.sum(axis=(1, 2))
        if np.any(norm <= 0):
            raise ImpossibleObservationError(f"measurement at t={t} has zero probability")
        alpha /= norm[:, None, None]
        out[:, t] = alpha.sum(axis=1) @ fs.centers
        if t + 1 < n_t:
            # predict through P(y'|y) P(x'|x, y), then correct with the next cell
            pred = np.einsum("kyx,yv,xwy->kvw", alpha, fs.py, fs.px)
            alpha = pred * fs.pz.T[obs[:, t + 1]][:, None, :]
    return out[0] if single else out


def perturb(estimates: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add iid zero-mean Gaussian noise of standard deviation sigma."""
    if sigma < 0:
        raise ConfigError("sigma must be nonnegative")
    estimates = np.asarray(estimates, dtype=float)
    if sigma == 0:
        return estimates.copy()
    return estimates + sigma * rng.standard_normal(estimates.shape)


def baseline_sweep(system: SystemModel, fs: FiniteSystem, sigmas, horizon: int,
                   n_rollouts: int, master_seed: int,
                   sigma_adv: float | None = None) -> list[dict]:
    """Distortion and adversary accuracy of the additive-noise mechanism.

    For each noise level: sample rollouts, filter to the grid-MMSE estimate,
    perturb, and decode with the Gaussian-emission adversary whose scale
    combines the perturbation with the measurement noise
    (sqrt(sigma^2 + sigma_v^2) unless overridden).  Rollouts are drawn from
    the same substreams for every sigma so the sweep is smooth in sigma.
    """
    if len(list(sigmas)) == 0:
        raise ConfigError("noise grid must be nonempty")
    rows = []
    for i, sigma in enumerate(sigmas):
        y_idx, x, _, z_cell, _ = sample_open_loop(
            system, horizon, derive_key(master_seed, 0), n_rollouts)
        mmse = grid_mmse(fs, z_cell)
        noisy = perturb(mmse, float(sigma), substream(master_seed, 1, i))
        s_adv = sigma_adv if sigma_adv is not None else float(
            np.hypot(sigma, system.measurement.sigma_v))
        decoder = gaussian_decoder(fs, s_adv)
        y_hat = decode_batch(decoder, noisy)
        labels = np.asarray(system.chain.states)
        rows.append({
            "sigma": float(sigma),
            "distortion": float(((x - noisy) ** 2).sum(axis=1).mean()),
            "accuracy": accuracy(labels[y_hat], labels[y_idx]),
        })
    return rows
