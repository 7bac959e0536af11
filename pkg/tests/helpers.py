"""Shared fixtures-by-hand: random enumerable instances and tiny systems."""

from __future__ import annotations

import numpy as np

from privest.finite import FiniteSystem, make_distortion_table
from privest.model import (
    LinGaussDynamics,
    MeasurementModel,
    PrivateChain,
    Quantizer,
    SystemModel,
    Tessellation,
)
from privest.policy import MlpPolicy, TabularPolicy


def prob_rows(rng: np.random.Generator, shape, floor: float = 0.05) -> np.ndarray:
    a = rng.random(shape) + floor
    return a / a.sum(axis=-1, keepdims=True)


def random_finite_system(rng: np.random.Generator, ny=2, nx=2, nz=2) -> FiniteSystem:
    return FiniteSystem(
        py=prob_rows(rng, (ny, ny)),
        px=np.moveaxis(prob_rows(rng, (ny, nx, nx)), 0, -1),
        pz=prob_rows(rng, (nx, nz)),
        mu_y0=prob_rows(rng, (ny,)),
        mu_x0=prob_rows(rng, (nx,)),
        centers=np.linspace(0.0, 1.0, nx),
    )


def random_tabular_policy(rng: np.random.Generator, nz: int, m: int, depth: int,
                          scale: float = 1.0) -> TabularPolicy:
    pol = TabularPolicy(depth, nz, m)
    pol.logits = scale * rng.standard_normal(pol.logits.shape)
    return pol


def random_mlp_policy(rng: np.random.Generator, nz: int, m: int, depth: int,
                      hidden: int = 8) -> MlpPolicy:
    pol = MlpPolicy.create(depth, nz, m, rng, hidden=hidden, scale=0.8)
    pol.b1 = 0.3 * rng.standard_normal(pol.b1.shape)
    pol.b2 = 0.3 * rng.standard_normal(pol.b2.shape)
    return pol


def tiny_system() -> SystemModel:
    """Two private states, two measurement cells, two output cells."""
    return SystemModel(
        chain=PrivateChain.from_transition([0, 1], [[0.7, 0.3], [0.4, 0.6]]),
        dynamics=LinGaussDynamics(a=0.5, b=1.0, sigma_w=0.6),
        measurement=MeasurementModel(c=1.0, sigma_v=0.5),
        quantizer=Quantizer(1.5, -1.0, 2.0),
        tessellation=Tessellation(1.5, -1.0, 2.0),
        x0=0.3,
    )


def uniform_distortion(fs: FiniteSystem, m_centers) -> np.ndarray:
    return make_distortion_table(fs.centers, np.asarray(m_centers))
