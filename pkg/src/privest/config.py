"""TOML configuration: schema validation, defaults, and model assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError
from .model import (
    LinGaussDynamics,
    MeasurementModel,
    PrivateChain,
    Quantizer,
    SystemModel,
    Tessellation,
)
from .trainer import TrainConfig

_SCHEMA = {
    "system": {"a", "b", "c", "sigma_w", "sigma_v", "y_states", "transition", "y0", "x0"},
    "quantizer": {"delta", "z_min", "z_max"},
    "tessellation": {"delta_x", "x_min", "x_max"},
    "horizon": {"T"},
    "train": {"lambda", "K", "alpha", "beta", "gamma", "d", "d_c", "inner_iters",
              "outer_iters", "tol", "baseline", "variant"},
    "adversary": {"mode", "sigma_adv", "smoothing"},
    "seed": {"master"},
}

_TRAIN_DEFAULTS = {
    "lambda": 0.0,
    "K": 256,
    "alpha": 1e-2,
    "beta": 1e-2,
    "gamma": 1e-3,
    "d": 2,
    "d_c": 2,
    "inner_iters": 200,
    "outer_iters": 2000,
    "tol": 1e-4,
    "baseline": True,
    "variant": "present",
}

_ADVERSARY_DEFAULTS = {"mode": "table", "sigma_adv": None, "smoothing": 1.0}


@dataclass
class Config:
    """Validated configuration with assembled model objects."""

    system: SystemModel
    horizon: int
    train: TrainConfig
    window_depth: int
    critic_window: int
    adversary: dict
    master_seed: int
    raw: dict

    def train_config(self, lam: float | None = None, master_seed: int | None = None) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            lam=t["lambda"] if lam is None else float(lam),
            n_rollouts=int(t["K"]),
            alpha=float(t["alpha"]),
            beta=float(t["beta"]),
            gamma=float(t["gamma"]),
            inner_iters=int(t["inner_iters"]),
            inner_tol=float(t["tol"]),
            outer_iters=int(t["outer_iters"]),
            outer_tol=float(t["tol"]),
            baseline=bool(t["baseline"]),
            variant=str(t["variant"]),
            master_seed=self.master_seed if master_seed is None else int(master_seed),
        )


def _check_keys(doc: dict):
    for section, content in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(content, dict):
            raise ConfigError(f"config section [{section}] must be a table")
        for key in content:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")


def _require(doc: dict, section: str, key: str):
    try:
        return doc[section][key]
    except KeyError:
        raise ConfigError(f"missing required config key {section}.{key}") from None


def load_config(path: str, seed_override: int | None = None) -> Config:
    """Parse and validate a TOML configuration file.

    Unknown sections or keys are rejected with their path; omitted optional
    sections fall back to the documented defaults.
    """
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return config_from_dict(doc, seed_override=seed_override)


def config_from_dict(doc: dict, seed_override: int | None = None) -> Config:
    _check_keys(doc)
    sys_t = doc.get("system", {})
    for key in ("a", "b", "c", "sigma_w", "sigma_v", "y_states", "transition"):
        if key not in sys_t:
            raise ConfigError(f"missing required config key system.{key}")
    y_states = [int(v) for v in sys_t["y_states"]]
    transition = np.asarray(sys_t["transition"], dtype=float)
    if transition.shape != (len(y_states), len(y_states)):
        raise ConfigError("system.transition shape does not match system.y_states")
    initial = sys_t.get("y0")
    chain = PrivateChain.from_transition(
        y_states, transition, None if initial is None else np.asarray(initial, float))
    quant_t = doc.get("quantizer", {})
    tess_t = doc.get("tessellation", {})
    for sec, keys in (("quantizer", ("delta", "z_min", "z_max")),
                      ("tessellation", ("delta_x", "x_min", "x_max"))):
        for key in keys:
            if key not in doc.get(sec, {}):
                raise ConfigError(f"missing required config key {sec}.{key}")
    system = SystemModel(
        chain=chain,
        dynamics=LinGaussDynamics(a=float(sys_t["a"]), b=float(sys_t["b"]),
                                  sigma_w=float(sys_t["sigma_w"])),
        measurement=MeasurementModel(c=float(sys_t["c"]), sigma_v=float(sys_t["sigma_v"])),
        quantizer=Quantizer(float(quant_t["delta"]), float(quant_t["z_min"]),
                            float(quant_t["z_max"])),
        tessellation=Tessellation(float(tess_t["delta_x"]), float(tess_t["x_min"]),
                                  float(tess_t["x_max"])),
        x0=float(sys_t.get("x0", 0.0)),
    )
    horizon = int(doc.get("horizon", {}).get("T", 64))
    if horizon < 0:
        raise ConfigError("horizon.T must be nonnegative")
    train = dict(_TRAIN_DEFAULTS)
    train.update(doc.get("train", {}))
    if train["variant"] not in ("past", "present"):
        raise ConfigError(f"train.variant must be 'past' or 'present', got {train['variant']!r}")
    adversary = dict(_ADVERSARY_DEFAULTS)
    adversary.update(doc.get("adversary", {}))
    if adversary["mode"] not in ("gaussian", "table"):
        raise ConfigError(f"adversary.mode must be 'gaussian' or 'table', got {adversary['mode']!r}")
    master_seed = int(doc.get("seed", {}).get("master", 0))
    if seed_override is not None:
        master_seed = int(seed_override)
    normalized = {"train": train, "adversary": adversary}
    cfg = Config(
        system=system,
        horizon=horizon,
        train=None,  # filled below once raw is attached
        window_depth=int(train["d"]),
        critic_window=int(train["d_c"]),
        adversary=adversary,
        master_seed=master_seed,
        raw=normalized,
    )
    cfg.train = cfg.train_config()
    return cfg
