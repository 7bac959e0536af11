"""Stochastic estimation policies over tessellation cells.

A policy maps a fixed-length history window to a distribution over the M
output cells.  The window holds the last d+1 measurement cells and the last
d output cells; positions before the start of time carry a reserved pad
symbol (index N for measurement slots, index M for output slots) so early
histories never alias real cells.

Two parameterizations are provided with exact analytic gradients of
log pi(xhat | window):

* ``tabular`` -- one softmax logit row per distinct window key;
* ``mlp``     -- one-hot window slots feeding a single tanh hidden layer
  and a softmax output layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_MAX_TABULAR_KEYS = 5_000_000


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class HistoryWindow:
    """Window of the last d+1 measurement cells and last d output cells."""

    z_cells: tuple
    xhat_cells: tuple

    def __post_init__(self):
        if len(self.z_cells) != len(self.xhat_cells) + 1:
            raise ConfigError("window must hold d+1 measurement and d output symbols")

    @property
    def depth(self) -> int:
        return len(self.xhat_cells)


def window_at(z_cells, xhat_cells, t: int, depth: int, pad_z: int, pad_x: int) -> HistoryWindow:
    """Window for time t from full per-trajectory cell sequences."""
    zs = [int(z_cells[s]) if s >= 0 else pad_z for s in range(t - depth, t + 1)]
    xs = [int(xhat_cells[s]) if s >= 0 else pad_x for s in range(t - depth, t)]
    return HistoryWindow(tuple(zs), tuple(xs))


def batch_windows(z_cells: np.ndarray, xhat_cells: np.ndarray, depth: int,
                  pad_z: int, pad_x: int) -> tuple[np.ndarray, np.ndarray]:
    """All (K, T+1) windows of a batch, stacked as (K*(T+1), slot) arrays.

    Rows are ordered with t fastest within each rollout.
    """
    K, n_t = z_cells.shape
    z_win = np.empty((K, n_t, depth + 1), dtype=int)
    x_win = np.empty((K, n_t, depth), dtype=int)
    for off in range(depth + 1):
        # slot `off` holds the symbol at time t - depth + off
        shift = depth - off
        z_win[:, :shift, off] = pad_z
        z_win[:, shift:, off] = z_cells[:, : n_t - shift]
    for off in range(depth):
        shift = depth - off
        x_win[:, :shift, off] = pad_x
        x_win[:, shift:, off] = xhat_cells[:, : n_t - shift]
    return z_win.reshape(K * n_t, depth + 1), x_win.reshape(K * n_t, depth)


class _PolicyBase:
    kind = ""

    def dist(self, window: HistoryWindow) -> np.ndarray:
        z = np.asarray(window.z_cells, dtype=int)[None, :]
        x = np.asarray(window.xhat_cells, dtype=int)[None, :]
        return self.dist_batch(z, x)[0]

    def log_prob_grad(self, window: HistoryWindow, xhat: int) -> np.ndarray:
        z = np.asarray(window.z_cells, dtype=int)[None, :]
        x = np.asarray(window.xhat_cells, dtype=int)[None, :]
        grad = np.zeros_like(self.params_vector())
        self.accumulate_score(z, x, np.array([xhat]), np.ones(1), grad)
        return grad

    def _check_shapes(self, z_win: np.ndarray, x_win: np.ndarray):
        if z_win.shape[1] != self.window_depth + 1 or x_win.shape[1] != self.window_depth:
            raise ConfigError(
                f"window shaped ({z_win.shape[1]}, {x_win.shape[1]}) does not match "
                f"policy depth {self.window_depth}"
            )
        if z_win.max(initial=0) > self.n_z_cells or x_win.max(initial=0) > self.n_outputs:
            raise ConfigError("window symbol out of range for this policy")


class TabularPolicy(_PolicyBase):
    """Softmax policy with one logit row per window key.

    Keys enumerate window symbols in mixed radix, measurement slots first
    (base N+1 including the pad), then output slots (base M+1).
    """

    kind = "tabular"

    def __init__(self, depth: int, n_z_cells: int, n_outputs: int, logits: np.ndarray | None = None):
        self.window_depth = int(depth)
        self.n_z_cells = int(n_z_cells)
        self.n_outputs = int(n_outputs)
        n_keys = (n_z_cells + 1) ** (depth + 1) * (n_outputs + 1) ** depth
        if n_keys > _MAX_TABULAR_KEYS:
            raise ConfigError(f"tabular policy would need {n_keys} keys; use an mlp policy")
        self.n_keys = n_keys
        if logits is None:
            logits = np.zeros((n_keys, n_outputs))
        self.logits = np.asarray(logits, dtype=float).reshape(n_keys, n_outputs)

    def key_of(self, z_win: np.ndarray, x_win: np.ndarray) -> np.ndarray:
        key = np.zeros(z_win.shape[0], dtype=np.int64)
        for j in range(z_win.shape[1]):
            key = key * (self.n_z_cells + 1) + z_win[:, j]
        for j in range(x_win.shape[1]):
            key = key * (self.n_outputs + 1) + x_win[:, j]
        return key

    def dist_batch(self, z_win: np.ndarray, x_win: np.ndarray) -> np.ndarray:
        self._check_shapes(z_win, x_win)
        return softmax(self.logits[self.key_of(z_win, x_win)])

    def params_vector(self) -> np.ndarray:
        return self.logits.ravel().copy()

    def set_params_vector(self, flat: np.ndarray):
        self.logits = np.asarray(flat, dtype=float).reshape(self.n_keys, self.n_outputs).copy()

    def accumulate_score(self, z_win, x_win, actions, weights, out_flat: np.ndarray):
        """Add sum_i weights[i] * d log pi(actions[i] | window_i) to out_flat."""
        self._check_shapes(z_win, x_win)
        keys = self.key_of(z_win, x_win)
        probs = softmax(self.logits[keys])
        out = out_flat.reshape(self.n_keys, self.n_outputs)
        np.add.at(out, (keys, actions), weights)
        np.add.at(out, keys, -probs * weights[:, None])

    def to_checkpoint(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.window_depth,
            "M": self.n_outputs,
            "shapes": {"n_z_cells": self.n_z_cells, "logits": [self.n_keys, self.n_outputs]},
            "params": self.params_vector().tolist(),
        }


class MlpPolicy(_PolicyBase):
    """One-hidden-layer tanh network on one-hot window slots.

    The first layer is stored as an embedding table: row (slot offset +
    symbol) is that slot's contribution to the hidden pre-activation, which
    is exactly a dense layer applied to concatenated one-hots.
    """

    kind = "mlp"

    def __init__(self, depth: int, n_z_cells: int, n_outputs: int, hidden: int = 64,
                 params: dict | None = None):
        self.window_depth = int(depth)
        self.n_z_cells = int(n_z_cells)
        self.n_outputs = int(n_outputs)
        self.hidden = int(hidden)
        slots = [n_z_cells + 1] * (depth + 1) + [n_outputs + 1] * depth
        self.slot_sizes = slots
        self.slot_offsets = np.concatenate([[0], np.cumsum(slots)[:-1]]).astype(int)
        self.n_symbols = int(sum(slots))
        if params is None:
            params = {
                "w1": np.zeros((self.n_symbols, hidden)),
                "b1": np.zeros(hidden),
                "w2": np.zeros((hidden, n_outputs)),
                "b2": np.zeros(n_outputs),
            }
        self.w1 = np.asarray(params["w1"], dtype=float)
        self.b1 = np.asarray(params["b1"], dtype=float)
        self.w2 = np.asarray(params["w2"], dtype=float)
        self.b2 = np.asarray(params["b2"], dtype=float)

    @classmethod
    def create(cls, depth: int, n_z_cells: int, n_outputs: int, rng: np.random.Generator,
               hidden: int = 64, scale: float = 0.1) -> "MlpPolicy":
        p = cls(depth, n_z_cells, n_outputs, hidden)
        n_slots = len(p.slot_sizes)
        p.w1 = rng.standard_normal((p.n_symbols, hidden)) * (scale / np.sqrt(n_slots))
        p.b1 = np.zeros(hidden)
        p.w2 = rng.standard_normal((hidden, n_outputs)) * (scale / np.sqrt(hidden))
        p.b2 = np.zeros(n_outputs)
        return p

    def _slot_rows(self, z_win: np.ndarray, x_win: np.ndarray) -> np.ndarray:
        syms = np.concatenate([z_win, x_win], axis=1)
        return syms + self.slot_offsets[None, :]

    def _one_hot(self, rows: np.ndarray) -> np.ndarray:
        # (B, n_symbols) indicator matrix; BLAS-friendly for big batches
        x = np.zeros((rows.shape[0], self.n_symbols))
        ar = np.arange(rows.shape[0])
        for j in range(rows.shape[1]):
            x[ar, rows[:, j]] += 1.0
        return x

    def _forward(self, rows: np.ndarray, one_hot: np.ndarray | None = None):
        if one_hot is not None:
            pre = one_hot @ self.w1 + self.b1
        else:
            pre = self.b1 + self.w1[rows].sum(axis=1)
        h = np.tanh(pre)
        logits = h @ self.w2 + self.b2
        return h, softmax(logits)

    def dist_batch(self, z_win: np.ndarray, x_win: np.ndarray) -> np.ndarray:
        self._check_shapes(z_win, x_win)
        _, probs = self._forward(self._slot_rows(z_win, x_win))
        return probs

    def params_vector(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def set_params_vector(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        n1 = self.w1.size
        n2 = n1 + self.b1.size
        n3 = n2 + self.w2.size
        self.w1 = flat[:n1].reshape(self.w1.shape).copy()
        self.b1 = flat[n1:n2].copy()
        self.w2 = flat[n2:n3].reshape(self.w2.shape).copy()
        self.b2 = flat[n3:].copy()

    def accumulate_score(self, z_win, x_win, actions, weights, out_flat: np.ndarray):
        """Add sum_i weights[i] * d log pi(actions[i] | window_i) to out_flat."""
        self._check_shapes(z_win, x_win)
        rows = self._slot_rows(z_win, x_win)
        big = rows.shape[0] >= 4096
        one_hot = self._one_hot(rows) if big else None
        h, probs = self._forward(rows, one_hot)
        dlogits = -probs * weights[:, None]
        dlogits[np.arange(len(actions)), actions] += weights
        n1 = self.w1.size
        n2 = n1 + self.b1.size
        n3 = n2 + self.w2.size
        gw1 = out_flat[:n1].reshape(self.w1.shape)
        gw2 = out_flat[n2:n3].reshape(self.w2.shape)
        gw2 += h.T @ dlogits
        out_flat[n3:] += dlogits.sum(axis=0)
        dpre = (1.0 - h * h) * (dlogits @ self.w2.T)
        if big:
            gw1 += one_hot.T @ dpre
        else:
            for j in range(rows.shape[1]):
                np.add.at(gw1, rows[:, j], dpre)
        out_flat[n1:n2] += dpre.sum(axis=0)

    def to_checkpoint(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.window_depth,
            "M": self.n_outputs,
            "shapes": {
                "n_z_cells": self.n_z_cells,
                "hidden": self.hidden,
                "w1": list(self.w1.shape),
                "b1": [self.b1.size],
                "w2": list(self.w2.shape),
                "b2": [self.b2.size],
            },
            "params": self.params_vector().tolist(),
        }


def policy_dist(policy, window: HistoryWindow) -> np.ndarray:
    """Probability vector over the M output cells for one window."""
    return policy.dist(window)


def log_prob_grad(policy, window: HistoryWindow, xhat: int) -> np.ndarray:
    """Exact gradient of log pi(xhat | window) in flat parameter space."""
    return policy.log_prob_grad(window, xhat)


def policy_from_checkpoint(doc: dict):
    """Rebuild a policy from its JSON checkpoint document."""
    kind = doc.get("kind")
    d = int(doc["d"])
    m = int(doc["M"])
    shapes = doc["shapes"]
    flat = np.asarray(doc["params"], dtype=float)
    if kind == "tabular":
        pol = TabularPolicy(d, int(shapes["n_z_cells"]), m)
    elif kind == "mlp":
        pol = MlpPolicy(d, int(shapes["n_z_cells"]), m, hidden=int(shapes["hidden"]))
    else:
        raise ConfigError(f"unknown policy kind {kind!r}")
    pol.set_params_vector(flat)
    return pol
