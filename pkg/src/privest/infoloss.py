"""Variational information-loss machinery.

The per-step information loss log P(xhat_t | past outputs, y-history) minus
log P(xhat_t | past outputs) is approximated as g_t - f_t, where g and f are
trained critics.  Each critic family is fit by maximizing a variational
objective whose supremum is a sum of KL divergences and whose maximizer is
the log-density ratio plus one; the reference measure is the uniform
distribution over the M output cells, and the expectation over that uniform
variable is averaged exactly rather than sampled.

Critics come in two kinds:

* tabular-per-t -- one table per time step indexed by the full output and
  private histories (oracle instances only);
* mlp           -- one-hot inputs (time step, candidate cell, windowed
  output history, windowed private history) into a tanh hidden layer with a
  scalar head.

The ``variant`` switch selects whether g conditions on the private history
through time t (``present``) or t-1 (``past``).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .finite import decode_codes, exact_joint

_MAX_TABLE = 20_000_000


def _encode_prefix_batch(symbols: np.ndarray, base: int) -> np.ndarray:
    """Big-endian codes of (B, L) symbol rows."""
    codes = np.zeros(symbols.shape[0], dtype=np.int64)
    for j in range(symbols.shape[1]):
        codes = codes * base + symbols[:, j]
    return codes


def _y_hist_len(t: int, variant: str) -> int:
    if variant == "present":
        return t + 1
    if variant == "past":
        return t
    raise ConfigError(f"unknown variant {variant!r}")


class TabularCritic:
    """Per-time-step tables over full histories.

    With ``uses_y`` the table at time t has shape (M, M^t, ny^h) where h is
    the variant-dependent private-history length; without it the last axis is
    dropped (the f-family).
    """

    kind = "tabular"

    def __init__(self, horizon: int, n_outputs: int, ny: int | None = None,
                 variant: str = "present"):
        self.horizon = int(horizon)
        self.n_outputs = int(n_outputs)
        self.ny = None if ny is None else int(ny)
        self.variant = variant
        self.uses_y = ny is not None
        self.tables = []
        total = 0
        for t in range(self.horizon + 1):
            shape = [self.n_outputs, self.n_outputs ** t]
            if self.uses_y:
                shape.append(self.ny ** _y_hist_len(t, variant))
            total += int(np.prod(shape))
            if total > _MAX_TABLE:
                raise ConfigError("tabular critic too large; use an mlp critic")
            self.tables.append(np.zeros(shape))

    def values_t(self, t: int, xhat_hist: np.ndarray, y_hist: np.ndarray | None) -> np.ndarray:
        """(B, M) critic values for every candidate cell."""
        ap = _encode_prefix_batch(xhat_hist, self.n_outputs)
        tab = self.tables[t]
        if self.uses_y:
            yc = _encode_prefix_batch(y_hist, self.ny)
            return tab[:, ap, yc].T
        return tab[:, ap].T

    def accumulate_grad_t(self, t: int, xhat_hist, y_hist, weights_bm: np.ndarray,
                          out: list):
        ap = _encode_prefix_batch(xhat_hist, self.n_outputs)
        b, m = weights_bm.shape
        cand = np.broadcast_to(np.arange(m), (b, m))
        apg = np.broadcast_to(ap[:, None], (b, m))
        if self.uses_y:
            yc = _encode_prefix_batch(y_hist, self.ny)
            ycg = np.broadcast_to(yc[:, None], (b, m))
            np.add.at(out[t], (cand, apg, ycg), weights_bm)
        else:
            np.add.at(out[t], (cand, apg), weights_bm)

    def params_vector(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tables])

    def set_params_vector(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        pos = 0
        for i, tab in enumerate(self.tables):
            n = tab.size
            self.tables[i] = flat[pos:pos + n].reshape(tab.shape).copy()
            pos += n

    def zero_grad_like(self) -> list:
        return [np.zeros_like(t) for t in self.tables]

    def apply_grad(self, grads: list, step: float):
        for tab, g in zip(self.tables, grads):
            tab += step * g

    def to_checkpoint(self) -> dict:
        return {
            "kind": "tabular-critic",
            "d": -1,
            "M": self.n_outputs,
            "shapes": {
                "horizon": self.horizon,
                "ny": self.ny,
                "variant": self.variant,
                "tables": [list(t.shape) for t in self.tables],
            },
            "params": self.params_vector().tolist(),
        }


class MlpCritic:
    """Scalar-head tanh network on one-hot critic inputs.

    Slots: time step (T+1 symbols), candidate cell (M), the last d_c output
    cells (M+1 with pad), and, for the g-family, the variant window of d_c+1
    private symbols (ny+1 with pad).
    """

    kind = "mlp"

    def __init__(self, horizon: int, n_outputs: int, ny: int | None = None,
                 variant: str = "present", window: int = 2, hidden: int = 64):
        self.horizon = int(horizon)
        self.n_outputs = int(n_outputs)
        self.ny = None if ny is None else int(ny)
        self.variant = variant
        self.uses_y = ny is not None
        self.window = int(window)
        self.hidden = int(hidden)
        slots = [horizon + 1] + [n_outputs + 1] * self.window
        if self.uses_y:
            slots += [self.ny + 1] * (self.window + 1)
        self.hist_slot_sizes = slots
        self.hist_offsets = np.concatenate([[0], np.cumsum(slots)[:-1]]).astype(int)
        self.n_hist_symbols = int(sum(slots))
        self.w1 = np.zeros((self.n_hist_symbols, hidden))
        self.wc = np.zeros((n_outputs, hidden))  # candidate slot
        self.b1 = np.zeros(hidden)
        self.w2 = np.zeros(hidden)
        self.b2 = 0.0

    @classmethod
    def create(cls, horizon, n_outputs, rng, ny=None, variant="present", window=2,
               hidden=64, scale=0.1):
        c = cls(horizon, n_outputs, ny=ny, variant=variant, window=window, hidden=hidden)
        n_slots = len(c.hist_slot_sizes) + 1
        c.w1 = rng.standard_normal(c.w1.shape) * (scale / np.sqrt(n_slots))
        c.wc = rng.standard_normal(c.wc.shape) * (scale / np.sqrt(n_slots))
        c.w2 = rng.standard_normal(c.w2.shape) * (scale / np.sqrt(hidden))
        return c

    def _hist_rows(self, t: int, xhat_hist: np.ndarray, y_hist: np.ndarray | None) -> np.ndarray:
        b = xhat_hist.shape[0]
        d = self.window
        cols = [np.full(b, t, dtype=int)]
        pad_x = self.n_outputs
        for off in range(d):
            s = t - d + off  # symbol position in the output history (length t)
            if 0 <= s < xhat_hist.shape[1]:
                cols.append(xhat_hist[:, s])
            else:
                cols.append(np.full(b, pad_x, dtype=int))
        if self.uses_y:
            pad_y = self.ny
            h = y_hist.shape[1]
            for off in range(d + 1):
                s = h - 1 - d + off
                if 0 <= s < h:
                    cols.append(y_hist[:, s])
                else:
                    cols.append(np.full(b, pad_y, dtype=int))
        rows = np.stack(cols, axis=1)
        return rows + self.hist_offsets[None, : rows.shape[1]]

    def _forward(self, rows: np.ndarray):
        base = self.b1 + self.w1[rows].sum(axis=1)          # (B, H)
        pre = base[:, None, :] + self.wc[None, :, :]        # (B, M, H)
        h = np.tanh(pre)
        vals = h @ self.w2 + self.b2                        # (B, M)
        return h, vals

    def values_t(self, t: int, xhat_hist: np.ndarray, y_hist: np.ndarray | None) -> np.ndarray:
        _, vals = self._forward(self._hist_rows(t, xhat_hist, y_hist))
        return vals

    def zero_grad_like(self) -> dict:
        return {
            "w1": np.zeros_like(self.w1), "wc": np.zeros_like(self.wc),
            "b1": np.zeros_like(self.b1), "w2": np.zeros_like(self.w2), "b2": 0.0,
        }

    def accumulate_grad_t(self, t: int, xhat_hist, y_hist, weights_bm: np.ndarray,
                          out: dict):
        rows = self._hist_rows(t, xhat_hist, y_hist)
        h, _ = self._forward(rows)
        out["w2"] += np.einsum("bm,bmh->h", weights_bm, h)
        out["b2"] += float(weights_bm.sum())
        dpre = (1.0 - h * h) * (weights_bm[:, :, None] * self.w2[None, None, :])
        out["wc"] += dpre.sum(axis=0)
        dbase = dpre.sum(axis=1)  # (B, H)
        out["b1"] += dbase.sum(axis=0)
        gw1 = out["w1"]
        for j in range(rows.shape[1]):
            np.add.at(gw1, rows[:, j], dbase)

    def apply_grad(self, grads: dict, step: float):
        self.w1 += step * grads["w1"]
        self.wc += step * grads["wc"]
        self.b1 += step * grads["b1"]
        self.w2 += step * grads["w2"]
        self.b2 += step * grads["b2"]

    def params_vector(self) -> np.ndarray:
        return np.concatenate([
            self.w1.ravel(), self.wc.ravel(), self.b1, self.w2, [self.b2]
        ])

    def set_params_vector(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        sizes = [self.w1.size, self.wc.size, self.b1.size, self.w2.size, 1]
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        self.w1 = parts[0].reshape(self.w1.shape).copy()
        self.wc = parts[1].reshape(self.wc.shape).copy()
        self.b1 = parts[2].copy()
        self.w2 = parts[3].copy()
        self.b2 = float(parts[4][0])

    def to_checkpoint(self) -> dict:
        return {
            "kind": "mlp-critic",
            "d": self.window,
            "M": self.n_outputs,
            "shapes": {
                "horizon": self.horizon,
                "ny": self.ny,
                "variant": self.variant,
                "hidden": self.hidden,
            },
            "params": self.params_vector().tolist(),
        }


def critic_from_checkpoint(doc: dict):
    kind = doc.get("kind")
    shapes = doc["shapes"]
    ny = shapes.get("ny")
    if kind == "tabular-critic":
        c = TabularCritic(shapes["horizon"], doc["M"], ny=ny, variant=shapes["variant"])
    elif kind == "mlp-critic":
        c = MlpCritic(shapes["horizon"], doc["M"], ny=ny, variant=shapes["variant"],
                      window=int(doc["d"]), hidden=int(shapes["hidden"]))
    else:
        raise ConfigError(f"unknown critic kind {kind!r}")
    c.set_params_vector(np.asarray(doc["params"], float))
    return c


# ---------------------------------------------------------------------------
# point evaluation


def eval_g(critic, t: int, xhat: int, xhat_hist, y_hist) -> float:
    """Value of a g-family critic at one history."""
    xh = np.asarray(xhat_hist, dtype=int)[None, :]
    yh = np.asarray(y_hist, dtype=int)[None, :]
    return float(critic.values_t(t, xh, yh)[0, int(xhat)])


def eval_f(critic, t: int, xhat: int, xhat_hist) -> float:
    """Value of an f-family critic at one history."""
    xh = np.asarray(xhat_hist, dtype=int)[None, :]
    return float(critic.values_t(t, xh, None)[0, int(xhat)])


def info_loss_estimate(g_critic, f_critic, t: int, xhat: int, xhat_hist, y_hist) -> float:
    """Critic-based information loss g - f at one realized step."""
    return eval_g(g_critic, t, xhat, xhat_hist, y_hist) - eval_f(f_critic, t, xhat, xhat_hist)


def info_loss_batch(g_critic, f_critic, y_idx: np.ndarray, xhat_cell: np.ndarray) -> np.ndarray:
    """(K, T+1) array of g - f at the realized steps of a batch."""
    k, n_t = xhat_cell.shape
    out = np.empty((k, n_t))
    rows = np.arange(k)
    for t in range(n_t):
        yh = y_idx[:, : _y_hist_len(t, g_critic.variant)]
        gv = g_critic.values_t(t, xhat_cell[:, :t], yh)
        fv = f_critic.values_t(t, xhat_cell[:, :t], None)
        out[:, t] = gv[rows, xhat_cell[:, t]] - fv[rows, xhat_cell[:, t]]
    return out


# ---------------------------------------------------------------------------
# batch variational objectives (Monte-Carlo expectations)


def _objective(critic, y_idx, xhat_cell, want_grad: bool):
    k, n_t = xhat_cell.shape
    m = critic.n_outputs
    rows = np.arange(k)
    total = 0.0
    grads = critic.zero_grad_like() if want_grad else None
    for t in range(n_t):
        yh = y_idx[:, : _y_hist_len(t, critic.variant)] if critic.uses_y else None
        vals = critic.values_t(t, xhat_cell[:, :t], yh)    # (K, M)
        expc = np.exp(vals - 1.0)
        total += float(vals[rows, xhat_cell[:, t]].sum() - expc.mean(axis=1).sum()) / k
        if want_grad:
            w = -expc / (m * k)
            w[rows, xhat_cell[:, t]] += 1.0 / k
            critic.accumulate_grad_t(t, xhat_cell[:, :t], yh, w, grads)
    return total, grads


def objective_g(critic, batch) -> tuple[float, object]:
    """Variational objective of the g-family on a batch, with its gradient.

    The expectation over the uniform reference cell is averaged exactly over
    the M cells instead of sampled.
    """
    return _objective(critic, batch.y_idx, batch.xhat_cell, True)


def objective_f(critic, batch) -> tuple[float, object]:
    """Variational objective of the f-family on a batch, with its gradient."""
    return _objective(critic, batch.y_idx, batch.xhat_cell, True)


def objective_value(critic, batch) -> float:
    return _objective(critic, batch.y_idx, batch.xhat_cell, False)[0]


def ascend_critics(g_critic, f_critic, batch, alpha: float, beta: float,
                   max_iters: int, tol: float) -> dict:
    """Inner-loop gradient ascent on both critic objectives.

    Stops early when both objective improvements fall below ``tol``.
    """
    f1_prev = f2_prev = None
    iters = 0
    for it in range(max_iters):
        f1, g1 = objective_g(g_critic, batch)
        f2, g2 = objective_f(f_critic, batch)
        g_critic.apply_grad(g1, alpha)
        f_critic.apply_grad(g2, beta)
        iters = it + 1
        if f1_prev is not None and abs(f1 - f1_prev) < tol and abs(f2 - f2_prev) < tol:
            break
        f1_prev, f2_prev = f1, f2
    f1 = objective_value(g_critic, batch)
    f2 = objective_value(f_critic, batch)
    return {"f1": f1, "f2": f2, "iters": iters}


# ---------------------------------------------------------------------------
# exact-expectation fitting on enumerable instances


def _per_t_marginals(adapter, fs, horizon: int, variant: str):
    """P(y-history, output-history including xhat_t) for every t.

    Returns per-t arrays p[t] of shape (ny^h, M^t, M) with h the
    variant-dependent private-history length.
    """
    res = exact_joint(adapter, fs, horizon)
    ny, m, T = fs.ny, adapter.n_outputs, horizon
    j = res.joint.reshape((ny,) * (T + 1) + (m,) * (T + 1))
    out = []
    for t in range(T + 1):
        h = _y_hist_len(t, variant)
        keep_y = tuple(range(h))
        keep_a = tuple(T + 1 + s for s in range(t + 1))
        drop = tuple(a for a in range(2 * (T + 1)) if a not in keep_y + keep_a)
        p = j.sum(axis=drop)
        p = p.reshape(ny ** h, m ** t, m)
        out.append(np.moveaxis(p, 0, -1))  # (M^t, M, ny^h) -> rearrange below
    return [np.moveaxis(p, 1, 0) for p in out]  # (M, M^t, ny^h)


def exact_objective_g(critic: TabularCritic, marginals: list) -> tuple[float, list]:
    """Exact-expectation variational objective and gradient for tabular g.

    ``marginals[t]`` holds P(xhat_t, output history, y history) with the
    same axis order as the critic tables.
    """
    m = critic.n_outputs
    total = 0.0
    grads = critic.zero_grad_like()
    for t, p in enumerate(marginals):
        tab = critic.tables[t]
        p_hist = p.sum(axis=0, keepdims=True)  # (1, M^t, ny^h)
        expc = np.exp(tab - 1.0)
        total += float((p * tab).sum() - (p_hist * expc).sum() / m)
        grads[t] = p - p_hist * expc / m
    return total, grads


def fit_tabular_critics_exact(adapter, fs, horizon: int, variant: str = "present",
                              step: float = 1.0, max_iters: int = 5000,
                              tol: float = 1e-12) -> tuple[TabularCritic, TabularCritic]:
    """Fit both tabular critic families by exact-expectation gradient ascent.

    The objectives are concave in the tables, so plain ascent converges to
    the variational optimum.
    """
    g = TabularCritic(horizon, adapter.n_outputs, ny=fs.ny, variant=variant)
    f = TabularCritic(horizon, adapter.n_outputs, ny=None, variant=variant)
    marg_g = _per_t_marginals(adapter, fs, horizon, variant)
    marg_f = [p.sum(axis=2) for p in marg_g]
    prev_g = prev_f = None
    for _ in range(max_iters):
        vg, gg = exact_objective_g(g, marg_g)
        vf, gf = exact_objective_g(f, marg_f)
        g.apply_grad(gg, step)
        f.apply_grad(gf, step)
        if prev_g is not None and abs(vg - prev_g) < tol and abs(vf - prev_f) < tol:
            break
        prev_g, prev_f = vg, vf
    return g, f


def set_optimal_tabular_critics(adapter, fs, horizon: int,
                                variant: str = "present") -> tuple[TabularCritic, TabularCritic]:
    """Analytic variational optimum: log(M * conditional) + 1 per history.

    Unreached histories keep the neutral value 1 (the maximizer is only
    pinned on the support).
    """
    g = TabularCritic(horizon, adapter.n_outputs, ny=fs.ny, variant=variant)
    f = TabularCritic(horizon, adapter.n_outputs, ny=None, variant=variant)
    m = adapter.n_outputs
    marg_g = _per_t_marginals(adapter, fs, horizon, variant)
    for t, p in enumerate(marg_g):
        p_hist = p.sum(axis=0, keepdims=True)
        cond = np.where(p > 0, p / np.where(p_hist > 0, p_hist, 1.0), 1.0 / m)
        g.tables[t] = np.where(p_hist > 0, np.log(m * cond) + 1.0, 1.0)
        pf = p.sum(axis=2)
        pf_hist = pf.sum(axis=0, keepdims=True)
        condf = np.where(pf > 0, pf / np.where(pf_hist > 0, pf_hist, 1.0), 1.0 / m)
        f.tables[t] = np.where(pf_hist > 0, np.log(m * condf) + 1.0, 1.0)
    return g, f


def exact_kl_sums(adapter, fs, horizon: int, variant: str = "present") -> tuple[float, float]:
    """The two per-variant KL sums bounding the variational objectives.

    First: sum_t D_KL[P(outputs^t, y-hist) || P(outputs^{t-1}, y-hist) U(M)];
    second: the same with the private history marginalized out.
    """
    marg_g = _per_t_marginals(adapter, fs, horizon, variant)
    m = adapter.n_outputs
    kl_g = kl_f = 0.0
    for p in marg_g:
        p_hist = p.sum(axis=0, keepdims=True)
        mask = p > 0
        kl_g += float(np.sum(np.where(mask, p * np.log(
            np.where(mask, p * m / np.where(p_hist > 0, p_hist, 1.0), 1.0)), 0.0)))
        pf = p.sum(axis=2)
        pf_hist = pf.sum(axis=0, keepdims=True)
        maskf = pf > 0
        kl_f += float(np.sum(np.where(maskf, pf * np.log(
            np.where(maskf, pf * m / np.where(pf_hist > 0, pf_hist, 1.0), 1.0)), 0.0)))
    return kl_g, kl_f


# ---------------------------------------------------------------------------
# generic KL variational form


def kl_variational(p: np.ndarray, q: np.ndarray, f: np.ndarray) -> float:
    """Variational KL functional E_P[f] - exp(-1) E_Q[exp(f)].

    Its supremum over f is D_KL(P || Q), attained at log(P/Q) + 1.
    """
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    f = np.asarray(f, float)
    if p.shape != q.shape or p.shape != f.shape:
        raise ConfigError("distributions and function table must share support")
    return float(p @ f - np.exp(-1.0) * (q @ np.exp(f)))


def maximize_kl_variational(p: np.ndarray, q: np.ndarray, step: float = 0.5,
                            max_iters: int = 20000, tol: float = 1e-14):
    """Gradient ascent on the tabular KL variational form.

    Returns (value, f). The objective is concave, so ascent converges to
    D_KL(P || Q) for distributions with shared support.
    """
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    f = np.ones_like(p)
    prev = -np.inf
    for _ in range(max_iters):
        grad = p - np.exp(-1.0) * q * np.exp(f)
        f = f + step * grad
        val = kl_variational(p, q, f)
        if abs(val - prev) < tol:
            break
        prev = val
    return kl_variational(p, q, f), f
