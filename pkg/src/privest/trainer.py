"""Policy-gradient training with the variational information-loss approximator.

Each outer iteration samples a batch of closed-loop rollouts, runs the inner
critic ascent on that batch, forms per-step stage losses (distortion plus
lambda times the critic information-loss estimate), and takes one descent
step on the policy along the score-function gradient: the batch mean of
(sum of stage losses) times (sum of score gradients).

The variance-reduction baseline subtracts the leave-one-out batch mean of the
summed losses, which keeps the estimator exactly unbiased; it is equivalent
to centering on the batch mean and rescaling by K/(K-1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .finite import (
    FiniteSurrogateModel,
    FiniteSystem,
    WindowPolicyAdapter,
    decode_codes,
    exact_evaluate,
    exact_joint,
    make_distortion_table,
    sample_surrogate_batch,
)
from .infoloss import _y_hist_len, ascend_critics, info_loss_batch, objective_value
from .model import SystemModel, TrajectoryBatch, rollout
from .policy import batch_windows
from .seeding import derive_key


def draw_batch(system, policy, horizon: int, master_seed: int,
               n_rollouts: int) -> TrajectoryBatch:
    """Closed-loop batch from either the continuous model or a surrogate."""
    if isinstance(system, FiniteSurrogateModel):
        return sample_surrogate_batch(system, policy, horizon, master_seed, n_rollouts)
    return rollout(system, policy, horizon, master_seed, n_rollouts)


@dataclass
class TrainConfig:
    """Hyperparameters of the outer/inner training loops."""

    lam: float = 0.0
    n_rollouts: int = 256
    alpha: float = 1e-2
    beta: float = 1e-2
    gamma: float = 1e-3
    inner_iters: int = 200
    inner_tol: float = 1e-4
    outer_iters: int = 2000
    outer_tol: float = 1e-4
    baseline: bool = True
    variant: str = "present"
    master_seed: int = 0
    distortion: str = "squared"
    momentum: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.n_rollouts < 1:
            raise ConfigError("need at least one rollout per batch")
        if min(self.alpha, self.beta, self.gamma) <= 0:
            raise ConfigError("step sizes must be positive")
        if self.variant not in ("past", "present"):
            raise ConfigError(f"unknown variant {self.variant!r}")


@dataclass
class TrainReport:
    """Per-iteration series and final checkpoints of one training run."""

    iterations: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    policy_checkpoint: dict | None = None
    critic_checkpoints: dict | None = None

    @property
    def n_iters(self) -> int:
        return len(self.iterations)

    def series_csv(self) -> str:
        lines = ["iter,distortion,mi_estimate,objective"]
        for row in self.iterations:
            lines.append(
                f"{row['iter']},{row['distortion']!r},{row['mi_estimate']!r},"
                f"{row['objective']!r}"
            )
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "diverged": self.diverged,
            "n_iters": self.n_iters,
        }


def distortion_values(batch: TrajectoryBatch, tessellation, kind: str = "squared") -> np.ndarray:
    """(K, T+1) pointwise estimation losses against the chosen cell centers."""
    centers = tessellation.centers[batch.xhat_cell]
    if kind == "squared":
        return (batch.x - centers) ** 2
    if kind == "absolute":
        return np.abs(batch.x - centers)
    if kind == "zero_one":
        return (tessellation.cell_of(batch.x) != batch.xhat_cell).astype(float)
    raise ConfigError(f"unknown distortion kind {kind!r}")


def stage_loss(batch: TrajectoryBatch, g_critic, f_critic, lam: float,
               tessellation, kind: str = "squared") -> np.ndarray:
    """Per-(rollout, t) stage losses l_d + lambda * (g - f)."""
    loss = distortion_values(batch, tessellation, kind)
    if lam > 0:
        loss = loss + lam * info_loss_batch(g_critic, f_critic, batch.y_idx, batch.xhat_cell)
    return loss


def policy_gradient(batch: TrajectoryBatch, losses: np.ndarray, policy,
                    baseline: bool = True) -> np.ndarray:
    """Score-function gradient: mean of (summed losses) x (summed scores).

    With the baseline flag the summed losses are centered on their
    leave-one-out batch mean, implemented as batch-mean centering rescaled by
    K/(K-1); a single rollout falls back to the uncentered estimator.
    """
    k, n_t = losses.shape
    returns = losses.sum(axis=1)
    if baseline and k > 1:
        weights = (returns - returns.mean()) * (k / (k - 1.0))
    else:
        weights = returns
    z_win, x_win = batch_windows(batch.z_cell, batch.xhat_cell, policy.window_depth,
                                 batch.pad_z, batch.pad_x)
    row_w = np.repeat(weights / k, n_t)
    grad = np.zeros_like(policy.params_vector())
    policy.accumulate_score(z_win, x_win, batch.xhat_cell.reshape(-1), row_w, grad)
    return grad


def train(system: SystemModel, policy, critics, cfg: TrainConfig, horizon: int,
          callback=None) -> TrainReport:
    """Run the outer policy-gradient loop until convergence or the budget.

    ``critics`` is a (g, f) pair; it may be None when lambda is zero.  The
    run is a pure function of (system, initial parameters, cfg, horizon):
    batch b of iteration i draws from the substream (master_seed, i, b).
    Divergence (objective above 10x its initial magnitude) aborts with the
    report produced so far.
    """
    g_critic = f_critic = None
    if cfg.lam > 0:
        if critics is None:
            raise ConfigError("critics are required when lambda > 0")
        g_critic, f_critic = critics
    report = TrainReport()
    objectives: list[float] = []
    velocity = np.zeros_like(policy.params_vector())
    for it in range(cfg.outer_iters):
        batch = draw_batch(system, policy, horizon, derive_key(cfg.master_seed, it),
                           cfg.n_rollouts)
        inner = {"f1": 0.0, "f2": 0.0, "iters": 0}
        if cfg.lam > 0:
            inner = ascend_critics(g_critic, f_critic, batch, cfg.alpha, cfg.beta,
                                   cfg.inner_iters, cfg.inner_tol)
        dist = distortion_values(batch, system.tessellation, cfg.distortion)
        losses = dist.copy()
        mi_est = 0.0
        if cfg.lam > 0:
            il = info_loss_batch(g_critic, f_critic, batch.y_idx, batch.xhat_cell)
            losses = losses + cfg.lam * il
            mi_est = float(il.sum(axis=1).mean())
        distortion = float(dist.sum(axis=1).mean())
        objective = distortion + cfg.lam * mi_est
        report.iterations.append({
            "iter": it,
            "distortion": distortion,
            "mi_estimate": mi_est,
            "objective": objective,
            "inner_iters": inner["iters"],
        })
        objectives.append(objective)
        if callback is not None:
            callback(it, report.iterations[-1])

        if it == 0:
            divergence_bar = 10.0 * max(abs(objective), 1.0)
        elif objective > divergence_bar:
            report.diverged = True
            break
        grad = policy_gradient(batch, losses, policy, cfg.baseline)
        if cfg.momentum > 0:
            velocity = cfg.momentum * velocity + grad
            grad = velocity
        policy.set_params_vector(policy.params_vector() - cfg.gamma * grad)

        if it >= 20:
            recent = np.mean(objectives[-10:])
            previous = np.mean(objectives[-20:-10])
            if abs(recent - previous) / max(abs(previous), 1e-12) < cfg.outer_tol:
                report.converged = True
                break
    report.policy_checkpoint = policy.to_checkpoint()
    if cfg.lam > 0:
        report.critic_checkpoints = {
            "g": g_critic.to_checkpoint(),
            "f": f_critic.to_checkpoint(),
        }
    return report


def evaluate(policy, system: SystemModel, n_rollouts: int, mode: str, lam: float,
             horizon: int, critics=None, master_seed: int = 0,
             distortion_kind: str = "squared") -> dict:
    """Distortion, leakage, and objective of a policy.

    ``exact`` enumerates the closed-loop law on the discretized surrogate
    (subject to the enumeration guard); ``empirical`` uses Monte-Carlo
    distortion plus the critic-based leakage estimate, reporting both
    variational bound components.
    """
    from .finite import discretize

    if mode == "exact":
        fs = system.fs if isinstance(system, FiniteSurrogateModel) else discretize(system)
        adapter = WindowPolicyAdapter(policy, fs, horizon)
        table = make_distortion_table(fs.centers, system.tessellation.centers,
                                      distortion_kind)
        ev = exact_evaluate(adapter, fs, horizon, table, lam)
        return {"distortion": ev["distortion"], "mi": ev["mi"],
                "objective": ev["objective"], "mode": "exact"}
    if mode != "empirical":
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    batch = draw_batch(system, policy, horizon, master_seed, n_rollouts)
    dist = float(distortion_values(batch, system.tessellation, distortion_kind)
                 .sum(axis=1).mean())
    out = {"distortion": dist, "mode": "empirical"}
    if critics is not None:
        g_critic, f_critic = critics
        f1 = objective_value(g_critic, batch)
        f2 = objective_value(f_critic, batch)
        mi = float(info_loss_batch(g_critic, f_critic, batch.y_idx, batch.xhat_cell)
                   .sum(axis=1).mean())
        out.update({"mi": mi, "bound_g": f1, "bound_f": f2,
                    "objective": dist + lam * mi})
    else:
        out.update({"mi": None, "objective": dist if lam == 0 else None})
    return out


# ---------------------------------------------------------------------------
# exact-expectation gradient (oracle instances)


def exact_policy_gradient(policy, fs: FiniteSystem, horizon: int,
                          distortion: np.ndarray, lam: float,
                          variant: str = "past") -> np.ndarray:
    """Gradient of the exact objective as the fully enumerated expectation of
    (sum of stage losses) x (sum of score gradients).

    Stage losses use the true per-step log-ratio information loss computed
    from the policy-induced joint, so the result equals the gradient of
    distortion + lambda * leakage and can be checked against central finite
    differences of the exact objective.
    """
    from .infoloss import _per_t_marginals

    T = horizon
    m = policy.n_outputs
    ny, nz = fs.ny, fs.nz
    adapter = WindowPolicyAdapter(policy, fs, T)
    res = exact_joint(adapter, fs, T)
    pyz = res.joint_yz                       # (ny^(T+1), nz^(T+1))
    n_u, n_v, n_a = ny ** (T + 1), nz ** (T + 1), m ** (T + 1)

    # action-path probability given the measurement path
    c = np.ones((1, 1))
    tables = []
    for t in range(T + 1):
        a_t = adapter.action_table(t)
        tables.append(a_t)
        pre = np.repeat(np.arange(c.shape[0]), nz) if t > 0 else np.zeros(a_t.shape[0], int)
        c = (c[pre][:, :, None] * a_t).reshape(a_t.shape[0], -1)
    c_full = c                               # (nz^(T+1), M^(T+1))

    marg = _per_t_marginals(adapter, fs, T, variant)  # per t: (M, M^t, ny^h)
    from .finite import _FilterGrid

    grid = _FilterGrid(fs, T)

    # per-path summed stage losses L[u, v, a]
    L = np.zeros((n_u, n_v, n_a))
    for t in range(T + 1):
        u_pre = np.arange(n_u) // ny ** (T + 1 - t)
        u_h = np.arange(n_u) // ny ** (T + 1 - _y_hist_len(t, variant)) \
            if _y_hist_len(t, variant) > 0 else np.zeros(n_u, int)
        v_pre = np.arange(n_v) // nz ** (T - t)
        a_pre = np.arange(n_a) // m ** (T - t)
        a_sym = (np.arange(n_a) // m ** (T - t)) % m
        ap_code = a_pre // m
        ed = np.einsum("uvx,xm->uvm", grid.x_post[t], distortion)
        L += ed[np.ix_(u_pre, v_pre)][:, :, a_sym]
        if lam > 0:
            p = marg[t]                       # (M, M^t, ny^h)
            p_ap_y = p.sum(axis=0)            # (M^t, ny^h)
            p_cand_ap = p.sum(axis=2)         # (M, M^t)
            p_ap = p_cand_ap.sum(axis=0)      # (M^t,)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.log(p * p_ap[None, :, None]) - np.log(
                    p_ap_y[None, :, :] * p_cand_ap[:, :, None])
            ratio = np.where(np.isfinite(ratio), ratio, 0.0)
            L += lam * ratio[a_sym[None, None, :], ap_code[None, None, :],
                             u_h[:, None, None]]

    # path weights: P(tau) * total loss, summed over y for each (v, a) pair
    w_va = np.einsum("uv,va,uva->va", pyz, c_full, L)

    # one score row per (v, a, t): window of the measurement/output prefixes
    v_syms = decode_codes(np.arange(n_v), nz, T + 1)
    a_syms = decode_codes(np.arange(n_a), m, T + 1)
    d = policy.window_depth
    grad = np.zeros_like(policy.params_vector())
    for t in range(T + 1):
        z_win = np.full((n_v, d + 1), nz, dtype=int)
        take = min(d + 1, t + 1)
        z_win[:, d + 1 - take:] = v_syms[:, t + 1 - take: t + 1]
        x_win = np.full((n_a, d), m, dtype=int)
        take = min(d, t)
        if take:
            x_win[:, d - take:] = a_syms[:, t - take: t]
        zz = np.repeat(z_win, n_a, axis=0)
        xx = np.tile(x_win, (n_v, 1))
        acts = np.tile(a_syms[:, t], n_v)
        policy.accumulate_score(zz, xx, acts, w_va.reshape(-1), grad)
    return grad
