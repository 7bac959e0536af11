"""Exact oracles on a fully finite surrogate of the system.

The surrogate replaces the continuous state with a uniform grid of cells and
the Gaussian kernels with cell-mass matrices obtained by CDF integration, so
every quantity of interest -- belief states, their forward updates, the
adversary posterior, mutual information and its chain expansions, per-step
information loss, and the finite-horizon Bellman recursion -- is computable
by finite sums and testable to 1e-10.

History conventions
-------------------
Histories are coded as mixed-radix integers with the earliest symbol most
significant, so appending symbol ``s`` maps code ``u`` to ``u * base + s``.
A belief at time t is a table over (y-history of length t, measurement-cell
history of length t+1).

This module is an oracle, not a scalable solver: enumeration stops at the
path guard and the Bellman solver is meant for horizons up to 3 with small
alphabets.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import (
    ConfigError,
    ImpossibleActionError,
    ImpossibleHistoryError,
    InstanceTooLargeError,
)
from .model import SystemModel, Tessellation
from .policy import softmax
from .seeding import substream

_PATH_GUARD = 10_000_000
_PROB_ATOL = 1e-10


# ---------------------------------------------------------------------------
# finite surrogate


@dataclass(frozen=True)
class FiniteSystem:
    """Finite surrogate: private chain x state grid x measurement cells.

    ``px[i, j, y]`` is the probability of moving from state cell i to cell j
    when the private state is y; ``pz[i, k]`` the probability of measurement
    cell k from state cell i.
    """

    py: np.ndarray
    px: np.ndarray
    pz: np.ndarray
    mu_y0: np.ndarray
    mu_x0: np.ndarray
    centers: np.ndarray

    def __post_init__(self):
        py = np.asarray(self.py, dtype=float)
        px = np.asarray(self.px, dtype=float)
        pz = np.asarray(self.pz, dtype=float)
        mu_y0 = np.asarray(self.mu_y0, dtype=float)
        mu_x0 = np.asarray(self.mu_x0, dtype=float)
        centers = np.asarray(self.centers, dtype=float)
        ny, nx, nz = py.shape[0], px.shape[0], pz.shape[1]
        if py.shape != (ny, ny) or px.shape != (nx, nx, ny) or pz.shape != (nx, nz):
            raise ConfigError("inconsistent finite-system shapes")
        if centers.shape != (nx,) or mu_y0.shape != (ny,) or mu_x0.shape != (nx,):
            raise ConfigError("inconsistent finite-system vector lengths")
        for name, arr in (("Py", py), ("Px", px), ("Pz", pz)):
            if np.any(arr < -_PROB_ATOL):
                raise ConfigError(f"{name} has negative entries")
            sums = arr.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > _PROB_ATOL):
                raise ConfigError(f"{name} conditional slices do not sum to 1")
        for name, vec in (("mu_y0", mu_y0), ("mu_x0", mu_x0)):
            if np.any(vec < -_PROB_ATOL) or abs(vec.sum() - 1.0) > _PROB_ATOL:
                raise ConfigError(f"{name} is not a probability vector")
        for arr in (py, px, pz, mu_y0, mu_x0, centers):
            arr.setflags(write=False)
        object.__setattr__(self, "py", py)
        object.__setattr__(self, "px", px)
        object.__setattr__(self, "pz", pz)
        object.__setattr__(self, "mu_y0", mu_y0)
        object.__setattr__(self, "mu_x0", mu_x0)
        object.__setattr__(self, "centers", centers)

    @property
    def ny(self) -> int:
        return self.py.shape[0]

    @property
    def nx(self) -> int:
        return self.px.shape[0]

    @property
    def nz(self) -> int:
        return self.pz.shape[1]

    def to_json_dict(self) -> dict:
        return {
            "ny": self.ny,
            "nx": self.nx,
            "nz": self.nz,
            "Py": self.py.tolist(),
            "Px": self.px.tolist(),
            "Pz": self.pz.tolist(),
            "mu_y0": self.mu_y0.tolist(),
            "mu_x0": self.mu_x0.tolist(),
            "centers": self.centers.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "FiniteSystem":
        fs = cls(
            py=np.asarray(doc["Py"], float),
            px=np.asarray(doc["Px"], float),
            pz=np.asarray(doc["Pz"], float),
            mu_y0=np.asarray(doc["mu_y0"], float),
            mu_x0=np.asarray(doc["mu_x0"], float),
            centers=np.asarray(doc["centers"], float),
        )
        if (fs.ny, fs.nx, fs.nz) != (doc["ny"], doc["nx"], doc["nz"]):
            raise ConfigError("finite-system document sizes disagree with matrices")
        return fs


def _gaussian_cell_masses(means: np.ndarray, sigma: float, edges: np.ndarray) -> np.ndarray:
    """Cell masses of N(mean, sigma^2), tail mass folded into the end cells.

    means (...,) -> masses (..., n_cells).
    """
    means = np.asarray(means, dtype=float)
    if sigma <= 0:
        raise ConfigError("cell integration requires a positive noise scale")
    inner = edges[1:-1]
    cdf = ndtr((inner[None, :] - means.reshape(-1, 1)) / sigma)
    cdf = np.concatenate(
        [np.zeros((cdf.shape[0], 1)), cdf, np.ones((cdf.shape[0], 1))], axis=1
    )
    masses = np.diff(cdf, axis=1)
    return masses.reshape(means.shape + (len(edges) - 1,))


def discretize(system: SystemModel, x_grid: Tessellation | None = None,
               tail_warn: float = 1e-3) -> FiniteSystem:
    """Build the finite surrogate of a system on a state grid.

    State-transition masses integrate N(a*x_i + b*y, sigma_w^2) over the grid
    cells; measurement masses integrate N(c*x_i, sigma_v^2) over the
    quantizer cells.  Mass falling outside either grid is folded into the
    boundary cells; a warning is raised when more than ``tail_warn`` of any
    transition's mass lies outside the grid, which signals that the grid does
    not cover the bulk of the state distribution.
    """
    grid = x_grid if x_grid is not None else system.tessellation
    if grid.n < 1:
        raise ConfigError("empty state grid")
    dyn, meas, q, chain = system.dynamics, system.measurement, system.quantizer, system.chain
    labels = np.asarray(chain.states, dtype=float)

    means = dyn.a * grid.centers[:, None] + dyn.b * labels[None, :]  # (nx, ny)
    tail = ndtr((grid.lo - means) / dyn.sigma_w) + 1.0 - ndtr((grid.hi - means) / dyn.sigma_w)
    if np.any(tail > tail_warn):
        warnings.warn(
            f"state grid misses up to {tail.max():.2e} transition mass; "
            "boundary cells absorb the folded tails",
            stacklevel=2,
        )
    px = _gaussian_cell_masses(means, dyn.sigma_w, grid.edges)  # (nx, ny, nx')
    px = np.swapaxes(px, 1, 2)  # -> (nx, nx', ny)

    pz = _gaussian_cell_masses(meas.c * grid.centers, meas.sigma_v, q.edges)

    mu_x0 = np.zeros(grid.n)
    mu_x0[int(grid.cell_of(system.x0))] = 1.0
    return FiniteSystem(
        py=chain.transition, px=px, pz=pz,
        mu_y0=chain.initial, mu_x0=mu_x0, centers=grid.centers,
    )


def make_distortion_table(x_centers: np.ndarray, out_centers: np.ndarray,
                          kind: str = "squared") -> np.ndarray:
    """Pointwise loss table l_d(x_center_i, out_center_m)."""
    diff = np.asarray(x_centers, float)[:, None] - np.asarray(out_centers, float)[None, :]
    if kind == "squared":
        return diff ** 2
    if kind == "absolute":
        return np.abs(diff)
    if kind == "zero_one":
        return (np.abs(diff) > 1e-12).astype(float)
    raise ConfigError(f"unknown distortion kind {kind!r}")


# ---------------------------------------------------------------------------
# history codes


def decode_codes(codes: np.ndarray, base: int, length: int) -> np.ndarray:
    """Symbols (..., length) of big-endian mixed-radix codes."""
    codes = np.asarray(codes)
    out = np.empty(codes.shape + (length,), dtype=int)
    rem = codes.copy()
    for j in range(length - 1, -1, -1):
        out[..., j] = rem % base
        rem = rem // base
    return out


def encode_symbols(symbols, base: int) -> int:
    code = 0
    for s in symbols:
        code = code * base + int(s)
    return code


# ---------------------------------------------------------------------------
# beliefs


@dataclass
class BeliefState:
    """Adversary-side belief over (y-history, measurement-cell history).

    ``mass[u, v]`` is the probability of y-history code u (length t) and
    z-cell history code v (length t+1) given the estimator's past outputs;
    ``x_post[u, v]`` carries the per-history state posterior used by the
    stage cost and the forward update.
    """

    t: int
    ny: int
    nz: int
    mass: np.ndarray
    x_post: np.ndarray

    def __post_init__(self):
        u, v = self.ny ** self.t, self.nz ** (self.t + 1)
        if self.mass.shape != (u, v) or self.x_post.shape[:2] != (u, v):
            raise ConfigError("belief table shapes do not match time index")

    def items(self):
        """Iterate ((y-history tuple, z-history tuple), mass) pairs."""
        u_syms = decode_codes(np.arange(self.mass.shape[0]), self.ny, self.t)
        v_syms = decode_codes(np.arange(self.mass.shape[1]), self.nz, self.t + 1)
        for u in range(self.mass.shape[0]):
            for v in range(self.mass.shape[1]):
                yield (tuple(u_syms[u]), tuple(v_syms[v])), float(self.mass[u, v])

    def mass_of(self, y_hist, z_hist) -> float:
        if len(y_hist) != self.t or len(z_hist) != self.t + 1:
            raise ConfigError("history lengths must be (t, t+1)")
        return float(self.mass[encode_symbols(y_hist, self.ny), encode_symbols(z_hist, self.nz)])


@dataclass
class PolicyCollection:
    """Conditional output distributions indexed by measurement-history code."""

    t: int
    nz: int
    a: np.ndarray  # (nz^(t+1), M)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        if self.a.ndim != 2 or self.a.shape[0] != self.nz ** (self.t + 1):
            raise ConfigError("policy collection must have one row per measurement history")
        if np.any(self.a < -_PROB_ATOL) or np.any(np.abs(self.a.sum(axis=1) - 1.0) > _PROB_ATOL):
            raise ConfigError("policy collection rows must be probability vectors")


def belief_init(fs: FiniteSystem) -> BeliefState:
    """Initial belief over the first measurement cell alone."""
    m0 = fs.mu_x0 @ fs.pz  # (nz,)
    x_post = np.full((1, fs.nz, fs.nx), 1.0 / fs.nx)
    ok = m0 > 0
    x_post[0, ok, :] = (fs.mu_x0[:, None] * fs.pz[:, ok]).T / m0[ok, None]
    return BeliefState(t=0, ny=fs.ny, nz=fs.nz, mass=m0[None, :].copy(), x_post=x_post)


def _step_tensors(fs: FiniteSystem, t: int, x_post: np.ndarray):
    """Policy-independent pieces of the forward update at time t.

    Returns (pred, mz, trans):
      pred[u, v, y, x'] -- state prediction after one transition driven by y
      mz[u, v, y, z']   -- predictive measurement-cell mass
      trans[u, y]       -- chain step P(y_t | y_{t-1}) (prior row at t = 0)
    """
    n_u = x_post.shape[0]
    pred = np.einsum("uvx,xwy->uvyw", x_post, fs.px)
    mz = np.einsum("uvyw,wz->uvyz", pred, fs.pz)
    if t == 0:
        trans = np.broadcast_to(fs.mu_y0, (n_u, fs.ny)).copy()
    else:
        trans = fs.py[np.arange(n_u) % fs.ny]
    return pred, mz, trans


def _extend_x_post(fs: FiniteSystem, pred: np.ndarray, mz: np.ndarray) -> np.ndarray:
    """Corrected state posterior for every extended history, reshaped so the
    leading axes are the extended (y, z) history codes."""
    n_u, n_v = pred.shape[0], pred.shape[1]
    xp = fs.pz.T[None, None, None, :, :] * pred[:, :, :, None, :]  # (U, V, y, z', x')
    norm = mz[:, :, :, :, None]
    xp = np.where(norm > 0, xp / np.where(norm > 0, norm, 1.0), 1.0 / fs.nx)
    return xp.transpose(0, 2, 1, 3, 4).reshape(n_u * fs.ny, n_v * fs.nz, fs.nx)


def belief_update(belief: BeliefState, pol: PolicyCollection, xhat: int,
                  fs: FiniteSystem) -> BeliefState:
    """Forward belief update after the estimator emitted cell ``xhat``.

    Extends each history by one private symbol and one measurement cell,
    weighting by the policy's probability of the realized output; raises
    ImpossibleActionError when that output has zero probability under the
    current belief.
    """
    if pol.t != belief.t or pol.nz != belief.nz:
        raise ConfigError("policy collection does not match belief time")
    numer = pol.a[:, xhat][None, :] * belief.mass  # (U, V)
    den = float(numer.sum())
    if den <= 0:
        raise ImpossibleActionError(f"output cell {xhat} has zero probability at t={belief.t}")
    pred, mz, trans = _step_tensors(fs, belief.t, belief.x_post)
    n_u, n_v = belief.mass.shape
    new_mass = np.einsum("uv,uy,uvyz->uyvz", numer / den, trans, mz)
    new_mass = new_mass.reshape(n_u * fs.ny, n_v * fs.nz)
    x_post = _extend_x_post(fs, pred, mz)
    return BeliefState(t=belief.t + 1, ny=fs.ny, nz=fs.nz, mass=new_mass, x_post=x_post)


def adversary_posterior(b_next: BeliefState) -> np.ndarray:
    """Posterior over y-history codes implied by a belief: sum out z."""
    return b_next.mass.sum(axis=1)


def _xlogx(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def stage_cost(belief: BeliefState, pol: PolicyCollection, lam: float,
               distortion: np.ndarray, fs: FiniteSystem) -> float:
    """Expected per-stage cost of a policy collection at a belief.

    Combines the expected distortion under the per-history state posterior
    with ``lam`` times the expected log-ratio penalty whose three
    marginalizations run over measurement histories, private histories, and
    both.
    """
    if pol.t != belief.t:
        raise ConfigError("policy collection does not match belief time")
    ed = np.einsum("uvx,xm->uvm", belief.x_post, distortion)
    dist = float(np.einsum("uv,vm,uvm->", belief.mass, pol.a, ed))
    num = belief.mass @ pol.a          # (U, M)
    d1 = num.sum(axis=0)               # (M,)
    d2 = belief.mass.sum(axis=1)       # (U,)
    s = belief.mass.sum()
    info = float(_xlogx(num).sum() + _xlogx(s) - _xlogx(d1).sum() - _xlogx(d2).sum())
    return dist + lam * info


def direct_info_loss(belief: BeliefState, pol: PolicyCollection, xhat: int,
                     y_hist) -> float:
    """Per-step information loss log P(xhat | past outputs, y-history) minus
    log P(xhat | past outputs), evaluated from the belief by its three sums.
    """
    u = int(y_hist) if np.isscalar(y_hist) else encode_symbols(y_hist, belief.ny)
    num = float(belief.mass[u] @ pol.a[:, xhat])
    d1 = float(np.einsum("uv,v->", belief.mass, pol.a[:, xhat]))
    d2 = float(belief.mass[u].sum())
    s = float(belief.mass.sum())
    if num <= 0 or d1 <= 0 or d2 <= 0:
        raise ImpossibleHistoryError("zero-probability history or output")
    return float(np.log(num * s / (d1 * d2)))


# ---------------------------------------------------------------------------
# exact enumeration


class _FilterGrid:
    """Policy-independent forward quantities for every (y, z)-history.

    Per time t (arrays indexed by y-history code u of length t and z-history
    code v of length t+1):
      q[t][u, v]          -- P(y-history, z-history)
      x_post[t][u, v, x]  -- state posterior given the histories
      w[t][u, v, y', z']  -- mass of appending (y', z'), feeding t -> t+1
    """

    def __init__(self, fs: FiniteSystem, horizon: int):
        self.fs = fs
        self.horizon = horizon
        b0 = belief_init(fs)
        self.q = [b0.mass]
        self.x_post = [b0.x_post]
        self.w = []
        for t in range(horizon):
            pred, mz, trans = _step_tensors(fs, t, self.x_post[t])
            w = np.einsum("uy,uvyz->uvyz", trans, mz)
            self.w.append(w)
            n_u, n_v = self.q[t].shape
            q_next = self.q[t][:, :, None, None] * w  # (U, V, y, z)
            q_next = q_next.transpose(0, 2, 1, 3).reshape(n_u * fs.ny, n_v * fs.nz)
            self.q.append(q_next)
            self.x_post.append(_extend_x_post(fs, pred, mz))

    def joint_yz(self) -> np.ndarray:
        """P(y-path of length T+1, z-path of length T+1)."""
        T = self.horizon
        q = self.q[T]
        n_u, n_v = q.shape
        if T == 0:
            trans = self.fs.mu_y0[None, :]
        else:
            trans = self.fs.py[np.arange(n_u) % self.fs.ny]
        out = q[:, None, :] * trans[:, :, None]  # (U, y_T, V)
        return out.reshape(n_u * self.fs.ny, n_v)


class WindowPolicyAdapter:
    """Per-time action tables of a windowed policy over history codes."""

    def __init__(self, policy, fs: FiniteSystem, horizon: int):
        self.policy = policy
        self.fs = fs
        self.horizon = horizon
        self.n_outputs = policy.n_outputs

    def action_table(self, t: int) -> np.ndarray:
        """A[v, ap, m] = pi(m | z-history v of length t+1, output history ap)."""
        fs = self.fs
        d = self.policy.window_depth
        m = self.n_outputs
        n_v, n_ap = fs.nz ** (t + 1), m ** t
        v_syms = decode_codes(np.arange(n_v), fs.nz, t + 1)
        a_syms = decode_codes(np.arange(n_ap), m, t)
        pad_z, pad_x = fs.nz, m
        z_win = np.full((n_v, d + 1), pad_z, dtype=int)
        take = min(d + 1, t + 1)
        if take:
            z_win[:, d + 1 - take:] = v_syms[:, t + 1 - take:]
        x_win = np.full((n_ap, d), pad_x, dtype=int)
        take = min(d, t)
        if take:
            x_win[:, d - take:] = a_syms[:, t - take:]
        zz = np.repeat(z_win, n_ap, axis=0)
        xx = np.tile(x_win, (n_v, 1))
        return self.policy.dist_batch(zz, xx).reshape(n_v, n_ap, m)


class TreePolicyAdapter:
    """Action tables of a per-output-history policy tree (Bellman solution)."""

    def __init__(self, tree: list, n_outputs: int):
        self.tree = tree  # tree[t]: (M^t, nz^(t+1), M)
        self.n_outputs = n_outputs

    def action_table(self, t: int) -> np.ndarray:
        return np.ascontiguousarray(np.swapaxes(self.tree[t], 0, 1))


@dataclass
class JointResult:
    """Exact closed-loop law of one policy on a finite surrogate."""

    joint: np.ndarray         # (ny^(T+1), M^(T+1)) over (y-path, output-path)
    joint_yz: np.ndarray      # (ny^(T+1), nz^(T+1)) over (y-path, z-path)
    distortion_t: np.ndarray  # per-t expected distortion (length T+1)
    horizon: int
    ny: int
    n_outputs: int

    @property
    def distortion(self) -> float:
        return float(self.distortion_t.sum())


def _guard(fs: FiniteSystem, n_outputs: int, horizon: int):
    paths = (fs.ny * fs.nz * n_outputs) ** (horizon + 1)
    if paths > _PATH_GUARD:
        raise InstanceTooLargeError(
            f"{paths} joint paths exceed the enumeration guard of {_PATH_GUARD}"
        )


def exact_joint(adapter, fs: FiniteSystem, horizon: int,
                distortion: np.ndarray | None = None) -> JointResult:
    """Exact joint law over (y-path, output-path) by summing all paths.

    ``adapter`` supplies the per-time action tables (see the adapters above).
    When a distortion table is given, the exact per-step expected distortion
    is accumulated alongside.
    """
    _guard(fs, adapter.n_outputs, horizon)
    grid = _FilterGrid(fs, horizon)
    m = adapter.n_outputs
    c = np.ones((1, 1))  # C[v-path, output-path] after t-1 steps
    dist_t = np.zeros(horizon + 1)
    for t in range(horizon + 1):
        a_t = adapter.action_table(t)  # (V_t, M^t, M)
        n_v, n_ap = a_t.shape[0], a_t.shape[1]
        pre = np.repeat(np.arange(c.shape[0]), fs.nz) if t > 0 else np.zeros(n_v, dtype=int)
        c_prefix = c[pre]  # (V_t, M^t)
        if distortion is not None:
            ed = np.einsum("uvx,xm->uvm", grid.x_post[t], distortion)
            act = np.einsum("vam,va->vm", a_t, c_prefix)
            dist_t[t] = float(np.einsum("uv,uvm,vm->", grid.q[t], ed, act))
        c = (c_prefix[:, :, None] * a_t).reshape(n_v, n_ap * m)
    pyz = grid.joint_yz()
    joint = pyz @ c
    return JointResult(joint=joint, joint_yz=pyz, distortion_t=dist_t,
                       horizon=horizon, ny=fs.ny, n_outputs=m)


def exact_mi(joint: np.ndarray) -> float:
    """Plug-in mutual information (nats) of a normalized 2-D joint table."""
    p = np.asarray(joint, dtype=float)
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0
    ratio = np.where(mask, p / np.where(mask, px * py, 1.0), 1.0)
    return float(np.sum(np.where(mask, p * np.log(ratio), 0.0)))


def _conditional_mi(p: np.ndarray, axes_a: tuple, axes_b: tuple, axes_c: tuple) -> float:
    """I(A; B | C) by enumeration of a dense multi-axis joint array."""
    all_axes = tuple(range(p.ndim))
    keep = tuple(sorted(axes_a + axes_b + axes_c))
    drop = tuple(a for a in all_axes if a not in keep)
    p = p.sum(axis=drop) if drop else p
    pos = {a: i for i, a in enumerate(keep)}
    ga = tuple(pos[a] for a in axes_a)
    gb = tuple(pos[a] for a in axes_b)
    gc_complement = tuple(sorted(ga + gb))
    p_ac = p.sum(axis=gb, keepdims=True) if gb else p
    p_bc = p.sum(axis=ga, keepdims=True)
    p_c = p.sum(axis=gc_complement, keepdims=True)
    mask = p > 0
    num = p * p_c
    den = p_ac * p_bc
    ratio = np.where(mask, num / np.where(mask, den, 1.0), 1.0)
    return float(np.sum(np.where(mask, p * np.log(ratio), 0.0)))


def mi_chain(joint: np.ndarray, ny: int, n_outputs: int, horizon: int,
             variant: str = "past") -> np.ndarray:
    """Per-step conditional MI terms whose sum is the total leakage.

    ``past`` yields I(Xhat_t; Y^{t-1} | Xhat^{t-1}) for t = 1..T (entry 0 is
    zero); ``present`` yields I(Xhat_t; Y^t | Xhat^{t-1}) for t = 0..T.
    """
    T = horizon
    p = np.asarray(joint, float).reshape((ny,) * (T + 1) + (n_outputs,) * (T + 1))
    y_axes = tuple(range(T + 1))
    a_axes = tuple(range(T + 1, 2 * T + 2))
    terms = np.zeros(T + 1)
    for t in range(T + 1):
        if variant == "past":
            if t == 0:
                continue
            cond_y = y_axes[:t]
        elif variant == "present":
            cond_y = y_axes[: t + 1]
        else:
            raise ConfigError(f"unknown chain variant {variant!r}")
        terms[t] = _conditional_mi(p, axes_a=(a_axes[t],), axes_b=cond_y, axes_c=a_axes[:t])
    return terms


def exact_evaluate(adapter, fs: FiniteSystem, horizon: int, distortion: np.ndarray,
                   lam: float) -> dict:
    """Exact distortion, leakage, and objective of a policy."""
    res = exact_joint(adapter, fs, horizon, distortion)
    mi = exact_mi(res.joint)
    return {
        "distortion": res.distortion,
        "mi": mi,
        "objective": res.distortion + lam * mi,
        "joint": res,
    }


def beliefs_along(adapter, fs: FiniteSystem, xhat_path) -> list:
    """Belief trajectory induced by a policy and a realized output path."""
    beliefs = [belief_init(fs)]
    for t, xh in enumerate(xhat_path):
        a_t = adapter.action_table(t)
        ap = encode_symbols(xhat_path[:t], adapter.n_outputs)
        pol = PolicyCollection(t=t, nz=fs.nz, a=a_t[:, ap, :])
        beliefs.append(belief_update(beliefs[-1], pol, int(xh), fs))
    return beliefs


# ---------------------------------------------------------------------------
# surrogate sampling (closed-loop rollouts of the finite system itself)


@dataclass(frozen=True)
class FiniteSurrogateModel:
    """A finite surrogate packaged as a sampleable system.

    Trainer-facing twin of the continuous model: rollouts draw (y, x-cell,
    z-cell) from the surrogate kernels and expose cell centers as the state,
    so sampled batches follow exactly the law that the enumeration oracles
    integrate.
    """

    fs: FiniteSystem
    tessellation: Tessellation
    labels: tuple

    @property
    def chain_labels(self) -> np.ndarray:
        return np.asarray(self.labels)


def surrogate_model(fs: FiniteSystem, tessellation: Tessellation | None = None,
                    labels=None) -> FiniteSurrogateModel:
    if tessellation is None:
        width = fs.centers[1] - fs.centers[0] if fs.nx > 1 else 1.0
        tessellation = Tessellation(width, fs.centers[0] - width / 2,
                                    fs.centers[-1] + width / 2)
    if labels is None:
        labels = tuple(range(fs.ny))
    return FiniteSurrogateModel(fs=fs, tessellation=tessellation, labels=labels)


def sample_surrogate_batch(model: FiniteSurrogateModel, policy, horizon: int,
                           master_seed: int, n_rollouts: int):
    """Closed-loop rollouts of a finite surrogate.

    Per rollout the substream is consumed as: chain uniforms (T+1), state
    uniforms (T+1), measurement uniforms (T+1), action uniforms (T+1).
    """
    from .model import TrajectoryBatch  # local import to avoid a cycle
    from .seeding import derive_key

    fs = model.fs
    T, K = horizon, n_rollouts
    u = np.empty((4, K, T + 1))
    seeds = np.empty(K, dtype=np.uint64)
    for k in range(K):
        rng = substream(master_seed, k)
        seeds[k] = derive_key(master_seed, k)
        u[:, k, :] = rng.random((4, T + 1))

    def pick(cum_rows, uu):
        idx = (uu[:, None] >= cum_rows).sum(axis=1)
        return np.minimum(idx, cum_rows.shape[1] - 1)

    cum_y0 = np.cumsum(fs.mu_y0)[None, :].repeat(K, axis=0)
    cum_py = np.cumsum(fs.py, axis=1)
    cum_x0 = np.cumsum(fs.mu_x0)[None, :].repeat(K, axis=0)
    cum_px = np.cumsum(fs.px, axis=1)  # (nx, nx', ny)
    cum_pz = np.cumsum(fs.pz, axis=1)

    y = np.empty((K, T + 1), dtype=int)
    xc = np.empty((K, T + 1), dtype=int)
    zc = np.empty((K, T + 1), dtype=int)
    y[:, 0] = pick(cum_y0, u[0, :, 0])
    xc[:, 0] = pick(cum_x0, u[1, :, 0])
    zc[:, 0] = pick(cum_pz[xc[:, 0]], u[2, :, 0])
    for t in range(T):
        y[:, t + 1] = pick(cum_py[y[:, t]], u[0, :, t + 1])
        xc[:, t + 1] = pick(cum_px[xc[:, t], :, y[:, t]], u[1, :, t + 1])
        zc[:, t + 1] = pick(cum_pz[xc[:, t + 1]], u[2, :, t + 1])

    m = policy.n_outputs
    d = policy.window_depth
    pad_z, pad_x = fs.nz, m
    z_win = np.full((K, d + 1), pad_z, dtype=int)
    x_win = np.full((K, d), pad_x, dtype=int)
    xhat = np.empty((K, T + 1), dtype=int)
    for t in range(T + 1):
        z_win = np.roll(z_win, -1, axis=1)
        z_win[:, -1] = zc[:, t]
        dist = policy.dist_batch(z_win, x_win)
        xhat[:, t] = pick(np.cumsum(dist, axis=1), u[3, :, t])
        if d > 0:
            x_win = np.roll(x_win, -1, axis=1)
            x_win[:, -1] = xhat[:, t]
    labels = model.chain_labels
    return TrajectoryBatch(
        y=labels[y], y_idx=y, x=fs.centers[xc], z=zc.astype(float),
        z_cell=zc, xhat_cell=xhat, seeds=seeds, master_seed=master_seed,
        pad_z=pad_z, pad_x=pad_x,
    )


# ---------------------------------------------------------------------------
# Bellman solver


@dataclass
class DPResult:
    """Optimal value and per-reached-history policy tree."""

    value: float
    distortion: float
    mi: float
    tree: list
    lam: float
    converged: bool = True
    grad_norm: float = 0.0
    meta: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "distortion": self.distortion,
            "mi": self.mi,
            "policy_tree": [a.tolist() for a in self.tree],
        }


def _phi_prime(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, np.log(np.where(x > 0, x, 1.0)) + 1.0, 0.0)


class _TreeProblem:
    """Joint objective over a full output-history policy tree.

    The total auxiliary cost decomposes into per-node stage terms evaluated
    on unnormalized belief masses (node reach probability times belief).
    Optimizing all nodes jointly is equivalent to the nested Bellman
    recursion because belief-state feedback is sufficient, and the joint form
    makes the objective an explicit differentiable function of every node's
    softmax logits.
    """

    def __init__(self, fs: FiniteSystem, horizon: int, distortion: np.ndarray, lam: float):
        _guard(fs, distortion.shape[1], horizon)
        self.fs = fs
        self.T = horizon
        self.lam = lam
        self.m = distortion.shape[1]
        self.grid = _FilterGrid(fs, horizon)
        self.ed = [np.einsum("uvx,xm->uvm", self.grid.x_post[t], distortion)
                   for t in range(horizon + 1)]
        self.shapes = [(self.m ** t, fs.nz ** (t + 1), self.m) for t in range(horizon + 1)]

    def init_logits(self, rng: np.random.Generator | None, scale: float = 1.0) -> list:
        if rng is None:
            return [np.zeros(s) for s in self.shapes]
        return [rng.standard_normal(s) * scale for s in self.shapes]

    def _stage(self, beta: np.ndarray, a: np.ndarray, ed: np.ndarray):
        """Stage cost on unnormalized mass and its partials w.r.t. a and beta."""
        lam = self.lam
        num = beta @ a                      # (U, M)
        d1 = num.sum(axis=0)
        d2 = beta.sum(axis=1)
        s = beta.sum()
        dist = float(np.einsum("uv,vm,uvm->", beta, a, ed))
        info = float(_xlogx(num).sum() + _xlogx(s) - _xlogx(d1).sum() - _xlogx(d2).sum())
        ln = _phi_prime(num) - _phi_prime(d1)[None, :]     # (U, M)
        g_a = np.einsum("uv,uvm->vm", beta, ed) + lam * (beta.T @ ln)
        g_beta = np.einsum("vm,uvm->uv", a, ed) + lam * (ln @ a.T)
        g_beta += lam * (_phi_prime(s) - _phi_prime(d2)[:, None])
        return dist + lam * info, g_a, g_beta

    def value_and_grad(self, logits: list):
        fs, T, m = self.fs, self.T, self.m
        a_tables = [softmax(l) for l in logits]

        betas = [[self.grid.q[0].copy()]]
        for t in range(T):
            n_u, n_v = betas[t][0].shape
            nxt = []
            for node, beta in enumerate(betas[t]):
                weighted = beta[:, :, None] * a_tables[t][node][None, :, :]  # (U, V, M)
                for mm in range(m):
                    child = np.einsum("uv,uvyz->uyvz", weighted[:, :, mm], self.grid.w[t])
                    nxt.append(child.reshape(n_u * fs.ny, n_v * fs.nz))
            betas.append(nxt)

        total = 0.0
        g_logits = [np.zeros_like(l) for l in logits]
        g_beta_next: list = []
        for t in range(T, -1, -1):
            g_beta_here = []
            for node, beta in enumerate(betas[t]):
                val, g_a, g_beta = self._stage(beta, a_tables[t][node], self.ed[t])
                total += val
                if t < T:
                    n_u, n_v = beta.shape
                    a_node = a_tables[t][node]
                    for mm in range(m):
                        g_child = g_beta_next[node * m + mm]
                        g_child4 = g_child.reshape(n_u, fs.ny, n_v, fs.nz)
                        back = np.einsum("uyvz,uvyz->uv", g_child4, self.grid.w[t])
                        g_a[:, mm] += np.einsum("uv,uv->v", back, beta)
                        g_beta += back * a_node[:, mm][None, :]
                g_beta_here.append(g_beta)
                a = a_tables[t][node]
                g_logits[t][node] = a * (g_a - (a * g_a).sum(axis=1, keepdims=True))
            g_beta_next = g_beta_here
        return total, g_logits


def _greedy_distortion_tree(problem: _TreeProblem) -> list:
    """Exact optimum at lam = 0: per measurement history, the output cell
    minimizing the z-conditioned expected distortion.  The output history is
    irrelevant because the state is independent of past outputs given the
    measurements, so every node shares the same greedy collection."""
    tree = []
    for t in range(problem.T + 1):
        q, ed = problem.grid.q[t], problem.ed[t]
        cost_v = np.einsum("uv,uvm->vm", q, ed)
        best = np.argmin(cost_v, axis=1)
        a = np.zeros((cost_v.shape[0], problem.m))
        a[np.arange(cost_v.shape[0]), best] = 1.0
        n_nodes = problem.m ** t
        tree.append(np.broadcast_to(a, (n_nodes,) + a.shape).copy())
    return tree


def _tree_value(problem: _TreeProblem, tree: list) -> float:
    logits = [np.log(np.maximum(a, 1e-300)) for a in tree]
    return problem.value_and_grad(logits)[0]


def dp_solve(fs: FiniteSystem, lam: float, horizon: int, distortion: np.ndarray,
             n_starts: int = 8, max_iters: int = 400, tol: float = 1e-7,
             seed: int = 0) -> DPResult:
    """Solve the finite-horizon Bellman recursion by exact enumeration.

    The per-stage minimization has no closed form for lam > 0, so the policy
    tree is optimized jointly by multi-start gradient descent on softmax
    logits with a backtracking line search; the first start is the uniform
    tree.  At lam = 0 the exact greedy solution is returned directly.
    Non-convergence (gradient norm above tolerance at every start) is
    reported through ``converged`` together with the best value found.
    """
    problem = _TreeProblem(fs, horizon, distortion, lam)
    if lam == 0:
        result_tree = _greedy_distortion_tree(problem)
        best_val = _tree_value(problem, result_tree)
        grad_norm, converged = 0.0, True
    else:
        best_val, best_logits, best_gnorm = np.inf, None, np.inf
        for start in range(n_starts):
            rng = None if start == 0 else substream(seed, start)
            logits = problem.init_logits(rng, scale=2.0)
            val, grads = problem.value_and_grad(logits)
            step = 1.0
            for _ in range(max_iters):
                gnorm = np.sqrt(sum(float((g ** 2).sum()) for g in grads))
                if gnorm < tol:
                    break
                improved = False
                while step >= 1e-12:
                    trial = [l - step * g for l, g in zip(logits, grads)]
                    t_val, t_grads = problem.value_and_grad(trial)
                    if t_val <= val - 1e-4 * step * gnorm ** 2:
                        improved = True
                        break
                    step *= 0.5
                if not improved:
                    break
                logits, val, grads = trial, t_val, t_grads
                step = min(step * 1.5, 100.0)
            gnorm = np.sqrt(sum(float((g ** 2).sum()) for g in grads))
            if val < best_val - 1e-15 or best_logits is None:
                best_val, best_logits, best_gnorm = val, logits, gnorm
        result_tree = [softmax(l) for l in best_logits]
        grad_norm = float(best_gnorm)
        converged = bool(best_gnorm < max(tol * 1e3, 1e-4))

    adapter = TreePolicyAdapter(result_tree, problem.m)
    ev = exact_evaluate(adapter, fs, horizon, distortion, lam)
    return DPResult(
        value=float(best_val), distortion=ev["distortion"], mi=ev["mi"],
        tree=result_tree, lam=lam, converged=converged, grad_norm=grad_norm,
        meta={"replay_objective": ev["objective"]},
    )
