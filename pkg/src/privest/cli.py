"""Command-line drivers: simulation, oracle runs, training, and experiments.

Every subcommand is a pure function of (config file, flags, seed): outputs
are written atomically under --out with fixed names and byte-reproduce under
a fixed seed.  Failures exit nonzero with a machine-readable JSON error on
stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import adversary as adv
from . import baseline as bl
from .config import Config, load_config
from .errors import InstanceTooLargeError, PrivestError
from .finite import discretize, dp_solve, make_distortion_table
from .infoloss import MlpCritic, TabularCritic, critic_from_checkpoint
from .model import batch_to_csv, rollout, sample_open_loop
from .policy import MlpPolicy, TabularPolicy, policy_from_checkpoint
from .seeding import derive_key, substream
from .trainer import evaluate, train

DEFAULT_LAMBDAS = [0.0, 0.1, 0.2, 0.3, 0.4]
DEFAULT_SIGMAS = [0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.45, 0.7, 1.0, 1.4]
_EMISSION_FIT_ROLLOUTS = 10_000
_TABULAR_KEY_LIMIT = 20_000

# substream namespaces (documented constants; part of the seeding contract)
_NS_POLICY_INIT = 7000
_NS_CRITIC_G = 7001
_NS_CRITIC_F = 7002
_NS_EVAL = 9001
_NS_EMISSION = 9002
_NS_SIMULATE = 9003


def _write_atomic(path: str, data: str):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _emit(out_dir: str, files: dict):
    os.makedirs(out_dir, exist_ok=True)
    for name, data in files.items():
        full = os.path.join(out_dir, name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        _write_atomic(full, data)


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _csv_text(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def make_policy(cfg: Config, kind: str = "auto", seed_index: int = _NS_POLICY_INIT):
    """Fresh policy for a config; tabular when its key table stays small."""
    n_z = cfg.system.quantizer.n
    m = cfg.system.tessellation.n
    d = cfg.window_depth
    n_keys = (n_z + 1) ** (d + 1) * (m + 1) ** d
    if kind == "auto":
        kind = "tabular" if n_keys <= _TABULAR_KEY_LIMIT else "mlp"
    if kind == "tabular":
        return TabularPolicy(d, n_z, m)
    return MlpPolicy.create(d, n_z, m, substream(cfg.master_seed, seed_index))


def make_critics(cfg: Config, kind: str = "auto"):
    """Fresh (g, f) critic pair matching the policy scale of the instance."""
    m = cfg.system.tessellation.n
    ny = cfg.system.chain.n
    T = cfg.horizon
    variant = cfg.train.variant
    tabular_ok = (m ** (T + 1)) * (ny ** (T + 1)) * (T + 1) <= 200_000
    if kind == "auto":
        kind = "tabular" if tabular_ok else "mlp"
    if kind == "tabular":
        return (TabularCritic(T, m, ny=ny, variant=variant),
                TabularCritic(T, m, ny=None, variant=variant))
    return (
        MlpCritic.create(T, m, substream(cfg.master_seed, _NS_CRITIC_G), ny=ny,
                         variant=variant, window=cfg.critic_window),
        MlpCritic.create(T, m, substream(cfg.master_seed, _NS_CRITIC_F), ny=None,
                         variant=variant, window=cfg.critic_window),
    )


def _load_policy_and_critics(checkpoint: str):
    with open(checkpoint, "r", encoding="utf-8") as fh:
        policy = policy_from_checkpoint(json.load(fh))
    critics = None
    base = os.path.dirname(checkpoint)
    g_path = os.path.join(base, "critic_g.json")
    f_path = os.path.join(base, "critic_f.json")
    if os.path.exists(g_path) and os.path.exists(f_path):
        with open(g_path, "r", encoding="utf-8") as fh:
            g = critic_from_checkpoint(json.load(fh))
        with open(f_path, "r", encoding="utf-8") as fh:
            f = critic_from_checkpoint(json.load(fh))
        critics = (g, f)
    return policy, critics


def _fit_output_decoder(cfg: Config, fs, policy, n_fit: int = _EMISSION_FIT_ROLLOUTS):
    """Adversary for categorical outputs: empirical emissions on held-out rollouts."""
    batch = rollout(cfg.system, policy, cfg.horizon,
                    derive_key(cfg.master_seed, _NS_EMISSION), n_fit)
    x_cells = cfg.system.tessellation.cell_of(batch.x)
    return adv.empirical_decoder(fs, x_cells, batch.xhat_cell,
                                 policy.n_outputs, cfg.adversary["smoothing"])


def _decode_policy_outputs(cfg: Config, fs, policy, n_rollouts: int):
    """Accuracy statistics of the ML adversary against a trained policy."""
    eval_batch = rollout(cfg.system, policy, cfg.horizon,
                         derive_key(cfg.master_seed, _NS_EVAL), n_rollouts)
    if cfg.adversary["mode"] == "table":
        decoder = _fit_output_decoder(cfg, fs, policy)
        y_hat_idx = adv.decode_batch(decoder, eval_batch.xhat_cell)
    else:
        sigma_adv = cfg.adversary["sigma_adv"] or cfg.system.measurement.sigma_v
        decoder = adv.gaussian_decoder(fs, sigma_adv)
        centers = cfg.system.tessellation.centers[eval_batch.xhat_cell]
        y_hat_idx = adv.decode_batch(decoder, centers)
    labels = np.asarray(cfg.system.chain.states)
    y_hat = labels[y_hat_idx]
    per_rollout = (y_hat == eval_batch.y).mean(axis=1)
    return {
        "batch": eval_batch,
        "y_hat": y_hat,
        "accuracy_mean": float(per_rollout.mean()),
        "accuracy_std": float(per_rollout.std(ddof=1)) if n_rollouts > 1 else 0.0,
        "miss_per_rollout": (y_hat != eval_batch.y).sum(axis=1),
    }


def _trajectory_csv(batch, tessellation, y_hat) -> str:
    rows = []
    for t in range(batch.horizon + 1):
        rows.append([
            t, float(batch.x[0, t]),
            float(tessellation.centers[batch.xhat_cell[0, t]]),
            int(batch.y[0, t]), int(y_hat[0, t]), int(batch.y[0, t] != y_hat[0, t]),
        ])
    return _csv_text(["t", "x", "xhat_center", "y", "yhat", "miss"], rows)


def _adversary_series_csv(batch, y_hat) -> str:
    rows = [[t, int(batch.y[0, t]), int(y_hat[0, t]), int(batch.y[0, t] != y_hat[0, t])]
            for t in range(batch.horizon + 1)]
    return _csv_text(["t", "y", "yhat", "miss"], rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: Config, args) -> dict:
    policy = make_policy(cfg, args.policy_kind)
    batch = rollout(cfg.system, policy, cfg.horizon,
                    derive_key(cfg.master_seed, _NS_SIMULATE), args.rollouts)
    return {"simulate.csv": batch_to_csv(batch, cfg.system.tessellation)}


def cmd_discretize(cfg: Config, args) -> dict:
    fs = discretize(cfg.system)
    return {"finite_system.json": _json(fs.to_json_dict())}


def cmd_dp_solve(cfg: Config, args) -> dict:
    if args.finite_system:
        from .finite import FiniteSystem

        with open(args.finite_system, "r", encoding="utf-8") as fh:
            fs = FiniteSystem.from_json_dict(json.load(fh))
    else:
        fs = discretize(cfg.system)
    if cfg.horizon > 3:
        raise InstanceTooLargeError("the Bellman oracle supports horizons up to 3")
    lam = cfg.train.lam if args.lam is None else args.lam
    table = make_distortion_table(fs.centers, cfg.system.tessellation.centers)
    result = dp_solve(fs, lam, cfg.horizon, table, seed=cfg.master_seed)
    return {"dp_result.json": _json(result.to_json_dict())}


def train_policy(cfg: Config, lam: float, policy=None, critics=None,
                 policy_kind: str = "auto"):
    """Train a policy at one privacy weight, creating parts as needed."""
    if policy is None:
        policy = make_policy(cfg, policy_kind)
    if lam > 0 and critics is None:
        critics = make_critics(cfg, policy_kind if policy_kind == "tabular" else "auto")
    tc = cfg.train_config(lam=lam)
    report = train(cfg.system, policy, critics, tc, cfg.horizon)
    return policy, critics, report


def cmd_train(cfg: Config, args) -> dict:
    lam = cfg.train.lam if args.lam is None else args.lam
    policy = critics = None
    if args.checkpoint:
        policy, critics = _load_policy_and_critics(args.checkpoint)
    policy, critics, report = train_policy(cfg, lam, policy, critics, args.policy_kind)
    files = {
        "train_report.json": _json(report.to_json_dict()),
        "train_series.csv": report.series_csv(),
        "policy.json": _json(policy.to_checkpoint()),
    }
    if critics is not None:
        files["critic_g.json"] = _json(critics[0].to_checkpoint())
        files["critic_f.json"] = _json(critics[1].to_checkpoint())
    return files


def cmd_evaluate(cfg: Config, args) -> dict:
    policy, critics = _load_policy_and_critics(args.checkpoint)
    lam = cfg.train.lam if args.lam is None else args.lam
    res = evaluate(policy, cfg.system, args.rollouts, args.mode, lam, cfg.horizon,
                   critics=critics, master_seed=derive_key(cfg.master_seed, _NS_EVAL))
    return {"eval.json": _json(res)}


def cmd_adversary(cfg: Config, args) -> dict:
    policy, _ = _load_policy_and_critics(args.checkpoint)
    fs = discretize(cfg.system)
    dec = _decode_policy_outputs(cfg, fs, policy, args.rollouts)
    return {
        "adversary.json": _json({
            "accuracy_mean": dec["accuracy_mean"],
            "accuracy_std": dec["accuracy_std"],
        }),
        "adversary_series.csv": _adversary_series_csv(dec["batch"], dec["y_hat"]),
    }


def cmd_baseline(cfg: Config, args) -> dict:
    fs = discretize(cfg.system)
    sigmas = [args.sigma] if args.sigma is not None else DEFAULT_SIGMAS
    rows = bl.baseline_sweep(cfg.system, fs, sigmas, cfg.horizon, args.rollouts,
                             derive_key(cfg.master_seed, _NS_EVAL),
                             sigma_adv=cfg.adversary["sigma_adv"])
    table = [["additive", r["sigma"], r["distortion"], r["accuracy"]] for r in rows]
    return {"baseline.csv": _csv_text(["method", "param", "distortion", "accuracy"], table)}


def cmd_motivating(cfg: Config, args) -> dict:
    fs = discretize(cfg.system)
    y_idx, x, z, z_cell, _ = sample_open_loop(
        cfg.system, cfg.horizon, derive_key(cfg.master_seed, _NS_EVAL), args.rollouts)
    sigma_adv = cfg.adversary["sigma_adv"] or cfg.system.measurement.sigma_v
    decoder = adv.gaussian_decoder(fs, sigma_adv)
    obs = cfg.system.quantizer.center(z_cell)
    y_hat_idx = adv.decode_batch(decoder, obs)
    labels = np.asarray(cfg.system.chain.states)
    y_hat = labels[y_hat_idx]
    y_true = labels[y_idx]
    per_rollout = (y_hat == y_true).mean(axis=1)
    rows = [[t, int(y_true[0, t]), int(y_hat[0, t]), int(y_true[0, t] != y_hat[0, t])]
            for t in range(cfg.horizon + 1)]
    return {
        "motivating.json": _json({
            "accuracy_mean": float(per_rollout.mean()),
            "accuracy_std": float(per_rollout.std(ddof=1)) if args.rollouts > 1 else 0.0,
        }),
        "motivating_series.csv": _csv_text(["t", "y", "yhat", "miss"], rows),
    }


def run_tradeoff(cfg: Config, n_rollouts: int, lambdas=None, sigmas=None,
                 policy_kind: str = "auto", progress=None) -> dict:
    """Full privacy/distortion comparison: trained policies vs additive noise.

    Policies are trained along the ascending lambda grid with warm starts;
    every lambda is evaluated on a common batch of evaluation rollouts
    (Monte-Carlo distortion and ML-adversary accuracy).
    """
    lambdas = DEFAULT_LAMBDAS if lambdas is None else list(lambdas)
    sigmas = DEFAULT_SIGMAS if sigmas is None else list(sigmas)
    fs = discretize(cfg.system)
    rows = []
    artifacts = {}
    policy = critics = None
    per_lambda = []
    for lam in lambdas:
        policy, critics, report = train_policy(cfg, lam, policy, critics, policy_kind)
        dec = _decode_policy_outputs(cfg, fs, policy, n_rollouts)
        batch = dec["batch"]
        from .trainer import distortion_values

        distortion = float(distortion_values(batch, cfg.system.tessellation)
                           .sum(axis=1).mean())
        rows.append(["privacy_aware", lam, distortion, dec["accuracy_mean"]])
        tag = f"{lam:g}".replace(".", "p")
        artifacts[f"policy_lambda_{tag}.json"] = _json(policy.to_checkpoint())
        artifacts[os.path.join("trajectories", f"privacy_lambda_{tag}.csv")] = \
            _trajectory_csv(batch, cfg.system.tessellation, dec["y_hat"])
        per_lambda.append({
            "lam": lam, "distortion": distortion,
            "accuracy": dec["accuracy_mean"],
            "accuracy_std": dec["accuracy_std"],
            "miss_mean": float(dec["miss_per_rollout"].mean()),
            "miss_std": float(dec["miss_per_rollout"].std(ddof=1)),
            "n_iters": report.n_iters,
        })
        if progress is not None:
            progress(per_lambda[-1])
    base_rows = bl.baseline_sweep(cfg.system, fs, sigmas, cfg.horizon, n_rollouts,
                                  derive_key(cfg.master_seed, _NS_EVAL),
                                  sigma_adv=cfg.adversary["sigma_adv"])
    for r in base_rows:
        rows.append(["additive", r["sigma"], r["distortion"], r["accuracy"]])
    artifacts["tradeoff.csv"] = _csv_text(["method", "param", "distortion", "accuracy"], rows)
    artifacts["tradeoff_report.json"] = _json({
        "privacy_aware": per_lambda,
        "additive": base_rows,
    })
    return {"files": artifacts, "privacy_aware": per_lambda, "additive": base_rows}


def cmd_tradeoff(cfg: Config, args) -> dict:
    lambdas = [args.lam] if args.lam is not None else None
    sigmas = [args.sigma] if args.sigma is not None else None
    res = run_tradeoff(cfg, args.rollouts, lambdas, sigmas, args.policy_kind)
    return res["files"]


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="privest",
                                description="privacy-aware state estimation toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    commands = {
        "simulate": cmd_simulate,
        "discretize": cmd_discretize,
        "dp-solve": cmd_dp_solve,
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "adversary": cmd_adversary,
        "baseline": cmd_baseline,
        "tradeoff": cmd_tradeoff,
        "motivating": cmd_motivating,
    }
    for name, fn in commands.items():
        sp = sub.add_parser(name)
        sp.set_defaults(handler=fn)
        sp.add_argument("--config", required=True, help="TOML configuration file")
        sp.add_argument("--seed", type=int, default=None, help="master seed override")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--lambda", dest="lam", type=float, default=None,
                        help="privacy weight override")
        sp.add_argument("--sigma", type=float, default=None,
                        help="additive-noise std override")
        sp.add_argument("--rollouts", type=int, default=256,
                        help="evaluation rollout count")
        sp.add_argument("--checkpoint", default=None, help="policy checkpoint path")
        sp.add_argument("--policy-kind", default="auto",
                        choices=["auto", "tabular", "mlp"])
        sp.add_argument("--mode", default="empirical", choices=["exact", "empirical"],
                        help="evaluation mode")
        if name == "dp-solve":
            sp.add_argument("--finite-system", default=None,
                            help="existing finite-system JSON instead of discretizing")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        files = args.handler(cfg, args)
        _emit(args.out, files)
    except PrivestError as exc:
        sys.stderr.write(_json({"error": type(exc).__name__, "message": str(exc)}))
        return 1
    except OSError as exc:
        sys.stderr.write(_json({"error": type(exc).__name__, "message": str(exc)}))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
