"""Command-line entry point: ``arac {train,eval,didactic,ablate-lambda}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
Log verbosity comes from ``ARAC_LOG`` (error, info or debug).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .ar import mean_pairwise_kl
from .envs import make_env
from .trainer import (ConfigError, TrainerConfig, init_state, latest_checkpoint,
                      load_checkpoint, rollout, train)

log = logging.getLogger("arac")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    started: str
    finished: str | None = None
    outputs: dict = dataclasses.field(default_factory=dict)

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=1))
        os.replace(tmp, path)


def _load_config(path, seed, parallel_eval) -> TrainerConfig:
    cfg = TrainerConfig.load(path)
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if parallel_eval is not None:
        changes["parallel_eval"] = parallel_eval
    return dataclasses.replace(cfg, **changes) if changes else cfg


# commands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed, args.parallel_eval)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", cfg.to_dict(), cfg.seed, version_string(), _now(),
                           outputs={"metrics": "metrics.csv", "success": "success.csv",
                                    "checkpoints": "checkpoints"})
    manifest.write(out / "manifest.json")

    def progress(state, rows):
        log.debug("generation %d total_step %d best fitness %.4f", state.generation - 1,
                 state.total_step, max(r["fitness"] for r in rows))

    result = train(cfg, out, on_generation=progress)
    if args.plot:
        from .plotting import plot_metrics
        plot_metrics(result.metrics_path, out / "fitness.png")
        manifest.outputs["figure"] = "fitness.png"
    manifest.finished = _now()
    manifest.write(out / "manifest.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        gen_dir = latest_checkpoint(args.checkpoint_dir)
        cfg, policies, _ = load_checkpoint(gen_dir)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise RuntimeError(f"cannot load checkpoint {args.checkpoint_dir}: {exc}") from exc
    env = make_env(cfg.env)
    seed = cfg.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["agent_id", "mean_fitness", "std_fitness", "episodes"])
    for m, policy in enumerate(policies):
        returns = [rollout(policy, env, False, 1, None, rng)[0] for _ in range(args.episodes)]
        writer.writerow([m, repr(float(np.mean(returns))), repr(float(np.std(returns))),
                         args.episodes])
    return EXIT_OK


def cmd_didactic(args) -> int:
    from .didactic import REPULSIVE_MEAN, TARGET_MEAN, didactic_ar_task

    if args.flows < 0:
        raise ConfigError("flows", "must be >= 0")
    if args.resolution < 2:
        raise ConfigError("resolution", "must be >= 2")
    result = didactic_ar_task(n_flows=args.flows, steps=args.steps, seed=args.seed or 0,
                              log_every=args.log_every, resolution=args.resolution)
    blob = result.to_dict()
    blob["target_mean"] = list(TARGET_MEAN)
    blob["repulsive_mean"] = list(REPULSIVE_MEAN)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(blob))
    if args.plot:
        from .plotting import plot_densities
        plot_densities(blob, out.with_suffix(".png"), centers=(TARGET_MEAN, REPULSIVE_MEAN))
    return EXIT_OK


def probe_states(env_id: str, count: int, seed: int) -> np.ndarray:
    """The first ``count`` states of a rollout with uniform random actions."""
    env = make_env(env_id)
    rng = np.random.default_rng(seed)
    states = [env.reset(rng)]
    while len(states) < count:
        a = rng.uniform(env.spec.action_low, env.spec.action_high)
        s, _, done = env.step(a)
        states.append(env.reset(rng) if done else s)
    return np.asarray(states)


def cmd_ablate_lambda(args) -> int:
    try:
        lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
    except ValueError:
        raise ConfigError("lambdas", f"expected comma-separated numbers, got {args.lambdas!r}")
    if not lambdas:
        raise ConfigError("lambdas", "need at least one value")
    base = _load_config(args.config, args.seed, args.parallel_eval)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("ablate-lambda", base.to_dict(), base.seed, version_string(), _now(),
                           outputs={"actions": "actions.csv", "summary": "ablation.csv"})
    manifest.write(out / "manifest.json")
    states = probe_states(base.env, args.probe_states, base.seed)
    d = make_env(base.env).spec.action_dim
    summary = []
    with open(out / "actions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "state_id", "agent_id"] + [f"a{i + 1}" for i in range(d)])
        for lam in lambdas:
            cfg = dataclasses.replace(base, lambda_ar=lam)
            init_hash = [p.param_hash() for p in init_state(cfg).policies]
            result = train(cfg, out / f"lambda_{lam:g}")
            policies = result.state.policies
            rng = np.random.default_rng(np.random.SeedSequence([base.seed, 7]))
            samples = []
            for m, policy in enumerate(policies):
                per_state = []
                for k, state in enumerate(states):
                    a, _ = policy.sample_values(np.repeat(state[None, :], args.samples, axis=0), rng)
                    per_state.append(a)
                    for row in a:
                        writer.writerow([f"{lam:g}", k, m] + [repr(float(v)) for v in row])
                samples.append(per_state)
            kl = mean_pairwise_kl(policies, states, samples) if len(policies) > 1 else float("nan")
            summary.append((lam, kl, init_hash[0]))
            log.info("lambda %g: mean pairwise KL %.4f", lam, kl)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "mean_pairwise_kl", "init_hash_agent0"])
        for lam, kl, h in summary:
            writer.writerow([f"{lam:g}", repr(kl), h])
    out_csv = csv.writer(sys.stdout, lineterminator="\n")
    out_csv.writerow(["lambda", "mean_pairwise_kl"])
    for lam, kl, _ in summary:
        out_csv.writerow([f"{lam:g}", repr(kl)])
    if args.plot:
        from .plotting import plot_actions
        plot_actions(out / "actions.csv", out / "actions.png")
        manifest.outputs["figure"] = "actions.png"
    manifest.finished = _now()
    manifest.write(out / "manifest.json")
    return EXIT_OK


# parsing ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arac", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--parallel-eval", type=int, default=None, metavar="K",
                       help="evaluate agents on K threads (same results as serial)")

    p = sub.add_parser("train", help="train a population")
    common(p)
    p.add_argument("--out-dir", required=True, help="metrics, checkpoints and manifest go here")
    p.add_argument("--plot", action="store_true", help="also write fitness.png")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="noise-free evaluation of a checkpoint")
    p.add_argument("checkpoint_dir", help="a run dir, its checkpoints/ or one gen_<g> dir")
    p.add_argument("--episodes", "-R", type=int, default=10, help="rollouts per agent")
    p.add_argument("--seed", type=int, default=None, help="eval RNG seed (default: config seed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("didactic", help="imitation/repulsion density experiment")
    p.add_argument("--flows", type=int, default=3, help="radial layers (0 = Gaussian)")
    p.add_argument("--steps", type=int, default=1500, help="optimizer steps")
    p.add_argument("--out", default="grid.json", help="density grids as JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=101, help="grid points per axis")
    p.add_argument("--log-every", type=int, default=100, help="snapshot interval in steps")
    p.add_argument("--plot", action="store_true", help="also write a PNG next to --out")
    p.set_defaults(func=cmd_didactic)

    p = sub.add_parser("ablate-lambda", help="train one population per lambda")
    common(p)
    p.add_argument("--lambdas", default="0,0.5,1", help="comma-separated lambda values")
    p.add_argument("--out-dir", required=True, help="one sub-run per lambda plus summaries")
    p.add_argument("--samples", type=int, default=500, help="actions per agent per probe state")
    p.add_argument("--probe-states", type=int, default=2, help="states drawn from each replay buffer")
    p.add_argument("--plot", action="store_true", help="also write actions.png")
    p.set_defaults(func=cmd_ablate_lambda)
    return parser


def _setup_logging() -> None:
    name = os.environ.get("ARAC_LOG", "info").lower()
    if name not in LOG_LEVELS:
        raise ConfigError("ARAC_LOG", f"expected one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("matplotlib").setLevel(max(LOG_LEVELS[name], logging.WARNING))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every runtime fault maps to exit 1
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
