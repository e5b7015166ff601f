"""Population training loop: explore, fit the shared critic, update actors
(elites with attraction-repulsion), evaluate, re-rank, refresh the archive.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .ar import ArStrategy, combined_policy_loss
from .archive import Archive
from .envs import Env, make_env
from .policy import NfPolicy, PolicySnapshot
from .sac import (Adam, Critic, NonFiniteGradient, ReplayBuffer, ValueNet, critic_loss,
                  policy_loss_sac, polyak_update, value_loss)

log = logging.getLogger(__name__)

METRICS_HEADER = ["generation", "total_step", "agent_id", "fitness", "is_elite",
                  "mean_kl_to_archive", "critic_loss", "policy_loss"]
SUCCESS_HEADER = ["generation", "total_step", "best_agent", "best_solved", "success_rate"]
REQUIRED_FIELDS = ("env", "M", "K", "max_steps")


class ConfigError(ValueError):
    """Invalid or missing configuration field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class RolloutError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    env: str = "deceptive_bandit2d"
    M: int = 5
    K: int = 2
    G: int = 10
    n: int = 5
    R: int = 10
    p: float = 1.0
    alpha: float = 0.2
    gamma: float = 0.99
    strategy: str = "proactive"
    lambda_ar: float = 1.0
    n_kl_samples: int = 1
    proactive_signed: bool = False
    flows: int = 3
    sigma_mode: str = "fixed"
    sigma: float = 0.6
    init_mean_scale: float = 0.1
    hidden: int = 256
    critic_hidden: int = 256
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    lr: float = 3e-4
    tau: float = 0.005
    max_steps: int = 1_000_000
    eval_interval: int = 10_000
    eval_writes_buffer: bool = True
    kl_metric_states: int = 16
    metrics_every: int = 1
    parallel_eval: int = 0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("M", "K", "G", "n", "R", "flows", "hidden", "critic_hidden",
                     "batch_size", "buffer_capacity", "n_kl_samples", "eval_interval",
                     "kl_metric_states", "metrics_every"):
            value = getattr(self, name)
            if name == "flows":
                if value < 0:
                    raise ConfigError(name, "must be >= 0")
            elif value < 1:
                raise ConfigError(name, "must be positive")
        if self.K > self.M:
            raise ConfigError("K", f"must satisfy 1 <= K <= M (M={self.M})")
        for name in ("max_steps", "parallel_eval", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.p <= 0:
            raise ConfigError("p", "must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha", "must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma", "must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau", "must lie in (0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if self.sigma <= 0:
            raise ConfigError("sigma", "must be positive")
        if self.init_mean_scale <= 0:
            raise ConfigError("init_mean_scale", "must be positive")
        if self.sigma_mode not in ("fixed", "learned"):
            raise ConfigError("sigma_mode", "must be 'fixed' or 'learned'")
        if self.strategy not in ("proactive", "reactive"):
            raise ConfigError("strategy", "must be 'proactive' or 'reactive'")
        if self.lambda_ar < 0:
            raise ConfigError("lambda_ar", "must be >= 0")
        try:
            make_env(self.env)
        except ValueError as exc:
            raise ConfigError("env", str(exc)) from None

    @property
    def ar_strategy(self) -> ArStrategy:
        return ArStrategy(self.strategy, self.lambda_ar, self.n_kl_samples, self.n,
                          self.proactive_signed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict, require: tuple = REQUIRED_FIELDS) -> "TrainerConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown field")
        for key in require:
            if key not in raw:
                raise ConfigError(key, "required field is missing")
        kwargs = {}
        for key, value in raw.items():
            kwargs[key] = _coerce(key, value, known[key].type)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "TrainerConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("<file>", "expected a flat JSON object")
        return cls.from_dict(raw)


def _coerce(name, value, type_name):
    type_name = str(type_name)
    try:
        if type_name == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if type_name == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if type_name == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if type_name == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected {type_name}, got {value!r}") from None
    return value


@dataclass
class PopulationState:
    config: TrainerConfig
    env: Env
    policies: list
    actor_opts: list
    critic: Critic
    critic_opt: Adam
    value: ValueNet
    value_opt: Adam
    value_target: ValueNet
    buffer: ReplayBuffer
    archive: Archive
    fitness: np.ndarray
    elites: list
    rngs: dict
    generation: int = 0
    step: int = 0
    total_step: int = 0
    skipped_steps: int = 0
    archive_draws: list = field(default_factory=list)
    solved: np.ndarray | None = None

    @property
    def strategy(self) -> ArStrategy:
        return self.config.ar_strategy

    def best_agent(self) -> int:
        return int(min(range(len(self.policies)), key=lambda m: (-self.fitness[m], m)))


def _streams(seed: int) -> dict:
    names = ("init", "explore", "critic", "actor", "archive", "eval", "metrics", "elites")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def init_state(config: TrainerConfig) -> PopulationState:
    env = make_env(config.env)
    spec = env.spec
    rngs = _streams(config.seed)
    init = rngs["init"]
    policies = [NfPolicy(spec.state_dim, spec.action_dim, n_flows=config.flows,
                         hidden=config.hidden, sigma_mode=config.sigma_mode,
                         sigma=config.sigma, mean_scale=config.init_mean_scale, rng=init)
                for _ in range(config.M)]
    hidden = (config.critic_hidden, config.critic_hidden)
    critic = Critic(spec.state_dim, spec.action_dim, hidden, rng=init)
    value = ValueNet(spec.state_dim, hidden, rng=init)
    target = value.clone()
    elites = sorted(int(i) for i in rngs["elites"].choice(config.M, size=config.K,
                                                          replace=False))
    return PopulationState(
        config=config, env=env, policies=policies,
        actor_opts=[Adam(p.params(), lr=config.lr) for p in policies],
        critic=critic, critic_opt=Adam(critic.params, lr=config.lr),
        value=value, value_opt=Adam(value.params, lr=config.lr), value_target=target,
        buffer=ReplayBuffer(config.buffer_capacity, spec.state_dim, spec.action_dim),
        archive=Archive(config.G), fitness=np.zeros(config.M), elites=elites, rngs=rngs,
        archive_draws=[0] * config.M,
    )


def rollout(policy: NfPolicy, env: Env, with_noise: bool, episodes: int,
            buffer: ReplayBuffer | list | None = None,
            rng: np.random.Generator | None = None, outcomes: list | None = None) -> tuple:
    """Run full episodes; returns ``(average return, env steps)``.

    ``with_noise=False`` feeds zero base noise.  Transitions go to ``buffer``
    (a replay buffer, or a list collecting tuples) when one is given, and
    ``outcomes`` collects ``env.solved`` at the end of each episode.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    total, steps = 0.0, 0
    limit = env.spec.max_episode_length
    for _ in range(episodes):
        s = env.reset(rng)
        for _t in range(limit):
            a = policy.act(s, rng, with_noise=with_noise)
            try:
                s2, r, done = env.step(a)
            except Exception as exc:  # noqa: BLE001 - re-raised with context
                raise RolloutError(f"env {env.id!r} failed at step {steps} "
                                   f"with action {a!r}: {exc}") from exc
            if not math.isfinite(r):
                raise RolloutError(f"env {env.id!r} returned non-finite reward {r!r}")
            total += r
            steps += 1
            if buffer is not None:
                if isinstance(buffer, list):
                    buffer.append((s, a, r, s2, done))
                else:
                    buffer.add(s, a, r, s2, done)
            s = s2
            if done:
                break
        if outcomes is not None:
            outcomes.append(bool(env.solved))
    return total / episodes, steps


def _apply(opt: Adam, loss: nx.Tensor, state: PopulationState, who: str) -> float:
    try:
        return opt.minimize(loss)
    except NonFiniteGradient:
        state.skipped_steps += 1
        log.warning("generation %d: skipped %s update (non-finite gradient)",
                    state.generation, who)
        return math.nan


def critic_phase(state: PopulationState) -> list:
    cfg = state.config
    losses = []
    if len(state.buffer) == 0:
        return losses
    n_batches = state.step // cfg.K
    rng = state.rngs["critic"]
    for e in state.elites:
        policy = state.policies[e]
        for _ in range(n_batches):
            batch = state.buffer.sample(cfg.batch_size, rng)
            losses.append(_apply(state.critic_opt,
                                 critic_loss(state.critic, state.value_target, batch, cfg.gamma),
                                 state, "critic"))
            _apply(state.value_opt,
                   value_loss(state.value, policy, state.critic, batch.s, cfg.alpha, rng),
                   state, "value")
            polyak_update(state.value_target.params, state.value.params, cfg.tau)
    return losses


def actor_updates(state: PopulationState) -> int:
    cfg = state.config
    return max(1, int(math.floor(state.step / cfg.M * cfg.p))) if state.step >= 1 else 0


def actor_phase(state: PopulationState) -> list:
    cfg = state.config
    strategy = state.strategy
    rng = state.rngs["actor"]
    n_updates = actor_updates(state)
    mean_losses = []
    state.archive_draws = [0] * cfg.M
    for m, policy in enumerate(state.policies):
        losses = []
        if len(state.buffer) == 0:
            mean_losses.append(math.nan)
            continue
        for _ in range(n_updates):
            batch = state.buffer.sample(cfg.batch_size, rng)
            if m in state.elites:
                sample = state.archive.sample(strategy.n_archive_samples, state.rngs["archive"])
                state.archive_draws[m] += len(sample)
                loss = combined_policy_loss(policy, batch.s, state.critic, cfg.alpha, sample,
                                            strategy, rng)
            else:
                loss = policy_loss_sac(policy, batch.s, state.critic, cfg.alpha, rng)
            losses.append(_apply(state.actor_opts[m], loss, state, f"actor {m}"))
        mean_losses.append(float(np.mean(losses)))
    return mean_losses


def _evaluate_one(policy, env, episodes, rng):
    transitions, outcomes = [], []
    fitness, _ = rollout(policy, env, False, episodes, transitions, rng, outcomes)
    return fitness, transitions, float(np.mean(outcomes))


def evaluate(state: PopulationState) -> np.ndarray:
    """Noise-free rollouts for every agent; transitions merged in agent order.

    Also sets ``state.solved``, the per-agent fraction of successful episodes.
    """
    cfg = state.config
    rng = state.rngs["eval"]
    seeds = rng.integers(2**63, size=cfg.M)
    jobs = [(state.policies[m], make_env(cfg.env), cfg.R, np.random.default_rng(int(seeds[m])))
            for m in range(cfg.M)]
    if cfg.parallel_eval > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallel_eval) as pool:
            results = list(pool.map(lambda job: _evaluate_one(*job), jobs))
    else:
        results = [_evaluate_one(*job) for job in jobs]
    fitness = np.array([r[0] for r in results])
    state.solved = np.array([r[2] for r in results])
    if cfg.eval_writes_buffer:
        for _, transitions, _ in results:
            for t in transitions:
                state.buffer.add(*t)
    return fitness


def rank(fitness) -> list:
    """Indices sorted by descending fitness, ties to the lower index."""
    return sorted(range(len(fitness)), key=lambda m: (-fitness[m], m))


def mean_kl_to_archive(state: PopulationState, sample) -> list:
    """Per agent, the Monte Carlo KL to each probe entry, averaged.

    All agents' samples are stacked so each archived policy is evaluated
    once; draws come from the metrics stream and never touch training.
    """
    cfg = state.config
    if not sample or len(state.buffer) == 0:
        return [math.nan] * cfg.M
    rng = state.rngs["metrics"]
    states = state.buffer.sample(cfg.kl_metric_states, rng).s
    k = states.shape[0]
    drawn = [policy.sample_values(states, rng) for policy in state.policies]
    actions = np.concatenate([a for a, _ in drawn])
    log_p = np.concatenate([lp for _, lp in drawn])
    all_states = np.tile(states, (cfg.M, 1))
    total = np.zeros(cfg.M * k)
    for snap, _ in sample:
        total += log_p - snap.policy.log_prob_values(all_states, actions)
    per_agent = (total / len(sample)).reshape(cfg.M, k).mean(axis=1)
    return [float(v) for v in per_agent]


def run_generation(state: PopulationState) -> list:
    """One generation; returns the metrics rows it produced."""
    cfg = state.config
    state.step = 0
    explore_rng = state.rngs["explore"]
    for policy in state.policies:
        _, s = rollout(policy, state.env, True, 1, state.buffer, explore_rng)
        state.step += s
        state.total_step += s
    critic_losses = critic_phase(state)
    policy_losses = actor_phase(state)
    state.fitness = evaluate(state)
    state.elites = sorted(rank(state.fitness)[: cfg.K])
    if state.generation % cfg.metrics_every == 0:
        kls = mean_kl_to_archive(state, state.archive.sample(cfg.n, state.rngs["metrics"]))
    else:
        kls = [math.nan] * cfg.M
    state.archive.update([(p.snapshot(), f) for p, f in zip(state.policies, state.fitness)],
                         state.rngs["archive"])
    critic_mean = float(np.mean(critic_losses)) if critic_losses else math.nan
    rows = []
    for m in range(cfg.M):
        rows.append({
            "generation": state.generation, "total_step": state.total_step, "agent_id": m,
            "fitness": float(state.fitness[m]), "is_elite": int(m in state.elites),
            "mean_kl_to_archive": kls[m], "critic_loss": critic_mean,
            "policy_loss": policy_losses[m],
        })
    state.generation += 1
    return rows


# artifacts --------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    def __init__(self, path, header=METRICS_HEADER):
        self.path = Path(path)
        self.header = list(header)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(self.header)
        self._fh.flush()

    def write(self, rows):
        for row in rows:
            self._csv.writerow([_fmt(row[k]) for k in self.header])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_checkpoint(state: PopulationState, directory) -> Path:
    """``gen_<g>/{agent_<m>.snap, critic.snap, archive/, manifest.json}``."""
    gen_dir = Path(directory) / f"gen_{state.generation - 1}"
    gen_dir.mkdir(parents=True, exist_ok=True)
    for m, policy in enumerate(state.policies):
        _atomic_write(gen_dir / f"agent_{m}.snap", policy.snapshot().dumps())
    nets = {
        "format": "arac.critic/1",
        "critic": [a.tolist() for a in state.critic.net.get_flat()],
        "critic_sizes": state.critic.net.sizes,
        "value": [a.tolist() for a in state.value.net.get_flat()],
        "value_target": [a.tolist() for a in state.value_target.net.get_flat()],
        "value_sizes": state.value.net.sizes,
    }
    _atomic_write(gen_dir / "critic.snap", json.dumps(nets))
    state.archive.save(gen_dir / "archive")
    manifest = {
        "generation": state.generation - 1,
        "total_step": state.total_step,
        "fitness": [float(f) for f in state.fitness],
        "elites": list(state.elites),
        "config": state.config.to_dict(),
    }
    _atomic_write(gen_dir / "manifest.json", json.dumps(manifest, indent=1))
    return gen_dir


def load_checkpoint(gen_dir) -> tuple:
    """``(config, policies, manifest)`` from one ``gen_<g>`` directory."""
    gen_dir = Path(gen_dir)
    manifest = json.loads((gen_dir / "manifest.json").read_text())
    config = TrainerConfig.from_dict(manifest["config"], require=())
    policies = []
    for m in range(config.M):
        snap = PolicySnapshot.loads((gen_dir / f"agent_{m}.snap").read_text())
        policies.append(snap.to_policy())
    return config, policies, manifest


def latest_checkpoint(directory) -> Path:
    directory = Path(directory)
    if (directory / "agent_0.snap").exists():
        return directory
    gens = sorted(directory.glob("gen_*"), key=lambda p: int(p.name.split("_")[1]))
    if not gens:
        nested = directory / "checkpoints"
        if nested.is_dir():
            return latest_checkpoint(nested)
        raise FileNotFoundError(f"no checkpoint under {directory}")
    return gens[-1]


@dataclass
class RunResult:
    state: PopulationState
    rows: list
    metrics_path: Path | None = None
    checkpoints: list = field(default_factory=list)
    success: list = field(default_factory=list)


def success_row(state: PopulationState) -> dict:
    """Best agent's eval success and the population's mean success rate."""
    best = state.best_agent()
    return {"generation": state.generation - 1, "total_step": state.total_step,
            "best_agent": best, "best_solved": float(state.solved[best]),
            "success_rate": float(np.mean(state.solved))}


def train(config: TrainerConfig, out_dir=None, on_generation=None) -> RunResult:
    """Generations until ``max_steps`` exploration steps have been taken.

    With ``out_dir`` set, writes ``metrics.csv``, ``success.csv`` (one row
    per generation) and checkpoints under ``checkpoints/`` every
    ``eval_interval`` exploration steps and at the end.
    """
    state = init_state(config)
    rows = []
    writer = success_writer = None
    ckpt_root = None
    result = RunResult(state, rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.metrics_path = out_dir / "metrics.csv"
        writer = MetricsWriter(result.metrics_path)
        success_writer = MetricsWriter(out_dir / "success.csv", SUCCESS_HEADER)
        ckpt_root = out_dir / "checkpoints"
    next_ckpt = config.eval_interval
    try:
        while state.total_step < config.max_steps:
            gen_rows = run_generation(state)
            rows.extend(gen_rows)
            result.success.append(success_row(state))
            if writer is not None:
                writer.write(gen_rows)
                success_writer.write(result.success[-1:])
            done = state.total_step >= config.max_steps
            if ckpt_root is not None and (state.total_step >= next_ckpt or done):
                result.checkpoints.append(save_checkpoint(state, ckpt_root))
                log.info("checkpoint %s (total_step %d, best fitness %.4f)",
                         result.checkpoints[-1].name, state.total_step, float(state.fitness.max()))
                while next_ckpt <= state.total_step:
                    next_ckpt += config.eval_interval
            if on_generation is not None:
                on_generation(state, gen_rows)
    finally:
        if writer is not None:
            writer.close()
            success_writer.close()
    return result
