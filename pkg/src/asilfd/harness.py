"""Training loop, evaluation, baseline variants and run comparison.

A run keeps an experience buffer of whole trajectories (seeded with the
demonstrations) next to a FIFO sample buffer of every online transition.
Mini-batches mix the two, and each finished episode is offered to the
experience buffer, which keeps it only if it beats the current worst
resident trajectory.
"""
from __future__ import annotations

import ast
import csv
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from asilfd.agent import (
    Agent,
    AgentConfig,
    ExplorationNoise,
    LambdaSchedule,
    actor_q_mean,
    select_action,
)
from asilfd.backend import kernels
from asilfd.buffers import (
    ExperienceBuffer,
    SampleBuffer,
    Trajectory,
    TrajectoryAccumulator,
    Transition,
    be_maybe_admit,
    be_seed,
    load_trajectories,
    mixed_sample,
)
from asilfd.envs import (
    EXPERT,
    IMPERFECT,
    EnvSpec,
    EnvState,
    controller_act,
    env_reset,
    env_step,
    episode_seeds,
    expert_controller,
    imperfect_controller,
    make_spec,
    rollout,
)
from asilfd.errors import ConfigError, NumericError, ShapeError
from asilfd.numerics import AdamState, adam_step, save_network

VARIANTS = ("ASILFD", "TD3", "REDQ", "REDQ_BC", "REDQ_LFD", "ASILFD_NoConstraint")
DEMO_VARIANTS = ("ASILFD", "REDQ_BC", "REDQ_LFD", "ASILFD_NoConstraint")
METRICS_COLUMNS = ("env_step", "eval_return", "critic_loss", "actor_loss", "lambda", "r_min", "be_trajectories")

# tags of the per-run random sub-streams
STREAMS = {"init": 1, "env": 2, "explore": 3, "sampler": 4, "agent": 5, "bc": 6}


@dataclass
class TrainConfig:
    env: str = "pointmass"
    variant: str = "ASILFD"
    total_steps: int = 50_000
    batch_size: int = 256
    alpha: float = 0.25
    n_critics: int = 10
    subset_size: int = 2
    gamma: float = 0.99
    tau: float = 0.005
    noise_sigma: float = 0.1
    noise_clip: float = 0.5
    lambda_init: float = 1.0
    lambda_min: float = 0.05
    lambda_horizon: int = 25_000
    lambda_mode: str = "linear"
    warmup_steps: int = 1000
    eval_interval: int = 1000
    eval_episodes: int = 10
    seed: int = 0
    eval_seed: int = 20_000
    demo_path: str | None = None
    be_capacity: int = 16
    bm_capacity: int = 1_000_000
    bc_epochs: int = 500
    bc_lr: float = 1e-3
    hidden: tuple = (64,)
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    dtype: str = "float64"
    critic_mode: str = "sequential"
    label: str = ""

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.total_steps < 0:
            problems.append("total_steps must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("alpha must lie in [0, 1]")
        if self.n_critics < 2 or not 1 <= self.subset_size <= self.n_critics:
            problems.append("need n_critics >= 2 and 1 <= subset_size <= n_critics")
        if not 0.0 <= self.gamma <= 1.0:
            problems.append("gamma must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            problems.append("tau must lie in [0, 1]")
        if self.noise_sigma < 0 or self.noise_clip <= 0:
            problems.append("noise_sigma must be >= 0 and noise_clip > 0")
        if self.lambda_init < 0 or self.lambda_min < 0 or self.lambda_horizon < 1:
            problems.append("lambda_init, lambda_min >= 0 and lambda_horizon >= 1")
        if self.lambda_mode not in ("linear", "exponential"):
            problems.append("lambda_mode must be 'linear' or 'exponential'")
        if self.warmup_steps < 0 or self.eval_interval < 1 or self.eval_episodes < 1:
            problems.append("warmup_steps >= 0, eval_interval >= 1, eval_episodes >= 1")
        if self.be_capacity < 1 or self.bm_capacity < 1:
            problems.append("buffer capacities must be >= 1")
        if self.bc_epochs < 0 or self.bc_lr <= 0:
            problems.append("bc_epochs >= 0 and bc_lr > 0")
        if not self.hidden or min(self.hidden) < 1:
            problems.append("hidden needs at least one positive width")
        if self.lr_actor <= 0 or self.lr_critic <= 0:
            problems.append("learning rates must be > 0")
        if self.dtype not in ("float64", "float32"):
            problems.append("dtype must be 'float64' or 'float32'")
        if self.critic_mode not in ("sequential", "parallel"):
            problems.append("critic_mode must be 'sequential' or 'parallel'")
        if problems:
            raise ConfigError("; ".join(problems))
        make_spec(self.env)

    @property
    def name(self) -> str:
        return self.label or self.variant

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


_FIELD_NAMES = [f.name for f in fields(TrainConfig)]


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment).

    Values are Python literals; anything that is not a literal is taken as a
    bare string. Unknown keys are rejected.
    """
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _literal(value)
    values.update(overrides)
    unknown = sorted(set(values) - set(_FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _literal(value: str):
    try:
        return ast.literal_eval(value)
    except (ValueError, SyntaxError):
        return value


def load_config(path, **overrides) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, **overrides)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{name} = {getattr(cfg, name)!r}\n" for name in _FIELD_NAMES)


@dataclass(frozen=True)
class VariantPlan:
    """What a variant actually does, resolved from its config."""

    uses_demos: bool
    bc_pretrain: bool
    demos_in_samples: bool  # demo transitions pushed into the sample buffer up front
    experience_buffer: bool
    be_read_only: bool
    alpha: float
    penalty: bool
    n_critics: int
    subset_size: int


def plan_for(cfg: TrainConfig) -> VariantPlan:
    v = cfg.variant
    if v == "ASILFD":
        return VariantPlan(True, False, False, True, False, cfg.alpha, True, cfg.n_critics, cfg.subset_size)
    if v == "ASILFD_NoConstraint":
        return VariantPlan(True, False, False, True, False, cfg.alpha, False, cfg.n_critics, cfg.subset_size)
    if v == "TD3":
        return VariantPlan(False, False, False, False, False, 0.0, False, 2, 2)
    if v == "REDQ":
        return VariantPlan(False, False, False, False, False, 0.0, False, cfg.n_critics, cfg.subset_size)
    if v == "REDQ_BC":
        return VariantPlan(True, True, False, False, False, 0.0, False, cfg.n_critics, cfg.subset_size)
    if v == "REDQ_LFD":
        return VariantPlan(True, True, True, True, True, cfg.alpha, False, cfg.n_critics, cfg.subset_size)
    raise ConfigError(f"unknown variant {v!r}")


def agent_config(cfg: TrainConfig, plan: VariantPlan | None = None) -> AgentConfig:
    plan = plan or plan_for(cfg)
    sched = (
        LambdaSchedule(cfg.lambda_init, cfg.lambda_min, cfg.lambda_horizon, cfg.lambda_mode)
        if plan.penalty
        else LambdaSchedule.off()
    )
    return AgentConfig(
        hidden=cfg.hidden,
        n_critics=plan.n_critics,
        subset_size=plan.subset_size,
        gamma=cfg.gamma,
        tau=cfg.tau,
        noise=ExplorationNoise(cfg.noise_sigma, cfg.noise_clip),
        lambda_schedule=sched,
        lr_actor=cfg.lr_actor,
        lr_critic=cfg.lr_critic,
        critic_mode=cfg.critic_mode,
        dtype=cfg.dtype,
    )


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name]])


# -- evaluation ----------------------------------------------------------------

def evaluate(actor, spec: EnvSpec, n_episodes: int, seed: int) -> float:
    """Mean undiscounted return of a noise-free policy over seeded episodes.

    ``actor`` is anything mapping a state vector to an action.
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    returns = [rollout(spec, actor, s).r_sum for s in episode_seeds(seed, n_episodes)]
    return float(np.mean(returns))


REFERENCES = ("expert", "imperfect", "random")


def reference_return(kind: str, cfg: TrainConfig) -> float:
    """Mean return of a reference policy on ``cfg``'s evaluation episodes.

    ``expert`` and ``imperfect`` are the scripted controllers without action
    noise; ``random`` draws uniform actions from a stream tied to the eval seed.
    """
    spec = make_spec(cfg.env)
    if kind == "random":
        rng = np.random.default_rng([cfg.eval_seed, 0x8A4D])
        policy = lambda x: rng.uniform(-spec.action_bound, spec.action_bound, spec.action_dim)
    elif kind == EXPERT:
        policy = lambda x: controller_act(expert_controller(), spec, x)
    elif kind == IMPERFECT:
        ctrl = imperfect_controller(spec.id, noise_std=0.0)
        policy = lambda x: controller_act(ctrl, spec, x)
    else:
        raise ConfigError(f"reference must be one of {REFERENCES}, got {kind!r}")
    return evaluate(policy, spec, cfg.eval_episodes, cfg.eval_seed)


def normalized_score(ret: float, expert: float, random: float) -> float:
    """0 at the random policy's return, 1 at the expert's."""
    return (ret - random) / (expert - random)


# -- behaviour cloning ------------------------------------------------------

@dataclass
class BCResult:
    initial_mse: float
    final_mse: float
    epochs: int


def _demo_arrays(demos: Sequence[Trajectory]):
    S = np.concatenate([d.states for d in demos])
    A = np.concatenate([d.actions for d in demos])
    return S, A


def bc_mse(actor, S: np.ndarray, A: np.ndarray) -> float:
    diff = actor.act(S) - A
    return float(np.mean(diff * diff))


def bc_pretrain(actor, demos: Sequence[Trajectory], epochs: int, lr: float = 1e-3) -> BCResult:
    """Fit the actor to demonstrated actions by full-batch Adam on the mean
    squared action error; the target actor is synced afterwards."""
    if not demos:
        raise ConfigError("behaviour cloning needs demonstrations")
    net = actor.online
    S, A = _demo_arrays(demos)
    S = np.ascontiguousarray(S, dtype=net.dtype)
    A = np.clip(A, -actor.action_bound, actor.action_bound)
    initial = bc_mse(actor, S, A)
    if epochs == 0:
        return BCResult(initial, initial, 0)
    opt = AdamState.like(net.theta, lr=lr)
    scale = 2.0 * actor.action_bound / A.size
    for _ in range(epochs):
        acts = kernels.forward(net.stacked(), net.layer_sizes, True, S)
        a_hat = actor.action_bound * acts[0, :, -actor.action_dim :]
        G = np.ascontiguousarray((scale * (a_hat - A))[None], dtype=net.dtype)
        grads, _ = kernels.backward(net.stacked(), net.layer_sizes, True, S, acts, G, True, False)
        adam_step(opt, net, grads[0])
    actor.target = net.copy()
    return BCResult(initial, bc_mse(actor, S, A), epochs)


# -- training ------------------------------------------------------------------

@dataclass
class RunResult:
    config: TrainConfig
    metrics: list[dict] = field(default_factory=list)
    status: str = "ok"  # or "numeric"
    abort_step: int | None = None
    message: str = ""
    n_updates: int = 0
    first_update_step: int | None = None
    admission_checks: int = 0
    episodes: int = 0
    admitted: int = 0
    bc: BCResult | None = None
    agent: Agent | None = None
    experience: ExperienceBuffer | None = None
    out_dir: Path | None = None
    wall_time: float = 0.0

    @property
    def final_return(self) -> float:
        return self.metrics[-1]["eval_return"] if self.metrics else float("nan")

    def curve(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.array([m["env_step"] for m in self.metrics]),
            np.array([m["eval_return"] for m in self.metrics]),
        )


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


class MetricsWriter:
    """Append-only CSV of evaluation records; wall-clock goes to a side file
    so the main file stays reproducible."""

    def __init__(self, out_dir: Path | None):
        self._fh = self._timing = None
        self._last_step = -1
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            self._fh = open(out_dir / "metrics.csv", "w", newline="")
            self._fh.write(",".join(METRICS_COLUMNS) + "\n")
            self._timing = open(out_dir / "timing.csv", "w", newline="")
            self._timing.write("env_step,wall_seconds\n")

    def write(self, row: dict, wall: float) -> None:
        if row["env_step"] <= self._last_step:
            raise ValueError("metrics env_step must increase")
        self._last_step = row["env_step"]
        if self._fh is not None:
            self._fh.write(",".join(_fmt(row[c]) for c in METRICS_COLUMNS) + "\n")
            self._fh.flush()
            self._timing.write(f"{row['env_step']},{wall:.3f}\n")
            self._timing.flush()

    def close(self) -> None:
        for fh in (self._fh, self._timing):
            if fh is not None:
                fh.close()


def read_metrics(path) -> list[dict]:
    """Rows of a metrics file; raises ConfigError on a missing or foreign header."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigError(f"{path}: empty metrics file")
        if tuple(header) != METRICS_COLUMNS:
            raise ConfigError(f"{path}: unexpected metrics header {header}")
        rows = []
        for rec in reader:
            row = {c: float(v) for c, v in zip(METRICS_COLUMNS, rec)}
            row["env_step"] = int(row["env_step"])
            row["be_trajectories"] = int(row["be_trajectories"])
            rows.append(row)
    if not rows:
        raise ConfigError(f"{path}: metrics file has no records")
    return rows


def load_demos(cfg: TrainConfig, spec: EnvSpec) -> list[Trajectory]:
    if not cfg.demo_path:
        raise ConfigError(f"variant {cfg.variant} needs demo_path")
    try:
        _, demos = load_trajectories(cfg.demo_path, spec.state_dim, spec.action_dim, spec.id)
    except ShapeError as exc:
        raise ConfigError(f"demonstrations do not fit {spec.id}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read demonstrations: {exc}") from None
    if not demos:
        raise ConfigError("demo file holds no trajectories")
    return demos


def train(
    cfg: TrainConfig,
    out_dir=None,
    demos: Sequence[Trajectory] | None = None,
    progress: Callable[[dict], None] | None = None,
) -> RunResult:
    """Run one configuration end to end.

    ``demos`` overrides ``cfg.demo_path``; variants that learn from scratch
    ignore both. With ``out_dir`` set, writes ``metrics.csv``, ``timing.csv``,
    ``config.txt``, ``agent.npz`` and ``actor.npz`` there.
    """
    t0 = time.perf_counter()
    spec = make_spec(cfg.env)
    plan = plan_for(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if plan.uses_demos:
        if demos is None:
            demos = load_demos(cfg, spec)
        for d in demos:
            if d.state_dim != spec.state_dim or d.action_dim != spec.action_dim:
                raise ConfigError(f"demonstrations do not fit {spec.id}")
    else:
        demos = None

    agent = Agent.create(
        spec.state_dim, spec.action_dim, spec.action_bound, agent_config(cfg, plan),
        seed=int(stream(cfg.seed, "init").integers(2**31)),
    )
    result = RunResult(cfg, agent=agent, out_dir=out)
    if plan.bc_pretrain:
        result.bc = bc_pretrain(agent.actor, demos, cfg.bc_epochs, cfg.bc_lr)

    be = None
    if plan.experience_buffer:
        be = be_seed(demos, max(cfg.be_capacity, len(demos)), read_only=plan.be_read_only)
    bm = SampleBuffer(spec.state_dim, spec.action_dim, cfg.bm_capacity)
    if plan.demos_in_samples:
        bm.extend(demos)
    result.experience = be

    env_rng = stream(cfg.seed, "env")
    explore_rng = stream(cfg.seed, "explore")
    sampler_rng = stream(cfg.seed, "sampler")
    agent_rng = stream(cfg.seed, "agent")
    writer = MetricsWriter(out)
    if out is not None:
        (out / "config.txt").write_text(dump_config(cfg))

    losses_c: list[float] = []
    losses_a: list[float] = []
    lam = float("nan")

    def record(step: int) -> None:
        row = {
            "env_step": step,
            "eval_return": evaluate(agent.actor, spec, cfg.eval_episodes, cfg.eval_seed),
            "critic_loss": float(np.mean(losses_c)) if losses_c else float("nan"),
            "actor_loss": float(np.mean(losses_a)) if losses_a else float("nan"),
            "lambda": lam,
            "r_min": be.r_min if be is not None else float("nan"),
            "be_trajectories": len(be) if be is not None else 0,
        }
        losses_c.clear()
        losses_a.clear()
        result.metrics.append(row)
        writer.write(row, time.perf_counter() - t0)
        if progress is not None:
            progress(row)

    try:
        record(0)
        state = env_reset(spec, int(env_rng.integers(2**31)))
        acc = TrajectoryAccumulator()
        for t in range(cfg.total_steps):
            if t < cfg.warmup_steps:
                a = explore_rng.uniform(-spec.action_bound, spec.action_bound, size=spec.action_dim)
            else:
                a = select_action(agent.actor, state.x, agent.config.noise, explore_rng)
            nxt, r, done = env_step(spec, state, a)
            tr = Transition(state.x, np.clip(a, -spec.action_bound, spec.action_bound), r, nxt.x, done)
            bm.push(tr)
            acc.add(tr)
            state = nxt
            if len(bm) > cfg.batch_size:
                batch = mixed_sample(be, bm, cfg.batch_size, plan.alpha, sampler_rng)
                info = agent.update_step(batch, t, agent_rng)
                if result.first_update_step is None:
                    result.first_update_step = t
                result.n_updates += 1
                losses_c.append(info["critic_loss"])
                losses_a.append(info["actor_loss"])
                lam = info["lambda"]
            if done:
                result.episodes += 1
                if be is not None:
                    result.admission_checks += 1
                    result.admitted += be_maybe_admit(be, acc.to_trajectory())
                acc.clear()
                state = env_reset(spec, int(env_rng.integers(2**31)))
            if (t + 1) % cfg.eval_interval == 0:
                record(t + 1)
    except NumericError as exc:
        result.status = "numeric"
        result.abort_step = exc.step if exc.step is not None else t
        result.message = str(exc)
    finally:
        writer.close()
        agent.close()
    if out is not None:
        extra = {"status": result.status, "abort_step": result.abort_step}
        agent.save(out / "agent.npz", extra=extra)
        save_network(agent.actor.online, out / "actor.npz")
    result.wall_time = time.perf_counter() - t0
    return result


# -- Q-error diagnostic ------------------------------------------------------

@dataclass
class DiagnosticReport:
    states: np.ndarray
    q_values: np.ndarray
    mc_returns: np.ndarray
    horizon: int
    gamma: float
    tail_bound: float  # max |G_true - G_truncated|

    @property
    def errors(self) -> np.ndarray:
        return np.abs(self.q_values - self.mc_returns)

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors))


def discounted_rollout_return(spec: EnvSpec, policy, x0: np.ndarray, horizon: int, gamma: float) -> float:
    """``sum_{k<horizon} gamma^k r_k`` of a rollout started from state ``x0``.

    The time limit is ignored: it never terminates an episode.
    """
    state = EnvState(np.array(x0, dtype=np.float64), 0, 0)
    total, disc = 0.0, 1.0
    for _ in range(horizon):
        state, r, _ = env_step(spec, state, policy(state.x))
        total += disc * r
        disc *= gamma
    return total


def q_error_diagnostic(
    agent: Agent,
    spec: EnvSpec,
    n_states: int,
    horizon: int,
    rng: np.random.Generator,
    gamma: float | None = None,
) -> DiagnosticReport:
    """Mean |Q(s, pi(s)) - G(s)| over states visited by the noise-free policy.

    ``G`` is the truncated discounted Monte-Carlo return of the same policy;
    ``gamma`` defaults to the agent's discount.
    """
    if n_states < 1 or horizon < 0:
        raise ConfigError("need n_states >= 1 and horizon >= 0")
    gamma = agent.config.gamma if gamma is None else float(gamma)
    policy = agent.actor
    visited: list[np.ndarray] = []
    while len(visited) < n_states:
        traj = rollout(spec, policy, int(rng.integers(2**31)))
        visited.extend(traj.states)
    pick = rng.choice(len(visited), size=n_states, replace=False)
    states = np.stack([visited[i] for i in pick])
    q = np.atleast_1d(actor_q_mean(agent.critics, states, policy.act(states)))
    g = np.array([discounted_rollout_return(spec, policy, s, horizon, gamma) for s in states])
    if gamma < 1:
        tail = gamma**horizon * spec.reward_bound / (1.0 - gamma)
    else:
        tail = float("inf")
    return DiagnosticReport(states, q.astype(np.float64), g, horizon, gamma, tail)


# -- comparison ----------------------------------------------------------------

def steps_to_threshold(steps, returns, threshold: float, window: int = 3):
    """First eval step from which the return stays above ``threshold`` for
    ``window`` consecutive evaluations (fewer if the run ends first), else None."""
    returns = list(returns)
    for i, step in enumerate(steps):
        tail = returns[i : i + window]
        if all(r > threshold for r in tail):
            return int(step)
    return None


@dataclass
class CompareRow:
    name: str
    seeds: list[int]
    final_returns: list[float]
    steps: list[int | None]
    failures: list[str]

    @property
    def median_final(self) -> float:
        ok = [r for r in self.final_returns if math.isfinite(r)]
        return float(np.median(ok)) if ok else float("nan")

    @property
    def iqr_final(self) -> tuple[float, float]:
        ok = [r for r in self.final_returns if math.isfinite(r)]
        if not ok:
            return (float("nan"), float("nan"))
        return float(np.percentile(ok, 25)), float(np.percentile(ok, 75))

    @property
    def median_steps(self) -> float:
        """Median steps-to-threshold; runs that never got there count as infinite."""
        vals = [math.inf if s is None else s for s in self.steps]
        return float(np.median(vals)) if vals else math.inf


def format_steps(value) -> str:
    if value is None or not math.isfinite(value):
        return "No"
    return str(int(value))


def compare(
    configs: Sequence[TrainConfig],
    seeds: Sequence[int],
    threshold: float,
    out_dir=None,
    demos: Sequence[Trajectory] | None = None,
    window: int = 3,
    progress: Callable[[str], None] | None = None,
) -> tuple[list[CompareRow], dict]:
    """Train every (config, seed) pair and summarise each config.

    Returns the summary rows and the individual RunResults keyed by
    ``(name, seed)``.
    """
    if not seeds:
        raise ConfigError("compare needs at least one seed")
    rows, runs = [], {}
    for cfg in configs:
        row = CompareRow(cfg.name, list(seeds), [], [], [])
        for seed in seeds:
            run_dir = Path(out_dir) / cfg.name / f"seed{seed}" if out_dir is not None else None
            try:
                res = train(cfg.with_(seed=seed), run_dir, demos=demos)
            except (ConfigError, OSError) as exc:
                row.final_returns.append(float("nan"))
                row.steps.append(None)
                row.failures.append(f"seed {seed}: {exc}")
                continue
            runs[(cfg.name, seed)] = res
            if res.status != "ok":
                row.failures.append(f"seed {seed}: {res.message}")
            steps, rets = res.curve()
            row.final_returns.append(res.final_return)
            row.steps.append(steps_to_threshold(steps, rets, threshold, window))
            if progress is not None:
                progress(f"{cfg.name} seed {seed}: final {res.final_return:.2f} in {res.wall_time:.0f}s")
        rows.append(row)
    return rows, runs


def format_table(rows: Sequence[CompareRow], threshold: float) -> str:
    lines = [f"{'variant':<24} {'median':>10} {'q25':>10} {'q75':>10} {'steps>' + format(threshold, '.2f'):>14} failed"]
    for row in rows:
        q25, q75 = row.iqr_final
        lines.append(
            f"{row.name:<24} {row.median_final:>10.3f} {q25:>10.3f} {q75:>10.3f} "
            f"{format_steps(row.median_steps):>14} {len(row.failures)}"
        )
    return "\n".join(lines)
