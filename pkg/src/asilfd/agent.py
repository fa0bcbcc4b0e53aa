"""Deterministic actor, ensemble critics and the self-imitation update.

Critic targets take the minimum over a random size-M subset of the N target
critics; the actor maximises the mean online-critic value while a weighted
squared-error penalty keeps its actions close to the batch actions. The
penalty weight follows a decaying schedule.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from asilfd.backend import kernels
from asilfd.buffers import Batch
from asilfd.errors import ConfigError, NumericError, ValidationError
from asilfd.numerics import (
    AdamState,
    NetworkParams,
    adam_step,
    net_init,
    network_from_arrays,
    network_to_arrays,
    polyak_update,
)

AGENT_FORMAT = "asilfd-agent/1"


@dataclass(frozen=True)
class ExplorationNoise:
    sigma: float = 0.1
    clip: float = 0.5

    def __post_init__(self):
        if self.sigma < 0 or self.clip <= 0:
            raise ConfigError(f"invalid noise {self}")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.sigma == 0:
            return np.zeros(shape)
        return np.clip(rng.normal(0.0, self.sigma, size=shape), -self.clip, self.clip)


@dataclass(frozen=True)
class LambdaSchedule:
    """Penalty weight decaying from ``lambda_init`` to ``lambda_min``.

    Linear mode reaches ``lambda_min`` at ``decay_horizon``. Exponential mode
    multiplies by ``rho`` per step with ``rho`` chosen so the weight hits
    ``lambda_min`` at the horizon (1% of ``lambda_init`` when the floor is 0).
    """

    lambda_init: float = 1.0
    lambda_min: float = 0.05
    decay_horizon: int = 25_000
    mode: str = "linear"

    def __post_init__(self):
        if self.lambda_min < 0 or self.lambda_init < 0 or self.decay_horizon < 1:
            raise ConfigError(f"invalid lambda schedule {self}")
        if self.mode not in ("linear", "exponential"):
            raise ConfigError(f"unknown lambda schedule mode {self.mode!r}")

    @classmethod
    def off(cls) -> "LambdaSchedule":
        return cls(0.0, 0.0, 1)


def lambda_value(sched: LambdaSchedule, step: int) -> float:
    if sched.lambda_init <= sched.lambda_min:
        return sched.lambda_init
    if sched.mode == "linear":
        return max(sched.lambda_min, sched.lambda_init * (1.0 - step / sched.decay_horizon))
    floor = sched.lambda_min if sched.lambda_min > 0 else 0.01 * sched.lambda_init
    rho = (floor / sched.lambda_init) ** (1.0 / sched.decay_horizon)
    return max(sched.lambda_min, sched.lambda_init * rho**step)


class Actor:
    """Deterministic policy ``bound * tanh(net(s))`` with a target copy."""

    def __init__(self, online: NetworkParams, action_bound: float, lr: float = 3e-4):
        if online.output_activation != "tanh":
            raise ConfigError("actor network needs a tanh output layer")
        self.online = online
        self.target = online.copy()
        self.action_bound = float(action_bound)
        self.adam = AdamState.like(online.theta, lr=lr)

    @classmethod
    def create(cls, state_dim, action_dim, action_bound, hidden=(64,), seed=0, lr=3e-4, dtype=np.float64):
        net = net_init((state_dim, *hidden, action_dim), "tanh", seed=seed, dtype=dtype)
        return cls(net, action_bound, lr)

    @property
    def state_dim(self) -> int:
        return self.online.layer_sizes[0]

    @property
    def action_dim(self) -> int:
        return self.online.layer_sizes[-1]

    def _forward(self, net: NetworkParams, S: np.ndarray) -> np.ndarray:
        acts = kernels.forward(net.stacked(), net.layer_sizes, True, S)
        return acts[0, :, -self.action_dim :]

    def act(self, states, target: bool = False) -> np.ndarray:
        S = np.asarray(states, dtype=self.online.dtype)
        single = S.ndim == 1
        S = np.ascontiguousarray(S.reshape(1, -1) if single else S)
        a = self.action_bound * self._forward(self.target if target else self.online, S)
        return a[0].astype(np.float64) if single else a

    def __call__(self, state) -> np.ndarray:
        return self.act(state)


class CriticEnsemble:
    """N online and N target Q-networks sharing one architecture.

    Parameters are stacked row-wise (``online[i]`` is critic i's flat theta),
    so one optimizer state and one Polyak call cover the whole ensemble.
    """

    def __init__(self, layer_sizes, online: np.ndarray, subset_size: int, lr: float = 3e-4):
        n = online.shape[0]
        if n < 2:
            raise ConfigError("an ensemble needs at least two critics")
        if not 1 <= subset_size <= n:
            raise ConfigError(f"subset size {subset_size} outside [1, {n}]")
        self.layer_sizes = tuple(layer_sizes)
        self.online = online
        self.target = online.copy()
        self.subset_size = subset_size
        self.adam = AdamState.like(online, lr=lr)

    @classmethod
    def create(cls, state_dim, action_dim, n_critics=10, subset_size=2, hidden=(64,), seed=0, lr=3e-4, dtype=np.float64):
        sizes = (state_dim + action_dim, *hidden, 1)
        seeds = np.random.SeedSequence([int(seed), 0xC41]).generate_state(n_critics)
        online = np.stack([net_init(sizes, "identity", seed=int(s), dtype=dtype).theta for s in seeds])
        return cls(sizes, online, subset_size, lr)

    @property
    def n(self) -> int:
        return self.online.shape[0]

    @property
    def dtype(self):
        return self.online.dtype

    def member(self, i: int, target: bool = False) -> NetworkParams:
        return NetworkParams(self.layer_sizes, "identity", (self.target if target else self.online)[i])

    def values(self, X: np.ndarray, thetas: np.ndarray | None = None) -> np.ndarray:
        """Q-values ``(E, B)`` of the given stack (default: all online critics)."""
        th = self.online if thetas is None else thetas
        return kernels.forward(th, self.layer_sizes, False, X)[:, :, -1]


def _sa(s, a, dtype) -> np.ndarray:
    return np.ascontiguousarray(np.concatenate([np.asarray(s), np.asarray(a)], axis=-1), dtype=dtype)


def select_action(actor: Actor, state, noise: ExplorationNoise, rng: np.random.Generator) -> np.ndarray:
    """Policy action plus clipped Gaussian noise, clipped to the action bound."""
    a = actor.act(state)
    if noise.sigma > 0:
        a = a + noise.sample(rng, a.shape)
    return np.clip(a, -actor.action_bound, actor.action_bound)


def draw_subset(ens: CriticEnsemble, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(ens.n, size=ens.subset_size, replace=False)


def _check_subset(ens: CriticEnsemble, subset) -> np.ndarray:
    idx = np.asarray(subset, dtype=np.intp).reshape(-1)
    if idx.size == 0 or len(set(idx.tolist())) != idx.size or idx.min() < 0 or idx.max() >= ens.n:
        raise ValidationError(f"invalid critic subset {idx.tolist()} for ensemble of {ens.n}")
    return idx


def target_q(ens: CriticEnsemble, s_next, a_next, subset) -> np.ndarray:
    """Minimum over the subset's target critics, per row."""
    idx = _check_subset(ens, subset)
    X = _sa(s_next, a_next, ens.dtype)
    single = X.ndim == 1
    X = X.reshape(1, -1) if single else X
    q = ens.values(X, np.ascontiguousarray(ens.target[idx])).min(axis=0)
    return q[0] if single else q


def critic_targets(
    ens: CriticEnsemble,
    actor: Actor,
    batch: Batch,
    gamma: float,
    noise: ExplorationNoise,
    rng: np.random.Generator,
    use_target_actor: bool = True,
    subset=None,
) -> np.ndarray:
    """Bootstrapped targets ``r + gamma * min_subset Q'(s', a')``.

    ``done`` is a time-limit flag only and never stops bootstrapping. The
    subset is drawn from ``rng`` first, then the smoothing noise.
    """
    if subset is None:
        subset = draw_subset(ens, rng)
    S2 = np.ascontiguousarray(batch.s_next, dtype=ens.dtype)
    a2 = actor.act(S2, target=use_target_actor)
    a2 = np.clip(a2 + noise.sample(rng, a2.shape), -actor.action_bound, actor.action_bound)
    r = np.asarray(batch.r, dtype=np.float64)
    if gamma == 0:
        return r.copy()
    return r + gamma * target_q(ens, S2, a2, subset)


def critics_loss_and_grads(ens: CriticEnsemble, batch: Batch, y, members=None):
    """Squared TD losses ``(E,)`` and flat gradients ``(E, P)`` for several critics."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite critic target")
    th = ens.online if members is None else np.ascontiguousarray(ens.online[members])
    X = _sa(batch.s, batch.a, ens.dtype)
    acts = kernels.forward(th, ens.layer_sizes, False, X)
    diff = acts[:, :, -1] - y.astype(ens.dtype)
    losses = np.einsum("eb,eb->e", diff, diff)
    G = np.ascontiguousarray((2 * diff)[:, :, None])
    grads, _ = kernels.backward(th, ens.layer_sizes, False, X, acts, G, True, False)
    return losses.astype(np.float64), grads


def critic_loss_and_grads(ens: CriticEnsemble, i: int, batch: Batch, y):
    losses, grads = critics_loss_and_grads(ens, batch, y, members=[i])
    return float(losses[0]), grads[0]


def actor_q_mean(ens: CriticEnsemble, s, a_hat) -> np.ndarray:
    """Mean over the N online critics."""
    X = _sa(s, a_hat, ens.dtype)
    single = X.ndim == 1
    q = ens.values(X.reshape(1, -1) if single else X).mean(axis=0)
    return q[0] if single else q


def actor_loss_and_grads(ens: CriticEnsemble, actor: Actor, batch: Batch, lam: float):
    """Loss ``sum_b [-mean_i Q_i(s, pi(s)) + lam * |a - pi(s)|^2]`` and its
    gradient w.r.t. the actor's parameters (critics held fixed)."""
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    net = actor.online
    S = np.ascontiguousarray(batch.s, dtype=net.dtype)
    a_acts = kernels.forward(net.stacked(), net.layer_sizes, True, S)
    t = a_acts[0, :, -actor.action_dim :]
    a_hat = actor.action_bound * t
    X = _sa(S, a_hat, ens.dtype)
    c_acts = kernels.forward(ens.online, ens.layer_sizes, False, X)
    q_mean = c_acts[:, :, -1].mean(axis=0)
    diff = np.asarray(batch.a, dtype=net.dtype) - a_hat
    loss = float(-q_mean.sum() + lam * np.sum(diff * diff))
    G = np.full((ens.n, S.shape[0], 1), -1.0 / ens.n, dtype=ens.dtype)
    _, gX = kernels.backward(ens.online, ens.layer_sizes, False, X, c_acts, G, False, True)
    d_ahat = gX[:, :, actor.state_dim :].sum(axis=0) - 2.0 * lam * diff
    g_out = np.ascontiguousarray((actor.action_bound * d_ahat)[None], dtype=net.dtype)
    grads, _ = kernels.backward(net.stacked(), net.layer_sizes, True, S, a_acts, g_out, True, False)
    return loss, grads[0]


@dataclass
class AgentConfig:
    hidden: tuple[int, ...] = (64,)
    n_critics: int = 10
    subset_size: int = 2
    gamma: float = 0.99
    tau: float = 0.005
    noise: ExplorationNoise = field(default_factory=ExplorationNoise)
    lambda_schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    use_target_actor: bool = True
    critic_mode: str = "sequential"
    dtype: str = "float64"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if self.critic_mode not in ("sequential", "parallel"):
            raise ConfigError(f"unknown critic mode {self.critic_mode!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported precision {self.dtype!r}")


class Agent:
    """Actor, critic ensemble, optimizer states and update counter."""

    def __init__(self, actor: Actor, critics: CriticEnsemble, config: AgentConfig):
        self.actor = actor
        self.critics = critics
        self.config = config
        self.updates = 0
        self._pool: ThreadPoolExecutor | None = None

    @classmethod
    def create(cls, state_dim, action_dim, action_bound, config: AgentConfig, seed: int = 0) -> "Agent":
        dtype = np.dtype(config.dtype)
        seeds = np.random.SeedSequence([int(seed), 0xA6E]).generate_state(2)
        actor = Actor.create(state_dim, action_dim, action_bound, config.hidden, int(seeds[0]), config.lr_actor, dtype)
        critics = CriticEnsemble.create(
            state_dim, action_dim, config.n_critics, config.subset_size, config.hidden,
            int(seeds[1]), config.lr_critic, dtype,
        )
        return cls(actor, critics, config)

    def _critic_grads(self, batch: Batch, y):
        if self.config.critic_mode == "sequential" or self.critics.n < 2:
            return critics_loss_and_grads(self.critics, batch, y)
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=min(4, self.critics.n))
        chunks = np.array_split(np.arange(self.critics.n), self._pool._max_workers)
        parts = list(self._pool.map(lambda idx: critics_loss_and_grads(self.critics, batch, y, idx), chunks))
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def update_step(self, batch: Batch, step: int, rng: np.random.Generator) -> dict:
        """One critic-ensemble update, one actor update, then target averaging."""
        cfg = self.config
        y = critic_targets(self.critics, self.actor, batch, cfg.gamma, cfg.noise, rng, cfg.use_target_actor)
        losses, grads = self._critic_grads(batch, y)
        try:
            adam_step(self.critics.adam, self.critics.online, grads)
        except NumericError as exc:
            raise NumericError(f"critic update: {exc.args[0]}", layer=exc.layer, step=step) from None
        lam = lambda_value(cfg.lambda_schedule, step)
        a_loss, a_grads = actor_loss_and_grads(self.critics, self.actor, batch, lam)
        try:
            adam_step(self.actor.adam, self.actor.online, a_grads)
        except NumericError as exc:
            raise NumericError(f"actor update: {exc.args[0]}", layer=exc.layer, step=step) from None
        if cfg.tau > 0:
            polyak_update(self.actor.target, self.actor.online, cfg.tau)
            polyak_update(self.critics.target, self.critics.online, cfg.tau)
        self.updates += 1
        if not (math.isfinite(a_loss) and np.all(np.isfinite(losses))):
            raise NumericError("non-finite loss", step=step)
        return {
            "critic_losses": losses,
            "critic_loss": float(losses.mean()),
            "actor_loss": a_loss,
            "lambda": lam,
            "mean_target": float(np.mean(y)),
        }

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # -- checkpoints --------------------------------------------------------

    def save(self, path, rng_states: dict | None = None, extra: dict | None = None) -> None:
        a_meta, arrays = network_to_arrays(self.actor.online, "actor.")
        _, t_arrays = network_to_arrays(self.actor.target, "actor_target.")
        arrays.update(t_arrays)
        arrays["critics.online"] = self.critics.online
        arrays["critics.target"] = self.critics.target
        for name, st in (("actor", self.actor.adam), ("critics", self.critics.adam)):
            arrays[f"adam.{name}.m"] = st.m
            arrays[f"adam.{name}.v"] = st.v
        cfg = asdict(self.config)
        meta = {
            "format": AGENT_FORMAT,
            "actor": a_meta,
            "action_bound": self.actor.action_bound,
            "critic_layer_sizes": list(self.critics.layer_sizes),
            "subset_size": self.critics.subset_size,
            "adam": {
                name: {k: getattr(st, k) for k in ("lr", "beta1", "beta2", "eps", "step")}
                for name, st in (("actor", self.actor.adam), ("critics", self.critics.adam))
            },
            "updates": self.updates,
            "config": cfg,
            "rng_states": rng_states or {},
            "extra": extra or {},
        }
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> tuple["Agent", dict]:
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("format") != AGENT_FORMAT:
                raise ConfigError(f"{path}: not an {AGENT_FORMAT} checkpoint")
            online = network_from_arrays(meta["actor"], data, "actor.")
            target = network_from_arrays(meta["actor"], data, "actor_target.")
            actor = Actor(online, meta["action_bound"])
            actor.target = target
            critics = CriticEnsemble(
                meta["critic_layer_sizes"], np.array(data["critics.online"]), meta["subset_size"]
            )
            critics.target = np.array(data["critics.target"])
            for name, obj in (("actor", actor), ("critics", critics)):
                hyper = meta["adam"][name]
                obj.adam = AdamState(np.array(data[f"adam.{name}.m"]), np.array(data[f"adam.{name}.v"]), **hyper)
        c = dict(meta["config"])
        c["hidden"] = tuple(c["hidden"])
        c["noise"] = ExplorationNoise(**c["noise"])
        c["lambda_schedule"] = LambdaSchedule(**c["lambda_schedule"])
        agent = cls(actor, critics, AgentConfig(**c))
        agent.updates = meta["updates"]
        return agent, meta


# -- finite-difference suite ---------------------------------------------------

def _with_theta(buf: np.ndarray, fn):
    """Evaluate ``fn`` with ``buf`` temporarily overwritten by a probe vector."""

    def run(theta):
        saved = buf.copy()
        buf[...] = theta.reshape(buf.shape)
        try:
            return fn()
        finally:
            buf[...] = saved

    return run


def _random_batch(rng, state_dim, action_dim, b) -> Batch:
    return Batch(
        rng.normal(size=(b, state_dim)),
        rng.uniform(-1, 1, size=(b, action_dim)),
        rng.normal(size=b),
        rng.normal(size=(b, state_dim)),
        np.zeros(b, dtype=bool),
    )


def gradient_suite(n_instances: int = 60, seed: int = 0, h: float = 3e-4, max_coords: int = 120) -> dict:
    """Worst relative finite-difference errors of the critic and actor losses.

    Instances alternate between the per-critic TD loss and the penalised
    actor loss over randomised shapes, batches, targets and penalty weights.
    Always 64-bit. Returns worst errors per loss kind plus probe counts.
    """
    from asilfd.numerics import grad_check, relu_pattern

    rng = np.random.default_rng(seed)
    report = {"critic": 0.0, "actor": 0.0, "instances": 0, "checked": 0, "skipped": 0}
    for k in range(n_instances):
        sd, ad = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        hidden = tuple(int(w) for w in rng.integers(4, 17, size=int(rng.integers(1, 3))))
        cfg = AgentConfig(hidden=hidden, n_critics=int(rng.integers(2, 5)), subset_size=1)
        agent = Agent.create(sd, ad, float(rng.uniform(0.5, 2.0)), cfg, seed=int(rng.integers(2**31)))
        batch = _random_batch(rng, sd, ad, int(rng.integers(2, 17)))
        ens, actor = agent.critics, agent.actor
        if k % 2 == 0:
            i = int(rng.integers(ens.n))
            y = rng.normal(size=len(batch))
            row = ens.online[i]
            X = np.concatenate([batch.s, batch.a], axis=1)
            res = grad_check(
                _with_theta(row, lambda: critic_loss_and_grads(ens, i, batch, y)[0]),
                _with_theta(row, lambda: critic_loss_and_grads(ens, i, batch, y)[1]),
                row.copy(), h=h, max_coords=max_coords, seed=k,
                kink_fn=_with_theta(row, lambda: relu_pattern(ens.member(i), X)),
            )
            kind = "critic"
        else:
            lam = float(rng.uniform(0.0, 2.0))
            theta = actor.online.theta

            def pattern():
                a_hat = actor.act(batch.s)
                X = np.concatenate([batch.s, a_hat], axis=1)
                parts = [relu_pattern(actor.online, batch.s).ravel()]
                parts += [relu_pattern(ens.member(j), X).ravel() for j in range(ens.n)]
                return np.concatenate(parts)

            res = grad_check(
                _with_theta(theta, lambda: actor_loss_and_grads(ens, actor, batch, lam)[0]),
                _with_theta(theta, lambda: actor_loss_and_grads(ens, actor, batch, lam)[1]),
                theta.copy(), h=h, max_coords=max_coords, seed=k,
                kink_fn=_with_theta(theta, pattern),
            )
            kind = "actor"
        report[kind] = max(report[kind], res.worst)
        report["instances"] += 1
        report["checked"] += res.checked
        report["skipped"] += res.skipped
    return report
