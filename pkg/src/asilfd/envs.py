"""Deterministic dense-reward control tasks and scripted PD controllers.

PointMass2D
    State ``(px, py, vx, vy, gx, gy)``; action is a 2-D force in [-1, 1].
    Start position and goal are uniform in [-1, 1]^2, velocity zero.
    Reward ``-|pos - goal| - 0.01 |a|^2`` (evaluated before the step).
PendulumSwingup
    State ``(cos th, sin th, om)`` with ``th`` measured from upright; torque
    in [-12, 12], enough to lift the pole directly. Start angle uniform in
    [-pi, pi], angular velocity in [-1, 1].
    Reward ``-(th^2 + 0.1 om^2 + 0.001 |a|^2)``.
Chain5
    Five positions on a line (state is the index as a float); the sign of the
    1-D action moves left or right, clamped at the ends. Reward ``x / 4``.
    A tiny fixture with an exactly solvable value function.

All dynamics are explicit Euler with step ``dt``; episodes end only at the
time limit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from asilfd.buffers import Trajectory, trajectory_return
from asilfd.errors import ConfigError, NumericError

POINTMASS, PENDULUM, CHAIN = "PointMass2D", "PendulumSwingup", "Chain5"
ENV_ALIASES = {"pointmass": POINTMASS, "pendulum": PENDULUM, "chain": CHAIN}


@dataclass(frozen=True)
class EnvSpec:
    id: str
    state_dim: int
    action_dim: int
    action_bound: float
    max_episode_steps: int
    dt: float
    reward_bound: float  # |r| never exceeds this

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1 or self.max_episode_steps < 1:
            raise ConfigError(f"invalid env spec {self}")


@dataclass
class EnvState:
    x: np.ndarray
    step: int = 0
    seed: int = 0


# -- PointMass2D -------------------------------------------------------------

PM_ARENA = 2.0
PM_VMAX = 2.0
PM_FORCE = 1.0
PM_DAMPING = 0.5


def _pm_reset(rng: np.random.Generator) -> np.ndarray:
    pos = rng.uniform(-1.0, 1.0, size=2)
    goal = rng.uniform(-1.0, 1.0, size=2)
    return np.concatenate([pos, np.zeros(2), goal])


def _pm_step(x: np.ndarray, a: np.ndarray, dt: float) -> tuple[np.ndarray, float]:
    pos, vel, goal = x[0:2], x[2:4], x[4:6]
    d = pos - goal
    reward = -math.sqrt(d[0] * d[0] + d[1] * d[1]) - 0.01 * float(a @ a)
    new_pos = np.clip(pos + dt * vel, -PM_ARENA, PM_ARENA)
    new_vel = np.clip(vel + dt * (PM_FORCE * a - PM_DAMPING * vel), -PM_VMAX, PM_VMAX)
    return np.concatenate([new_pos, new_vel, goal]), reward


# -- PendulumSwingup -----------------------------------------------------------

PD_GRAVITY = 9.81
PD_DAMPING = 0.1
PD_OMEGA_MAX = 8.0


def _pd_reset(rng: np.random.Generator) -> np.ndarray:
    th = rng.uniform(-math.pi, math.pi)
    om = rng.uniform(-1.0, 1.0)
    return np.array([math.cos(th), math.sin(th), om])


def pendulum_angle(x: np.ndarray) -> float:
    return math.atan2(x[1], x[0])


def _pd_step(x: np.ndarray, a: np.ndarray, dt: float) -> tuple[np.ndarray, float]:
    th, om = pendulum_angle(x), float(x[2])
    u = float(a[0])
    reward = -(th * th + 0.1 * om * om + 0.001 * u * u)
    # angle from upright: gravity pushes away from 0
    new_th = th + dt * om
    new_om = om + dt * (PD_GRAVITY * math.sin(th) + u - PD_DAMPING * om)
    new_om = min(max(new_om, -PD_OMEGA_MAX), PD_OMEGA_MAX)
    new_th = (new_th + math.pi) % (2 * math.pi) - math.pi
    return np.array([math.cos(new_th), math.sin(new_th), new_om]), reward


# -- Chain5 --------------------------------------------------------------------

CHAIN_LEN = 5


def _chain_reset(rng: np.random.Generator) -> np.ndarray:
    return np.array([float(rng.integers(0, CHAIN_LEN))])


def chain_next(x: float, a: float) -> float:
    return float(min(max(x + (1.0 if a >= 0 else -1.0), 0.0), CHAIN_LEN - 1.0))


def chain_reward(x: float) -> float:
    return x / (CHAIN_LEN - 1)


def _chain_step(x: np.ndarray, a: np.ndarray, dt: float) -> tuple[np.ndarray, float]:
    return np.array([chain_next(float(x[0]), float(a[0]))]), chain_reward(float(x[0]))


SPECS = {
    POINTMASS: EnvSpec(POINTMASS, 6, 2, 1.0, 100, 0.1, reward_bound=2 * math.sqrt(2) * PM_ARENA + 0.02),
    PENDULUM: EnvSpec(PENDULUM, 3, 1, 12.0, 200, 0.05, reward_bound=math.pi**2 + 0.1 * PD_OMEGA_MAX**2 + 0.144),
    CHAIN: EnvSpec(CHAIN, 1, 1, 1.0, 20, 1.0, reward_bound=1.0),
}
_DYNAMICS: dict[str, tuple[Callable, Callable]] = {
    POINTMASS: (_pm_reset, _pm_step),
    PENDULUM: (_pd_reset, _pd_step),
    CHAIN: (_chain_reset, _chain_step),
}


def make_spec(env_id: str, **overrides) -> EnvSpec:
    key = ENV_ALIASES.get(env_id.lower(), env_id)
    if key not in SPECS:
        raise ConfigError(f"unknown environment {env_id!r}; choose from {sorted(SPECS)}")
    return replace(SPECS[key], **overrides) if overrides else SPECS[key]


def env_reset(spec: EnvSpec, seed: int) -> EnvState:
    reset, _ = _DYNAMICS[spec.id]
    return EnvState(reset(np.random.default_rng(seed)), 0, int(seed))


def env_step(spec: EnvSpec, state: EnvState, action) -> tuple[EnvState, float, bool]:
    """Advance one step; the action is clipped to the bound first."""
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (spec.action_dim,):
        raise ConfigError(f"action has shape {a.shape}, expected ({spec.action_dim},)")
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite action")
    a = np.clip(a, -spec.action_bound, spec.action_bound)
    _, step = _DYNAMICS[spec.id]
    x, reward = step(state.x, a, spec.dt)
    n = state.step + 1
    return EnvState(x, n, state.seed), reward, n >= spec.max_episode_steps


def episode_seeds(seed: int, n: int) -> list[int]:
    """Reset seeds for ``n`` episodes derived from one seed."""
    ss = np.random.SeedSequence([int(seed), 0x5EED])
    return [int(s) for s in ss.generate_state(n, dtype=np.uint32)]


# -- scripted controllers --------------------------------------------------

EXPERT, IMPERFECT = "expert", "imperfect"

# (kp, kd) of the PD law per environment
PD_GAINS = {POINTMASS: (1.0, 1.5), PENDULUM: (40.0, 8.0), CHAIN: (1.0, 0.0)}
# constant action offset of the default imperfect controller per environment
IMPERFECT_BIAS = {POINTMASS: (0.2, -0.2), PENDULUM: (3.0,), CHAIN: (0.0,)}


@dataclass(frozen=True)
class ControllerSpec:
    kind: str = EXPERT
    gain_scale: float = 1.0
    bias: tuple[float, ...] = ()
    noise_std: float = 0.0

    def __post_init__(self):
        if self.kind not in (EXPERT, IMPERFECT):
            raise ConfigError(f"unknown controller kind {self.kind!r}")
        if not 0.0 < self.gain_scale <= 1.0 or self.noise_std < 0:
            raise ConfigError(f"invalid controller {self}")
        if self.kind == EXPERT and (self.gain_scale != 1.0 or any(self.bias) or self.noise_std != 0.0):
            raise ConfigError("an expert controller has unit gain, no bias and no noise")


def expert_controller() -> ControllerSpec:
    return ControllerSpec(EXPERT)


def imperfect_controller(
    env_id: str | None = None, gain_scale: float = 0.5, noise_std: float = 0.1, bias=None
) -> ControllerSpec:
    """Degraded PD controller; ``bias=None`` picks the environment default."""
    if bias is None:
        bias = IMPERFECT_BIAS.get(env_id, ()) if env_id else ()
    return ControllerSpec(IMPERFECT, gain_scale, tuple(float(b) for b in bias), noise_std)


def controller_for(quality: str, env_id: str | None = None) -> ControllerSpec:
    if quality == EXPERT:
        return expert_controller()
    if quality == IMPERFECT:
        return imperfect_controller(env_id)
    raise ConfigError(f"unknown demo quality {quality!r}")


def pd_term(spec: EnvSpec, x: np.ndarray) -> np.ndarray:
    """Unscaled proportional-derivative action toward the goal / upright."""
    kp, kd = PD_GAINS[spec.id]
    if spec.id == POINTMASS:
        return kp * (x[4:6] - x[0:2]) - kd * x[2:4]
    if spec.id == PENDULUM:
        return np.array([-kp * pendulum_angle(x) - kd * x[2]])
    return np.array([kp])  # Chain5: always step right


def controller_act(
    ctrl: ControllerSpec, spec: EnvSpec, state: EnvState | np.ndarray, rng: np.random.Generator | None = None
) -> np.ndarray:
    x = state.x if isinstance(state, EnvState) else np.asarray(state)
    a = ctrl.gain_scale * pd_term(spec, x)
    if ctrl.bias:
        a = a + np.asarray(ctrl.bias, dtype=np.float64)
    if ctrl.noise_std > 0:
        if rng is None:
            raise ConfigError("a noisy controller needs an rng")
        a = a + rng.normal(0.0, ctrl.noise_std, size=spec.action_dim)
    return np.clip(a, -spec.action_bound, spec.action_bound)


def rollout(spec: EnvSpec, policy: Callable[[np.ndarray], np.ndarray], seed: int) -> Trajectory:
    """One full episode of ``policy`` (state vector -> action) from ``seed``."""
    state = env_reset(spec, seed)
    S, A, R, S2, D = [], [], [], [], []
    done = False
    while not done:
        a = np.clip(np.asarray(policy(state.x), dtype=np.float64), -spec.action_bound, spec.action_bound)
        nxt, r, done = env_step(spec, state, a)
        S.append(state.x)
        A.append(a)
        R.append(r)
        S2.append(nxt.x)
        D.append(done)
        state = nxt
    return Trajectory(np.array(S), np.array(A), R, np.array(S2), D)


def collect_demos(spec: EnvSpec, ctrl: ControllerSpec, n_traj: int, seed: int) -> list[Trajectory]:
    """``n_traj`` full episodes of a scripted controller."""
    if n_traj < 1:
        raise ConfigError("n_traj must be >= 1")
    noise_rng = np.random.default_rng([int(seed), 0xD370])
    return [
        rollout(spec, lambda x: controller_act(ctrl, spec, x, noise_rng), s)
        for s in episode_seeds(seed, n_traj)
    ]


def mean_return(trajs) -> float:
    return float(np.mean([trajectory_return(t.rewards) for t in trajs]))
