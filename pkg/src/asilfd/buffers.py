"""Replay buffers: transitions, trajectories, the FIFO sample buffer, the
return-ranked experience buffer, and the mixed-ratio batch sampler.

Trajectory text format (also used for demonstration files)::

    {"format": "asilfd-traj/1", "env": "PointMass2D", "state_dim": 6, "action_dim": 2, "n_traj": 4}
    s0,...,s5,a0,a1,r,sn0,...,sn5,done,traj
    <one comma-separated record per transition>

Line 1 is a JSON header (extra keys are allowed and preserved), line 2 the
column names, then one record per transition in trajectory order. Floats
are written with ``repr`` so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import io
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from asilfd.errors import BufferNotReady, ConfigError, ShapeError, ValidationError

TRAJ_FORMAT = "asilfd-traj/1"
FROM_EXPERIENCE = 1
FROM_SAMPLES = 0


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool = False


class Trajectory:
    """An ordered episode stored column-wise, with its undiscounted return."""

    __slots__ = ("states", "actions", "rewards", "next_states", "dones", "r_sum")

    def __init__(self, states, actions, rewards, next_states, dones, r_sum: float | None = None):
        self.states = np.asarray(states, dtype=np.float64)
        self.actions = np.asarray(actions, dtype=np.float64)
        self.rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
        self.next_states = np.asarray(next_states, dtype=np.float64)
        self.dones = np.asarray(dones, dtype=bool).reshape(-1)
        self.r_sum = trajectory_return(self.rewards) if r_sum is None else float(r_sum)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Trajectory":
        if not transitions:
            raise ValidationError("a trajectory needs at least one transition")
        return cls(
            np.stack([t.s for t in transitions]),
            np.stack([t.a for t in transitions]),
            [t.r for t in transitions],
            np.stack([t.s_next for t in transitions]),
            [t.done for t in transitions],
        )

    def __len__(self) -> int:
        return self.rewards.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield Transition(
                self.states[i], self.actions[i], float(self.rewards[i]),
                self.next_states[i], bool(self.dones[i]),
            )

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def validate(self, state_dim: int | None = None, action_dim: int | None = None) -> None:
        """Raise ValidationError unless the trajectory is internally consistent."""
        n = len(self)
        if n == 0:
            raise ValidationError("empty trajectory")
        if self.states.ndim != 2 or self.next_states.shape != self.states.shape:
            raise ValidationError("state arrays have inconsistent shapes")
        if self.actions.ndim != 2 or self.actions.shape[0] != n or self.dones.shape[0] != n:
            raise ValidationError("column lengths differ")
        if state_dim is not None and self.state_dim != state_dim:
            raise ValidationError(f"state_dim {self.state_dim} != {state_dim}")
        if action_dim is not None and self.action_dim != action_dim:
            raise ValidationError(f"action_dim {self.action_dim} != {action_dim}")
        for arr in (self.states, self.actions, self.rewards, self.next_states):
            if not np.all(np.isfinite(arr)):
                raise ValidationError("non-finite value in trajectory")
        if n > 1 and not np.array_equal(self.next_states[:-1], self.states[1:]):
            raise ValidationError("transitions do not chain (s_next[t] != s[t+1])")
        recomputed = trajectory_return(self.rewards)
        if abs(recomputed - self.r_sum) > 1e-9 * (1.0 + abs(recomputed)):
            raise ValidationError(f"cached return {self.r_sum} != recomputed {recomputed}")


def trajectory_return(rewards) -> float:
    """Undiscounted return, accumulated left to right."""
    total = 0.0
    for r in np.asarray(rewards, dtype=np.float64).tolist():
        total += r
    return total


class TrajectoryAccumulator:
    """Collects the transitions of the episode in progress."""

    def __init__(self):
        self._steps: list[Transition] = []

    def clear(self) -> None:
        self._steps = []

    def add(self, t: Transition) -> None:
        self._steps.append(t)

    def __len__(self) -> int:
        return len(self._steps)

    def to_trajectory(self) -> Trajectory:
        return Trajectory.from_transitions(self._steps)


class SampleBuffer:
    """Bounded FIFO of transitions (ring buffer over preallocated arrays)."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 1_000_000):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        self.state_dim, self.action_dim, self.capacity = state_dim, action_dim, capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.seq = np.zeros(capacity, dtype=np.int64)  # insertion counter per slot
        self._ptr = 0
        self._size = 0
        self._count = 0

    def __len__(self) -> int:
        return self._size

    def push(self, t: Transition) -> None:
        s, a, s2 = np.asarray(t.s), np.asarray(t.a), np.asarray(t.s_next)
        if s.shape != (self.state_dim,) or s2.shape != (self.state_dim,) or a.shape != (self.action_dim,):
            raise ShapeError(
                f"transition dims ({s.shape}, {a.shape}, {s2.shape}) do not match "
                f"buffer ({self.state_dim}, {self.action_dim})"
            )
        i = self._ptr
        self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i] = s, a, t.r, s2, t.done
        self.seq[i] = self._count
        self._count += 1
        self._ptr = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, trajectories: Iterable[Trajectory]) -> None:
        for traj in trajectories:
            for t in traj:
                self.push(t)

    def order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._ptr) % self.capacity

    def contents(self) -> list[Transition]:
        return [
            Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i], bool(self.done[i]))
            for i in self.order()
        ]


class ExperienceBuffer:
    """Trajectory-level buffer ranked by undiscounted return.

    Admission requires a return strictly above the current minimum; on
    overflow the lowest-return trajectory (oldest among ties) is evicted.
    """

    def __init__(self, capacity_traj: int = 16, read_only: bool = False):
        if capacity_traj < 1:
            raise ConfigError("capacity_traj must be >= 1")
        self.capacity_traj = capacity_traj
        self.read_only = read_only
        self.trajectories: list[Trajectory] = []
        self.r_sum_list: list[float] = []
        self._flat: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def r_min(self) -> float:
        return min(self.r_sum_list) if self.r_sum_list else float("-inf")

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def flat(self) -> dict[str, np.ndarray]:
        """All resident transitions concatenated (cached until the next change)."""
        if self._flat is None:
            trajs = self.trajectories
            self._flat = {
                "s": np.concatenate([t.states for t in trajs]),
                "a": np.concatenate([t.actions for t in trajs]),
                "r": np.concatenate([t.rewards for t in trajs]),
                "s_next": np.concatenate([t.next_states for t in trajs]),
                "done": np.concatenate([t.dones for t in trajs]),
            }
        return self._flat

    def _append(self, traj: Trajectory) -> None:
        self.trajectories.append(traj)
        self.r_sum_list.append(traj.r_sum)
        self._flat = None

    def maybe_admit(self, traj: Trajectory) -> bool:
        return be_maybe_admit(self, traj)


def be_seed(demos: Sequence[Trajectory], capacity_traj: int = 16, read_only: bool = False) -> ExperienceBuffer:
    """Experience buffer holding every demonstration."""
    if not demos:
        raise ConfigError("cannot seed the experience buffer without demonstrations")
    if capacity_traj < len(demos):
        raise ConfigError(f"capacity_traj {capacity_traj} < number of demos {len(demos)}")
    buf = ExperienceBuffer(capacity_traj, read_only=read_only)
    dims = (demos[0].state_dim, demos[0].action_dim)
    for d in demos:
        d.validate(*dims)
        buf._append(d)
    return buf


def be_maybe_admit(buf: ExperienceBuffer, traj: Trajectory) -> bool:
    """Admit ``traj`` iff its return exceeds the buffer's current minimum."""
    traj.validate()
    if buf.trajectories:
        ref = buf.trajectories[0]
        traj.validate(ref.state_dim, ref.action_dim)
    if buf.read_only or not traj.r_sum > buf.r_min:
        return False
    buf._append(traj)
    while len(buf.trajectories) > buf.capacity_traj:
        worst = int(np.argmin(buf.r_sum_list))  # first index wins ties: the oldest
        del buf.trajectories[worst]
        del buf.r_sum_list[worst]
    return True


def bm_push(buf: SampleBuffer, t: Transition) -> None:
    buf.push(t)


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    source: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))

    def __len__(self) -> int:
        return self.r.shape[0]

    @property
    def n_experience(self) -> int:
        return int(np.count_nonzero(self.source == FROM_EXPERIENCE))


def experience_rows(b: int, alpha: float) -> int:
    """Rows drawn from the experience buffer: alpha * b rounded half up."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return min(b, int(np.floor(alpha * b + 0.5)))


def mixed_sample(
    be: ExperienceBuffer | None,
    bm: SampleBuffer,
    b: int,
    alpha: float,
    rng: np.random.Generator,
) -> Batch:
    """Draw ``round(alpha*b)`` rows from ``be`` and the rest from ``bm``,
    uniformly with replacement over transitions.

    Raises BufferNotReady when ``bm`` holds fewer than ``b`` transitions or
    experience rows are requested from an empty experience buffer.
    """
    n_e = experience_rows(b, alpha)
    if len(bm) < b:
        raise BufferNotReady(f"sample buffer holds {len(bm)} < {b} transitions")
    if n_e > 0 and (be is None or len(be) == 0):
        raise BufferNotReady("experience rows requested from an empty experience buffer")
    n_m = b - n_e
    parts = []
    if n_e:
        flat = be.flat()
        idx = rng.integers(0, flat["r"].shape[0], size=n_e)
        parts.append((flat["s"][idx], flat["a"][idx], flat["r"][idx], flat["s_next"][idx], flat["done"][idx]))
    if n_m:
        idx = rng.integers(0, len(bm), size=n_m)
        parts.append((bm.s[idx], bm.a[idx], bm.r[idx], bm.s_next[idx], bm.done[idx]))
    cols = [np.concatenate([p[k] for p in parts]) for k in range(5)]
    source = np.concatenate([np.full(n_e, FROM_EXPERIENCE, np.int8), np.full(n_m, FROM_SAMPLES, np.int8)])
    return Batch(*cols, source=source)


# -- trajectory files ----------------------------------------------------------

def _columns(state_dim: int, action_dim: int) -> list[str]:
    return (
        [f"s{i}" for i in range(state_dim)]
        + [f"a{i}" for i in range(action_dim)]
        + ["r"]
        + [f"sn{i}" for i in range(state_dim)]
        + ["done", "traj"]
    )


def dumps_trajectories(trajs: Sequence[Trajectory], env_id: str, **extra) -> str:
    if not trajs:
        raise ConfigError("nothing to write")
    sd, ad = trajs[0].state_dim, trajs[0].action_dim
    header = {"format": TRAJ_FORMAT, "env": env_id, "state_dim": sd, "action_dim": ad, "n_traj": len(trajs)}
    header.update(extra)
    out = io.StringIO()
    out.write(json.dumps(header) + "\n")
    out.write(",".join(_columns(sd, ad)) + "\n")
    for k, traj in enumerate(trajs):
        traj.validate(sd, ad)
        for i in range(len(traj)):
            vals = [
                *traj.states[i].tolist(), *traj.actions[i].tolist(), float(traj.rewards[i]),
                *traj.next_states[i].tolist(),
            ]
            out.write(",".join(repr(float(v)) for v in vals))
            out.write(f",{int(traj.dones[i])},{k}\n")
    return out.getvalue()


def save_trajectories(path, trajs: Sequence[Trajectory], env_id: str, **extra) -> None:
    Path(path).write_text(dumps_trajectories(trajs, env_id, **extra))


def loads_trajectories(
    text: str, state_dim: int | None = None, action_dim: int | None = None, env_id: str | None = None
) -> tuple[dict, list[Trajectory]]:
    """Parse a trajectory file; dimension or env mismatches raise ShapeError."""
    lines = text.splitlines()
    if len(lines) < 2:
        raise ValidationError("trajectory file is truncated")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValidationError(f"bad trajectory header: {exc}") from None
    if header.get("format") != TRAJ_FORMAT:
        raise ValidationError(f"unsupported trajectory format {header.get('format')!r}")
    sd, ad = int(header["state_dim"]), int(header["action_dim"])
    if state_dim is not None and sd != state_dim or action_dim is not None and ad != action_dim:
        raise ShapeError(f"file dims ({sd}, {ad}) do not match expected ({state_dim}, {action_dim})")
    if env_id is not None and header.get("env") != env_id:
        raise ShapeError(f"file was recorded on {header.get('env')!r}, expected {env_id!r}")
    if lines[1].split(",") != _columns(sd, ad):
        raise ShapeError("column header does not match the declared dimensions")
    rows: dict[int, list[list[str]]] = {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        fields = line.split(",")
        if len(fields) != 2 * sd + ad + 3:
            raise ShapeError(f"line {lineno}: expected {2 * sd + ad + 3} fields, got {len(fields)}")
        rows.setdefault(int(fields[-1]), []).append(fields)
    if sorted(rows) != list(range(len(rows))) or len(rows) != int(header["n_traj"]):
        raise ValidationError(f"header declares {header['n_traj']} trajectories, found {len(rows)}")
    trajs = []
    for k in range(len(rows)):
        data = np.array([[float(v) for v in f[:-2]] for f in rows[k]])
        done = [bool(int(f[-2])) for f in rows[k]]
        traj = Trajectory(
            data[:, :sd], data[:, sd : sd + ad], data[:, sd + ad], data[:, sd + ad + 1 :], done
        )
        traj.validate(sd, ad)
        trajs.append(traj)
    return header, trajs


def load_trajectories(path, state_dim=None, action_dim=None, env_id=None):
    return loads_trajectories(Path(path).read_text(), state_dim, action_dim, env_id)


def dump_experience_buffer(buf: ExperienceBuffer, path, env_id: str) -> None:
    save_trajectories(path, buf.trajectories, env_id, capacity_traj=buf.capacity_traj, read_only=buf.read_only)


def load_experience_buffer(path, state_dim=None, action_dim=None) -> ExperienceBuffer:
    header, trajs = load_trajectories(path, state_dim, action_dim)
    buf = ExperienceBuffer(int(header.get("capacity_traj", max(16, len(trajs)))), bool(header.get("read_only", False)))
    for t in trajs:
        buf._append(t)
    return buf
