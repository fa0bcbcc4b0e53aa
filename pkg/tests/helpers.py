"""Small builders shared by several test modules."""
import numpy as np

from asilfd.buffers import Trajectory, Transition


def make_traj(ret: float, length: int = 3, sd: int = 2, ad: int = 1, offset: float = 0.0) -> Trajectory:
    """A chained trajectory whose rewards sum exactly to ``ret``."""
    states = offset + np.arange(length + 1, dtype=float)[:, None] * np.ones(sd)
    rewards = np.zeros(length)
    rewards[-1] = ret
    return Trajectory(states[:-1].copy(), np.zeros((length, ad)), rewards, states[1:].copy(), [False] * (length - 1) + [True])


def tagged(i: int, sd: int = 2, ad: int = 1) -> Transition:
    """Transition whose every field encodes ``i``."""
    return Transition(np.full(sd, float(i)), np.full(ad, float(i)), float(i), np.full(sd, i + 0.5))
