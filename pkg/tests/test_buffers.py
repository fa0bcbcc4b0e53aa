import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from asilfd.buffers import (
    FROM_EXPERIENCE,
    FROM_SAMPLES,
    ExperienceBuffer,
    SampleBuffer,
    Trajectory,
    TrajectoryAccumulator,
    Transition,
    be_maybe_admit,
    be_seed,
    bm_push,
    dump_experience_buffer,
    dumps_trajectories,
    experience_rows,
    load_experience_buffer,
    loads_trajectories,
    mixed_sample,
    trajectory_return,
)
from asilfd.errors import BufferNotReady, ConfigError, ShapeError, ValidationError
from helpers import make_traj, tagged


class TestTrajectory:
    def test_return_cached(self):
        t = make_traj(7.5, length=4)
        assert t.r_sum == 7.5 and len(t) == 4

    def test_from_transitions_roundtrip(self):
        t = make_traj(2.0)
        u = Trajectory.from_transitions(list(t))
        assert np.array_equal(u.states, t.states) and u.r_sum == t.r_sum

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            Trajectory.from_transitions([])

    def test_broken_chain(self):
        t = make_traj(1.0)
        t.next_states[0] += 1.0
        with pytest.raises(ValidationError):
            t.validate()

    def test_stale_cached_return(self):
        t = make_traj(1.0)
        t.r_sum = 2.0
        with pytest.raises(ValidationError):
            t.validate()

    def test_non_finite(self):
        t = make_traj(1.0)
        t.actions[0, 0] = np.nan
        with pytest.raises(ValidationError):
            t.validate()

    def test_return_left_fold(self):
        assert trajectory_return([0.1, 0.2, 0.3]) == (0.1 + 0.2) + 0.3

    def test_accumulator(self):
        acc = TrajectoryAccumulator()
        for t in make_traj(3.0):
            acc.add(t)
        assert len(acc) == 3 and acc.to_trajectory().r_sum == 3.0
        acc.clear()
        assert len(acc) == 0


class TestSeed:
    def test_r_min(self):
        buf = be_seed([make_traj(r) for r in (10, 20, 30)])
        assert buf.r_min == 10 and buf.r_sum_list == [10, 20, 30]

    def test_transition_count(self):
        buf = be_seed([make_traj(1, length=n) for n in (3, 5, 7, 2)])
        assert buf.n_transitions == 17

    def test_single(self):
        assert be_seed([make_traj(-4.0)]).r_min == -4.0

    def test_empty(self):
        with pytest.raises(ConfigError):
            be_seed([])

    def test_capacity_below_demos(self):
        with pytest.raises(ConfigError):
            be_seed([make_traj(1), make_traj(2)], capacity_traj=1)

    def test_empty_buffer_r_min(self):
        assert ExperienceBuffer().r_min == float("-inf")


class TestAdmit:
    def test_admit_under_capacity(self):
        buf = be_seed([make_traj(r) for r in (10, 20, 30)], capacity_traj=16)
        assert be_maybe_admit(buf, make_traj(15))
        assert buf.r_sum_list == [10, 20, 30, 15] and buf.r_min == 10

    def test_strict_boundary(self):
        buf = be_seed([make_traj(r) for r in (10, 20, 30)])
        assert not be_maybe_admit(buf, make_traj(10))
        assert len(buf) == 3

    def test_evict_minimum(self):
        buf = be_seed([make_traj(r) for r in (10, 20, 30)], capacity_traj=3)
        assert be_maybe_admit(buf, make_traj(25))
        assert buf.r_sum_list == [20, 30, 25] and buf.r_min == 20

    def test_evict_oldest_on_tie(self):
        a, b = make_traj(5, offset=0.0), make_traj(5, offset=100.0)
        buf = be_seed([a, b, make_traj(9)], capacity_traj=3)
        be_maybe_admit(buf, make_traj(7))
        assert buf.trajectories[0] is b and buf.r_sum_list == [5, 9, 7]

    def test_inconsistent_rejected(self):
        buf = be_seed([make_traj(1)])
        bad = make_traj(5)
        bad.r_sum = 6
        with pytest.raises(ValidationError):
            be_maybe_admit(buf, bad)

    def test_dimension_mismatch(self):
        buf = be_seed([make_traj(1)])
        with pytest.raises(ValidationError):
            be_maybe_admit(buf, make_traj(5, sd=3))

    def test_read_only(self):
        buf = be_seed([make_traj(1)], read_only=True)
        assert not be_maybe_admit(buf, make_traj(100))

    def test_flat_cache_invalidated(self):
        buf = be_seed([make_traj(1, length=2)])
        assert buf.flat()["r"].shape == (2,)
        be_maybe_admit(buf, make_traj(5, length=4))
        assert buf.flat()["r"].shape == (6,)

    @given(
        st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=5),
        st.lists(st.floats(-100, 100, allow_nan=False), max_size=80),
        st.integers(5, 8),
    )
    def test_invariants_property(self, seeds, offers, cap):
        buf = be_seed([make_traj(r) for r in seeds], capacity_traj=cap)
        demo_ids = {id(t) for t in buf.trajectories}
        threshold_at_admission = {}
        last = buf.r_min
        for r in offers:
            before = buf.r_min
            t = make_traj(r)
            if be_maybe_admit(buf, t):
                threshold_at_admission[id(t)] = before
            assert buf.r_min >= last
            last = buf.r_min
            assert len(buf) <= cap
            assert buf.r_sum_list == [x.r_sum for x in buf.trajectories]
        for t in buf.trajectories:
            assert id(t) in demo_ids or t.r_sum > threshold_at_admission[id(t)]


class TestSampleBuffer:
    def test_fifo_small(self):
        buf = SampleBuffer(2, 1, capacity=2)
        for i in range(3):
            bm_push(buf, tagged(i))
        assert [t.r for t in buf.contents()] == [1.0, 2.0]

    def test_size_increments(self):
        buf = SampleBuffer(2, 1, capacity=5)
        for i in range(3):
            buf.push(tagged(i))
            assert len(buf) == i + 1

    def test_many_pushes(self):
        buf = SampleBuffer(1, 1, capacity=10_000)
        for i in range(100_000):
            buf.push(Transition(np.array([i], float), np.zeros(1), 0.0, np.zeros(1)))
        assert len(buf) == 10_000
        assert buf.s[buf.order()[0], 0] == 90_000

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            SampleBuffer(2, 1).push(tagged(0, sd=3))

    def test_bad_capacity(self):
        with pytest.raises(ConfigError):
            SampleBuffer(1, 1, capacity=0)

    @given(st.integers(1, 30), st.integers(0, 200))
    def test_fifo_property(self, cap, n):
        buf = SampleBuffer(2, 1, capacity=cap)
        for i in range(n):
            buf.push(tagged(i))
        kept = [t.r for t in buf.contents()]
        assert kept == [float(i) for i in range(max(0, n - cap), n)]
        assert list(buf.seq[buf.order()]) == list(range(max(0, n - cap), n))


def _filled(n_be=3, n_bm=300, length=10):
    be = be_seed([make_traj(r, length=length, offset=10 * r) for r in range(n_be)])
    bm = SampleBuffer(2, 1, capacity=1000)
    for i in range(n_bm):
        bm.push(tagged(1000 + i))
    return be, bm


class TestMixedSample:
    def test_default_split(self, rng):
        be, bm = _filled()
        batch = mixed_sample(be, bm, 256, 0.25, rng)
        assert batch.n_experience == 64 and len(batch) == 256
        assert np.all(batch.source[:64] == FROM_EXPERIENCE) and np.all(batch.source[64:] == FROM_SAMPLES)
        assert np.all(batch.r[64:] >= 1000)

    def test_alpha_zero(self, rng):
        be, bm = _filled()
        batch = mixed_sample(None, bm, 32, 0.0, rng)
        assert batch.n_experience == 0

    @pytest.mark.parametrize("b", [4, 64, 256])
    @pytest.mark.parametrize("alpha", [0, 0.25, 0.5, 0.75, 1])
    def test_counts_every_draw(self, b, alpha, rng):
        be, bm = _filled()
        n_e = round(alpha * b)
        for _ in range(50):
            batch = mixed_sample(be, bm, b, alpha, rng)
            assert (batch.n_experience, len(batch) - batch.n_experience) == (n_e, b - n_e)

    def test_round_half_up(self):
        assert experience_rows(10, 0.25) == 3
        assert experience_rows(4, 0.125) == 1
        with pytest.raises(ConfigError):
            experience_rows(4, 1.5)

    def test_not_ready(self, rng):
        be, bm = _filled(n_bm=10)
        with pytest.raises(BufferNotReady):
            mixed_sample(be, bm, 32, 0.25, rng)
        _, bm = _filled(n_bm=40)
        with pytest.raises(BufferNotReady):
            mixed_sample(None, bm, 32, 0.25, rng)

    def test_uniform_over_experience(self, rng):
        # alpha=1, b=8: every transition of B_e equally likely
        be, bm = _filled(n_be=3, length=5)
        counts = np.zeros(be.n_transitions)
        key = {tuple(s): i for i, s in enumerate(be.flat()["s"])}
        for _ in range(100_000 // 8):
            batch = mixed_sample(be, bm, 8, 1.0, rng)
            for s in batch.s:
                counts[key[tuple(s)]] += 1
        assert stats.chisquare(counts).pvalue > 0.01


class TestFiles:
    def test_roundtrip(self):
        trajs = [make_traj(1.25, length=4), make_traj(-3.5, length=2, offset=7.0)]
        header, back = loads_trajectories(dumps_trajectories(trajs, "Toy"), 2, 1, "Toy")
        assert header["n_traj"] == 2
        for a, b in zip(trajs, back):
            assert np.array_equal(a.states, b.states) and a.r_sum == b.r_sum
            assert np.array_equal(a.dones, b.dones)

    def test_dimension_mismatch(self):
        text = dumps_trajectories([make_traj(1)], "Toy")
        with pytest.raises(ShapeError):
            loads_trajectories(text, state_dim=3)
        with pytest.raises(ShapeError):
            loads_trajectories(text, env_id="Other")

    def test_corrupt(self):
        text = dumps_trajectories([make_traj(1)], "Toy")
        with pytest.raises(ValidationError):
            loads_trajectories("garbage\n" + text)
        lines = text.splitlines()
        with pytest.raises(ShapeError):
            loads_trajectories("\n".join(lines[:2] + [lines[2] + ",1"]))

    def test_experience_buffer_dump(self, tmp_path):
        buf = be_seed([make_traj(r) for r in (1, 2)], capacity_traj=5)
        be_maybe_admit(buf, make_traj(3))
        dump_experience_buffer(buf, tmp_path / "be.csv", "Toy")
        back = load_experience_buffer(tmp_path / "be.csv", 2, 1)
        assert back.r_sum_list == buf.r_sum_list and back.capacity_traj == 5
        assert all(np.array_equal(a.states, b.states) for a, b in zip(buf.trajectories, back.trajectories))
