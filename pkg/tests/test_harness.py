import math

import numpy as np
import pytest

from asilfd.agent import Actor, Agent, AgentConfig
from asilfd.envs import (
    CHAIN,
    CHAIN_LEN,
    chain_next,
    chain_reward,
    collect_demos,
    controller_act,
    expert_controller,
    make_spec,
)
from asilfd.errors import ConfigError
from asilfd.harness import (
    METRICS_COLUMNS,
    VARIANTS,
    CompareRow,
    TrainConfig,
    bc_mse,
    bc_pretrain,
    compare,
    discounted_rollout_return,
    dump_config,
    evaluate,
    format_steps,
    format_table,
    load_config,
    normalized_score,
    parse_config,
    plan_for,
    q_error_diagnostic,
    read_metrics,
    reference_return,
    steps_to_threshold,
    train,
)
from asilfd.buffers import load_trajectories


def small(**kw):
    base = dict(
        total_steps=300, batch_size=32, n_critics=3, hidden=(16,), warmup_steps=50,
        eval_interval=100, eval_episodes=2, lambda_horizon=200, bc_epochs=20,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_parse(self):
        cfg = parse_config("variant = TD3  # baseline\n\nseed = 3\nhidden = (32, 32)\nalpha=0.5\n")
        assert (cfg.variant, cfg.seed, cfg.hidden, cfg.alpha) == ("TD3", 3, (32, 32), 0.5)

    def test_overrides_win(self):
        assert parse_config("seed = 3", seed=9).seed == 9

    def test_round_trip(self):
        cfg = small(variant="REDQ_LFD", demo_path="/tmp/x.csv", label="lfd")
        assert parse_config(dump_config(cfg)) == cfg

    @pytest.mark.parametrize(
        "text",
        ["colour = red", "seed 3", "alpha = 2.0", "variant = SAC", "env = mujoco", "n_critics = 2\nsubset_size = 3"],
    )
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.txt")


class TestPlans:
    def test_variant_table(self):
        td3 = plan_for(small(variant="TD3"))
        assert (td3.n_critics, td3.subset_size, td3.penalty, td3.experience_buffer) == (2, 2, False, False)
        redq = plan_for(small(variant="REDQ"))
        assert redq.alpha == 0.0 and not redq.uses_demos
        full = plan_for(small())
        assert full.penalty and full.experience_buffer and full.alpha == 0.25 and not full.bc_pretrain
        assert not plan_for(small(variant="ASILFD_NoConstraint")).penalty
        lfd = plan_for(small(variant="REDQ_LFD"))
        assert lfd.bc_pretrain and lfd.demos_in_samples and lfd.be_read_only and not lfd.penalty


class TestTrain:
    def test_zero_steps(self, demo_files):
        res = train(small(total_steps=0, demo_path=str(demo_files["imperfect"])))
        assert [m["env_step"] for m in res.metrics] == [0]
        assert res.n_updates == 0 and res.first_update_step is None

    def test_update_start_and_counts(self, demo_files):
        res = train(small(demo_path=str(demo_files["imperfect"])))
        assert res.status == "ok"
        assert res.first_update_step == 32
        assert res.n_updates == 300 - 32
        assert res.episodes == 3 and res.admission_checks == 3
        assert [m["env_step"] for m in res.metrics] == [0, 100, 200, 300]

    def test_demo_rows_start_updates_early(self, demo_files):
        res = train(small(variant="REDQ_LFD", demo_path=str(demo_files["expert"])))
        assert res.first_update_step == 0 and res.n_updates == 300

    def test_monotone_traces(self, demo_files):
        res = train(small(total_steps=600, demo_path=str(demo_files["imperfect"])))
        rmin = [m["r_min"] for m in res.metrics]
        lam = [m["lambda"] for m in res.metrics[1:]]
        assert all(b >= a for a, b in zip(rmin, rmin[1:]))
        assert all(b <= a for a, b in zip(lam, lam[1:]))
        assert lam[-1] == 0.05

    def test_files_and_determinism(self, tmp_path, demo_files):
        cfg = small(demo_path=str(demo_files["imperfect"]))
        train(cfg, tmp_path / "a")
        train(cfg, tmp_path / "b")
        a, b = (tmp_path / d / "metrics.csv" for d in "ab")
        assert a.read_bytes() == b.read_bytes()
        rows = read_metrics(a)
        assert tuple(rows[0]) == METRICS_COLUMNS and len(rows) == 4
        for name in ("timing.csv", "config.txt", "agent.npz", "actor.npz"):
            assert (tmp_path / "a" / name).exists()
        assert load_config(tmp_path / "a" / "config.txt") == cfg

    def test_seeds_differ(self, demo_files):
        cfg = small(total_steps=100, demo_path=str(demo_files["imperfect"]))
        r0, r1 = train(cfg), train(cfg.with_(seed=1))
        assert r0.metrics[-1]["eval_return"] != r1.metrics[-1]["eval_return"]

    def test_scratch_variant_ignores_demo_path(self):
        res = train(small(variant="TD3", total_steps=100, demo_path="/does/not/exist.csv"))
        assert res.status == "ok" and res.experience is None and res.admission_checks == 0

    def test_demo_variant_needs_demos(self):
        with pytest.raises(ConfigError):
            train(small(total_steps=10, demo_path="/does/not/exist.csv"))
        with pytest.raises(ConfigError):
            train(small(total_steps=10))

    def test_wrong_env_demos(self, demo_files):
        with pytest.raises(ConfigError):
            train(small(env="pendulum", total_steps=10, demo_path=str(demo_files["expert"])))

    def test_bc_only_where_planned(self, demo_files):
        path = str(demo_files["expert"])
        assert train(small(total_steps=0, demo_path=path)).bc is None
        bc = train(small(variant="REDQ_BC", total_steps=0, demo_path=path)).bc
        assert bc.final_mse < bc.initial_mse

    def test_numeric_abort(self, tmp_path):
        res = train(small(variant="TD3", total_steps=200, lr_critic=1e300, lr_actor=1e300), tmp_path)
        assert res.status == "numeric" and res.abort_step == 32
        assert res.message.count("(layer") <= 1 and "step 32" in res.message
        assert (tmp_path / "agent.npz").exists() and len(read_metrics(tmp_path / "metrics.csv")) == 1


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_runs(variant, demo_files):
    res = train(small(variant=variant, total_steps=150, demo_path=str(demo_files["imperfect"])))
    assert res.status == "ok" and len(res.metrics) == 2


class TestEvaluate:
    def test_expert_matches_demos(self, pointmass):
        ctrl = expert_controller()
        demos = collect_demos(pointmass, ctrl, 5, seed=77)
        ev = evaluate(lambda x: controller_act(ctrl, pointmass, x), pointmass, 5, 77)
        assert ev == pytest.approx(np.mean([d.r_sum for d in demos]), abs=1e-9)

    def test_needs_episodes(self, pointmass):
        with pytest.raises(ConfigError):
            evaluate(lambda x: np.zeros(2), pointmass, 0, 0)


class TestBC:
    def test_zero_epochs_noop(self, demo_files, pointmass):
        _, demos = load_trajectories(demo_files["expert"])
        actor = Actor.create(6, 2, 1.0, seed=0)
        before = actor.online.theta.copy()
        res = bc_pretrain(actor, demos, 0)
        assert np.array_equal(actor.online.theta, before) and res.final_mse == res.initial_mse

    def test_fits_and_syncs_target(self, demo_files):
        _, demos = load_trajectories(demo_files["expert"])
        actor = Actor.create(6, 2, 1.0, seed=0)
        res = bc_pretrain(actor, demos, 300)
        assert res.final_mse <= res.initial_mse / 10
        assert np.array_equal(actor.target.theta, actor.online.theta)
        S = np.concatenate([d.states for d in demos])
        A = np.concatenate([d.actions for d in demos])
        assert bc_mse(actor, S, A) == pytest.approx(res.final_mse)

    def test_needs_demos(self):
        with pytest.raises(ConfigError):
            bc_pretrain(Actor.create(6, 2, 1.0), [], 5)


def chain_agent(seed=0, gamma=0.9):
    return Agent.create(1, 1, 1.0, AgentConfig(hidden=(8,), n_critics=2, gamma=gamma), seed=seed)


def chain_dp_values(actor, gamma):
    """Exact discounted values of the actor's deterministic chain policy."""
    n = CHAIN_LEN
    P = np.zeros((n, n))
    r = np.array([chain_reward(float(x)) for x in range(n)])
    for x in range(n):
        a = float(actor.act(np.array([float(x)]))[0])
        P[x, int(chain_next(float(x), a))] = 1.0
    return np.linalg.solve(np.eye(n) - gamma * P, r)


class TestDiagnostic:
    @pytest.mark.parametrize("seed", range(4))
    def test_chain_matches_dp(self, seed):
        spec = make_spec(CHAIN)
        agent = chain_agent(seed)
        rep = q_error_diagnostic(agent, spec, 5, 200, np.random.default_rng(seed), gamma=0.9)
        V = chain_dp_values(agent.actor, 0.9)
        expected = V[rep.states[:, 0].astype(int)]
        tol = 0.9**200 * spec.reward_bound + 1e-6
        assert np.max(np.abs(rep.mc_returns - expected)) <= tol
        assert rep.tail_bound == pytest.approx(0.9**200 / 0.1)

    def test_short_horizon_within_tail_bound(self):
        spec = make_spec(CHAIN)
        agent = chain_agent(1)
        rep = q_error_diagnostic(agent, spec, 5, 10, np.random.default_rng(0), gamma=0.9)
        V = chain_dp_values(agent.actor, 0.9)
        gap = np.abs(rep.mc_returns - V[rep.states[:, 0].astype(int)])
        assert np.all(gap <= rep.tail_bound + 1e-12)

    def test_gamma_zero_exact_critic(self):
        spec = make_spec(CHAIN)
        agent = Agent.create(1, 1, 1.0, AgentConfig(hidden=(1,), n_critics=2, gamma=0.0), seed=0)
        # Q(s, a) = relu(s) / 4, which is the chain reward on states 0..4
        agent.critics.online[:] = [1.0, 0.0, 0.0, 0.25, 0.0]
        rep = q_error_diagnostic(agent, spec, 5, 5, np.random.default_rng(0))
        assert rep.mean_error == pytest.approx(0.0, abs=1e-15)

    def test_fresh_agent_finite(self, pointmass):
        agent = Agent.create(6, 2, 1.0, AgentConfig(hidden=(8,), n_critics=2), seed=0)
        rep = q_error_diagnostic(agent, pointmass, 20, 50, np.random.default_rng(0))
        assert math.isfinite(rep.mean_error) and rep.states.shape == (20, 6)

    def test_deterministic(self, pointmass):
        agent = Agent.create(6, 2, 1.0, AgentConfig(hidden=(8,), n_critics=2), seed=0)
        a = q_error_diagnostic(agent, pointmass, 10, 30, np.random.default_rng(5))
        b = q_error_diagnostic(agent, pointmass, 10, 30, np.random.default_rng(5))
        assert np.array_equal(a.errors, b.errors)

    def test_rollout_return_ignores_time_limit(self):
        spec = make_spec(CHAIN)
        G = discounted_rollout_return(spec, lambda x: np.ones(1), np.array([4.0]), 3 * spec.max_episode_steps, 1.0)
        assert G == 3 * spec.max_episode_steps

    def test_invalid(self, pointmass):
        with pytest.raises(ConfigError):
            q_error_diagnostic(chain_agent(), make_spec(CHAIN), 0, 5, np.random.default_rng(0))


class TestThreshold:
    steps = [0, 1000, 2000, 3000, 4000]

    def test_below_everything(self):
        assert steps_to_threshold(self.steps, [5, 6, 7, 8, 9], 0.0) == 0

    def test_never(self):
        assert steps_to_threshold(self.steps, [5, 6, 7, 8, 9], 100.0) is None

    def test_needs_stable_window(self):
        assert steps_to_threshold(self.steps, [0, 9, 0, 9, 9], 5.0) == 3000
        assert steps_to_threshold(self.steps, [0, 9, 0, 9, 9], 5.0, window=1) == 1000

    def test_strict(self):
        assert steps_to_threshold(self.steps, [5, 5, 5, 5, 5], 5.0) is None

    def test_median_counts_never_as_infinite(self):
        row = CompareRow("x", [0, 1, 2], [1.0, 2.0, 3.0], [1000, None, None], [])
        assert math.isinf(row.median_steps) and format_steps(row.median_steps) == "No"
        row.steps = [1000, 3000, None]
        assert row.median_steps == 3000


def test_compare_records_failures(tmp_path, demo_files):
    cfgs = [small(variant="TD3", total_steps=100), small(total_steps=100, demo_path="/missing.csv", label="bad")]
    rows, runs = compare(cfgs, [0, 1], threshold=-1e9, out_dir=tmp_path)
    td3, bad = rows
    assert td3.steps == [0, 0] and not td3.failures and len(runs) == 2
    assert len(bad.failures) == 2 and all(math.isnan(r) for r in bad.final_returns)
    assert (tmp_path / "TD3" / "seed1" / "metrics.csv").exists()
    table = format_table(rows, -1e9)
    assert "TD3" in table and "bad" in table and "No" in table


def test_compare_needs_seeds():
    with pytest.raises(ConfigError):
        compare([small()], [], 0.0)


class TestReferences:
    def test_ordering(self):
        cfg = TrainConfig(eval_episodes=4)
        ref = {k: reference_return(k, cfg) for k in ("expert", "imperfect", "random")}
        assert ref["random"] < ref["imperfect"] < ref["expert"]
        assert 0.5 <= normalized_score(ref["imperfect"], ref["expert"], ref["random"]) <= 0.8

    def test_repeatable(self):
        cfg = TrainConfig(eval_episodes=2)
        assert reference_return("random", cfg) == reference_return("random", cfg)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            reference_return("oracle", TrainConfig())

    def test_normalized_endpoints(self):
        assert normalized_score(-10.0, -10.0, -50.0) == 1.0
        assert normalized_score(-50.0, -10.0, -50.0) == 0.0
        assert normalized_score(-30.0, -10.0, -50.0) == 0.5
