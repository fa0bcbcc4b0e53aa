"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure
(or a verification command outside its tolerance).
"""
from __future__ import annotations

import argparse
import math
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from asilfd import envs, harness
from asilfd.agent import Actor, Agent, gradient_suite
from asilfd.buffers import save_trajectories
from asilfd.errors import ConfigError, NumericError, ShapeError, ValidationError
from asilfd.numerics import load_network

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = harness._literal(value.strip())
    return out


def _train_config(args) -> harness.TrainConfig:
    over = _overrides(args.set)
    for key in ("variant", "seed", "env"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if getattr(args, "steps", None) is not None:
        over["total_steps"] = args.steps
    if getattr(args, "demos", None) is not None:
        over["demo_path"] = args.demos
    if args.config:
        return harness.load_config(args.config, **over)
    return harness.parse_config("", **over)


# -- commands ------------------------------------------------------------------

def cmd_gen_demos(args) -> int:
    spec = envs.make_spec(args.env)
    if args.quality == envs.EXPERT:
        ctrl = envs.expert_controller()
    else:
        ctrl = envs.imperfect_controller(spec.id, gain_scale=args.gain_scale, noise_std=args.noise, bias=args.bias)
    demos = envs.collect_demos(spec, ctrl, args.n, args.seed)
    out = Path(args.out)
    if not out.parent.exists():
        raise ConfigError(f"output directory {out.parent} does not exist")
    save_trajectories(out, demos, spec.id, quality=args.quality, seed=args.seed)
    for k, d in enumerate(demos):
        print(f"trajectory {k}: steps={len(d)} return={d.r_sum:.6f}")
    print(f"mean return {envs.mean_return(demos):.6f} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.name}-seed{cfg.seed}"

    def show(row):
        if not args.quiet:
            print(f"step {row['env_step']:>7}  return {row['eval_return']:10.3f}  lambda {row['lambda']:.3f}", flush=True)

    res = harness.train(cfg, out, progress=show)
    if res.status == "numeric":
        print(f"numeric failure at step {res.abort_step}: {res.message}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"done: {res.n_updates} updates, final return {res.final_return:.3f}, artifacts in {out}")
    return EXIT_OK


def _load_policy(path: Path, spec) -> Actor:
    """The actor of an agent checkpoint, or a bare actor network file."""
    try:
        agent, _ = Agent.load(path)
        return agent.actor
    except (ConfigError, KeyError):
        return Actor(load_network(path), spec.action_bound)


def cmd_eval(args) -> int:
    spec = envs.make_spec(args.env)
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"no checkpoint at {path}")
    policy = _load_policy(path, spec)
    if policy.state_dim != spec.state_dim or policy.action_dim != spec.action_dim:
        raise ConfigError(f"checkpoint does not fit {spec.id}")
    value = harness.evaluate(policy, spec, args.episodes, args.seed)
    print(f"mean return over {args.episodes} episodes: {value:.6f}")
    return EXIT_OK


def _variant_entry(base: harness.TrainConfig, entry: str) -> harness.TrainConfig:
    """``VARIANT[,key=value...]``; extra keys also name the row."""
    name, *pairs = entry.split(",")
    over = _overrides(pairs)
    label = name if not pairs else f"{name}[{','.join(pairs)}]"
    return base.with_(variant=name, label=label, **over)


def _reference_threshold(value: str, cfg: harness.TrainConfig) -> float:
    """A number, or the name of a reference policy scored on the evaluation episodes."""
    if value in harness.REFERENCES:
        return harness.reference_return(value, cfg)
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"threshold must be a number or one of {harness.REFERENCES}, got {value!r}") from None


def cmd_compare(args) -> int:
    base = _train_config(args)
    configs = [_variant_entry(base, v) for v in args.variants]
    threshold = _reference_threshold(args.threshold, base)
    rows, _ = harness.compare(
        configs, args.seeds, threshold, args.out, progress=None if args.quiet else print
    )
    print(harness.format_table(rows, threshold))
    for row in rows:
        for failure in row.failures:
            print(f"FAILED {row.name}: {failure}", file=sys.stderr)
    return EXIT_OK


def _group_name(path: Path) -> str:
    cfg_file = path.parent / "config.txt"
    if cfg_file.exists():
        try:
            return harness.load_config(cfg_file).name
        except ConfigError:
            pass
    return path.parent.name


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    groups: dict[str, list[list[dict]]] = defaultdict(list)
    for name in args.metrics:
        path = Path(name)
        if not path.exists():
            raise ConfigError(f"no metrics file at {path}")
        groups[_group_name(path)].append(harness.read_metrics(path))
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, runs in groups.items():
        steps, band = band_curve(runs)
        ax.plot(steps, band[1], label=name)
        if len(runs) > 1:
            ax.fill_between(steps, band[0], band[2], alpha=0.25)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("evaluation return")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, format="svg")
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


def band_curve(runs: list[list[dict]]):
    """Steps shared by all runs and the (min, mean, max) return at each."""
    common = sorted(set.intersection(*(set(r["env_step"] for r in run) for run in runs)))
    if not common:
        raise ConfigError("metrics files share no evaluation steps")
    table = np.array([[{r["env_step"]: r["eval_return"] for r in run}[s] for s in common] for run in runs])
    return np.array(common), (table.min(axis=0), table.mean(axis=0), table.max(axis=0))


def cmd_grad_check(args) -> int:
    report = gradient_suite(args.instances, args.seed)
    worst = max(report["critic"], report["actor"])
    print(f"critic loss worst relative error {report['critic']:.3e}")
    print(f"actor loss worst relative error  {report['actor']:.3e}")
    print(f"{report['instances']} instances, {report['checked']} coordinates, {report['skipped']} skipped at kinks")
    ok = worst <= args.tol
    print("PASS" if ok else f"FAIL: {worst:.3e} > {args.tol:.1e}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_diagnose(args) -> int:
    spec = envs.make_spec(args.env)
    if args.checkpoint:
        agent, _ = Agent.load(args.checkpoint)
    else:
        cfg = harness.TrainConfig(env=spec.id, seed=args.seed)
        agent = Agent.create(spec.state_dim, spec.action_dim, spec.action_bound, harness.agent_config(cfg), args.seed)
    if agent.actor.state_dim != spec.state_dim:
        raise ConfigError(f"checkpoint does not fit {spec.id}")
    rep = harness.q_error_diagnostic(
        agent, spec, args.states, args.horizon, np.random.default_rng(args.seed), args.gamma
    )
    print(f"mean |Q - G| over {len(rep.mc_returns)} states: {rep.mean_error:.6f}")
    print(f"horizon {rep.horizon}, gamma {rep.gamma}, truncation tail bound {rep.tail_bound:.3e}")
    if not math.isfinite(rep.mean_error):
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _add_train_flags(p) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
    p.add_argument("--env", help="environment id")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="total environment steps")
    p.add_argument("--demos", help="demonstration file")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asilfd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-demos", help="record scripted-controller trajectories")
    p.add_argument("--env", default="pointmass")
    p.add_argument("--quality", choices=(envs.EXPERT, envs.IMPERFECT), default=envs.EXPERT)
    p.add_argument("--n", type=int, default=4, help="number of trajectories")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gain-scale", type=float, default=0.5, help="imperfect controller gain factor")
    p.add_argument("--noise", type=float, default=0.1, help="imperfect controller action noise")
    p.add_argument("--bias", type=float, nargs="*", help="imperfect controller action offset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("train", help="train one configuration")
    _add_train_flags(p)
    p.add_argument("--variant", choices=harness.VARIANTS)
    p.add_argument("--out", help="run directory (default runs/<variant>-seed<seed>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved actor without exploration noise")
    p.add_argument("--checkpoint", required=True, help="agent.npz or actor.npz")
    p.add_argument("--env", default="pointmass")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=harness.TrainConfig.eval_seed)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train variants over seeds and tabulate")
    _add_train_flags(p)
    p.add_argument("--variants", nargs="+", required=True, metavar="VARIANT[,key=value]")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--threshold", default=envs.IMPERFECT, help="number, 'expert', 'imperfect' or 'random'")
    p.add_argument("--out", help="root directory for per-run artifacts")
    p.set_defaults(func=cmd_compare, variant=None)

    p = sub.add_parser("plot", help="reward curves from metrics files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", required=True, help="SVG path")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("grad-check", help="finite-difference check of the training losses")
    p.add_argument("--instances", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("diagnose", help="Monte-Carlo check of critic value estimates")
    p.add_argument("--checkpoint", help="agent.npz (default: a fresh agent)")
    p.add_argument("--env", default="pointmass")
    p.add_argument("--states", type=int, default=20)
    p.add_argument("--horizon", type=int, default=300)
    p.add_argument("--gamma", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"asilfd: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ShapeError, ValidationError, OSError) as exc:
        print(f"asilfd: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"asilfd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
