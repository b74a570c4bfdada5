"""``wpolab`` command-line front end.

Subcommands: ``train``, ``eval``, ``flow``, ``mog``, ``verify``.  Common flags:
``--config PATH``, ``--set KEY=VALUE`` (repeatable), ``--seeds 1,2,3`` and
``--out DIR`` (default ``$WPOLAB_OUT/<command>`` or ``runs/<command>``).
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys

import numpy as np

from . import __version__
from ._validation import ContractViolation
from .config import ConfigError, agent_kwargs, build_env, config_to_text, describe_keys, parse_config, preset

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3


def _version_string():
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=os.path.dirname(__file__), timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _out_dir(args):
    if args.out:
        return args.out
    return os.path.join(os.environ.get("WPOLAB_OUT", "runs"), args.command)


def _prepare_out(path):
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write-test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise ContractViolation(f"output directory {path} is not writable: {exc.strerror}") from None
    return path


def _load_config(args):
    base = preset(args.preset) if getattr(args, "preset", None) else None
    return parse_config(args.config, args.set, base)


def _seeds(args, cfg):
    if not args.seeds:
        return [cfg.seed]
    try:
        return [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects a comma-separated integer list, got {args.seeds!r}") from None


def write_manifest(path, cfg, seeds, out_dir, command):
    header = (f"wpolab {command} manifest", f"version={_version_string()}",
              f"seeds={','.join(str(s) for s in seeds)}", f"out={out_dir}")
    with open(path, "w") as fh:
        fh.write(config_to_text(cfg, header))


def _csv_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if not isinstance(v, (int, np.integer)) else str(v) for v in row) + "\n")


def aggregate_metrics(runs):
    """Per-row mean/min/max of eval_return_mean across seeds (rows aligned by index)."""
    n = min(len(r) for r in runs)
    rows = []
    for i in range(n):
        vals = np.array([r[i]["eval_return_mean"] for r in runs])
        rows.append((runs[0][i]["step"], runs[0][i]["episode"], float(vals.mean()), float(vals.min()),
                     float(vals.max())))
    return ("step", "episode", "return_mean", "return_min", "return_max"), rows


def cmd_train(args):
    from .agent import TrainingAborted, WPOAgent, write_metrics_csv
    from .plot import write_line_chart

    cfg = _load_config(args)
    seeds = _seeds(args, cfg)
    out = _prepare_out(_out_dir(args))
    write_manifest(os.path.join(out, "manifest.cfg"), cfg, seeds, out, "train")
    runs = []
    for seed in seeds:
        agent = WPOAgent(**agent_kwargs(cfg, seed))
        try:
            agent.fit(build_env(cfg, seed), build_env(cfg, seed))
        except TrainingAborted as exc:
            print(f"seed {seed}: training aborted: {exc}", file=sys.stderr)
            if exc.report is not None:
                print(f"  report: {exc.report}", file=sys.stderr)
            return EXIT_ABORT
        write_metrics_csv(os.path.join(out, f"metrics_seed{seed}.csv"), agent.metrics_)
        agent.save(os.path.join(out, f"checkpoint_seed{seed}.txt"),
                   extra={"config": config_to_text(cfg), "seed": seed})
        runs.append(agent.metrics_)
        last = agent.metrics_[-1]
        print(f"seed {seed}: steps={agent.env_steps_} final eval return={last['eval_return_mean']:.4g}")
    header, rows = aggregate_metrics(runs)
    _csv_rows(os.path.join(out, "aggregate.csv"), header, rows)
    if rows:
        steps = [r[0] for r in rows]
        write_line_chart(os.path.join(out, "returns.svg"),
                         {k: (steps, [r[j] for r in rows]) for j, k in ((2, "mean"), (3, "min"), (4, "max"))},
                         title=f"{cfg.algorithm} on {cfg.env}", xlabel="environment steps", ylabel="eval return")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args):
    from .agent import GaussianActor, eval_seeds, evaluate
    from .config import parse_config_text, parse_overrides
    from .nn import load_checkpoint

    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint PATH")
    nets, extra = load_checkpoint(args.checkpoint)
    cfg = parse_config_text(extra.get("config", ""), f"{args.checkpoint} (embedded config)")
    cfg = parse_overrides(args.set, cfg)
    env = build_env(cfg, cfg.seed)
    bounds = (env.spec.action_low, env.spec.action_high) if cfg.bounded_mean else None
    actor = GaussianActor(nets["actor"], env.spec.action_dim, bounds, cfg.sigma_min)
    episodes = args.episodes or cfg.eval_episodes
    res = evaluate(env, actor.act, episodes, True, eval_seeds(int(extra.get("seed", cfg.seed)), episodes))
    print(f"episodes={episodes} return mean={res['mean']:.6g} min={res['min']:.6g} max={res['max']:.6g}")
    return EXIT_OK


FLOW_Q = {
    "neg_quadratic": (lambda a: -0.5 * a**2, lambda a: -a),
    "pos_quadratic": (lambda a: 0.5 * a**2, lambda a: a),
    "quartic": (lambda a: -(a**4) / 100.0 + a**2, lambda a: -(a**3) / 25.0 + 2.0 * a),
    "constant": (lambda a: np.zeros_like(a), lambda a: np.zeros_like(a)),
}


def cmd_flow(args):
    from .flow import DensityFlow, GridDensity
    from .plot import write_line_chart

    cfg = _load_config(args)
    out = _prepare_out(_out_dir(args))
    write_manifest(os.path.join(out, "manifest.cfg"), cfg, [], out, "flow")
    q, dq = FLOW_Q[cfg.flow_q]
    density = GridDensity.gaussian(cfg.flow_mean, cfg.flow_stddev, cfg.flow_lo, cfg.flow_hi, cfg.flow_cells)
    flow = DensityFlow(mode=cfg.flow_mode, t_final=cfg.flow_t_final, dt=cfg.flow_dt or None,
                       squash=cfg.flow_squash, scheme=cfg.flow_scheme)
    flow.fit(density, q, dq)
    rows = list(zip(flow.times_, flow.means_, flow.stddevs_, flow.expected_q_))
    _csv_rows(os.path.join(out, "flow.csv"), ("t", "mean", "stddev", "expected_q"), rows)
    write_line_chart(os.path.join(out, "flow.svg"),
                     {"mean": (flow.times_, flow.means_), "stddev": (flow.times_, flow.stddevs_),
                      "E[Q]": (flow.times_, flow.expected_q_)},
                     title=f"{cfg.flow_mode} flow, Q={cfg.flow_q}", xlabel="t", ylabel="value")
    if len(rows) > 1:
        dt = flow.times_[1] - flow.times_[0]
        print(f"initial rates: dmean/dt={(flow.means_[1] - flow.means_[0]) / dt:.4g} "
              f"dstddev/dt={(flow.stddevs_[1] - flow.stddevs_[0]) / dt:.4g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_mog(args):
    from .agent import run_mog_experiment
    from .plot import write_line_chart

    cfg = _load_config(args)
    seeds = _seeds(args, cfg)
    out = _prepare_out(_out_dir(args))
    write_manifest(os.path.join(out, "manifest.cfg"), cfg, seeds, out, "mog")
    for seed in seeds:
        res = run_mog_experiment(cfg.mog_algorithm, steps=cfg.mog_steps, batch_size=cfg.mog_batch, lr=cfg.mog_lr,
                                 stddevs=(cfg.mog_stddev, cfg.mog_stddev), rescale=cfg.mog_rescale, seed=seed)
        k = res.means_.shape[1]
        header = ("step", *[f"mean_{i}" for i in range(k)], *[f"stddev_{i}" for i in range(k)],
                  *[f"weight_{i}" for i in range(k)])
        rows = [(int(s), *m, *sd, *w) for s, m, sd, w in zip(res.steps_, res.means_, res.stddevs_, res.weights_)]
        _csv_rows(os.path.join(out, f"mog_seed{seed}.csv"), header, rows)
        series = {f"mean_{i}": (res.steps_, res.means_[:, i]) for i in range(k)}
        series.update({f"stddev_{i}": (res.steps_, res.stddevs_[:, i]) for i in range(k)})
        write_line_chart(os.path.join(out, f"mog_seed{seed}.svg"), series,
                         title=f"mixture policy, {cfg.mog_algorithm}", xlabel="step", ylabel="value")
        print(f"seed {seed}: final means={np.round(res.means_[-1], 4).tolist()} "
              f"stddevs={np.round(res.stddevs_[-1], 4).tolist()}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_verify(args):
    from . import verify

    if args.std_rescale is not None:
        verify.STD_RESCALE = args.std_rescale
    try:
        results = verify.run_all()
    finally:
        verify.STD_RESCALE = 0.5
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} identities passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "flow": cmd_flow, "mog": cmd_mog, "verify": cmd_verify}


def build_parser():
    parser = argparse.ArgumentParser(prog="wpolab", description=__doc__.splitlines()[0],
                                     epilog="config keys:\n" + describe_keys(),
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"wpolab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        p.add_argument("--seeds", help="comma-separated seeds (default: the config's seed)")
        p.add_argument("--out", help="output directory")
        if name in ("train", "flow", "mog"):
            p.add_argument("--preset", choices=("lqr", "pendulum", "bandit"), help="tuned starting config")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint written by train")
            p.add_argument("--episodes", type=int, default=0)
        if name == "verify":
            p.add_argument("--std-rescale", type=float, default=None, help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
