"""Command-line entry point.

Commands: train, eval, sweep, gradcheck, ablate, inspect-checkpoint.
Exit codes: 0 ok, 2 config error, 3 artifact incompatibility, 4 numeric
divergence. ``SWARMPDE_OUT_DIR`` and ``SWARMPDE_WORKERS`` override the output
directory and rollout worker count.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import policy as pol
from . import training as tr
from .autodiff import strict_numerics
from .config import (apply_overrides, config_hash, default_config, load_config,
                     make_arch, make_env, save_resolved)
from .errors import CheckpointError, ConfigError, NumericError


def _out_dir(args):
    base = os.environ.get("SWARMPDE_OUT_DIR")
    out = Path(args.out) if args.out else (Path(base) / "run" if base else None)
    if out is None:
        raise ConfigError("no output directory: pass --out or set SWARMPDE_OUT_DIR")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workers(args):
    if args.workers is not None:
        return args.workers
    return int(os.environ.get("SWARMPDE_WORKERS", "1"))


def _load_cfg(args):
    return load_config(args.config, args.set)


def _load_policy(args, cfg):
    params, manifest, _ = pol.load_checkpoint(
        args.checkpoint, expect_env=cfg.env.kind, expect_arch=make_arch(cfg))
    return params, manifest


def cmd_train(args):
    cfg = _load_cfg(args)
    out = _out_dir(args)
    save_resolved(cfg, out / "resolved.cfg")
    tr.train(cfg, out, workers=_workers(args), resume=args.resume,
             log=lambda msg: print(msg, flush=True))
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'metrics.csv'}")
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    episodes = args.episodes if args.episodes is not None else cfg.eval.episodes
    if episodes < 1:
        raise ConfigError("refusing an empty evaluation (episodes must be >= 1)")
    params, _ = _load_policy(args, cfg)
    env = make_env(cfg)
    m = args.m if args.m is not None else cfg.swarm.m
    res = ev.evaluate(params, env, m, episodes, cfg.eval.seed, cfg.loss)
    out = _out_dir(args)
    with open(out / "eval.csv", "w") as fh:
        fh.write("episode,metric,uncontrolled\n")
        for i, (c, u) in enumerate(zip(res.per_episode, res.uncontrolled_per_episode)):
            fh.write(f"{i},{c!r},{u!r}\n")
    print(f"controlled {res.metric_mean:.6g} +/- {res.metric_std:.3g} | "
          f"uncontrolled {res.uncontrolled_mean:.6g} +/- {res.uncontrolled_std:.3g} | "
          f"ratio {res.ratio:.4g}")
    return 0


def _parse_int_list(text):
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise ConfigError(f"cannot parse integer list {text!r}") from exc


def cmd_sweep(args):
    cfg = _load_cfg(args)
    params, _ = _load_policy(args, cfg)
    env = make_env(cfg)
    m_list = _parse_int_list(args.m) if args.m else list(cfg.eval.m_list)
    m_train = cfg.swarm.m
    if m_train not in m_list:
        m_list = sorted(set(m_list) | {m_train})
    episodes = args.episodes if args.episodes is not None else cfg.eval.episodes
    result = ev.cardinality_sweep(params, env, m_list, m_train, episodes,
                                  cfg.eval.seed, cfg.loss)
    out = _out_dir(args)
    ev.sweep_to_csv(result, out / "sweep.csv")
    if args.plot_data:
        with open(out / "sweep_plot.csv", "w") as fh:
            fh.write("m,m_over_m_train,relative_pct\n")
            for m, rel in zip(result.m_values, result.relative_pct):
                fh.write(f"{m},{m / m_train!r},{rel!r}\n")
    for m, metric, rel, ok in result.rows():
        print(f"M={m:4d}  metric={metric:.6g}  relative={rel:.2f}%  "
              f"{'stable' if ok else 'UNSTABLE'}")
    return 0


def cmd_gradcheck(args):
    cfg = _load_cfg(args)
    ladder = _parse_int_list(args.m_ladder)
    if len(ladder) < 2:
        raise ConfigError("the gradient check needs at least two swarm sizes")
    arch = make_arch(cfg)
    params = pol.init_params(arch, cfg.train.seed)

    def env_builder(m):
        return make_env(apply_overrides(cfg, [f"env.forcing_scale={1.0 / m!r}"]))

    series = ev.gradient_consistency_check(params, env_builder, ladder, cfg.eval.seed)
    out = _out_dir(args)
    ev.gradseries_to_csv(series, out / "gradseries.csv")
    for (a, b), d in zip(zip(ladder, ladder[1:]), series.distances):
        print(f"d_{a} = |g_{a} - g_{b}| / |g_{b}| = {d:.6g}")
    print(f"monotone decreasing: {series.monotone_decreasing}")
    return 0


def cmd_scan(args):
    cfg = _load_cfg(args)
    params, _ = _load_policy(args, cfg)
    env = make_env(cfg)
    m_list = _parse_int_list(args.m) if args.m else list(cfg.eval.m_list)
    episodes = args.episodes if args.episodes is not None else cfg.eval.episodes
    scan = ev.self_normalization_scan(params, env, m_list, episodes,
                                     cfg.eval.seed, cfg.loss)
    out = _out_dir(args)
    ev.scan_to_csv(scan, out / "effort_scan.csv")
    if args.plot_data:
        with open(out / "effort_plot.csv", "w") as fh:
            fh.write("log_m,log_effort\n")
            for m, e in zip(scan.m_values, scan.effort):
                fh.write(f"{np.log(m)!r},{np.log(e)!r}\n")
    print(f"steady-state effort slope: {scan.slope:.4f}")
    return 0


def _parse_noise_grid(text):
    grid = []
    for chunk in text.split(";"):
        sz, su = chunk.replace(" ", "").split(",")
        grid.append((float(sz), float(su)))
    return grid


def cmd_ablate(args):
    cfg = _load_cfg(args)
    env = make_env(cfg)
    episodes = args.episodes if args.episodes is not None else cfg.eval.episodes
    out = _out_dir(args)
    if args.kind == "noise":
        named = {}
        for item in args.checkpoints:
            label, path = item.split("=", 1)
            named[label], _, _ = pol.load_checkpoint(path, expect_env=cfg.env.kind)
        grid = _parse_noise_grid(args.noise_grid)
        rows = ev.noise_ablation(named, env, grid, episodes, cfg.eval.seed, cfg.loss)
    elif args.kind == "fov":
        cases = {}
        for item in args.checkpoints:
            label, rest = item.split("=", 1)
            ckpt_path, cfg_path = rest.split(":", 1)
            case_cfg = load_config(cfg_path)
            case_params, _, _ = pol.load_checkpoint(
                ckpt_path, expect_env=case_cfg.env.kind, expect_arch=make_arch(case_cfg))
            cases[label] = (case_params, make_env(case_cfg))
        m_list = _parse_int_list(args.m) if args.m else list(cfg.eval.m_list)
        rows = ev.fov_ablation(cases, m_list, episodes, cfg.eval.seed, cfg.loss)
    elif args.kind == "physics":
        params, _ = _load_policy(args, cfg)
        overrides = []
        for item in args.override:
            key, value = item.split("=", 1)
            overrides.append({key: float(value)})

        def env_builder(ov):
            return make_env(apply_overrides(
                cfg, [f"env.{k}={v!r}" for k, v in ov.items()]))

        rows = ev.physics_ablation(params, env_builder, overrides, episodes,
                                   cfg.eval.seed, cfg.loss)
    else:
        raise ConfigError(f"unknown ablation kind {args.kind!r}")
    ev.ablation_to_csv(rows, out / f"ablation_{args.kind}.csv")
    print(f"wrote {out / f'ablation_{args.kind}.csv'} ({len(rows)} rows)")
    return 0


def cmd_inspect(args):
    _, manifest, extra = pol.load_checkpoint(args.checkpoint)
    manifest = dict(manifest)
    manifest["extra_blocks"] = sorted(extra)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="swarmpde", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                        help="override a resolved config value")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--workers", type=int, default=None)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--episodes", type=int, default=None)

    sp = sub.add_parser("train", help="train a policy per the config")
    common(sp)
    sp.add_argument("--resume", default=None, help="resume from a training checkpoint")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="headline metric vs the paired uncontrolled baseline")
    common(sp, checkpoint=True)
    sp.add_argument("--m", type=int, default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("sweep", help="zero-shot cardinality sweep")
    common(sp, checkpoint=True)
    sp.add_argument("--m", default=None, help="comma-separated swarm sizes")
    sp.add_argument("--plot-data", action="store_true")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("gradcheck", help="mean-field gradient consistency ladder")
    common(sp)
    sp.add_argument("--m-ladder", required=True, help="comma-separated swarm sizes")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("scan", help="steady-state effort scaling scan")
    common(sp, checkpoint=True)
    sp.add_argument("--m", default=None, help="comma-separated swarm sizes")
    sp.add_argument("--plot-data", action="store_true")
    sp.set_defaults(fn=cmd_scan)

    sp = sub.add_parser("ablate", help="noise / fov / physics ablation tables")
    common(sp)
    sp.add_argument("--kind", required=True, choices=("noise", "fov", "physics"))
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--episodes", type=int, default=None)
    sp.add_argument("--checkpoints", action="append", default=[],
                    metavar="LABEL=PATH[:CONFIG]")
    sp.add_argument("--noise-grid", default="0,0;0.01,0.02",
                    metavar="SZ,SU;SZ,SU;...")
    sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--m", default=None)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("inspect-checkpoint", help="print a checkpoint manifest")
    sp.add_argument("checkpoint")
    sp.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None):
    strict_numerics()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"artifact incompatibility: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
