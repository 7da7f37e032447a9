"""Command-line interface: one binary, one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import importlib
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import PRESETS, ExperimentConfig
from .consistency import build_net, load_consistency, sample, train_cm
from .discs import DiscGeometry, read_dataset, sample_dataset, write_dataset
from .errors import CmlabError, ConfigError
from .features import load_feature_map, train_features
from .harness import (
    batch_size_ablation,
    plot_runs,
    resolve_output_dir,
    run_pipeline,
    stage_gen_data,
)
from .interpolant import Schedule
from .metrics import Evaluator
from .tangent import DEFAULT_SWEEP_TIMES, sweep
from .transforms import specs_from_config

METRIC_ALIASES = {"mse": "mse", "ph": "pseudo_huber", "mfd": "mfd", "ext": "external"}


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    elif getattr(args, "preset", None):
        cfg = PRESETS[args.preset]()
    else:
        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    return cfg


def _load_external(spec: str | None):
    if spec is None:
        return None
    mod, _, attr = spec.partition(":")
    if not attr:
        raise ConfigError("external metric must be given as module:callable")
    return getattr(importlib.import_module(mod), attr)


def cmd_gen_data(args) -> None:
    cfg = _load_config(args)
    out_dir = resolve_output_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = stage_gen_data(cfg, out_dir)
    print(json.dumps(artifacts, indent=2))


def cmd_train_features(args) -> None:
    cfg = _load_config(args)
    if args.groups:
        cfg.features.groups = args.groups.split(",")
    if args.iters:
        cfg.features.iters = args.iters
    if args.batch:
        cfg.features.batch = args.batch
    data, _ = read_dataset(Path(args.data))
    specs = specs_from_config(cfg.transforms, cfg.features.groups, data.shape[1])
    if not specs:
        raise ConfigError("no active transforms for this dataset")
    out = resolve_output_dir(args.out)
    print(f"training feature net: {len(specs)} heads "
          f"({', '.join(s.kind for s in specs)})")
    train_features(data, specs, cfg.features, seed=cfg.seed, mfd_cfg=cfg.mfd,
                   log_path=out.with_suffix(".log.jsonl"), ckpt_path=out)
    print(f"wrote {out}")


def cmd_train_cm(args) -> None:
    cfg = _load_config(args)
    cfg.cm.metric = METRIC_ALIASES[args.metric]
    if args.iters:
        cfg.cm.iters = args.iters
    if args.batch:
        cfg.cm.batch = args.batch
    if cfg.cm.metric == "mfd" and not args.features:
        raise ConfigError("--features is required for the mfd metric")
    data, _ = read_dataset(Path(args.data))
    fm = load_feature_map(args.features) if args.features else None
    if fm is not None:
        fm.mfd_cfg = cfg.mfd
    external_fn = _load_external(args.external_metric)
    out_dir = resolve_output_dir(args.out)

    eval_hook = None
    if cfg.dataset == "discs":
        from .harness import make_eval_hook

        out_dir.mkdir(parents=True, exist_ok=True)
        geom = DiscGeometry.from_config(cfg.discs)
        evaluator = Evaluator(geom, data, fm, Schedule.default(cfg.schedule))
        eval_hook = make_eval_hook(cfg, out_dir, evaluator)
    torch.manual_seed(cfg.seed)
    net = build_net(cfg, channels=data.shape[1])
    result = train_cm(net, data, cfg,
                      feature_map=fm if cfg.cm.metric == "mfd" else None,
                      external_fn=external_fn, out_dir=out_dir, eval_hook=eval_hook)
    print(f"wrote {result.ckpt_path}")


def cmd_sample(args) -> None:
    net, ema, cfg, _ = load_consistency(args.ckpt)
    use = net if args.raw_weights else ema
    rng = torch.Generator().manual_seed(args.seed)
    shape = (1, cfg.discs.resolution, cfg.discs.resolution)
    imgs = sample(use, args.n, args.steps, rng, Schedule.default(cfg.schedule),
                  shape, intermediate_t=cfg.cm.intermediate_t)
    out = resolve_output_dir(args.out)
    write_dataset(out, imgs, {"source": "sample", "steps": args.steps, "seed": args.seed})
    print(f"wrote {out.with_suffix('.bin')} ({args.n} samples, {args.steps}-step)")


def cmd_analyze_tangents(args) -> None:
    net, ema, cfg, _ = load_consistency(args.ckpt)
    geom = DiscGeometry.from_config(cfg.discs)
    if args.data:
        data, _ = read_dataset(Path(args.data))
    else:
        # the dataset regenerates deterministically from the stored config
        data = sample_dataset(cfg.discs.n_train, np.random.default_rng([cfg.seed, 0]), geom)
    fm = load_feature_map(args.features) if args.features else None
    if fm is not None:
        fm.mfd_cfg = cfg.mfd  # match the weighting the checkpoint trained with
    times = tuple(float(t) for t in args.times.split(","))
    out_dir = resolve_output_dir(args.out)
    rng = torch.Generator().manual_seed(cfg.seed + 7)
    rows = sweep(net if args.raw_weights else ema, data, geom, rng, fm=fm,
                 times=times, n_samples=args.n,
                 schedule=Schedule.default(cfg.schedule), out_dir=out_dir)
    for r in rows:
        print(f"t={r.t:<8g} mean_frac_orth={r.mean_frac_orth:.4f} "
              f"std={r.std_frac_orth:.4f} n={r.n_used}")


def cmd_eval(args) -> None:
    net, ema, cfg, iteration = load_consistency(args.ckpt)
    data, _ = read_dataset(Path(args.data))
    geom = DiscGeometry.from_config(cfg.discs)
    fm = load_feature_map(args.features) if args.features else None
    evaluator = Evaluator(geom, data, fm, Schedule.default(cfg.schedule))
    report = evaluator.evaluate(net if args.raw_weights else ema, args.n, seed=args.seed)
    out_dir = resolve_output_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save(out_dir / "eval.json")
    from .harness import CsvLog

    hist = CsvLog(out_dir / "eval_history.csv",
                  ["iteration", "manifold_dist_mean", "manifold_dist_p95",
                   "center_energy_dist", "proxy_fd", "n_samples", "seed"])
    hist.append({"iteration": iteration, **report.to_dict()})
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def cmd_plot(args) -> None:
    written = plot_runs(args.runs, resolve_output_dir(args.out), metric=args.metric)
    for p in written:
        print(f"wrote {p}")


def cmd_pipeline(args) -> None:
    cfg = _load_config(args)
    manifest = run_pipeline(cfg, external_fn=_load_external(args.external_metric))
    done = [s for s in manifest.stages if manifest.completed(s)]
    print(f"pipeline complete: {len(done)} stages ({', '.join(done)})")


def cmd_ablate_batch(args) -> None:
    cfg = _load_config(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    result = batch_size_ablation(cfg, sizes,
                                 external_fn=_load_external(args.external_metric))
    print(json.dumps(result, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_opts(p, seed_required=False):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--preset", choices=sorted(PRESETS), help="named preset")
        p.add_argument("--seed", type=int, required=seed_required,
                       help="experiment seed" + (" (required)" if seed_required else ""))

    p = sub.add_parser("gen-data", help="render and export the dataset")
    add_config_opts(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-features", help="train the feature net by magnitude regression")
    add_config_opts(p, seed_required=True)
    p.add_argument("--data", required=True, help="dataset container stem")
    p.add_argument("--groups", help="comma list of transform groups (deg,geo,clr)")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--out", required=True, help="checkpoint path (phi.ckpt)")
    p.set_defaults(fn=cmd_train_features)

    p = sub.add_parser("train-cm", help="train a consistency model")
    add_config_opts(p, seed_required=True)
    p.add_argument("--data", required=True, help="dataset container stem")
    p.add_argument("--metric", required=True, choices=sorted(METRIC_ALIASES))
    p.add_argument("--features", help="feature checkpoint (required for mfd)")
    p.add_argument("--external-metric", help="module:callable for --metric ext")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(fn=cmd_train_cm)

    p = sub.add_parser("sample", help="generate samples from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--steps", type=int, default=1, choices=(1, 2))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--raw-weights", action="store_true", help="sample from raw instead of EMA weights")
    p.add_argument("--out", required=True, help="output container stem")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("analyze-tangents", help="tangent decomposition sweep")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", help="feature checkpoint for feature-space tangents")
    p.add_argument("--times", default=",".join(str(t) for t in DEFAULT_SWEEP_TIMES))
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--data", help="dataset container stem (default: regenerate from config)")
    p.add_argument("--raw-weights", action="store_true")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(fn=cmd_analyze_tangents)

    p = sub.add_parser("eval", help="sample-quality evaluation report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--features")
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--raw-weights", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plot", help="figures from one or more run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--metric", default="manifold_dist_mean")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("pipeline", help="run all stages end to end")
    add_config_opts(p, seed_required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--external-metric")
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("ablate-batch", help="train one CM per batch size")
    add_config_opts(p, seed_required=True)
    p.add_argument("--sizes", default="16,32,64,128")
    p.add_argument("--out", required=True, help="base directory")
    p.add_argument("--external-metric")
    p.set_defaults(fn=cmd_ablate_batch)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except CmlabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
