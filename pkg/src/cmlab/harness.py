"""Experiment orchestration: staged pipeline, manifests, metric CSVs, plots.

Stages run in order gen-data -> train-features -> train-cm -> analyze-tangents
-> eval; a manifest records completed stages so a rerun resumes after the last
finished one. Output directories are single-writer (lock file).
"""

from __future__ import annotations

import csv
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig
from .consistency import build_net, load_consistency, train_cm
from .discs import DiscGeometry, read_dataset, sample_dataset, write_dataset
from .errors import ConfigError, FormatError
from .features import load_feature_map, regression_report, train_features
from .interpolant import Schedule
from .metrics import Evaluator
from .tangent import DEFAULT_SWEEP_TIMES, sweep
from .transforms import specs_from_config

METRIC_COLUMNS = [
    "iteration", "wall_time_s", "loss", "grad_norm",
    "manifold_dist_mean", "center_energy_dist", "proxy_fd",
]
TRIAL_COLUMNS = [
    "iteration", "trial", "manifold_dist_mean", "center_energy_dist", "proxy_fd",
]
STAGES = ("gen-data", "train-features", "train-cm", "analyze-tangents", "eval")

OUTPUT_ROOT_ENV = "CMLAB_OUTPUT_ROOT"


def resolve_output_dir(path) -> Path:
    """Relative paths land under $CMLAB_OUTPUT_ROOT when it is set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


@contextmanager
def output_lock(out_dir: Path):
    """At most one writer per output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output directory {out_dir} is locked by another writer")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@dataclass
class RunManifest:
    """Completed-stage record; every referenced artifact exists at write time."""

    config_hash: str
    code_version: str = __version__
    stages: dict = field(default_factory=dict)

    def mark(self, stage: str, status: str, artifacts: dict) -> None:
        self.stages[stage] = {"status": status, "artifacts": artifacts}

    def completed(self, stage: str) -> bool:
        info = self.stages.get(stage)
        if not info or info["status"] != "completed":
            return False
        return all(Path(p).exists() for p in info["artifacts"].values())

    def artifact(self, stage: str, key: str) -> Path:
        return Path(self.stages[stage]["artifacts"][key])

    def save(self, path) -> None:
        payload = {
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "stages": self.stages,
        }
        path = Path(path)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        m = cls(config_hash=d["config_hash"], code_version=d.get("code_version", "?"))
        m.stages = d["stages"]
        return m


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


class CsvLog:
    """Append-only CSV with a fixed schema and full-precision floats."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = columns
        if not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(columns)

    def append(self, row: dict) -> None:
        missing = set(self.columns) - set(row)
        if missing:
            raise FormatError(f"metric row missing columns: {sorted(missing)}")
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([_fmt(row[c]) for c in self.columns])


def read_csv(path) -> dict[str, np.ndarray]:
    """Read a metric CSV into named float columns."""
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [r for r in reader]
    data = {}
    for j, name in enumerate(header):
        data[name] = np.array([float(r[j]) for r in rows])
    return data


def require_columns(data: dict, columns, path="") -> None:
    for c in columns:
        if c not in data:
            raise FormatError(f"missing CSV column {c!r} in {path}")


def load_data(cfg: ExperimentConfig, out_dir: Path, split: str = "train") -> tuple[torch.Tensor, dict]:
    if cfg.dataset == "discs":
        return read_dataset(out_dir / "data" / split)
    return read_dataset(Path(cfg.data_path))


def stage_gen_data(cfg: ExperimentConfig, out_dir: Path) -> dict:
    data_dir = out_dir / "data"
    if cfg.dataset == "tiny_images":
        images, _ = read_dataset(Path(cfg.data_path))  # validate only
        return {"train": str(Path(cfg.data_path).with_suffix(".bin"))}
    geom = DiscGeometry.from_config(cfg.discs)
    meta = {
        "radius": geom.radius, "softness": geom.softness,
        "center_lo": geom.center_lo, "center_hi": geom.center_hi,
        "seed": cfg.seed,
    }
    train = sample_dataset(cfg.discs.n_train, np.random.default_rng([cfg.seed, 0]), geom)
    write_dataset(data_dir / "train", train, meta)
    heldout = sample_dataset(cfg.discs.n_heldout, np.random.default_rng([cfg.seed, 1]), geom)
    write_dataset(data_dir / "heldout", heldout, {**meta, "split": "heldout"})
    return {
        "train": str(data_dir / "train.bin"),
        "train_meta": str(data_dir / "train.json"),
        "heldout": str(data_dir / "heldout.bin"),
        "heldout_meta": str(data_dir / "heldout.json"),
    }


def stage_train_features(cfg: ExperimentConfig, out_dir: Path) -> dict:
    train, _ = load_data(cfg, out_dir, "train")
    specs = specs_from_config(cfg.transforms, cfg.features.groups, train.shape[1])
    if not specs:
        raise ConfigError("no active transforms for this dataset")
    ckpt = out_dir / "phi.ckpt"
    fm, _ = train_features(
        train, specs, cfg.features, seed=cfg.seed, mfd_cfg=cfg.mfd,
        log_path=out_dir / "features_log.jsonl", ckpt_path=ckpt,
    )
    artifacts = {"checkpoint": str(ckpt), "log": str(out_dir / "features_log.jsonl")}
    if cfg.dataset == "discs":
        heldout, _ = load_data(cfg, out_dir, "heldout")
        report = regression_report(fm, heldout, seed=cfg.seed)
        report_path = out_dir / "features_report.json"
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
        artifacts["report"] = str(report_path)
    return artifacts


def make_eval_hook(cfg: ExperimentConfig, out_dir: Path, evaluator: Evaluator):
    """Wire periodic evaluation into the metric CSVs.

    metrics.csv holds the primary-seed eval per checkpoint; trials.csv holds
    ``cm.eval_trials`` independent generation trials for min/max plot bands;
    probe.csv tracks the denoising-divergence probe.
    """
    metrics_log = CsvLog(out_dir / "metrics.csv", METRIC_COLUMNS)
    trials_log = CsvLog(out_dir / "trials.csv", TRIAL_COLUMNS)
    probe_log = CsvLog(out_dir / "probe.csv", ["iteration", "denoise_fd"])
    cm = cfg.cm

    def hook(eval_net, iteration, wall_time_s, loss, grad_norm):
        reports = []
        for trial in range(cm.eval_trials):
            rep = evaluator.evaluate(eval_net, cm.n_eval, seed=cfg.seed * 1000 + trial)
            reports.append(rep)
            trials_log.append({
                "iteration": iteration, "trial": trial,
                "manifold_dist_mean": rep.manifold_dist_mean,
                "center_energy_dist": rep.center_energy_dist,
                "proxy_fd": rep.proxy_fd,
            })
        primary = reports[0]
        metrics_log.append({
            "iteration": iteration, "wall_time_s": wall_time_s,
            "loss": loss, "grad_norm": grad_norm,
            "manifold_dist_mean": primary.manifold_dist_mean,
            "center_energy_dist": primary.center_energy_dist,
            "proxy_fd": primary.proxy_fd,
        })
        probe = evaluator.probe(eval_net, seed=cfg.seed * 1000,
                                t=cm.probe_t, n_samples=cm.n_probe)
        probe_log.append({"iteration": iteration, "denoise_fd": probe})
        return {
            "manifold_dist_mean": primary.manifold_dist_mean,
            "manifold_dist_p95": primary.manifold_dist_p95,
            "center_energy_dist": primary.center_energy_dist,
            "proxy_fd": primary.proxy_fd,
            "denoise_fd": probe,
        }

    return hook


def stage_train_cm(cfg: ExperimentConfig, out_dir: Path,
                   features_path=None, external_fn=None) -> dict:
    train, _ = load_data(cfg, out_dir, "train")
    fm = load_feature_map(features_path) if features_path else None
    if fm is not None:
        fm.mfd_cfg = cfg.mfd  # the experiment owns the distance assembly
    eval_hook = None
    if cfg.dataset == "discs":
        geom = DiscGeometry.from_config(cfg.discs)
        evaluator = Evaluator(geom, train, fm, Schedule.default(cfg.schedule))
        eval_hook = make_eval_hook(cfg, out_dir, evaluator)
    torch.manual_seed(cfg.seed)
    net = build_net(cfg, channels=train.shape[1])
    result = train_cm(
        net, train, cfg,
        feature_map=fm if cfg.cm.metric == "mfd" else None,
        external_fn=external_fn, out_dir=out_dir, eval_hook=eval_hook,
    )
    artifacts = {"checkpoint": str(result.ckpt_path), "log": str(result.log_path)}
    if eval_hook:
        artifacts["metrics"] = str(out_dir / "metrics.csv")
        artifacts["trials"] = str(out_dir / "trials.csv")
        artifacts["probe"] = str(out_dir / "probe.csv")
    return artifacts


def stage_analyze(cfg: ExperimentConfig, out_dir: Path, ckpt_path,
                  features_path=None, times=DEFAULT_SWEEP_TIMES,
                  n_samples: int = 256, use_ema: bool = True) -> dict:
    net, ema, _, _ = load_consistency(ckpt_path)
    train, _ = load_data(cfg, out_dir, "train")
    geom = DiscGeometry.from_config(cfg.discs)
    fm = load_feature_map(features_path) if features_path else None
    if fm is not None:
        fm.mfd_cfg = cfg.mfd
    report_dir = out_dir / "tangents"
    rng = torch.Generator().manual_seed(cfg.seed + 7)
    sweep(ema if use_ema else net, train, geom, rng, fm=fm, times=times,
          n_samples=n_samples, schedule=Schedule.default(cfg.schedule),
          out_dir=report_dir)
    return {"sweep": str(report_dir / "sweep.csv")}


def stage_eval(cfg: ExperimentConfig, out_dir: Path, ckpt_path,
               features_path=None, n: int = 2048) -> dict:
    net, ema, _, iteration = load_consistency(ckpt_path)
    train, _ = load_data(cfg, out_dir, "train")
    geom = DiscGeometry.from_config(cfg.discs)
    fm = load_feature_map(features_path) if features_path else None
    evaluator = Evaluator(geom, train, fm, Schedule.default(cfg.schedule))
    eval_net = ema if cfg.cm.use_ema_eval else net
    report = evaluator.evaluate(eval_net, n, seed=cfg.seed * 1000)
    report.save(out_dir / "eval.json")
    hist = CsvLog(out_dir / "eval_history.csv",
                  ["iteration", "manifold_dist_mean", "manifold_dist_p95",
                   "center_energy_dist", "proxy_fd", "n_samples", "seed"])
    hist.append({"iteration": iteration, **report.to_dict()})
    return {"report": str(out_dir / "eval.json"),
            "history": str(out_dir / "eval_history.csv")}


def run_pipeline(cfg: ExperimentConfig, external_fn=None, until: str | None = None) -> RunManifest:
    """Execute all stages in order, resuming past completed ones.

    ``until`` stops after the named stage (inclusive)."""
    cfg.validate()
    if until is not None and until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}")
    out_dir = resolve_output_dir(cfg.output_dir)
    manifest_path = out_dir / "manifest.json"
    with output_lock(out_dir):
        cfg.save(out_dir / "config.json")
        if manifest_path.exists():
            manifest = RunManifest.load(manifest_path)
            if manifest.config_hash != cfg.config_hash():
                raise ConfigError(
                    f"{out_dir} holds a run with different config "
                    f"({manifest.config_hash} != {cfg.config_hash()})"
                )
        else:
            manifest = RunManifest(config_hash=cfg.config_hash())

        stop = object()

        def run_stage(name, fn):
            if not manifest.completed(name):
                try:
                    artifacts = fn()
                except Exception:
                    manifest.mark(name, "failed", {})
                    manifest.save(manifest_path)
                    raise
                manifest.mark(name, "completed", artifacts)
                manifest.save(manifest_path)
            return stop if name == until else None

        if run_stage("gen-data", lambda: stage_gen_data(cfg, out_dir)) is stop:
            return manifest
        if run_stage("train-features", lambda: stage_train_features(cfg, out_dir)) is stop:
            return manifest
        features = str(manifest.artifact("train-features", "checkpoint"))
        if run_stage("train-cm", lambda: stage_train_cm(cfg, out_dir, features, external_fn)) is stop:
            return manifest
        ckpt = str(manifest.artifact("train-cm", "checkpoint"))
        if cfg.dataset == "discs":
            if run_stage("analyze-tangents", lambda: stage_analyze(
                    cfg, out_dir, ckpt,
                    features if cfg.cm.metric == "mfd" else None)) is stop:
                return manifest
            run_stage("eval", lambda: stage_eval(cfg, out_dir, ckpt, features))
    return manifest


def seed_shared_stages(sub: ExperimentConfig, sub_dir: Path, donor_dir: Path) -> None:
    """Copy data and feature artifacts from a finished run so the pipeline
    resumes at train-cm (those stages do not depend on cm.batch)."""
    import shutil

    donor = RunManifest.load(donor_dir / "manifest.json")
    sub_dir.mkdir(parents=True, exist_ok=True)
    shutil.copytree(donor_dir / "data", sub_dir / "data", dirs_exist_ok=True)
    gen_artifacts = {
        key: str(sub_dir / Path(p).relative_to(donor_dir))
        for key, p in donor.stages["gen-data"]["artifacts"].items()
    }
    feat_artifacts = {}
    for key, p in donor.stages["train-features"]["artifacts"].items():
        dst = sub_dir / Path(p).name
        shutil.copy2(p, dst)
        feat_artifacts[key] = str(dst)
    manifest = RunManifest(config_hash=sub.config_hash())
    manifest.mark("gen-data", "completed", gen_artifacts)
    manifest.mark("train-features", "completed", feat_artifacts)
    manifest.save(sub_dir / "manifest.json")


def batch_size_ablation(cfg: ExperimentConfig, sizes, external_fn=None) -> dict:
    """Train one CM per batch size at fixed iteration count.

    Data generation and feature training run once and are shared; returns
    {size: run_dir} plus a summary file and joint learning curves."""
    if not sizes:
        raise ConfigError("at least one batch size is required")
    base = resolve_output_dir(cfg.output_dir)
    run_dirs = {}
    summary = {}
    donor_dir = None
    for size in sizes:
        sub = ExperimentConfig.from_dict(cfg.to_dict())
        sub.cm.batch = int(size)
        sub.output_dir = str(base / f"bs{size}")
        sub_dir = resolve_output_dir(sub.output_dir)
        if donor_dir is not None and not (sub_dir / "manifest.json").exists():
            seed_shared_stages(sub, sub_dir, donor_dir)
        run_pipeline(sub, external_fn=external_fn)
        if donor_dir is None:
            donor_dir = sub_dir
        run_dirs[int(size)] = str(sub_dir)
        metrics = read_csv(sub_dir / "metrics.csv")
        summary[str(size)] = {
            "final_manifold_dist_mean": float(metrics["manifold_dist_mean"][-1]),
            "final_iteration": int(metrics["iteration"][-1]),
        }
    base.mkdir(parents=True, exist_ok=True)
    (base / "ablation_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    plot_runs(list(run_dirs.values()), base / "figures",
              labels=[f"bs{s}" for s in sizes])
    return {"runs": run_dirs, "summary": str(base / "ablation_summary.json")}


def plot_runs(run_dirs, out_dir, labels=None, metric: str = "manifold_dist_mean") -> list[Path]:
    """Learning curves with min/max bands over generation trials, plus
    orthogonal-fraction curves when tangent sweeps are present."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = labels or [Path(d).name for d in run_dirs]
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for run, label in zip(run_dirs, labels):
        run = Path(run)
        data = read_csv(run / "metrics.csv")
        require_columns(data, ["iteration", metric], run / "metrics.csv")
        ax.plot(data["iteration"], data[metric], label=label)
        trials_path = run / "trials.csv"
        if trials_path.exists():
            tdata = read_csv(trials_path)
            require_columns(tdata, ["iteration", "trial", metric], trials_path)
            iters = np.unique(tdata["iteration"])
            lo = [tdata[metric][tdata["iteration"] == i].min() for i in iters]
            hi = [tdata[metric][tdata["iteration"] == i].max() for i in iters]
            ax.fill_between(iters, lo, hi, alpha=0.25)
    ax.set_xlabel("iteration")
    ax.set_ylabel(metric)
    ax.legend()
    fig.tight_layout()
    curve_path = out_dir / f"learning_curve_{metric}.png"
    fig.savefig(curve_path, dpi=120)
    plt.close(fig)
    written.append(curve_path)

    sweeps = [(run, lbl) for run, lbl in zip(run_dirs, labels)
              if (Path(run) / "tangents" / "sweep.csv").exists()]
    if sweeps:
        fig, ax = plt.subplots(figsize=(6, 4))
        for run, label in sweeps:
            data = read_csv(Path(run) / "tangents" / "sweep.csv")
            require_columns(data, ["t", "mean_frac_orth"], Path(run) / "tangents" / "sweep.csv")
            ax.plot(data["t"], data["mean_frac_orth"], marker="o", label=label)
        ax.set_xscale("log")
        ax.set_xlabel("t")
        ax.set_ylabel("mean orthogonal fraction")
        ax.set_ylim(-0.02, 1.02)
        ax.legend()
        fig.tight_layout()
        frac_path = out_dir / "frac_orth_vs_t.png"
        fig.savefig(frac_path, dpi=120)
        plt.close(fig)
        written.append(frac_path)
    return written
