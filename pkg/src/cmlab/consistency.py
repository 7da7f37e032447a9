"""Consistency model: boundary-respecting parametrization, CT loss, training.

The network output is f(x, t) = c_skip(t) x + c_out(t) trunk(...), with
coefficients pinned so f(., 0) is the identity for any trunk weights. The
training objective compares f at consecutive times of the same corruption
trajectory, with the earlier-time branch gradient-severed, weighted by 1/dt.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .config import ExperimentConfig
from .errors import ConfigError, ContractViolationError, DomainError, FormatError, TrainingError
from .features import FeatureMap, mfd
from .interpolant import DtSchedule, NoisePair, Schedule, make_ct_pair
from .nets import TinyUNet

CHECKPOINT_VERSION = 1


class ConsistencyNet(nn.Module):
    """Trunk wrapped with the skip/out coefficient parametrization.

    c_skip(t) = s^2 / (t^2 + s^2) and c_out(t) = s t / sqrt(t^2 + s^2) with
    s = sigma_data, so c_skip(0) = 1 and c_out(0) = 0 exactly. The trunk input
    is scaled by c_in(t) = 1 / sqrt(s^2 + t^2) and conditioned on log(t)/4.
    """

    def __init__(self, trunk: nn.Module, sigma_data: float = 0.5):
        super().__init__()
        self.trunk = trunk
        self.sigma_data = float(sigma_data)
        self.nfe = 0  # forward invocations, for NFE accounting

    def coeffs(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        s = self.sigma_data
        c_skip = s**2 / (t**2 + s**2)
        c_out = s * t / torch.sqrt(t**2 + s**2)
        c_in = 1.0 / torch.sqrt(torch.as_tensor(s**2) + t**2)
        c_noise = torch.log(t.clamp(min=1e-8)) / 4.0
        return c_skip, c_out, c_in, c_noise

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        tt = torch.as_tensor(t, dtype=x.dtype, device=x.device).reshape(-1)
        if tt.min() < 0:
            raise DomainError(f"time must be nonnegative, got {tt.min().item()}")
        if tt.numel() == 1:
            tt = tt.expand(x.shape[0])
        elif tt.numel() != x.shape[0]:
            raise ContractViolationError(
                f"per-sample time length {tt.numel()} != batch {x.shape[0]}"
            )
        c_skip, c_out, c_in, c_noise = self.coeffs(tt)
        view = (-1,) + (1,) * (x.ndim - 1)
        raw = self.trunk(c_in.view(view) * x, c_noise)
        self.nfe += 1
        return c_skip.view(view) * x + c_out.view(view) * raw


def cm_forward(net: ConsistencyNet, x_t: torch.Tensor, t) -> torch.Tensor:
    """Evaluate the consistency model; identity at t = 0 by construction."""
    return net(x_t, t)


def default_huber_c(data_dim: int) -> float:
    return 0.00054 * math.sqrt(data_dim)


@dataclass
class CmLossConfig:
    """Metric selection for the CT loss; the 1/dt weight rule is fixed."""

    metric: str = "mse"  # mse | pseudo_huber | mfd | external
    huber_c: float | None = None
    feature_map: Optional[FeatureMap] = None
    external_fn: Optional[Callable] = None
    weight_fn: Optional[Callable] = None  # optional extra w(t), default 1

    def __post_init__(self):
        if self.metric not in ("mse", "pseudo_huber", "mfd", "external"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.metric == "pseudo_huber" and self.huber_c is not None and self.huber_c <= 0:
            raise ConfigError("huber_c must be positive")
        if self.metric == "mfd" and self.feature_map is None:
            raise ConfigError("mfd metric requires a feature map")
        if self.metric == "external" and self.external_fn is None:
            raise ConfigError("external metric requires a callable")


def _per_sample_distance(out: torch.Tensor, target: torch.Tensor, cfg: CmLossConfig) -> torch.Tensor:
    if cfg.metric == "mse":
        return 0.5 * (out - target).flatten(1).pow(2).sum(dim=1)
    if cfg.metric == "pseudo_huber":
        c = cfg.huber_c if cfg.huber_c is not None else default_huber_c(out[0].numel())
        sq = (out - target).flatten(1).pow(2).sum(dim=1)
        return torch.sqrt(sq + c**2) - c
    if cfg.metric == "mfd":
        return mfd(cfg.feature_map, out, target, reduce="none")
    d = cfg.external_fn(out, target)
    if d.ndim == 0:
        d = d.expand(out.shape[0])
    return d


def ct_loss(net: ConsistencyNet, pair: NoisePair, cfg: CmLossConfig) -> torch.Tensor:
    """Consistency-training loss: (1/dt) d(f(x_t, t), sg[f](x_prev, t - dt)).

    The earlier-time branch carries no gradient; averaged over the batch.
    """
    with torch.no_grad():
        target = net(pair.x_prev, pair.t_prev)
    out = net(pair.x_t, pair.t)
    d = _per_sample_distance(out, target, cfg)
    dt = torch.as_tensor(pair.dt, dtype=d.dtype).reshape(-1)
    weight = 1.0 / dt
    if cfg.weight_fn is not None:
        t = torch.as_tensor(pair.t, dtype=d.dtype).reshape(-1)
        weight = weight * cfg.weight_fn(t)
    loss = (weight * d).mean()
    if not torch.isfinite(loss):
        raise TrainingError("ct_loss is non-finite")
    return loss


def ct_inner_product_loss(net: ConsistencyNet, pair: NoisePair) -> torch.Tensor:
    """Inner-product objective whose parameter gradient matches the squared-error
    CT loss: <f(x_t, t), sg[(f(x_t, t) - f(x_prev, t - dt)) / dt]>."""
    with torch.no_grad():
        f_t = net(pair.x_t, pair.t)
        f_prev = net(pair.x_prev, pair.t_prev)
        dt = torch.as_tensor(pair.dt, dtype=f_t.dtype).reshape(-1)
        tangent = (f_t - f_prev).flatten(1) / dt[:, None]
    out = net(pair.x_t, pair.t)
    return (out.flatten(1) * tangent).sum(dim=1).mean()


class Ema:
    """Exponential moving average of module parameters.

    Update rule, applied exactly: shadow = decay * shadow + (1 - decay) * param.
    """

    def __init__(self, module: nn.Module, decay: float):
        self.decay = float(decay)
        self.shadow = copy.deepcopy(module)
        self.shadow.eval()
        for p in self.shadow.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, module: nn.Module) -> None:
        for p_ema, p in zip(self.shadow.parameters(), module.parameters()):
            p_ema.mul_(self.decay).add_(p, alpha=1.0 - self.decay)
        for b_ema, b in zip(self.shadow.buffers(), module.buffers()):
            b_ema.copy_(b)


def build_net(cfg: ExperimentConfig, channels: int) -> ConsistencyNet:
    """Construct the trunk and wrapper; call under a seeded torch RNG for
    reproducible initialization."""
    trunk = TinyUNet(channels=channels, width=cfg.cm.width, emb_dim=cfg.cm.emb_dim)
    return ConsistencyNet(trunk, sigma_data=cfg.cm.sigma_data)


@dataclass
class TrainCmResult:
    net: ConsistencyNet
    ema: ConsistencyNet
    loss_trace: np.ndarray
    grad_trace: np.ndarray
    log_path: Optional[Path] = None
    ckpt_path: Optional[Path] = None


def _grad_norm(net: nn.Module) -> float:
    total = 0.0
    for p in net.parameters():
        if p.grad is not None:
            total += p.grad.pow(2).sum().item()
    return math.sqrt(total)


def save_consistency(path, net: ConsistencyNet, ema: ConsistencyNet,
                     cfg: ExperimentConfig, iteration: int, channels: int) -> None:
    """Atomic checkpoint carrying the full experiment config for exact resume."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": "consistency",
        "state_dict": net.state_dict(),
        "ema_state_dict": ema.state_dict(),
        "config": cfg.to_dict(),
        "iteration": iteration,
        "channels": channels,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_consistency(path) -> tuple[ConsistencyNet, ConsistencyNet, ExperimentConfig, int]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"consistency checkpoint not found: {path}")
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "consistency":
        raise FormatError(f"{path} is not a consistency checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ExperimentConfig.from_dict(payload["config"])
    net = build_net(cfg, payload["channels"])
    ema = build_net(cfg, payload["channels"])
    net.load_state_dict(payload["state_dict"])
    ema.load_state_dict(payload["ema_state_dict"])
    for p in ema.parameters():
        p.requires_grad_(False)
    ema.eval()
    return net, ema, cfg, payload["iteration"]


def train_cm(
    net: ConsistencyNet,
    data: torch.Tensor,
    cfg: ExperimentConfig,
    feature_map: Optional[FeatureMap] = None,
    external_fn: Optional[Callable] = None,
    out_dir=None,
    eval_hook: Optional[Callable] = None,
) -> TrainCmResult:
    """Run the CT loop: sample pair -> loss -> step -> EMA, with periodic
    logging, evaluation, and atomic checkpoints.

    ``eval_hook(eval_net, iteration, wall_time_s, loss, grad_norm)`` is called
    every ``cm.eval_every`` iterations and once at the end; the hook owns
    metric computation and CSV persistence. A zero-iteration call returns the
    initialization unchanged with empty traces.
    """
    cm = cfg.cm
    schedule = Schedule.default(cfg.schedule)
    dt_sched = DtSchedule.from_config(cfg.dt, cm.iters)
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cm.lr)
    ema = Ema(net, cm.ema_decay)

    metric_cfg = CmLossConfig(
        metric=cm.metric, huber_c=cm.huber_c,
        feature_map=feature_map if cm.metric == "mfd" else None,
        external_fn=external_fn if cm.metric == "external" else None,
    )
    warmup_cfg = CmLossConfig(metric=cfg.mfd.warmup_metric, huber_c=cm.huber_c)
    enable_after = cfg.mfd.enable_after_iter if cm.metric == "mfd" else 0

    out_dir = Path(out_dir) if out_dir else None
    log_f = None
    ckpt_path = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_f = open(out_dir / "train_log.jsonl", "w")
        ckpt_path = out_dir / "net.ckpt"

    losses = np.zeros(cm.iters, dtype=np.float64)
    grads = np.zeros(cm.iters, dtype=np.float64)
    t_start = time.monotonic()

    def eval_net() -> ConsistencyNet:
        return ema.shadow if cm.use_ema_eval else net

    try:
        for it in range(cm.iters):
            idx = torch.randint(len(data), (cm.batch,), generator=g)
            pair = make_ct_pair(data[idx], g, dt_sched, it, schedule, cfg.time_sampler)
            loss_cfg = warmup_cfg if it < enable_after else metric_cfg
            try:
                loss = ct_loss(net, pair, loss_cfg)
            except TrainingError:
                if ckpt_path:
                    save_consistency(ckpt_path.with_suffix(".diverged.pt"),
                                     net, ema.shadow, cfg, it, data.shape[1])
                raise
            opt.zero_grad()
            loss.backward()
            grads[it] = _grad_norm(net)
            opt.step()
            ema.update(net)
            losses[it] = loss.item()

            done = it + 1 == cm.iters
            if log_f and ((it + 1) % cm.log_every == 0 or done):
                log_f.write(json.dumps({
                    "iteration": it + 1,
                    "loss": losses[it],
                    "grad_norm": grads[it],
                }) + "\n")
                log_f.flush()
            if eval_hook and ((it + 1) % cm.eval_every == 0 or done):
                eval_metrics = eval_hook(eval_net(), it + 1,
                                         time.monotonic() - t_start,
                                         losses[it], grads[it])
                if log_f and isinstance(eval_metrics, dict):
                    log_f.write(json.dumps({
                        "iteration": it + 1, "eval": eval_metrics,
                    }) + "\n")
                    log_f.flush()
            if ckpt_path and ((it + 1) % cm.ckpt_every == 0 or done):
                save_consistency(ckpt_path, net, ema.shadow, cfg, it + 1, data.shape[1])
    finally:
        if log_f:
            log_f.close()

    return TrainCmResult(net=net, ema=ema.shadow, loss_trace=losses,
                         grad_trace=grads,
                         log_path=(out_dir / "train_log.jsonl") if out_dir else None,
                         ckpt_path=ckpt_path)


def sample(
    net: ConsistencyNet,
    n: int,
    steps: int,
    rng: torch.Generator,
    schedule: Schedule | None = None,
    shape: tuple = (1, 32, 32),
    intermediate_t: float | None = None,
    batch: int = 512,
) -> torch.Tensor:
    """Generate n samples with 1 or 2 net evaluations per sample.

    Two-step sampling re-noises the first prediction at the intermediate time
    (default: log-midpoint of the schedule range) and denoises once more.
    """
    if steps not in (1, 2):
        raise DomainError(f"steps must be 1 or 2, got {steps}")
    schedule = schedule or Schedule.default()
    t_max = schedule.t_max
    s_mid = intermediate_t
    if s_mid is None:
        s_mid = math.exp(0.5 * (math.log(schedule.t_min) + math.log(t_max)))
    outs = []
    was_training = net.training
    net.eval()
    with torch.no_grad():
        remaining = n
        while remaining > 0:
            k = min(batch, remaining)
            eps = torch.randn((k, *shape), generator=rng)
            sig_T = schedule.sigma(torch.as_tensor(float(t_max))).item()
            z = net(sig_T * eps, float(t_max))
            if steps == 2:
                eps2 = torch.randn((k, *shape), generator=rng)
                a = schedule.alpha(torch.as_tensor(float(s_mid))).item()
                s = schedule.sigma(torch.as_tensor(float(s_mid))).item()
                z = net(a * z + s * eps2, float(s_mid))
            outs.append(z)
            remaining -= k
    if was_training:
        net.train()
    return torch.cat(outs)
