"""Forward corruption process, training-time sampling, and CT pair construction.

The default process is x_t = x + t * eps on t in [0.01, 80]; a generalized
(alpha, sigma) schedule is kept as the extension surface. All operations are
pure given their inputs; RNG state is caller-owned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import torch

from .config import DtConfig, ScheduleConfig, TimeSamplerConfig
from .errors import ContractViolationError, DomainError, ScheduleError

TimeLike = Union[float, torch.Tensor]


@dataclass
class Schedule:
    """Noise schedule (alpha, sigma) with its valid time range.

    Invariants: alpha(0) = 1 and sigma(0) = 0, sigma strictly increasing.
    """

    alpha: Callable[[TimeLike], TimeLike]
    sigma: Callable[[TimeLike], TimeLike]
    t_min: float = 0.01
    t_max: float = 80.0

    @classmethod
    def default(cls, cfg: ScheduleConfig | None = None) -> "Schedule":
        """alpha(t) = 1, sigma(t) = t."""
        cfg = cfg or ScheduleConfig()
        return cls(
            alpha=lambda t: torch.ones_like(t) if torch.is_tensor(t) else 1.0,
            sigma=lambda t: t,
            t_min=cfg.t_min,
            t_max=cfg.t_max,
        )


def _as_batch_coeff(value: TimeLike, x: torch.Tensor) -> TimeLike:
    """Reshape a per-sample coefficient so it broadcasts over image dims."""
    if torch.is_tensor(value) and value.ndim == 1:
        if value.shape[0] != x.shape[0]:
            raise ContractViolationError(
                f"per-sample time has length {value.shape[0]} but batch is {x.shape[0]}"
            )
        return value.view(-1, *([1] * (x.ndim - 1)))
    return value


def corrupt(x: torch.Tensor, eps: torch.Tensor, t: TimeLike, schedule: Schedule | None = None) -> torch.Tensor:
    """Return alpha(t) * x + sigma(t) * eps.

    ``t`` may be a scalar or a per-sample 1-D tensor of length batch.
    """
    schedule = schedule or Schedule.default()
    if x.shape != eps.shape:
        raise ContractViolationError(f"x shape {tuple(x.shape)} != eps shape {tuple(eps.shape)}")
    t_lo = torch.as_tensor(t).min().item() if torch.is_tensor(t) else t
    t_hi = torch.as_tensor(t).max().item() if torch.is_tensor(t) else t
    if t_lo < 0.0 or t_hi > schedule.t_max:
        raise DomainError(f"time {t} outside [0, {schedule.t_max}]")
    tt = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    a = _as_batch_coeff(schedule.alpha(tt), x)
    s = _as_batch_coeff(schedule.sigma(tt), x)
    return a * x + s * eps


def sample_time(
    rng: torch.Generator,
    config: TimeSamplerConfig | None = None,
    schedule: Schedule | None = None,
    n: int | None = None,
) -> TimeLike:
    """Draw times whose log is N(p_mean, p_std^2), clipped to the schedule range."""
    config = config or TimeSamplerConfig()
    schedule = schedule or Schedule.default()
    shape = (1,) if n is None else (n,)
    z = torch.randn(shape, generator=rng, dtype=torch.float32)
    t = torch.exp(config.p_mean + config.p_std * z)
    t = t.clamp(schedule.t_min, schedule.t_max)
    return t.item() if n is None else t


@dataclass
class DtSchedule:
    """Maps (t, iteration) to the time gap dt = t * q(iteration).

    q starts at 1 (so t - dt = 0: targets are clean data) and halves each
    ``stage_len`` iterations down to ``q_min``. A ``constant`` ratio disables
    the staging.
    """

    q_min: float = 1.0 / 64.0
    stage_len: int = 1000
    constant: float | None = None

    @classmethod
    def from_config(cls, cfg: DtConfig, total_iters: int) -> "DtSchedule":
        stage_len = cfg.stage_len if cfg.stage_len is not None else max(1, total_iters // 7)
        return cls(q_min=cfg.q_min, stage_len=stage_len, constant=cfg.constant)

    def ratio(self, iteration: int) -> float:
        if self.constant is not None:
            q = float(self.constant)
        else:
            q = max(2.0 ** (-(iteration // self.stage_len)), self.q_min)
        if not (0.0 < q <= 1.0):
            raise ScheduleError(f"dt ratio {q} outside (0, 1]")
        return q

    def __call__(self, t: TimeLike, iteration: int) -> TimeLike:
        q = self.ratio(iteration)
        dt = t * q
        dt_min = dt.min().item() if torch.is_tensor(dt) else dt
        if dt_min <= 0.0:
            raise ScheduleError(f"dt = {dt} must be positive")
        return dt


@dataclass
class NoisePair:
    """A CT training pair: both endpoints share the same (x, eps) draw.

    x_t = alpha(t) x + sigma(t) eps and x_prev is the same at time t - dt;
    t and dt may be scalars or per-sample tensors.
    """

    x: torch.Tensor
    eps: torch.Tensor
    t: TimeLike
    dt: TimeLike
    x_t: torch.Tensor
    x_prev: torch.Tensor

    @property
    def t_prev(self) -> TimeLike:
        if torch.is_tensor(self.t) or torch.is_tensor(self.dt):
            return torch.clamp(torch.as_tensor(self.t) - torch.as_tensor(self.dt), min=0.0)
        return max(self.t - self.dt, 0.0)


def make_ct_pair(
    x: torch.Tensor,
    rng: torch.Generator,
    dt_schedule: DtSchedule,
    iteration: int,
    schedule: Schedule | None = None,
    time_config: TimeSamplerConfig | None = None,
    t: TimeLike | None = None,
) -> NoisePair:
    """Build a consistency-training pair from one data batch and one noise draw.

    ``t`` defaults to a fresh per-sample draw from the training-time sampler.
    """
    schedule = schedule or Schedule.default()
    if t is None:
        t = sample_time(rng, time_config, schedule, n=x.shape[0])
    eps = torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
    dt = dt_schedule(t, iteration)
    t_prev = torch.clamp(torch.as_tensor(t) - torch.as_tensor(dt), min=0.0)
    if not torch.is_tensor(t):
        t_prev = t_prev.item()
    x_t = corrupt(x, eps, t, schedule)
    x_prev = corrupt(x, eps, t_prev, schedule)
    return NoisePair(x=x, eps=eps, t=t, dt=dt, x_t=x_t, x_prev=x_prev)
