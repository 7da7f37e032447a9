"""Parameterized image transformations T_alpha with T_0 = identity.

Three degradations (noise, blur, mixup), four geometric maps, and four color
maps. Each is smoothly parameterized by a scalar magnitude alpha whose sampled
range contains 0, so the untransformed data sits on the alpha = 0 level set.
Outputs are intentionally not clipped to [-1, 1]: the feature net must see
unclipped magnitudes to regress alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import DEFAULT_ALPHA_RANGES, TRANSFORM_KINDS, TransformsConfig
from .errors import (
    ApplicabilityError,
    ConfigError,
    ContractViolationError,
    DomainError,
)

GROUPS = {
    "deg": ("gauss_noise", "gauss_blur", "mixup"),
    "geo": ("scale_iso", "scale_aniso", "rotate_frac", "translate_frac"),
    "clr": ("brightness", "contrast", "hue", "saturation"),
}

_COLOR_ONLY = ("hue", "saturation")

# Unit vector along equal RGB intensities; hue rotates about it, so luminance
# (the projection onto this axis) is preserved exactly.
_LUMA_AXIS = (1.0 / math.sqrt(3.0),) * 3


@dataclass(frozen=True)
class TransformSpec:
    """One transformation kind with its magnitude range and applicability."""

    kind: str
    alpha_lo: float
    alpha_hi: float
    color_only: bool = False

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}")
        if not (self.alpha_lo <= 0.0 <= self.alpha_hi):
            raise ConfigError(
                f"{self.kind}: range [{self.alpha_lo}, {self.alpha_hi}] must contain 0"
            )


@dataclass
class TransformSample:
    """A concrete draw: (spec, alpha) plus the mixup partner when needed."""

    spec: TransformSpec
    alpha: float | torch.Tensor
    aux: torch.Tensor | None = None

    def __post_init__(self):
        if (self.aux is not None) != (self.spec.kind == "mixup"):
            raise ContractViolationError("aux image is present iff kind is mixup")


def make_spec(kind: str, ranges: dict | None = None) -> TransformSpec:
    lo, hi = (ranges or DEFAULT_ALPHA_RANGES)[kind]
    return TransformSpec(kind=kind, alpha_lo=float(lo), alpha_hi=float(hi),
                         color_only=kind in _COLOR_ONLY)


def group_masks(groups, ranges: dict | None = None) -> list[TransformSpec]:
    """Specs for the selected groups (deg: 3, geo: 4, clr: 4), canonical order."""
    groups = {g.lower() for g in groups}
    if not groups:
        raise ConfigError("at least one transform group is required")
    unknown = groups - set(GROUPS)
    if unknown:
        raise ConfigError(f"unknown transform groups: {sorted(unknown)}")
    return [make_spec(kind, ranges) for g in ("deg", "geo", "clr") if g in groups
            for kind in GROUPS[g]]


def active_transforms(specs: list[TransformSpec], channels: int,
                      exclude=()) -> list[TransformSpec]:
    """Filter specs for a dataset: drop color-only kinds on single-channel data
    and any kinds excluded by config."""
    out = []
    for spec in specs:
        if spec.color_only and channels != 3:
            continue
        if spec.kind in exclude:
            continue
        out.append(spec)
    return out


def specs_from_config(cfg: TransformsConfig, groups, channels: int) -> list[TransformSpec]:
    ranges = {k: tuple(v) for k, v in cfg.ranges.items()}
    return active_transforms(group_masks(groups, ranges), channels, cfg.exclude)


def sample_alpha(spec: TransformSpec, rng: torch.Generator,
                 n: int | None = None) -> float | torch.Tensor:
    """Uniform magnitude on [alpha_lo, alpha_hi]."""
    shape = (1,) if n is None else (n,)
    u = torch.rand(shape, generator=rng)
    a = spec.alpha_lo + (spec.alpha_hi - spec.alpha_lo) * u
    return a.item() if n is None else a


def _alpha_column(alpha, x: torch.Tensor) -> torch.Tensor:
    a = torch.as_tensor(alpha, dtype=x.dtype, device=x.device).reshape(-1)
    if a.numel() == 1:
        a = a.expand(x.shape[0])
    elif a.numel() != x.shape[0]:
        raise ContractViolationError(
            f"alpha length {a.numel()} does not match batch {x.shape[0]}"
        )
    return a


def _gaussian_kernels(sigma: torch.Tensor) -> torch.Tensor | None:
    """Per-sample 1-D blur kernels, truncated at radius ceil(3*sigma).

    Returns (N, 2K+1) rows summing to 1, or None when every sigma is 0.
    """
    K = int(torch.ceil(3.0 * sigma.max()).item())
    if K == 0:
        return None
    off = torch.arange(-K, K + 1, dtype=torch.float64)
    sig = sigma.to(torch.float64).clamp(min=1e-12)[:, None]
    w = torch.exp(-0.5 * (off[None] / sig) ** 2)
    radius = torch.ceil(3.0 * sigma.to(torch.float64))[:, None]
    w = torch.where(off[None].abs() <= radius, w, torch.zeros_like(w))
    delta = (off == 0).to(w.dtype).expand_as(w)
    w = torch.where(sigma[:, None] > 0, w, delta)
    return (w / w.sum(dim=1, keepdim=True)).to(sigma.dtype)


def _blur(x: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    kernels = _gaussian_kernels(alpha)
    if kernels is None:
        return x
    n, c, h, w = x.shape
    k = (kernels.shape[1] - 1) // 2
    if k > min(h, w) - 1:
        raise DomainError(f"blur radius {k} too large for {h}x{w} images")
    weight = kernels.repeat_interleave(c, dim=0)  # (N*C, 2K+1)
    flat = x.reshape(1, n * c, h, w)
    flat = F.pad(flat, (0, 0, k, k), mode="reflect")
    flat = F.conv2d(flat, weight.view(n * c, 1, -1, 1), groups=n * c)
    flat = F.pad(flat, (k, k, 0, 0), mode="reflect")
    flat = F.conv2d(flat, weight.view(n * c, 1, 1, -1), groups=n * c)
    return flat.reshape(n, c, h, w)


def _affine(x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection",
                         align_corners=False)


def _geometric_theta(kind: str, a: torch.Tensor) -> torch.Tensor:
    """Inverse-map affine parameters (N, 2, 3) in normalized coordinates."""
    n = a.shape[0]
    theta = torch.zeros(n, 2, 3, dtype=a.dtype, device=a.device)
    if kind == "scale_iso":
        inv = 2.0 ** (-a)
        theta[:, 0, 0] = inv
        theta[:, 1, 1] = inv
    elif kind == "scale_aniso":
        theta[:, 0, 0] = 2.0 ** (-a)
        theta[:, 1, 1] = 2.0 ** a
    elif kind == "rotate_frac":
        ang = a * (math.pi / 2.0)
        theta[:, 0, 0] = torch.cos(ang)
        theta[:, 0, 1] = torch.sin(ang)
        theta[:, 1, 0] = -torch.sin(ang)
        theta[:, 1, 1] = torch.cos(ang)
    elif kind == "translate_frac":
        # alpha*W pixels = 2*alpha in normalized units; positive moves content
        # right/down.
        theta[:, 0, 0] = 1.0
        theta[:, 1, 1] = 1.0
        theta[:, 0, 2] = -2.0 * a
        theta[:, 1, 2] = -2.0 * a
    else:  # pragma: no cover
        raise ValueError(kind)
    return theta


def _hue_rotation(a: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (N, 3, 3) about the luma axis by alpha * 180 degrees."""
    ang = a * math.pi
    c, s = torch.cos(ang), torch.sin(ang)
    lx, ly, lz = _LUMA_AXIS
    axis = torch.tensor([lx, ly, lz], dtype=a.dtype, device=a.device)
    eye = torch.eye(3, dtype=a.dtype, device=a.device)
    cross = torch.tensor(
        [[0.0, -lz, ly], [lz, 0.0, -lx], [-ly, lx, 0.0]],
        dtype=a.dtype, device=a.device,
    )
    outer = axis[:, None] * axis[None, :]
    return (
        c[:, None, None] * eye
        + s[:, None, None] * cross
        + (1.0 - c)[:, None, None] * outer
    )


def apply(sample: TransformSample, x: torch.Tensor,
          generator: torch.Generator | None = None) -> torch.Tensor:
    """Apply T_alpha to a batch; alpha may be a scalar or per-sample vector.

    Elements with alpha = 0 are returned bit-exactly.
    """
    spec = sample.spec
    kind = spec.kind
    if x.ndim != 4:
        raise ContractViolationError(f"expected NCHW batch, got shape {tuple(x.shape)}")
    if spec.color_only and x.shape[1] != 3:
        raise ApplicabilityError(f"{kind} requires 3-channel input, got {x.shape[1]}")
    a = _alpha_column(sample.alpha, x)
    if a.min() < spec.alpha_lo - 1e-9 or a.max() > spec.alpha_hi + 1e-9:
        raise DomainError(
            f"{kind}: alpha outside [{spec.alpha_lo}, {spec.alpha_hi}]"
        )
    a4 = a.view(-1, 1, 1, 1)

    if kind == "gauss_noise":
        eps = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
        out = x + a4 * eps
    elif kind == "gauss_blur":
        out = _blur(x, a)
    elif kind == "mixup":
        if sample.aux.shape != x.shape:
            raise ContractViolationError("mixup partner shape mismatch")
        out = (1.0 - a4) * x + a4 * sample.aux
    elif kind in ("scale_iso", "scale_aniso", "rotate_frac", "translate_frac"):
        out = _affine(x, _geometric_theta(kind, a))
    elif kind == "brightness":
        out = x + a4
    elif kind == "contrast":
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        out = mean + (1.0 + a4) * (x - mean)
    elif kind == "hue":
        rot = _hue_rotation(a)  # (N, 3, 3)
        out = torch.einsum("nij,njhw->nihw", rot, x)
    elif kind == "saturation":
        lum = x.mean(dim=1, keepdim=True)
        out = lum + (1.0 + a4) * (x - lum)
    else:  # pragma: no cover
        raise ValueError(kind)

    return torch.where(a4 == 0, x, out)
