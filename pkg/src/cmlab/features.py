"""Feature network trained by magnitude regression, and the feature distance.

Each transform kind gets one scalar head; training regresses the head of the
applied transform onto the magnitude that generated the sample, so clean data
sits on the zero level set of every head. The distance ``mfd`` combines the
squared head gap with size-normalized squared gaps of the pooled intermediate
features, LPIPS-style.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import FeatTrainConfig, MfdConfig
from .errors import ContractViolationError, FormatError, TrainingError
from .nets import FeatureBackbone
from .transforms import TransformSample, TransformSpec, apply, sample_alpha

CHECKPOINT_VERSION = 1


class FeatureMap:
    """Frozen feature network plus the layer weighting used by the distance."""

    def __init__(self, backbone: FeatureBackbone, specs: list[TransformSpec],
                 mfd_cfg: MfdConfig | None = None):
        self.backbone = backbone
        self.specs = list(specs)
        self.mfd_cfg = mfd_cfg or MfdConfig()
        if backbone.n_heads != len(specs):
            raise ContractViolationError(
                f"backbone has {backbone.n_heads} heads for {len(specs)} transforms"
            )
        self.freeze()

    def freeze(self) -> None:
        self.backbone.eval()
        for p in self.backbone.parameters():
            p.requires_grad_(False)

    @property
    def kinds(self) -> list[str]:
        return [s.kind for s in self.specs]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Deterministic forward pass: head outputs and pooled tap features."""
        if x.shape[-1] != self.backbone.resolution:
            raise ContractViolationError(
                f"input resolution {x.shape[-1]} != {self.backbone.resolution}"
            )
        return self.backbone(x)

    __call__ = forward

    def tap_weights(self) -> list[float]:
        tw = self.mfd_cfg.tap_weights
        if tw is None:
            return [1.0] * self.backbone.n_taps
        if len(tw) != self.backbone.n_taps:
            raise ContractViolationError(
                f"{len(tw)} tap weights for {self.backbone.n_taps} taps"
            )
        return [float(w) for w in tw]

    def stacked(self, x: torch.Tensor) -> list[tuple[float, torch.Tensor]]:
        """(scale, flattened features) per layer; mfd(x, y) is the sum of
        scale * ||stack(x) - stack(y)||^2 over layers."""
        head, taps = self.forward(x)
        stack = [(float(self.mfd_cfg.head_weight), head)]
        if self.mfd_cfg.use_taps:
            for w, tap in zip(self.tap_weights(), taps):
                flat = tap.flatten(1)
                stack.append((w / flat.shape[1], flat))
        return stack

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        """Spatially pooled last tap; the embedding used by proxy metrics."""
        _, taps = self.forward(x)
        return taps[-1].mean(dim=(2, 3))


def mfd(fm, x: torch.Tensor, y: torch.Tensor,
        reduce: str = "mean") -> torch.Tensor:
    """Squared feature distance between two batches.

    ``fm`` is anything exposing ``stacked``; returns a scalar for
    reduce="mean"/"sum" or a per-sample vector for reduce="none".
    """
    if x.shape != y.shape:
        raise ContractViolationError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    per_sample = None
    for (sx, fx), (sy, fy) in zip(fm.stacked(x), fm.stacked(y)):
        term = sx * ((fx - fy) ** 2).sum(dim=1)
        per_sample = term if per_sample is None else per_sample + term
    if reduce == "none":
        return per_sample
    if reduce == "sum":
        return per_sample.sum()
    return per_sample.mean()


@dataclass
class FeatureDistance:
    """Callable feature distance; ``sum_sq`` is the squared form used as the
    CM loss, ``sum`` the plain layer-wise L2 form."""

    feature_map: FeatureMap
    reduction: str = "sum_sq"

    def __call__(self, x: torch.Tensor, y: torch.Tensor, reduce: str = "mean") -> torch.Tensor:
        if self.reduction == "sum_sq":
            return mfd(self.feature_map, x, y, reduce=reduce)
        per_layer = []
        for (sx, fx), (sy, fy) in zip(self.feature_map.stacked(x), self.feature_map.stacked(y)):
            per_layer.append(torch.sqrt(sx * ((fx - fy) ** 2).sum(dim=1) + 1e-20))
        per_sample = torch.stack(per_layer).sum(dim=0)
        if reduce == "none":
            return per_sample
        return per_sample.sum() if reduce == "sum" else per_sample.mean()


def _draw_batch(data: torch.Tensor, n: int, g: torch.Generator) -> torch.Tensor:
    idx = torch.randint(len(data), (n,), generator=g)
    return data[idx]


def train_features(
    data: torch.Tensor,
    specs: list[TransformSpec],
    config: FeatTrainConfig,
    seed: int,
    mfd_cfg: MfdConfig | None = None,
    log_path=None,
    ckpt_path=None,
) -> tuple[FeatureMap, np.ndarray]:
    """Train the feature net by per-head magnitude regression.

    Each batch element draws one transform index uniformly and one magnitude
    from that transform's range; only the matching head receives loss for
    that element. Returns the frozen feature map and the per-iteration loss
    trace.
    """
    if not specs:
        raise ContractViolationError("at least one transform spec is required")
    channels, resolution = data.shape[1], data.shape[-1]
    torch.manual_seed(seed)
    backbone = FeatureBackbone(
        in_channels=channels,
        n_heads=len(specs),
        resolution=resolution,
        channels=tuple(config.channels),
        fc_dim=config.fc_dim,
    )
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(backbone.parameters(), lr=config.lr)
    losses = np.zeros(config.iters, dtype=np.float64)
    log_f = open(log_path, "w") if log_path else None
    snapshot = copy.deepcopy(backbone.state_dict())
    backbone.train()
    try:
        for it in range(config.iters):
            x = _draw_batch(data, config.batch, g)
            kind_idx = torch.randint(len(specs), (config.batch,), generator=g)
            xt = x.clone()
            target = torch.zeros(config.batch)
            for si, spec in enumerate(specs):
                mask = kind_idx == si
                k = int(mask.sum())
                if k == 0:
                    continue
                alpha = sample_alpha(spec, g, n=k)
                aux = _draw_batch(data, k, g) if spec.kind == "mixup" else None
                sample = TransformSample(spec=spec, alpha=alpha, aux=aux)
                xt[mask] = apply(sample, x[mask], generator=g)
                target[mask] = alpha

            head, _ = backbone(xt)
            pred = head[torch.arange(config.batch), kind_idx]
            loss = ((pred - target) ** 2).mean()
            if not torch.isfinite(loss):
                path = None
                if ckpt_path:
                    path = Path(ckpt_path).with_suffix(".diverged.pt")
                    torch.save(snapshot, path)
                raise TrainingError(
                    f"feature loss non-finite at iteration {it}", checkpoint_path=path
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses[it] = loss.item()
            if (it + 1) % config.log_every == 0:
                snapshot = copy.deepcopy(backbone.state_dict())
                if log_f:
                    log_f.write(json.dumps({"iteration": it + 1, "loss": losses[it]}) + "\n")
    finally:
        if log_f:
            log_f.close()

    fm = FeatureMap(backbone, specs, mfd_cfg)
    if ckpt_path:
        save_feature_map(ckpt_path, fm, train_config=config, seed=seed)
    return fm, losses


def regression_report(
    fm: FeatureMap,
    heldout: torch.Tensor,
    seed: int = 0,
    n_pairs: int = 512,
    n_grid: int = 9,
    n_grid_images: int = 128,
) -> dict:
    """Held-out regression quality per head.

    For each kind: ``mae`` of the head against fresh (x, alpha) draws, and the
    Spearman rank correlation between alpha and the head's mean response over
    an alpha grid (monotonicity of the learned level sets).
    """
    from scipy.stats import spearmanr

    g = torch.Generator().manual_seed(seed)
    report = {}
    with torch.no_grad():
        for si, spec in enumerate(fm.specs):
            x = _draw_batch(heldout, n_pairs, g)
            alpha = sample_alpha(spec, g, n=n_pairs)
            aux = _draw_batch(heldout, n_pairs, g) if spec.kind == "mixup" else None
            xt = apply(TransformSample(spec=spec, alpha=alpha, aux=aux), x, generator=g)
            head, _ = fm(xt)
            mae = (head[:, si] - alpha).abs().mean().item()

            grid = torch.linspace(spec.alpha_lo, spec.alpha_hi, n_grid)
            means = []
            for a in grid:
                xg = _draw_batch(heldout, n_grid_images, g)
                auxg = _draw_batch(heldout, n_grid_images, g) if spec.kind == "mixup" else None
                a_vec = torch.full((n_grid_images,), float(a))
                xgt = apply(TransformSample(spec=spec, alpha=a_vec, aux=auxg), xg, generator=g)
                hg, _ = fm(xgt)
                means.append(hg[:, si].mean().item())
            rho = spearmanr(grid.numpy(), np.array(means)).statistic
            report[spec.kind] = {
                "mae": mae,
                "alpha_hi": spec.alpha_hi,
                "spearman": float(rho),
            }
    return report


def save_feature_map(path, fm: FeatureMap, train_config: FeatTrainConfig | None = None,
                     seed: int | None = None) -> None:
    """Versioned checkpoint; round-trips bit-exactly."""
    bk = fm.backbone
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": "feature_map",
        "state_dict": bk.state_dict(),
        "arch": {
            "in_channels": bk.conv1.in_channels,
            "n_heads": bk.n_heads,
            "resolution": bk.resolution,
            "channels": (bk.conv1.out_channels, bk.conv2.out_channels,
                         bk.conv3.out_channels, bk.conv4.out_channels),
            "fc_dim": bk.fc.out_features,
        },
        "specs": [
            {"kind": s.kind, "alpha_lo": s.alpha_lo, "alpha_hi": s.alpha_hi,
             "color_only": s.color_only}
            for s in fm.specs
        ],
        "mfd": {
            "use_taps": fm.mfd_cfg.use_taps,
            "head_weight": fm.mfd_cfg.head_weight,
            "tap_weights": fm.mfd_cfg.tap_weights,
            "enable_after_iter": fm.mfd_cfg.enable_after_iter,
        },
        "train_config": None if train_config is None else vars(train_config).copy(),
        "seed": seed,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_feature_map(path) -> FeatureMap:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"feature checkpoint not found: {path}")
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "feature_map":
        raise FormatError(f"{path} is not a feature-map checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {payload.get('version')}")
    arch = payload["arch"]
    backbone = FeatureBackbone(
        in_channels=arch["in_channels"],
        n_heads=arch["n_heads"],
        resolution=arch["resolution"],
        channels=tuple(arch["channels"]),
        fc_dim=arch["fc_dim"],
    )
    backbone.load_state_dict(payload["state_dict"])
    specs = [TransformSpec(**s) for s in payload["specs"]]
    mfd_cfg = MfdConfig(**payload["mfd"])
    return FeatureMap(backbone, specs, mfd_cfg)
