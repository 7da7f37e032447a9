"""Small norm-free network blocks shared by the feature net and the CM trunk.

Everything here is deterministic in eval mode: no dropout, no batch norm.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class TimeEmbedding(nn.Module):
    """Sinusoidal features of the (log-scaled) time, lifted by a 2-layer MLP."""

    def __init__(self, emb_dim: int = 64, n_freq: int = 16, max_period: float = 1e4):
        super().__init__()
        self.n_freq = n_freq
        self.max_period = max_period
        self.mlp = nn.Sequential(
            nn.Linear(2 * n_freq, emb_dim),
            nn.SiLU(),
            nn.Linear(emb_dim, emb_dim),
        )

    def forward(self, cn: torch.Tensor) -> torch.Tensor:
        freqs = torch.exp(
            -math.log(self.max_period)
            * torch.arange(self.n_freq, dtype=cn.dtype, device=cn.device)
            / self.n_freq
        )
        ang = cn[:, None] * freqs[None, :]
        return self.mlp(torch.cat([torch.sin(ang), torch.cos(ang)], dim=1))


class ResBlock(nn.Module):
    """Two 3x3 convs with a per-channel time bias and a residual connection."""

    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, ch)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(x))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(h))
        return x + h


class TinyUNet(nn.Module):
    """Time-conditioned image-to-image net at two resolutions.

    The final conv is zero-initialized so the untrained trunk outputs 0.
    """

    def __init__(self, channels: int = 1, width: int = 16, emb_dim: int = 64):
        super().__init__()
        self.time_emb = TimeEmbedding(emb_dim)
        self.in_conv = nn.Conv2d(channels, width, 3, padding=1)
        self.enc = ResBlock(width, emb_dim)
        self.down = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * width, emb_dim)
        self.up = nn.Conv2d(2 * width, width, 3, padding=1)
        self.dec = ResBlock(width, emb_dim)
        self.out_conv = nn.Conv2d(width, channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x: torch.Tensor, cn: torch.Tensor) -> torch.Tensor:
        emb = self.time_emb(cn)
        h0 = self.in_conv(x)
        h0 = self.enc(h0, emb)
        h = self.down(h0)
        h = self.mid(h, emb)
        h = self.up(F.silu(h))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.dec(h + h0, emb)
        return self.out_conv(F.silu(h))


class FeatureBackbone(nn.Module):
    """VGG-flavored conv net: 4 conv blocks, 3 max-pool stages (8x downsample).

    ``forward`` returns the head outputs (one scalar per transform kind) and
    the pooled intermediate feature maps. The head is zero-initialized so the
    untrained net predicts magnitude 0 everywhere.
    """

    def __init__(self, in_channels: int, n_heads: int, resolution: int,
                 channels=(16, 32, 64, 64), fc_dim: int = 128):
        super().__init__()
        if resolution % 8 != 0:
            raise ValueError(f"resolution {resolution} must be divisible by 8")
        c1, c2, c3, c4 = channels
        self.conv1 = nn.Conv2d(in_channels, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, padding=1)
        self.conv4 = nn.Conv2d(c3, c4, 3, padding=1)
        feat_res = resolution // 8
        self.fc = nn.Linear(c4 * feat_res * feat_res, fc_dim)
        self.head = nn.Linear(fc_dim, n_heads)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.n_heads = n_heads
        self.resolution = resolution

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        taps = []
        h = F.max_pool2d(F.relu(self.conv1(x)), 2)
        taps.append(h)
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        taps.append(h)
        h = F.max_pool2d(F.relu(self.conv3(h)), 2)
        taps.append(h)
        h = F.relu(self.conv4(h))
        h = F.relu(self.fc(h.flatten(1)))
        return self.head(h), taps

    @property
    def n_taps(self) -> int:
        return 3
