"""Tangent computation and manifold-parallel/orthogonal decomposition.

The tangent of a consistency model is the finite-difference change of its
output across one corruption-trajectory step, divided by the time gap. When
the loss is a feature distance, the effective update direction is the
vector-Jacobian product of the feature map with the feature-space tangent;
both forms are computed here with all network branches gradient-severed.
Decomposition is done in float64 against the disc manifold's tangent basis.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .discs import DiscGeometry, DiscParams, get_projector, tangent_space
from .errors import ContractViolationError
from .interpolant import NoisePair, Schedule, corrupt, make_ct_pair, DtSchedule
from .consistency import ConsistencyNet


def discrete_tangent(net: ConsistencyNet, pair: NoisePair) -> torch.Tensor:
    """(f(x_t, t) - f(x_prev, t - dt)) / dt with both branches detached."""
    with torch.no_grad():
        f_t = net(pair.x_t, pair.t)
        f_prev = net(pair.x_prev, pair.t_prev)
        dt = torch.as_tensor(pair.dt, dtype=f_t.dtype).reshape(-1)
        view = (-1,) + (1,) * (f_t.ndim - 1)
        return (f_t - f_prev) / dt.view(view)


class IdentityFeatures:
    """Feature stack of the raw pixels; reduces feature tangents to vanilla ones."""

    def stacked(self, x: torch.Tensor) -> list[tuple[float, torch.Tensor]]:
        return [(1.0, x.flatten(1))]


class LinearFeatures:
    """Feature stack x -> A x (flattened input); used as a closed-form oracle."""

    def __init__(self, matrix: torch.Tensor):
        self.matrix = matrix

    def stacked(self, x: torch.Tensor) -> list[tuple[float, torch.Tensor]]:
        return [(1.0, x.flatten(1) @ self.matrix.T)]


def feature_tangent(net: ConsistencyNet, fm, pair: NoisePair) -> torch.Tensor:
    """Update direction induced by the squared feature distance.

    The feature-space velocity is the finite difference of features across the
    pair; pulling it back through the feature map's Jacobian (reverse mode,
    through the features only) gives the image-space direction. Scaled exactly
    like the gradient of 0.5 * mfd(z, target) / dt at z = f(x_t, t).
    """
    with torch.no_grad():
        z_t = net(pair.x_t, pair.t)
        z_prev = net(pair.x_prev, pair.t_prev)
    dt = torch.as_tensor(pair.dt, dtype=z_t.dtype).reshape(-1)

    z = z_t.detach().clone().requires_grad_(True)
    stack_z = fm.stacked(z)
    with torch.no_grad():
        stack_prev = fm.stacked(z_prev)
    total = None
    for (scale, feat_z), (_, feat_prev) in zip(stack_z, stack_prev):
        cotangent = (scale * (feat_z.detach() - feat_prev) / dt[:, None])
        term = (feat_z * cotangent).sum()
        total = term if total is None else total + term
    (grad,) = torch.autograd.grad(total, z)
    return grad


@dataclass
class TangentReport:
    """Per-sample decomposition of a tangent against the disc manifold."""

    x: np.ndarray  # the CM input x_t, channel-collapsed (H, W)
    t: float
    tangent: np.ndarray
    parallel: np.ndarray
    orthogonal: np.ndarray
    frac_orth: float | None  # None when the tangent is exactly zero
    proj_params: DiscParams


def decompose(tangent, z, geom: DiscGeometry, x=None, t: float = 0.0) -> TangentReport:
    """Split a tangent into components inside/outside the manifold tangent
    space at the projection of the CM output ``z``."""
    reports = decompose_batch(
        _as_numpy_batch(tangent), _as_numpy_batch(z), geom,
        xs=None if x is None else _as_numpy_batch(x), t=t,
    )
    return reports[0]


def _as_numpy_batch(arr) -> np.ndarray:
    if torch.is_tensor(arr):
        arr = arr.detach().cpu().numpy()
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 4:  # NCHW -> collapse channels
        arr = arr.mean(axis=1)
    if arr.ndim != 3:
        raise ContractViolationError(f"expected image batch, got shape {arr.shape}")
    return arr


def decompose_batch(tangents, zs, geom: DiscGeometry, xs=None, t: float = 0.0) -> list[TangentReport]:
    """Vectorized decomposition: one manifold projection per CM output, then a
    2-vector basis projection per tangent."""
    tangents = _as_numpy_batch(tangents)
    zs = _as_numpy_batch(zs)
    if xs is not None:
        xs = _as_numpy_batch(xs)
    if tangents.shape != zs.shape:
        raise ContractViolationError("tangent and output batches differ in shape")
    projector = get_projector(geom)
    centers, _ = projector.project_batch(zs)
    reports = []
    for i in range(len(tangents)):
        params = DiscParams(cx=float(centers[i, 0]), cy=float(centers[i, 1]))
        basis = tangent_space(params, geom).reshape(2, -1)  # orthonormal rows
        tv = tangents[i].ravel()
        coeffs = basis @ tv
        parallel = coeffs @ basis
        orthogonal = tv - parallel
        norm_sq = float(tv @ tv)
        frac = float(orthogonal @ orthogonal) / norm_sq if norm_sq > 0.0 else None
        reports.append(TangentReport(
            x=None if xs is None else xs[i],
            t=t,
            tangent=tangents[i],
            parallel=parallel.reshape(tangents[i].shape),
            orthogonal=orthogonal.reshape(tangents[i].shape),
            frac_orth=frac,
            proj_params=params,
        ))
    return reports


DEFAULT_SWEEP_TIMES = (0.01, 0.1, 1.0, 10.0, 80.0)


@dataclass
class SweepRow:
    t: float
    mean_frac_orth: float
    std_frac_orth: float
    n_used: int
    n_missing: int


def sweep(
    net: ConsistencyNet,
    data: torch.Tensor,
    geom: DiscGeometry,
    rng: torch.Generator,
    fm=None,
    times=DEFAULT_SWEEP_TIMES,
    n_samples: int = 256,
    dt_ratio: float = 0.01,
    schedule: Schedule | None = None,
    out_dir=None,
    grid_images: int = 8,
) -> list[SweepRow]:
    """Average the orthogonal tangent fraction over samples at each time.

    Uses feature tangents when ``fm`` is given, vanilla tangents otherwise.
    Writes sweep.csv and per-time tangent image grids when ``out_dir`` is set.
    """
    schedule = schedule or Schedule.default()
    dt_sched = DtSchedule(constant=dt_ratio, q_min=dt_ratio, stage_len=1)
    rows = []
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for t in times:
        idx = torch.randint(len(data), (n_samples,), generator=rng)
        x = data[idx]
        pair = make_ct_pair(x, rng, dt_sched, 0, schedule, t=float(t))
        tangent = feature_tangent(net, fm, pair) if fm is not None else discrete_tangent(net, pair)
        with torch.no_grad():
            z = net(pair.x_t, pair.t)
        reports = decompose_batch(tangent, z, geom, xs=pair.x_t, t=float(t))
        fracs = np.array([r.frac_orth for r in reports if r.frac_orth is not None])
        rows.append(SweepRow(
            t=float(t),
            mean_frac_orth=float(fracs.mean()) if fracs.size else math.nan,
            std_frac_orth=float(fracs.std()) if fracs.size else math.nan,
            n_used=int(fracs.size),
            n_missing=len(reports) - int(fracs.size),
        ))
        if out_dir:
            save_tangent_grid(out_dir / f"tangents_t{t:g}.png", reports[:grid_images])
    if out_dir:
        write_sweep_csv(out_dir / "sweep.csv", rows)
    return rows


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "mean_frac_orth", "std_frac_orth", "n_used", "n_missing"])
        for r in rows:
            w.writerow([repr(r.t), repr(r.mean_frac_orth), repr(r.std_frac_orth),
                        r.n_used, r.n_missing])


def save_tangent_grid(path, reports: list[TangentReport]) -> None:
    """Rows: input, tangent, parallel, orthogonal. Signed values use a
    symmetric red/blue map normalized per image to its max magnitude."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [
        ("input", [r.x for r in reports]),
        ("tangent", [r.tangent for r in reports]),
        ("parallel", [r.parallel for r in reports]),
        ("orthogonal", [r.orthogonal for r in reports]),
    ]
    rows = [(name, imgs) for name, imgs in rows if imgs[0] is not None]
    n_cols = len(reports)
    fig, axes = plt.subplots(len(rows), n_cols, figsize=(1.2 * n_cols, 1.2 * len(rows)),
                             squeeze=False)
    for ri, (name, imgs) in enumerate(rows):
        for ci, img in enumerate(imgs):
            ax = axes[ri][ci]
            vmax = max(np.abs(img).max(), 1e-12)
            ax.imshow(img, cmap="bwr", vmin=-vmax, vmax=vmax)
            ax.set_xticks([])
            ax.set_yticks([])
            if ci == 0:
                ax.set_ylabel(name, fontsize=7)
    fig.suptitle(f"t = {reports[0].t:g}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
