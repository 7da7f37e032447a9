"""Desk-scale sample-quality metrics against the known disc manifold.

Headline metrics are geometric: RMS distance of samples to their manifold
projections and the energy distance between generated and reference disc
centers. A Frechet distance over pooled feature-net embeddings serves as a
secondary distribution-level score and powers the denoising-divergence probe.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .consistency import ConsistencyNet, sample
from .discs import DiscGeometry, get_projector
from .errors import ContractViolationError
from .features import FeatureMap
from .interpolant import Schedule, corrupt


@dataclass
class EvalReport:
    """One evaluation snapshot; all scalars finite and nonnegative."""

    manifold_dist_mean: float
    manifold_dist_p95: float
    center_energy_dist: float
    proxy_fd: float
    n_samples: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


@dataclass
class ManifoldDistance:
    mean: float
    p95: float
    n_excluded: int = 0

    def __iter__(self):
        return iter((self.mean, self.p95))


def manifold_distance(samples, geom: DiscGeometry) -> ManifoldDistance:
    """Per-sample RMS pixel distance to the manifold projection.

    Non-finite samples are excluded from the statistics and counted.
    """
    if torch.is_tensor(samples):
        samples = samples.detach().cpu().numpy()
    arr = np.asarray(samples, dtype=np.float64)
    flat = arr.reshape(len(arr), -1)
    finite = np.isfinite(flat).all(axis=1)
    n_excluded = int((~finite).sum())
    flat = flat[finite]
    if len(flat) == 0:
        return ManifoldDistance(mean=np.nan, p95=np.nan, n_excluded=n_excluded)
    projector = get_projector(geom)
    _, residual_sq = projector.project_batch(flat)
    rms = np.sqrt(residual_sq / flat.shape[1])
    return ManifoldDistance(
        mean=float(rms.mean()),
        p95=float(np.percentile(rms, 95.0)),
        n_excluded=n_excluded,
    )


def project_centers(samples, geom: DiscGeometry) -> np.ndarray:
    """Projected (cx, cy) parameters of a batch, shape (N, 2)."""
    if torch.is_tensor(samples):
        samples = samples.detach().cpu().numpy()
    flat = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    centers, _ = get_projector(geom).project_batch(flat)
    return centers


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """E||X - Y|| - (E||X - X'|| + E||Y - Y'||) / 2 over point clouds.

    All-pairs means (diagonal included), so identical clouds give exactly 0
    and two point masses at distance L give exactly L.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def mean_pairwise(a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return float(np.sqrt(np.maximum(d2, 0.0)).mean())

    return mean_pairwise(x, y) - 0.5 * (mean_pairwise(x, x) + mean_pairwise(y, y))


def center_energy_distance(samples, reference, geom: DiscGeometry,
                           reference_centers: np.ndarray | None = None) -> float:
    """Energy distance between projected center clouds of two image sets."""
    sc = project_centers(samples, geom)
    rc = reference_centers if reference_centers is not None else project_centers(reference, geom)
    return energy_distance(sc, rc)


def _gaussian_stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    if cov.ndim == 0:
        cov = cov.reshape(1, 1)
    if feats.shape[0] <= feats.shape[1]:
        warnings.warn(
            f"{feats.shape[0]} samples for {feats.shape[1]}-dim features: "
            "covariance is rank-deficient, applying diagonal loading 1e-6",
            RuntimeWarning,
        )
        cov = cov + 1e-6 * np.eye(cov.shape[0])
    return mu, cov


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(mu1, cov1, mu2, cov2) -> float:
    """Frechet distance between two Gaussians, sqrt via eigendecomposition
    with eigenvalues clamped at 0."""
    s1h = _psd_sqrt(cov1)
    cross = _psd_sqrt(s1h @ cov2 @ s1h)
    diff = mu1 - mu2
    fd = float(diff @ diff + np.trace(cov1 + cov2 - 2.0 * cross))
    return max(fd, 0.0)


def _features_of(fm: FeatureMap, images: torch.Tensor, batch: int = 512) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            outs.append(fm.penultimate(images[i:i + batch]).cpu().numpy())
    return np.concatenate(outs).astype(np.float64)


def proxy_frechet(samples, reference, fm: FeatureMap,
                  reference_stats=None) -> float:
    """Frechet distance between pooled feature-net embeddings of two sets."""
    if not torch.is_tensor(samples):
        samples = torch.as_tensor(np.asarray(samples), dtype=torch.float32)
    mu1, cov1 = _gaussian_stats(_features_of(fm, samples))
    if reference_stats is not None:
        mu2, cov2 = reference_stats
    else:
        if not torch.is_tensor(reference):
            reference = torch.as_tensor(np.asarray(reference), dtype=torch.float32)
        mu2, cov2 = _gaussian_stats(_features_of(fm, reference))
    return frechet_gaussian(mu1, cov1, mu2, cov2)


def denoising_probe(
    net: ConsistencyNet,
    data: torch.Tensor,
    fm: FeatureMap,
    rng: torch.Generator,
    t: float = 0.8,
    n_samples: int = 2048,
    schedule: Schedule | None = None,
    reference_stats=None,
) -> float:
    """Frechet distance between data and its one-step denoisings at time t."""
    schedule = schedule or Schedule.default()
    if not (0.0 <= t <= schedule.t_max):
        raise ContractViolationError(f"probe time {t} outside schedule range")
    idx = torch.randint(len(data), (n_samples,), generator=rng)
    x0 = data[idx]
    eps = torch.randn(x0.shape, generator=rng)
    with torch.no_grad():
        denoised = net(corrupt(x0, eps, t, schedule), t)
    if reference_stats is None:
        reference_stats = _gaussian_stats(_features_of(fm, data))
    return proxy_frechet(denoised, None, fm, reference_stats=reference_stats)


class Evaluator:
    """Caches reference statistics and evaluates nets into EvalReports."""

    def __init__(self, geom: DiscGeometry, reference: torch.Tensor,
                 fm: FeatureMap | None, schedule: Schedule | None = None,
                 shape: tuple | None = None):
        self.geom = geom
        self.reference = reference
        self.fm = fm
        self.schedule = schedule or Schedule.default()
        self.shape = shape or tuple(reference.shape[1:])
        self.reference_centers = project_centers(reference, geom)
        self.reference_stats = (
            _gaussian_stats(_features_of(fm, reference)) if fm is not None else None
        )

    def evaluate(self, net: ConsistencyNet, n: int, seed: int, steps: int = 1) -> EvalReport:
        rng = torch.Generator().manual_seed(seed)
        samples = sample(net, n, steps, rng, self.schedule, self.shape)
        md = manifold_distance(samples, self.geom)
        ced = energy_distance(project_centers(samples, self.geom),
                              self.reference_centers)
        fd = float("nan")
        if self.fm is not None:
            fd = proxy_frechet(samples, None, self.fm,
                               reference_stats=self.reference_stats)
        return EvalReport(
            manifold_dist_mean=md.mean,
            manifold_dist_p95=md.p95,
            center_energy_dist=ced,
            proxy_fd=fd,
            n_samples=n - md.n_excluded,
            seed=seed,
        )

    def probe(self, net: ConsistencyNet, seed: int, t: float = 0.8,
              n_samples: int = 1024) -> float:
        if self.fm is None:
            return float("nan")
        rng = torch.Generator().manual_seed(seed)
        return denoising_probe(net, self.reference, self.fm, rng, t=t,
                               n_samples=n_samples, schedule=self.schedule,
                               reference_stats=self.reference_stats)
