"""Synthetic 2D-disc image dataset with known manifold structure.

Images show one soft-edged disc of fixed radius; the only degrees of freedom
are the two center coordinates, so the data manifold is exactly 2-dimensional
and its tangent space at any point is computable by finite differences of the
renderer. Geometry runs in float64; exported datasets are float32 tensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import DiscsConfig
from .errors import ContractViolationError, DomainError, FormatError, GeometryError

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DiscGeometry:
    """Dataset constants: image size, disc profile, and valid center range."""

    resolution: int = 32
    radius: float = 6.0
    softness: float = 1.5
    center_lo: float = 10.0
    center_hi: float = 22.0

    @classmethod
    def from_config(cls, cfg: DiscsConfig) -> "DiscGeometry":
        return cls(
            resolution=cfg.resolution,
            radius=cfg.radius,
            softness=cfg.softness,
            center_lo=cfg.center_lo,
            center_hi=cfg.center_hi,
        )

    def grids(self) -> tuple[np.ndarray, np.ndarray]:
        idx = np.arange(self.resolution, dtype=np.float64)
        return np.meshgrid(idx, idx, indexing="xy")  # X: column coord, Y: row coord

    def contains(self, cx: float, cy: float) -> bool:
        return (
            self.center_lo <= cx <= self.center_hi
            and self.center_lo <= cy <= self.center_hi
        )


@dataclass(frozen=True)
class DiscParams:
    """Center position of one disc, in pixel coordinates."""

    cx: float
    cy: float


@dataclass
class ManifoldPoint:
    """A point on the manifold: parameters, rendered image, and tangent basis."""

    params: DiscParams
    image: np.ndarray  # (H, W) float64
    tangent_basis: np.ndarray  # (2, H, W) float64, orthonormal


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def render(params: DiscParams, geom: DiscGeometry) -> np.ndarray:
    """Render one disc to a (H, W) float64 image in [-1, 1].

    The edge profile is a smoothstep over ``softness`` pixels, so the image is
    continuously differentiable in the center coordinates.
    """
    if not geom.contains(params.cx, params.cy):
        raise DomainError(
            f"disc center ({params.cx}, {params.cy}) outside "
            f"[{geom.center_lo}, {geom.center_hi}]^2"
        )
    return _render_batch(np.array([[params.cx, params.cy]]), geom)[0]


def _render_batch(centers: np.ndarray, geom: DiscGeometry) -> np.ndarray:
    """Vectorized renderer; centers is (N, 2) and is NOT range-checked."""
    X, Y = geom.grids()
    cx = centers[:, 0][:, None, None]
    cy = centers[:, 1][:, None, None]
    dist = np.sqrt((X[None] - cx) ** 2 + (Y[None] - cy) ** 2)
    u = (geom.radius - dist) / geom.softness
    return 2.0 * _smoothstep(u) - 1.0


def sample_dataset(n: int, rng: np.random.Generator, geom: DiscGeometry) -> torch.Tensor:
    """Draw n discs with centers uniform over the valid range.

    Returns a float32 tensor of shape (n, 1, H, W).
    """
    if n <= 0:
        raise DomainError(f"n must be positive, got {n}")
    centers = rng.uniform(geom.center_lo, geom.center_hi, size=(n, 2))
    images = _render_batch(centers, geom)
    return torch.from_numpy(images.astype(np.float32)).unsqueeze(1)


def tangent_space(params: DiscParams, geom: DiscGeometry, step: float = 1e-3) -> np.ndarray:
    """Orthonormal basis of the manifold tangent space at ``params``.

    Central finite differences of the renderer w.r.t. (cx, cy), then
    Gram-Schmidt. Sign convention: first nonzero component positive.
    """
    c = np.array([params.cx, params.cy])
    offsets = np.array(
        [[step, 0.0], [-step, 0.0], [0.0, step], [0.0, -step]]
    )
    imgs = _render_batch(c[None] + offsets, geom)
    d_cx = (imgs[0] - imgs[1]) / (2.0 * step)
    d_cy = (imgs[2] - imgs[3]) / (2.0 * step)

    basis = []
    for vec in (d_cx.ravel(), d_cy.ravel()):
        v = vec.copy()
        for b in basis:
            v -= (v @ b) * b
        norm = np.linalg.norm(v)
        if norm < 1e-9:
            raise GeometryError("degenerate tangent direction (near-zero derivative)")
        v /= norm
        nz = np.nonzero(v)[0]
        if nz.size and v[nz[0]] < 0:
            v = -v
        basis.append(v)
    res = geom.resolution
    return np.stack(basis).reshape(2, res, res)


class Projector:
    """Projects images onto the disc manifold by grid search plus refinement.

    The coarse bank (pitch <= 0.5 px) is rendered once per geometry; each
    query then does one matmul for the coarse argmin and a deterministic
    coordinate-parabolic refinement to ~1e-4 px. Ties in the coarse search
    break toward the lowest cx, then cy.
    """

    COARSE_PITCH = 0.5
    REFINE_TOL = 1e-4

    def __init__(self, geom: DiscGeometry):
        self.geom = geom
        span = geom.center_hi - geom.center_lo
        n_side = int(np.ceil(span / self.COARSE_PITCH)) + 1
        axis = np.linspace(geom.center_lo, geom.center_hi, n_side)
        # cx-major ordering so np.argmin's first-hit rule is the tie-break.
        cxs, cys = np.meshgrid(axis, axis, indexing="ij")
        self.grid = np.stack([cxs.ravel(), cys.ravel()], axis=1)  # (G, 2)
        bank = _render_batch(self.grid, geom)
        self.bank_flat = bank.reshape(len(self.grid), -1)  # (G, D)
        self.bank_sq = np.einsum("gd,gd->g", self.bank_flat, self.bank_flat)

    def _objective(self, centers: np.ndarray, z_flat: np.ndarray) -> np.ndarray:
        """||render(centers_i) - z_i||^2 per row."""
        imgs = _render_batch(centers, self.geom).reshape(len(centers), -1)
        diff = imgs - z_flat
        return np.einsum("nd,nd->n", diff, diff)

    def project_batch(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project (N, H, W) or (N, D) images; returns (centers (N,2), residual_sq (N,))."""
        z_flat = np.asarray(z, dtype=np.float64).reshape(len(z), -1)
        if not np.all(np.isfinite(z_flat)):
            raise ContractViolationError("projection input contains non-finite values")
        d_sq = (
            np.einsum("nd,nd->n", z_flat, z_flat)[:, None]
            - 2.0 * z_flat @ self.bank_flat.T
            + self.bank_sq[None, :]
        )
        # Tie-break toward lowest cx then cy: among numerically tied minima
        # (exact ties drift apart in float), take the first in grid order.
        d_min = d_sq.min(axis=1, keepdims=True)
        tied = d_sq <= d_min + 1e-9 * (1.0 + np.abs(d_min))
        best = tied.argmax(axis=1)
        centers = self.grid[best].copy()
        g0 = self._objective(centers, z_flat)

        lo, hi = self.geom.center_lo, self.geom.center_hi
        h = self.COARSE_PITCH
        while h > self.REFINE_TOL:
            for _ in range(2):  # two axis passes per scale
                for axis in (0, 1):
                    prev = centers[:, axis].copy()
                    plus = centers.copy()
                    plus[:, axis] = np.clip(prev + h, lo, hi)
                    minus = centers.copy()
                    minus[:, axis] = np.clip(prev - h, lo, hi)
                    g_plus = self._objective(plus, z_flat)
                    g_minus = self._objective(minus, z_flat)
                    curvature = g_minus - 2.0 * g0 + g_plus
                    with np.errstate(divide="ignore", invalid="ignore"):
                        delta = 0.5 * h * (g_minus - g_plus) / curvature
                    # A stencil point clipped onto the center (box boundary)
                    # or a non-convex fit: step to the best of the three.
                    degenerate = (plus[:, axis] == prev) | (minus[:, axis] == prev)
                    take_fb = ~np.isfinite(delta) | (curvature <= 0) | degenerate
                    fallback = np.where(g_plus < g_minus, h, -h)
                    delta = np.where(
                        take_fb,
                        np.where(np.minimum(g_plus, g_minus) < g0, fallback, 0.0),
                        delta,
                    )
                    delta = np.clip(delta, -h, h)
                    centers[:, axis] = np.clip(prev + delta, lo, hi)
                    g_new = self._objective(centers, z_flat)
                    worse = g_new > g0
                    centers[worse, axis] = prev[worse]  # reject uphill moves
                    g_new[worse] = g0[worse]
                    g0 = g_new
            h *= 0.5
        return centers, g0

    def project(self, z: np.ndarray) -> ManifoldPoint:
        z = np.asarray(z, dtype=np.float64)
        centers, _ = self.project_batch(z.reshape(1, -1))
        params = DiscParams(cx=float(centers[0, 0]), cy=float(centers[0, 1]))
        return ManifoldPoint(
            params=params,
            image=_render_batch(centers, self.geom)[0],
            tangent_basis=tangent_space(params, self.geom),
        )


_PROJECTORS: dict[DiscGeometry, Projector] = {}


def get_projector(geom: DiscGeometry) -> Projector:
    """Cached projector per geometry (the coarse bank is reused)."""
    if geom not in _PROJECTORS:
        _PROJECTORS[geom] = Projector(geom)
    return _PROJECTORS[geom]


def project_to_manifold(z: np.ndarray, geom: DiscGeometry) -> ManifoldPoint:
    """Project a single image onto the manifold; see Projector."""
    return get_projector(geom).project(z)


def write_dataset(path, images: torch.Tensor, meta: dict) -> None:
    """Write a float32 binary container plus a JSON sidecar.

    ``path`` is the stem; files are <path>.bin and <path>.json.
    """
    path = Path(path)
    arr = images.detach().cpu().numpy().astype(np.float32)
    n, c, h, w = arr.shape
    sidecar = {
        "format_version": DATASET_FORMAT_VERSION,
        "dtype": "float32",
        "layout": "NCHW",
        "n": n,
        "channels": c,
        "resolution": h,
        **meta,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    arr.tofile(path.with_suffix(".bin"))
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def read_dataset(path) -> tuple[torch.Tensor, dict]:
    """Read a dataset container written by ``write_dataset``."""
    path = Path(path)
    meta_path = path.with_suffix(".json")
    bin_path = path.with_suffix(".bin")
    if not meta_path.exists() or not bin_path.exists():
        raise FormatError(f"dataset container incomplete at {path}")
    meta = json.loads(meta_path.read_text())
    for key in ("n", "channels", "resolution", "dtype", "layout"):
        if key not in meta:
            raise FormatError(f"dataset sidecar missing key {key!r}")
    if meta["dtype"] != "float32" or meta["layout"] != "NCHW":
        raise FormatError(f"unsupported container: {meta['dtype']}/{meta['layout']}")
    arr = np.fromfile(bin_path, dtype=np.float32)
    shape = (meta["n"], meta["channels"], meta["resolution"], meta["resolution"])
    if arr.size != int(np.prod(shape)):
        raise FormatError(f"container size {arr.size} != expected {np.prod(shape)}")
    return torch.from_numpy(arr.reshape(shape).copy()), meta
