"""Acceptance suite: one test per criterion, each printing PASS/FAIL.

Criteria 6-9 consume the training-run grid defined in accept_runs.py. Those
runs are produced through the ordinary pipeline with manifest resume; set
CMLAB_ACCEPT_CACHE to keep them across sessions (about 2 CPU-hours cold).
Criterion 10 runs a reduced-size pipeline twice from scratch.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

sys.path.insert(0, str(Path(__file__).parent))
from accept_runs import (  # noqa: E402
    CM_BATCH,
    SEEDS,
    cache_root,
    ensure_run,
    ensure_shared,
)

from cmlab.config import discs16_preset  # noqa: E402
from cmlab.consistency import (  # noqa: E402
    CmLossConfig,
    ConsistencyNet,
    build_net,
    cm_forward,
    ct_inner_product_loss,
    ct_loss,
)
from cmlab.discs import DiscGeometry, DiscParams, render, tangent_space  # noqa: E402
from cmlab.features import load_feature_map, mfd  # noqa: E402
from cmlab.harness import read_csv, run_pipeline  # noqa: E402
from cmlab.interpolant import DtSchedule, make_ct_pair  # noqa: E402
from cmlab.tangent import (  # noqa: E402
    IdentityFeatures,
    decompose_batch,
    feature_tangent,
)
from cmlab.transforms import (  # noqa: E402
    TransformSample,
    apply,
    group_masks,
    make_spec,
)


def report(criterion: int, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    print(f"\n[acceptance] criterion {criterion}: {status} {detail}")
    assert passed, f"criterion {criterion} failed: {detail}"


@pytest.fixture(scope="session")
def accept_root(tmp_path_factory):
    return cache_root(fallback=tmp_path_factory.mktemp("accept"))


@pytest.fixture(scope="session")
def shared_dir(accept_root):
    return ensure_shared(accept_root)


@pytest.fixture(scope="session")
def run_dirs(accept_root):
    dirs = {}
    for metric, batch, seed in (
        [("mse", CM_BATCH, s) for s in SEEDS]
        + [("mfd", CM_BATCH, s) for s in SEEDS]
        + [("mfd", 16, 0), ("mse", 128, 0)]
    ):
        dirs[(metric, batch, seed)] = ensure_run(accept_root, metric, batch, seed)
    return dirs


class TwoLayerTrunk(nn.Module):
    def __init__(self, dim=16, hidden=32):
        super().__init__()
        self.fc1 = nn.Linear(dim + 1, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, cn):
        return self.fc2(torch.tanh(self.fc1(torch.cat([x.flatten(1), cn[:, None]], 1)))).reshape(x.shape)


def test_criterion_1_gradient_duality():
    """Squared-error CT loss and the stop-gradient inner-product form have
    matching parameter gradients (< 1e-5 relative), batch 8, 2-layer net."""
    t_start = time.monotonic()
    torch.manual_seed(0)
    net = ConsistencyNet(TwoLayerTrunk())
    g = torch.Generator().manual_seed(0)
    x = torch.randn(8, 16, generator=g)
    pair = make_ct_pair(x, g, DtSchedule(constant=0.5), 0)

    net.zero_grad()
    ct_loss(net, pair, CmLossConfig(metric="mse")).backward()
    g1 = torch.cat([p.grad.flatten() for p in net.parameters()])
    net.zero_grad()
    ct_inner_product_loss(net, pair).backward()
    g2 = torch.cat([p.grad.flatten() for p in net.parameters()])

    rel = (g1 - g2).norm().item() / g1.norm().item()
    elapsed = time.monotonic() - t_start
    report(1, rel < 1e-5 and elapsed < 10.0,
           f"(rel grad error {rel:.2e}, {elapsed:.1f}s)")


def test_criterion_2_feature_tangent_identity(shared_dir):
    """The feature tangent equals the autodiff gradient of
    0.5 ||phi(z) - phi(target)||^2 / dt (< 1e-5 relative) and reduces to the
    vanilla tangent when phi is the identity."""
    t_start = time.monotonic()
    fm = load_feature_map(shared_dir / "phi.ckpt")

    class IdNet:
        def __call__(self, x, t):
            return x

    g = torch.Generator().manual_seed(1)
    x = torch.rand(4, 1, 16, 16, generator=g) * 2 - 1
    pair = make_ct_pair(x, g, DtSchedule(constant=0.25), 0, t=1.0)
    net = IdNet()

    feat = feature_tangent(net, fm, pair)
    z = net(pair.x_t, pair.t).detach().requires_grad_(True)
    target = net(pair.x_prev, pair.t_prev).detach()
    dt = torch.as_tensor(pair.dt).reshape(-1)
    loss = (0.5 * mfd(fm, z, target, reduce="none") / dt).sum()
    (grad,) = torch.autograd.grad(loss, z)
    rel = (feat - grad).norm().item() / grad.norm().item()

    vanilla = (net(pair.x_t, pair.t) - net(pair.x_prev, pair.t_prev))
    vanilla = vanilla / dt.view(-1, 1, 1, 1)
    ident = feature_tangent(net, IdentityFeatures(), pair)
    rel_id = (ident - vanilla).norm().item() / vanilla.norm().item()

    elapsed = time.monotonic() - t_start
    report(2, rel < 1e-5 and rel_id < 1e-6 and elapsed < 10.0,
           f"(autodiff rel {rel:.2e}, identity rel {rel_id:.2e}, {elapsed:.1f}s)")


def test_criterion_3_transform_contract():
    """All 11 transforms: T_0 = id within 1e-6 sup norm plus their
    distribution/magnitude oracles (noise std within 2%, mixup exact)."""
    t_start = time.monotonic()
    g = torch.Generator().manual_seed(2)
    x = torch.rand(4, 3, 32, 32, generator=g) * 2 - 1
    specs = group_masks({"deg", "geo", "clr"})
    assert len(specs) == 11

    failures = []
    for spec in specs:
        aux = torch.flip(x, dims=[0]) if spec.kind == "mixup" else None
        out = apply(TransformSample(spec, 0.0, aux=aux), x, generator=g)
        if (out - x).abs().max().item() >= 1e-6:
            failures.append(f"{spec.kind}: T_0 != id")

    # noise magnitude oracle: std of the additive part ~ alpha within 2%
    big = torch.rand(2, 3, 128, 128, generator=g) * 2 - 1
    noised = apply(TransformSample(make_spec("gauss_noise"), 0.6), big, generator=g)
    std = (noised - big).std().item()
    if abs(std - 0.6) / 0.6 >= 0.02:
        failures.append(f"noise std {std:.4f} vs 0.6")

    # mixup closed form, exact
    y = torch.flip(x, dims=[0])
    mixed = apply(TransformSample(make_spec("mixup"), 0.5, aux=y), x)
    if not torch.allclose(mixed, (x + y) / 2, atol=1e-6):
        failures.append("mixup alpha=0.5 is not the midpoint")

    # brightness/saturation closed forms, magnitude oracles for the rest are
    # exercised in the transforms test module at module scope
    bright = apply(TransformSample(make_spec("brightness"), 0.25), x)
    if not torch.allclose(bright, x + 0.25, atol=1e-6):
        failures.append("brightness shift mismatch")

    elapsed = time.monotonic() - t_start
    report(3, not failures and elapsed < 60.0,
           f"({len(specs)} transforms, {elapsed:.1f}s)" + (f" {failures}" if failures else ""))


def test_criterion_4_boundary_condition():
    """cm_forward(., 0) is the identity for random weights (< 1e-6 max dev)."""
    worst = 0.0
    for seed in range(3):
        torch.manual_seed(seed)
        net = build_net(discs16_preset(), channels=1)
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(8, 1, 16, 16, generator=g)
        dev = (cm_forward(net, x, 0.0) - x).abs().max().item()
        worst = max(worst, dev)
    report(4, worst < 1e-6, f"(max abs deviation {worst:.2e})")


def test_criterion_5_decomposition_geometry():
    """Projector idempotence/symmetry < 1e-6; random-tangent frac_orth
    ~ (D - 2) / D +- 0.003 over 1e3 draws; components orthogonal."""
    geom = DiscGeometry()
    p = DiscParams(16.0, 16.0)
    basis = tangent_space(p, geom).reshape(2, -1)
    proj = basis.T @ basis
    idem = np.abs(proj @ proj - proj).max()
    sym = np.abs(proj - proj.T).max()

    z = render(p, geom)
    rng = np.random.default_rng(5)
    tangents = rng.standard_normal((1000, 32, 32))
    reports = decompose_batch(tangents, np.repeat(z[None], 1000, axis=0), geom)
    fracs = np.array([r.frac_orth for r in reports])
    expected = (1024 - 2) / 1024
    frac_err = abs(fracs.mean() - expected)

    max_inner = 0.0
    for r in reports[:50]:
        denom = float(r.tangent.ravel() @ r.tangent.ravel())
        inner = abs(float(r.parallel.ravel() @ r.orthogonal.ravel()))
        max_inner = max(max_inner, inner / denom)

    ok = idem < 1e-6 and sym < 1e-6 and frac_err < 0.003 and max_inner < 1e-6
    report(5, ok, f"(idem {idem:.1e}, sym {sym:.1e}, frac err {frac_err:.4f}, "
                  f"inner {max_inner:.1e})")


def test_criterion_6_feature_regression(shared_dir):
    """Trained feature net: held-out mean |phi_i(T_alpha x) - alpha| below
    0.1 alpha_hi per active transform and per-head Spearman > 0.9."""
    rep = json.loads((shared_dir / "features_report.json").read_text())
    lines = []
    ok = True
    for kind, entry in rep.items():
        passed = entry["mae"] < 0.1 * entry["alpha_hi"] and entry["spearman"] > 0.9
        ok = ok and passed
        lines.append(f"{kind}: mae {entry['mae']:.4f}/{0.1 * entry['alpha_hi']:.4f} "
                     f"rho {entry['spearman']:.3f}")
    report(6, ok, "(" + "; ".join(lines) + ")")


def test_clean_data_sits_on_zero_level_sets(shared_dir):
    """Trained heads map clean data near 0 (|phi_i| < 0.1 alpha_hi), for the
    transforms identifiable at alpha = 0.

    Blur and mixup are excluded: their image derivative w.r.t. the magnitude
    vanishes at 0 (a sigma -> 0 kernel is numerically a delta; an alpha -> 0
    mixup partner fades out), so level sets near 0 coincide and a regressor
    has an intrinsic boundary floor there.
    """
    from cmlab.discs import read_dataset

    fm = load_feature_map(shared_dir / "phi.ckpt")
    heldout, _ = read_dataset(shared_dir / "data" / "heldout")
    with torch.no_grad():
        head, _ = fm(heldout[:512])
    identifiable = {"gauss_noise", "scale_iso", "scale_aniso", "brightness", "contrast"}
    for i, spec in enumerate(fm.specs):
        if spec.kind not in identifiable:
            continue
        val = head[:, i].abs().mean().item()
        assert val < 0.1 * spec.alpha_hi, (
            f"{spec.kind}: |phi(clean)| = {val:.4f} >= {0.1 * spec.alpha_hi:.4f}"
        )


def _sweep_mean(run_dir: Path, times=(1.0, 10.0, 80.0)) -> float:
    data = read_csv(run_dir / "tangents" / "sweep.csv")
    picked = [v for t, v in zip(data["t"], data["mean_frac_orth"]) if t in times]
    return float(np.mean(picked))


def test_criterion_7_orthogonal_fraction_contrast(run_dirs):
    """MFD-trained CMs have larger mean orthogonal tangent fraction at
    t in {1, 10, 80} than MSE-trained ones, in at least 2 of 3 seeds."""
    wins = []
    details = []
    for seed in SEEDS:
        f_mfd = _sweep_mean(run_dirs[("mfd", CM_BATCH, seed)])
        f_mse = _sweep_mean(run_dirs[("mse", CM_BATCH, seed)])
        wins.append(f_mfd > f_mse)
        details.append(f"s{seed}: {f_mfd:.3f} vs {f_mse:.3f}")
    report(7, sum(wins) >= 2, "(" + "; ".join(details) + ")")


def test_criterion_8_convergence_speed(run_dirs):
    """MFD manifold distance <= MSE at every logged checkpoint >= 10k in at
    least 2 of 3 seeds; and MFD at batch 16 ends at or below MSE at batch 128."""
    wins = []
    details = []
    for seed in SEEDS:
        m_mfd = read_csv(run_dirs[("mfd", CM_BATCH, seed)] / "metrics.csv")
        m_mse = read_csv(run_dirs[("mse", CM_BATCH, seed)] / "metrics.csv")
        sel = m_mfd["iteration"] >= 10_000
        ok = bool(np.all(m_mfd["manifold_dist_mean"][sel]
                         <= m_mse["manifold_dist_mean"][sel]))
        wins.append(ok)
        details.append(f"s{seed}: {'<=' if ok else '>'}")
    small_batch = read_csv(run_dirs[("mfd", 16, 0)] / "metrics.csv")
    big_batch = read_csv(run_dirs[("mse", 128, 0)] / "metrics.csv")
    final_ok = (small_batch["manifold_dist_mean"][-1]
                <= big_batch["manifold_dist_mean"][-1])
    details.append(
        f"mfd@16 {small_batch['manifold_dist_mean'][-1]:.3f} vs "
        f"mse@128 {big_batch['manifold_dist_mean'][-1]:.3f}"
    )
    report(8, sum(wins) >= 2 and bool(final_ok), "(" + "; ".join(details) + ")")


def test_criterion_9_denoising_probe_stability(run_dirs):
    """The MFD run's denoising probe does not diverge: the final value is at
    most 1.5x its minimum over the run."""
    probe = read_csv(run_dirs[("mfd", CM_BATCH, 0)] / "probe.csv")
    final = probe["denoise_fd"][-1]
    floor = probe["denoise_fd"].min()
    ok = final <= 1.5 * floor
    report(9, bool(ok), f"(final {final:.4f} vs min {floor:.4f})")


class TestTrainedRunProperties:
    """Module-level examples that need the full-budget trained runs."""

    def test_mse_run_manifold_distance_thresholds(self, run_dirs):
        """Pilot-frozen gates for the squared-error arm: the best checkpoint
        reaches 0.35 RMS and the final stays under 0.6 (small-batch MSE
        consistency training wobbles after its ~0.30 plateau at this scale)."""
        finals, bests = [], []
        for seed in SEEDS:
            m = read_csv(run_dirs[("mse", CM_BATCH, seed)] / "metrics.csv")
            finals.append(m["manifold_dist_mean"][-1])
            bests.append(m["manifold_dist_mean"].min())
        assert np.median(bests) < 0.35
        assert np.median(finals) < 0.6

    def test_mfd_final_below_mse_final_majority(self, run_dirs):
        """Feature-distance training ends at or below the squared-error arm
        in at least 2 of 3 seeds."""
        wins = 0
        for seed in SEEDS:
            f_mfd = read_csv(run_dirs[("mfd", CM_BATCH, seed)] / "metrics.csv")["manifold_dist_mean"][-1]
            f_mse = read_csv(run_dirs[("mse", CM_BATCH, seed)] / "metrics.csv")["manifold_dist_mean"][-1]
            wins += f_mfd <= f_mse
        assert wins >= 2

    def test_probe_orderings(self, run_dirs, shared_dir):
        """A trained net denoises small-t corruption nearly perfectly
        (probe(0.01) << probe(10)), and an untrained net probes worse than
        every logged checkpoint from 5k on."""
        from cmlab.consistency import load_consistency
        from cmlab.discs import read_dataset
        from cmlab.interpolant import Schedule
        from cmlab.metrics import Evaluator

        run = run_dirs[("mfd", CM_BATCH, 0)]
        net, ema, cfg, _ = load_consistency(run / "net.ckpt")
        data, _ = read_dataset(run / "data" / "train")
        fm = load_feature_map(run / "phi.ckpt")
        geom = DiscGeometry.from_config(cfg.discs)
        ev = Evaluator(geom, data, fm, Schedule.default(cfg.schedule))
        lo = ev.probe(ema, seed=3, t=0.01, n_samples=512)
        hi = ev.probe(ema, seed=3, t=10.0, n_samples=512)
        assert lo < 0.05 * hi

        torch.manual_seed(cfg.seed)
        untrained = build_net(cfg, channels=1)
        u = ev.probe(untrained, seed=3, t=cfg.cm.probe_t, n_samples=512)
        probe = read_csv(run / "probe.csv")
        sel = probe["iteration"] >= 5000
        assert np.all(probe["denoise_fd"][sel] < u)


def _comparable_csv(path: Path, drop=("wall_time_s",)) -> dict:
    data = read_csv(path)
    return {k: v.tolist() for k, v in data.items() if k not in drop}


def test_criterion_10_pipeline_determinism(tmp_path):
    """The full discs pipeline rerun with identical config and seed
    reproduces every metric CSV bit-identically (wall-clock column aside)."""
    outputs = []
    for run in range(2):
        cfg = discs16_preset(output_dir=str(tmp_path / f"run{run}"), seed=17)
        cfg.discs.n_train = 256
        cfg.discs.n_heldout = 64
        cfg.features.iters = 150
        cfg.features.batch = 32
        cfg.features.log_every = 50
        cfg.cm.iters = 200
        cfg.cm.batch = 16
        cfg.cm.eval_every = 100
        cfg.cm.ckpt_every = 100
        cfg.cm.log_every = 50
        cfg.cm.n_eval = 32
        cfg.cm.n_probe = 64
        run_pipeline(cfg)
        outputs.append(tmp_path / f"run{run}")

    a, b = outputs
    mismatches = []
    if _comparable_csv(a / "metrics.csv") != _comparable_csv(b / "metrics.csv"):
        mismatches.append("metrics.csv")
    if _comparable_csv(a / "trials.csv") != _comparable_csv(b / "trials.csv"):
        mismatches.append("trials.csv")
    for name in ("probe.csv", "eval_history.csv", "train_log.jsonl",
                 "features_log.jsonl", "eval.json"):
        if (a / name).read_bytes() != (b / name).read_bytes():
            mismatches.append(name)
    if (a / "tangents" / "sweep.csv").read_bytes() != (b / "tangents" / "sweep.csv").read_bytes():
        mismatches.append("sweep.csv")
    if (a / "data" / "train.bin").read_bytes() != (b / "data" / "train.bin").read_bytes():
        mismatches.append("train.bin")
    report(10, not mismatches,
           "(bit-identical)" if not mismatches else f"(mismatches: {mismatches})")
