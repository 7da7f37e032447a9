"""Feature net training, forward contract, and the feature distance."""

import numpy as np
import pytest
import torch

from cmlab.config import FeatTrainConfig, MfdConfig
from cmlab.errors import ContractViolationError, TrainingError
from cmlab.features import (
    FeatureDistance,
    FeatureMap,
    load_feature_map,
    mfd,
    regression_report,
    save_feature_map,
    train_features,
)
from cmlab.nets import FeatureBackbone
from cmlab.transforms import group_masks, make_spec


def make_fm(n_heads=3, resolution=16, seed=0, randomize_head=False,
            mfd_cfg=None) -> FeatureMap:
    torch.manual_seed(seed)
    backbone = FeatureBackbone(in_channels=1, n_heads=n_heads, resolution=resolution,
                               channels=(4, 8, 8, 8), fc_dim=16)
    if randomize_head:
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            backbone.head.weight.copy_(torch.randn(backbone.head.weight.shape, generator=g))
            backbone.head.bias.copy_(torch.randn(backbone.head.bias.shape, generator=g))
    specs = [make_spec(k) for k in ("gauss_noise", "gauss_blur", "mixup")][:n_heads]
    return FeatureMap(backbone, specs, mfd_cfg)


def batch(n=4, res=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 1, res, res, generator=g) * 2 - 1


class TestForward:
    def test_deterministic_bitwise(self):
        fm = make_fm()
        x = batch()
        h1, t1 = fm(x)
        h2, t2 = fm(x)
        assert torch.equal(h1, h2)
        for a, b in zip(t1, t2):
            assert torch.equal(a, b)

    def test_head_dimension_matches_transforms(self):
        fm = make_fm(n_heads=3)
        head, _ = fm(batch())
        assert head.shape == (4, 3)

    def test_tap_count_matches_pool_stages(self):
        fm = make_fm()
        _, taps = fm(batch())
        assert len(taps) == fm.backbone.n_taps == 3
        # 8x downsample overall: 16 -> 8 -> 4 -> 2
        assert [t.shape[-1] for t in taps] == [8, 4, 2]

    def test_zero_init_head_predicts_zero(self):
        fm = make_fm()
        head, _ = fm(batch(seed=9))
        assert torch.all(head == 0)

    def test_resolution_mismatch(self):
        fm = make_fm()
        with pytest.raises(ContractViolationError):
            fm(batch(res=32))


class TestMfd:
    def test_zero_on_identical_inputs(self):
        fm = make_fm(randomize_head=True)
        x = batch()
        assert mfd(fm, x, x).item() == 0.0

    def test_symmetry(self):
        fm = make_fm(randomize_head=True)
        x, y = batch(seed=1), batch(seed=2)
        assert mfd(fm, x, y).item() == pytest.approx(mfd(fm, y, x).item(), rel=1e-6)

    def test_nonnegative(self):
        fm = make_fm(randomize_head=True)
        assert mfd(fm, batch(seed=3), batch(seed=4)).item() >= 0.0

    def test_batch_equals_elementwise(self):
        """Batch reduction equals the mean of per-pair scalar computations."""
        fm = make_fm(randomize_head=True)
        x, y = batch(n=5, seed=5), batch(n=5, seed=6)
        batched = mfd(fm, x, y, reduce="none")
        singles = torch.stack([
            mfd(fm, x[i:i + 1], y[i:i + 1], reduce="none")[0] for i in range(5)
        ])
        assert torch.allclose(batched, singles, rtol=1e-5, atol=1e-7)
        assert mfd(fm, x, y).item() == pytest.approx(batched.mean().item(), rel=1e-6)

    def test_gradient_matches_finite_differences(self):
        """Directional derivative of mfd w.r.t. x vs central differences,
        relative error < 1e-3 at step 1e-3."""
        fm = make_fm(randomize_head=True)
        fm.backbone.double()
        g = torch.Generator().manual_seed(7)
        x = (torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1)
        y = (torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64) * 2 - 1)
        xv = x.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(mfd(fm, xv, y, reduce="sum"), xv)
        eps = 1e-3
        for k in range(3):
            d = torch.randn(x.shape, generator=g, dtype=torch.float64)
            d = d / d.norm()
            fd = (mfd(fm, x + eps * d, y, reduce="sum")
                  - mfd(fm, x - eps * d, y, reduce="sum")).item() / (2 * eps)
            an = (grad * d).sum().item()
            assert abs(fd - an) / max(abs(fd), 1e-12) < 1e-3

    def test_taps_can_be_disabled(self):
        x, y = batch(seed=8), batch(seed=9)
        with_taps = make_fm(randomize_head=True, mfd_cfg=MfdConfig(use_taps=True))
        without = make_fm(randomize_head=True, mfd_cfg=MfdConfig(use_taps=False))
        assert len(with_taps.stacked(x)) == 4
        assert len(without.stacked(x)) == 1
        assert mfd(without, x, y).item() <= mfd(with_taps, x, y).item() + 1e-6

    def test_layer_weights_scale_terms(self):
        x, y = batch(seed=10), batch(seed=11)
        base = make_fm(randomize_head=True)
        doubled = make_fm(randomize_head=True,
                          mfd_cfg=MfdConfig(head_weight=2.0, tap_weights=[2.0, 2.0, 2.0]))
        assert mfd(doubled, x, y).item() == pytest.approx(2 * mfd(base, x, y).item(), rel=1e-5)


class TestFeatureDistance:
    def test_sum_sq_matches_mfd(self):
        fm = make_fm(randomize_head=True)
        x, y = batch(seed=12), batch(seed=13)
        dist = FeatureDistance(fm, reduction="sum_sq")
        assert dist(x, y).item() == pytest.approx(mfd(fm, x, y).item(), rel=1e-6)

    def test_sum_reduction_identity_and_symmetry(self):
        fm = make_fm(randomize_head=True)
        x, y = batch(seed=14), batch(seed=15)
        dist = FeatureDistance(fm, reduction="sum")
        assert dist(x, x).item() == pytest.approx(0.0, abs=1e-6)
        assert dist(x, y).item() == pytest.approx(dist(y, x).item(), rel=1e-6)
        assert dist(x, y).item() >= 0.0


@pytest.fixture(scope="module")
def trained(discs16_data_module):
    data = discs16_data_module
    specs = group_masks({"deg"})
    cfg = FeatTrainConfig(batch=64, iters=400, channels=[4, 8, 16, 16],
                          fc_dim=32, log_every=100)
    fm, losses = train_features(data, specs, cfg, seed=3)
    return fm, losses, data


@pytest.fixture(scope="module")
def discs16_data_module():
    from cmlab.discs import DiscGeometry, sample_dataset
    geom = DiscGeometry(resolution=16, radius=3.0, softness=0.75,
                        center_lo=5.0, center_hi=11.0)
    return sample_dataset(256, np.random.default_rng(21), geom)


class TestTraining:
    def test_initial_loss_is_alpha_second_moment(self, trained):
        """Zero-init head predicts 0, so the first loss is E[alpha^2] over the
        transform mixture (within Monte Carlo tolerance)."""
        _, losses, _ = trained
        expected = np.mean([
            (hi**2 + hi * lo + lo**2) / 3.0
            for lo, hi in [(0.0, 1.0), (0.0, 3.0), (0.0, 0.5)]
        ])
        assert losses[0] == pytest.approx(expected, rel=0.35)

    def test_loss_improves(self, trained):
        _, losses, _ = trained
        assert losses[-100:].mean() < 0.6 * losses[:100].mean()

    def test_loss_trace_finite(self, trained):
        _, losses, _ = trained
        assert np.all(np.isfinite(losses))

    def test_divergence_raises_training_error(self, discs16_data_module, tmp_path):
        data = discs16_data_module.clone()
        data[0, 0, 0, 0] = float("nan")
        cfg = FeatTrainConfig(batch=256, iters=5, channels=[4, 8, 8, 8], fc_dim=16)
        with pytest.raises(TrainingError):
            train_features(data, group_masks({"deg"}), cfg, seed=0,
                           ckpt_path=tmp_path / "phi.ckpt")

    def test_regression_report_structure(self, trained):
        fm, _, data = trained
        rep = regression_report(fm, data, seed=1, n_pairs=64, n_grid=5, n_grid_images=32)
        assert set(rep) == {"gauss_noise", "gauss_blur", "mixup"}
        for entry in rep.values():
            assert set(entry) == {"mae", "alpha_hi", "spearman"}
            assert np.isfinite(entry["mae"])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, trained):
        fm, _, _ = trained
        path = tmp_path / "phi.ckpt"
        save_feature_map(path, fm, train_config=FeatTrainConfig(), seed=3)
        back = load_feature_map(path)
        for (ka, va), (kb, vb) in zip(fm.backbone.state_dict().items(),
                                      back.backbone.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)
        assert back.specs == fm.specs
        assert back.mfd_cfg.use_taps == fm.mfd_cfg.use_taps

    def test_loaded_map_is_frozen_and_identical(self, tmp_path, trained):
        fm, _, data = trained
        path = tmp_path / "phi.ckpt"
        save_feature_map(path, fm)
        back = load_feature_map(path)
        assert all(not p.requires_grad for p in back.backbone.parameters())
        h1, _ = fm(data[:4])
        h2, _ = back(data[:4])
        assert torch.equal(h1, h2)
