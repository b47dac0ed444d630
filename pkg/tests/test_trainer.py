import numpy as np
import pytest
import torch

from sscc.augment import AugmentationPool
from sscc.data import extract_patches, pca_fit, pca_transform, synth_cube
from sscc.losses import LossConfig, cross_correlation
from sscc.network import DivergenceError, NetworkConfig, build_network, label_forward, to_tensor
from sscc.trainer import TrainConfig, epoch_seeds, lr_at_epoch, make_optimizer, train, train_step

NET = NetworkConfig(input_channels=4, input_side=5, conv_blocks=[(8, 3, 1)], latent_dim=16, head_hidden=16,
                    cluster_count=3)


@pytest.fixture(scope="module")
def small_data():
    cube, labels = synth_cube(3, 12, 12, 8, 0.05, seed=1)
    reduced = pca_transform(pca_fit(cube, 4), cube)
    patches, truth = extract_patches(reduced, labels, 5)
    return patches, truth


def flat(net):
    return torch.cat([p.detach().flatten() for p in net.parameters()])


class TestSchedule:
    @pytest.mark.parametrize("epoch,expected", [(0, 0.02), (19, 0.02), (20, 0.002), (40, 2e-4)])
    def test_lr_at_epoch(self, epoch, expected):
        assert lr_at_epoch(TrainConfig(), epoch) == pytest.approx(expected, rel=1e-12)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at_epoch(TrainConfig(), -1)

    @pytest.mark.parametrize("kwargs", [{"batch_size": 1}, {"base_lr": 0.0}, {"epochs": -1},
                                        {"decay_interval_epochs": 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_epoch_seeds_distinct(self):
        rng_a, seed_a = epoch_seeds(0, 0)
        rng_b, seed_b = epoch_seeds(0, 1)
        assert seed_a != seed_b
        assert not np.array_equal(rng_a.permutation(50), rng_b.permutation(50))


class TestTrain:
    def test_deterministic(self, small_data):
        patches, truth = small_data
        cfg = TrainConfig(batch_size=32, epochs=3, base_lr=1e-3, seed=5)
        net_a, hist_a = train(patches, AugmentationPool(), NET, cfg, ground_truth=truth)
        net_b, hist_b = train(patches, AugmentationPool(), NET, cfg, ground_truth=truth)
        assert torch.equal(flat(net_a), flat(net_b))
        assert hist_a.to_csv() == hist_b.to_csv()

    def test_zero_epochs(self, small_data):
        patches, _ = small_data
        net, hist = train(patches, AugmentationPool(), NET, TrainConfig(batch_size=32, epochs=0, seed=3))
        assert len(hist) == 0
        assert torch.equal(flat(net), flat(build_network(NET, 3)))

    def test_history_columns(self, small_data):
        patches, truth = small_data
        cfg = TrainConfig(batch_size=32, epochs=4, base_lr=1e-3, decay_interval_epochs=2, seed=0)
        _, hist = train(patches, AugmentationPool(), NET, cfg, ground_truth=truth)
        assert len(hist) == 4
        np.testing.assert_array_equal(hist.column("lr"), [lr_at_epoch(cfg, e) for e in range(4)])
        header = hist.to_csv().splitlines()[0]
        assert header == "epoch,lr,loss,loss_w,loss_b,acc,kappa,nmi,ari,purity,divergence"
        for name in ("acc", "nmi", "purity"):
            assert np.all((hist.column(name) >= 0) & (hist.column(name) <= 1))

    def test_history_without_labels(self, small_data):
        patches, _ = small_data
        _, hist = train(patches, AugmentationPool(), NET, TrainConfig(batch_size=32, epochs=1, seed=0))
        assert hist.to_csv().splitlines()[0] == "epoch,lr,loss,loss_w,loss_b"

    def test_loss_descends(self, small_data):
        patches, _ = small_data
        cfg = TrainConfig(batch_size=32, epochs=15, base_lr=1e-3, seed=0)
        _, hist = train(patches, AugmentationPool(), NET, cfg)
        loss = hist.column("loss")
        assert loss[-1] < loss[0]

    def test_too_few_patches(self, small_data):
        patches, _ = small_data
        with pytest.raises(ValueError, match="fewer than one batch"):
            train(patches[:10], AugmentationPool(), NET, TrainConfig(batch_size=32, epochs=1))

    def test_divergence_reports_epoch_and_batch(self, small_data):
        patches, _ = small_data
        data = np.stack([p.values for p in patches])
        data[0, 0, 0, 0] = np.inf
        cfg = TrainConfig(batch_size=len(patches), epochs=1, seed=0)
        with pytest.raises(DivergenceError, match="epoch 1, batch 1"):
            train(data, AugmentationPool.disabled(), NET, cfg)


class TestStep:
    def views(self, seed, m=16):
        rng = np.random.default_rng(seed)
        return (rng.standard_normal((m, 5, 5, 4)).astype(np.float32),
                rng.standard_normal((m, 5, 5, 4)).astype(np.float32))

    def test_step_size_bound(self):
        # Adam normalises each coordinate, so the first step is lr * g / (|g| + eps) <= lr per entry
        net = build_network(NET, 0)
        cfg = TrainConfig(base_lr=1e-3, weight_decay=5e-3)
        opt = make_optimizer(net, cfg)
        before = [p.detach().clone() for p in net.parameters()]
        va, vb = self.views(0)
        train_step(net, opt, va, vb, cfg.loss)
        for old, p in zip(before, net.parameters()):
            delta = (p.detach() - old).abs()
            assert torch.isfinite(delta).all()
            assert delta.max().item() <= 10 * cfg.base_lr
        step = torch.cat([(p.detach() - o).flatten() for p, o in zip(net.parameters(), before)]).norm()
        grad = torch.cat([p.grad.flatten() for p in net.parameters()]).norm()
        norm = torch.cat([o.flatten() for o in before]).norm()
        assert step <= 10 * cfg.base_lr * (grad + cfg.weight_decay * norm)

    def test_diagonal_term_descends_with_frozen_head(self):
        net = build_network(NET, 1)
        for p in net.head.parameters():
            p.requires_grad_(False)
        cfg = TrainConfig(base_lr=1e-3, weight_decay=0.0)
        loss = LossConfig(alpha=0.0, lam=0.0)
        opt = make_optimizer(net, cfg)
        va, vb = self.views(1, m=32)

        def diagonal_term():
            with torch.no_grad():
                _, ya = label_forward(net, to_tensor(va))
                _, yb = label_forward(net, to_tensor(vb))
                return float(((torch.diagonal(cross_correlation(ya, yb)) - 1) ** 2).sum())

        values = [diagonal_term()]
        for _ in range(5):
            train_step(net, opt, va, vb, loss)
            values.append(diagonal_term())
        assert all(b <= a + 1e-7 for a, b in zip(values, values[1:])), values
        assert values[-1] < values[0]
