"""Losses, rmsprop, straight-through training: gradient oracles and contracts."""

import numpy as np
import pytest

from bnll.blocks import LayerNode
from bnll.network import Network, NetworkSpec, build_network
from bnll.train import (
    LrSchedule,
    TrainConfig,
    TrainState,
    gradient_magnitude_report,
    loss_l2,
    loss_multiclass_ce,
    loss_sigmoid_ce,
    rmsprop_step,
    train,
)
from bnll.data import make_toy_dataset


class TestLosses:
    def test_l2_zero_on_match(self):
        x = np.random.default_rng(0).random((2, 3, 4, 4)).astype(np.float32)
        loss, grad = loss_l2(x, x.copy())
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_sigmoid_ce_at_zero_logits(self):
        z = np.zeros((1, 1, 2, 2), np.float32)
        t = np.zeros_like(z)
        loss, _ = loss_sigmoid_ce(z, t)
        assert loss == pytest.approx(np.log(2.0), rel=1e-6)

    def test_multiclass_ce_uniform_logits(self):
        for c in (2, 5, 7):
            z = np.zeros((1, c, 3, 3), np.float32)
            mask = np.random.default_rng(c).integers(0, c, size=(1, 3, 3))
            loss, _ = loss_multiclass_ce(z, mask)
            assert loss == pytest.approx(np.log(c), rel=1e-6)

    def test_nan_rejected(self):
        bad = np.full((1, 1, 2, 2), np.nan, np.float32)
        good = np.zeros_like(bad)
        for fn in (loss_l2, loss_sigmoid_ce):
            with pytest.raises(ValueError):
                fn(bad, good)

    @pytest.mark.parametrize("fn", [loss_l2, loss_sigmoid_ce])
    def test_gradient_matches_finite_differences(self, fn):
        rng = np.random.default_rng(1)
        pred = rng.normal(size=(1, 2, 3, 3)).astype(np.float64)
        target = rng.random((1, 2, 3, 3)).astype(np.float64)
        _, grad = fn(pred, target)
        eps = 1e-6
        for _ in range(5):
            idx = tuple(rng.integers(0, s) for s in pred.shape)
            orig = pred[idx]
            pred[idx] = orig + eps
            up, _ = fn(pred, target)
            pred[idx] = orig - eps
            dn, _ = fn(pred, target)
            pred[idx] = orig
            assert grad[idx] == pytest.approx((up - dn) / (2 * eps), rel=1e-4, abs=1e-10)

    def test_multiclass_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(1, 3, 2, 2)).astype(np.float64)
        mask = rng.integers(0, 3, size=(1, 2, 2))
        _, grad = loss_multiclass_ce(z, mask)
        eps = 1e-6
        for _ in range(5):
            idx = tuple(rng.integers(0, s) for s in z.shape)
            orig = z[idx]
            z[idx] = orig + eps
            up, _ = loss_multiclass_ce(z, mask)
            z[idx] = orig - eps
            dn, _ = loss_multiclass_ce(z, mask)
            z[idx] = orig
            assert grad[idx] == pytest.approx((up - dn) / (2 * eps), rel=1e-4, abs=1e-10)


def micro_net(binarize: bool = False, seed: int = 0) -> Network:
    """Tiny two-conv network for gradient checks."""
    nodes = [
        LayerNode("input", "input", (), out_channels=2),
        LayerNode("c1", "conv", ("input",), kernel=(3, 3), padding=(1, 1),
                  in_channels=2, out_channels=3, binarized=binarize),
        LayerNode("r1", "relu", ("c1",), in_channels=3, out_channels=3),
        LayerNode("c2", "conv", ("r1",), kernel=(1, 1), in_channels=3,
                  out_channels=2, binarized=False),
        LayerNode("output", "output", ("c2",), in_channels=2, out_channels=2),
    ]
    net = Network(None, nodes)
    net.init_weights(seed)
    return net


class TestBackward:
    def test_all_real_micro_net_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        net = micro_net()
        for nid in net.weights:
            net.weights[nid] = net.weights[nid].astype(np.float64)
        x = rng.normal(size=(2, 2, 5, 5)).astype(np.float64)
        target = rng.normal(size=(2, 2, 5, 5)).astype(np.float64)

        def run():
            return loss_l2(net.forward(x, mode="eval", keep_tape=True), target)

        _, dloss = run()
        grads = net.backward(dloss)
        eps = 1e-6
        checked = 0
        for nid, w in net.weights.items():
            flat = w.ravel()
            gflat = grads[nid].ravel()
            for j in rng.choice(flat.size, size=min(8, flat.size), replace=False):
                orig = flat[j]
                flat[j] = orig + eps
                up, _ = run()
                flat[j] = orig - eps
                dn, _ = run()
                flat[j] = orig
                fd = (up - dn) / (2 * eps)
                assert gflat[j] == pytest.approx(fd, rel=1e-4, abs=1e-9), nid
                checked += 1
        assert checked >= 14

    def test_all_zero_loss_gives_all_zero_grads(self):
        net = micro_net()
        x = np.random.default_rng(4).normal(size=(1, 2, 4, 4)).astype(np.float32)
        net.forward(x, mode="eval", keep_tape=True)
        grads = net.backward(np.zeros((1, 2, 4, 4), np.float32))
        assert all(np.all(g == 0) for g in grads.values())

    def test_backward_without_tape_raises(self):
        net = micro_net()
        with pytest.raises(RuntimeError):
            net.backward(np.zeros((1, 2, 4, 4), np.float32))

    def test_ste_masks_latent_gradients(self):
        # a lone binarized conv with controlled latents
        net2 = Network(None, [
            LayerNode("input", "input", (), out_channels=2),
            LayerNode("b", "bn", ("input",), in_channels=2, out_channels=2),
            LayerNode("s", "sign", ("b",), in_channels=2, out_channels=2),
            LayerNode("c1", "conv", ("s",), kernel=(3, 3), padding=(1, 1),
                      in_channels=2, out_channels=3, binarized=True),
            LayerNode("output", "output", ("c1",), in_channels=3, out_channels=3),
        ])
        net2.init_weights(0)
        net2.weights["c1"][0, 0, 0, 0] = 2.0   # |w| > 1: blocked
        net2.weights["c1"][0, 0, 0, 1] = 0.5   # |w| <= 1: passes
        x = np.random.default_rng(5).normal(size=(1, 2, 4, 4)).astype(np.float32)
        net2.forward(x, mode="train", keep_tape=True)
        grads = net2.backward(np.ones((1, 3, 4, 4), np.float32))
        assert grads["c1"][0, 0, 0, 0] == 0.0
        assert grads["c1"][0, 0, 0, 1] != 0.0


class TestRmsprop:
    def _state(self):
        net = micro_net()
        return TrainState(net, loss_kind="l2_heatmap")

    def test_zero_gradient_leaves_weights(self):
        st = self._state()
        before = {k: v.copy() for k, v in st.net.weights.items()}
        grads = {k: np.zeros_like(v) for k, v in st.net.weights.items()}
        rmsprop_step(st, grads, lr=0.1)
        for k in before:
            assert np.array_equal(st.net.weights[k], before[k])

    def test_constant_gradient_step_saturates_to_lr(self):
        st = self._state()
        k = "c1"
        g = np.full_like(st.net.weights[k], 0.01)
        lr = 1e-3
        prev = st.net.weights[k].copy()
        for _ in range(2000):
            rmsprop_step(st, {k: g}, lr)
        step = np.abs(prev - st.net.weights[k]) / 2000
        # per-step magnitude approaches lr once the accumulator saturates
        last = st.net.weights[k].copy()
        rmsprop_step(st, {k: g}, lr)
        assert np.allclose(np.abs(st.net.weights[k] - last), lr, rtol=0.02)

    def test_binarized_latents_clipped(self):
        net = micro_net()
        nodes = list(net.nodes)
        nodes[1] = LayerNode("c1", "conv", ("input",), kernel=(3, 3), padding=(1, 1),
                             in_channels=2, out_channels=3, binarized=True)
        net = Network(None, nodes)
        net.init_weights(0)
        st = TrainState(net, loss_kind="l2_heatmap")
        net.weights["c1"][:] = 1.0
        g = np.full_like(net.weights["c1"], -5.0)  # negative grad pushes up
        rmsprop_step(st, {"c1": g}, lr=0.5)
        assert np.all(net.weights["c1"] <= 1.0)
        assert np.all(net.weights["c1"] >= -1.0)

    def test_unknown_loss_rejected(self):
        with pytest.raises(ValueError):
            TrainState(micro_net(), loss_kind="hinge")


class TestSchedule:
    def test_endpoints(self):
        s = LrSchedule(initial=2.5e-4, final=5e-5, drops=4, total_epochs=100)
        assert s.at_epoch(0) == 2.5e-4
        assert s.at_epoch(99) == pytest.approx(5e-5, rel=1e-6)

    def test_monotone_nonincreasing(self):
        s = LrSchedule(total_epochs=50)
        rates = [s.at_epoch(e) for e in range(50)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert len(set(rates)) == 5  # initial plus four drops


class TestTrainingLoop:
    def test_loss_decreases_on_tiny_problem(self, tmp_path):
        spec = NetworkSpec(block_variant="hpm", channels=8, hg_depth=1,
                           input_resolution=(32, 32), head_maps=2)
        net = build_network(spec, seed=0)
        samples = make_toy_dataset(8, 2, seed=0, size=32)
        st = TrainState(net, LrSchedule(initial=2e-3, final=2e-3, drops=0,
                                        total_epochs=6), loss_kind="sigmoid_ce", seed=0)
        log = tmp_path / "metrics.jsonl"
        hist = train(st, samples, TrainConfig(epochs=6, batch_size=4,
                                              log_path=log, eval_every=6))
        assert len(hist) == 6
        assert hist[-1]["loss"] < hist[0]["loss"]
        assert log.exists() and len(log.read_text().splitlines()) == 6
        assert "pck" in hist[-1]

    def test_gradient_magnitude_report_keys(self):
        samples = make_toy_dataset(2, 2, seed=1, size=32)

        def make_net(binarize):
            spec = NetworkSpec(block_variant="hpm", channels=8, hg_depth=1,
                               input_resolution=(32, 32), head_maps=2,
                               binarize=binarize)
            return build_network(spec, seed=1)

        rep = gradient_magnitude_report(make_net, samples)
        assert set(rep) == {"binary/l2_heatmap", "binary/sigmoid_ce",
                            "real/l2_heatmap", "real/sigmoid_ce"}
        assert all(v > 0 for v in rep.values())
