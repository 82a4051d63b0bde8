import unittest

import numpy as np
import pytest

from rffcl import ConfigError, DivergenceError, FormatError, InputShapeError
from rffcl.tensornet import functional as F
from rffcl.tensornet.layers import BatchNorm1d, Identity, Linear, Sequential
from rffcl.tensornet.model import BackboneConfig, ModelState, load_checkpoint, read_manifest, save_checkpoint
from rffcl.tensornet.optim import Adam, ParamGroup, cosine_lr
from rffcl.tensornet.tensor import Tensor

TINY = BackboneConfig(widths=(4, 4, 4, 8), projection_dim=8, prediction_hidden=4, classifier_hidden=4)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad


class GradientCheckTestCase(unittest.TestCase):
    """Analytic backward passes against central differences, in float64"""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def check(self, forward, backward, inputs, rtol=1e-5, atol=1e-7):
        out, cache = forward()
        upstream = self.rng.standard_normal(out.shape)
        analytic = backward(upstream, cache)
        for x, g in zip(inputs, analytic):
            expected = numeric_grad(lambda: float(np.sum(forward()[0] * upstream)), x)
            np.testing.assert_allclose(g, expected, rtol=rtol, atol=atol)

    def test_conv1d(self):
        x = self.rng.standard_normal((2, 3, 9))
        w = self.rng.standard_normal((4, 3, 3))
        b = self.rng.standard_normal(4)
        self.check(lambda: F.conv1d_forward(x, w, b, 1), F.conv1d_backward, [x, w, b])

    def test_conv1d_wide_kernel(self):
        x = self.rng.standard_normal((1, 2, 7))
        w = self.rng.standard_normal((3, 2, 5))
        b = self.rng.standard_normal(3)
        self.check(lambda: F.conv1d_forward(x, w, b, 2), F.conv1d_backward, [x, w, b])

    def test_batch_norm_training(self):
        x = self.rng.standard_normal((4, 3, 5))
        gamma = self.rng.standard_normal(3)
        beta = self.rng.standard_normal(3)

        def forward():
            return F.batch_norm_forward(x, gamma, beta, np.zeros(3), np.ones(3), training=True)

        self.check(forward, F.batch_norm_backward, [x, gamma, beta], atol=1e-6)

    def test_batch_norm_eval(self):
        x = self.rng.standard_normal((4, 3))
        gamma, beta = self.rng.standard_normal(3), self.rng.standard_normal(3)
        mean, var = self.rng.standard_normal(3), self.rng.uniform(0.5, 2.0, 3)
        self.check(
            lambda: F.batch_norm_forward(x, gamma, beta, mean.copy(), var.copy(), training=False),
            F.batch_norm_backward,
            [x, gamma, beta],
        )

    def test_max_pool(self):
        x = self.rng.standard_normal((2, 3, 9))
        self.check(lambda: F.max_pool1d_forward(x, 2), F.max_pool1d_backward, [x])

    def test_adaptive_avg_pool(self):
        x = self.rng.standard_normal((2, 3, 7))
        self.check(lambda: F.adaptive_avg_pool1d_forward(x, 3), F.adaptive_avg_pool1d_backward, [x])

    def test_linear(self):
        x = self.rng.standard_normal((5, 4))
        w = self.rng.standard_normal((3, 4))
        b = self.rng.standard_normal(3)
        self.check(lambda: F.linear_forward(x, w, b), F.linear_backward, [x, w, b])

    def test_l2_normalize(self):
        x = self.rng.standard_normal((4, 6))
        self.check(lambda: F.l2_normalize_forward(x), F.l2_normalize_backward, [x])


class FunctionalTestCase(unittest.TestCase):
    def test_batch_norm_updates_running_stats(self):
        x = np.arange(12, dtype=np.float64).reshape(4, 3)
        mean, var = np.zeros(3), np.ones(3)
        F.batch_norm_forward(x, np.ones(3), np.zeros(3), mean, var, training=True)
        np.testing.assert_allclose(mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=0, ddof=1))

    def test_batch_norm_needs_two_values(self):
        with self.assertRaises(InputShapeError):
            F.batch_norm_forward(np.ones((1, 3)), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=True)

    def test_max_pool_drops_ragged_tail(self):
        out, _ = F.max_pool1d_forward(np.arange(5, dtype=float).reshape(1, 1, 5), 2)
        self.assertEqual(out.tolist(), [[[1.0, 3.0]]])

    def test_l2_normalize_zero_row(self):
        y, _ = F.l2_normalize_forward(np.zeros((1, 3)))
        self.assertTrue(np.all(np.isfinite(y)))

    def test_conv_shape_check(self):
        with self.assertRaises(InputShapeError):
            F.conv1d_forward(np.zeros((1, 2, 5)), np.zeros((4, 3, 3)), np.zeros(4))


class TensorTestCase(unittest.TestCase):
    def test_reused_node_accumulates(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        ((x * x) + x).sum().backward()
        np.testing.assert_allclose(x.grad, [3.0, -3.0])

    def test_broadcast_gradient(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * b).sum().backward()
        np.testing.assert_allclose(b.grad, [3.0, 3.0])
        np.testing.assert_allclose(x.grad, [[1.0, 2.0]] * 3)

    def test_detach_stops_gradient(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x.detach()
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [2.0])

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(InputShapeError):
            (x * 2.0).backward()

    def test_constants_do_not_track(self):
        y = Tensor(np.ones(2)) * 3.0
        self.assertFalse(y.requires_grad)


class LayerTestCase(unittest.TestCase):
    def test_registry(self):
        net = Sequential(Linear(3, 4, np.random.default_rng(0)), BatchNorm1d(4))
        names = [n for n, _ in net.named_parameters()]
        self.assertEqual(names, ["0.weight", "0.bias", "1.weight", "1.bias"])
        self.assertEqual(sorted(net.state_dict()), sorted(names + ["1.running_mean", "1.running_var"]))

    def test_state_dict_mismatch(self):
        a = Linear(3, 4, np.random.default_rng(0))
        b = Linear(3, 5, np.random.default_rng(0))
        with self.assertRaises(FormatError):
            a.load_state_dict(b.state_dict())
        with self.assertRaises(FormatError):
            a.load_state_dict({"weight": a.weight.data})

    def test_frozen_batch_norm_keeps_stats(self):
        bn = BatchNorm1d(2)
        bn.frozen = True
        bn(Tensor(np.random.default_rng(0).standard_normal((8, 2)).astype(np.float32)))
        np.testing.assert_array_equal(bn.running_mean, [0.0, 0.0])

    def test_train_eval_propagates(self):
        net = Sequential(Identity(), Sequential(BatchNorm1d(2)))
        net.eval()
        self.assertFalse(net[1][0].training)
        net.train()
        self.assertTrue(net[1][0].training)


class ModelTestCase(unittest.TestCase):
    def test_default_footprint(self):
        state = ModelState(seed=0)
        self.assertEqual(state.parameter_count("backbone"), 618_048)
        self.assertLessEqual(state.parameter_bytes("backbone"), 2.5e6)
        self.assertEqual(state.config.embedding_dim, 640)

    def test_encoder_output_is_unit_norm(self):
        state = ModelState(TINY, seed=0).eval()
        x = np.random.default_rng(0).standard_normal((3, 2, 260)).astype(np.float32)
        features = state.encode(x)
        self.assertEqual(features.shape, (3, 8))
        np.testing.assert_allclose(np.linalg.norm(features, axis=1), 1.0, rtol=1e-5)

    def test_input_shape_checked(self):
        state = ModelState(TINY, seed=0)
        with self.assertRaises(InputShapeError):
            state.forward_encoder(np.zeros((2, 2, 100), dtype=np.float32))

    def test_seeded_init(self):
        a, b = ModelState(TINY, seed=3), ModelState(TINY, seed=3)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_heads(self):
        state = ModelState(TINY, seed=0)
        self.assertEqual(list(state.components()), ["backbone", "projector", "predictor"])
        with self.assertRaises(ConfigError):
            state.forward_classifier(state.forward_encoder(np.zeros((2, 2, 260), dtype=np.float32)))
        state.drop_ssl_heads()
        state.attach_classifier(3)
        self.assertEqual(list(state.components()), ["backbone", "classifier"])
        self.assertEqual(state.logits(np.zeros((2, 2, 260), dtype=np.float32)).shape, (2, 3))

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            BackboneConfig(widths=(4, 4, 4))
        with self.assertRaises(ConfigError):
            BackboneConfig(kernel_sizes=(3, 3, 4, 3))
        with self.assertRaises(ConfigError):
            BackboneConfig.from_dict({"depth": 5})
        self.assertEqual(BackboneConfig.from_dict(TINY.to_dict()), TINY)


class OptimTestCase(unittest.TestCase):
    def test_first_step_is_signed_lr(self):
        p = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
        opt = Adam.single({"p": p})
        p.grad = np.array([0.3, -2.0, 5.0])
        opt.step(0.01)
        np.testing.assert_allclose(p.data, [0.99, -0.99, 0.49], atol=1e-7)
        self.assertEqual(opt.step_count, 1)

    def test_minimises_quadratic(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam.single({"x": x})
        losses = []
        for _ in range(300):
            loss = ((x - 3.0) * (x - 3.0)).sum()
            losses.append(loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step(0.05)
        self.assertLess(losses[-1], 0.1 * losses[0])

    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        opt = Adam.single({"p": p})
        p.grad = np.zeros(3)
        opt.step(0.01)
        np.testing.assert_array_equal(p.data, [1.0, -2.0, 0.5])
        self.assertEqual(opt.step_count, 1)

    def test_lr_scale(self):
        head = Tensor(np.array([1.0]), requires_grad=True)
        body = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([ParamGroup("head", {"head": head}), ParamGroup("body", {"body": body}, 0.0)])
        head.grad, body.grad = np.array([1.0]), np.array([1.0])
        opt.step(0.1)
        self.assertAlmostEqual(float(head.data[0]), 0.9, places=6)
        self.assertEqual(float(body.data[0]), 1.0)

    def test_divergence_leaves_weights(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Adam.single({"p": p})
        p.grad = np.array([np.nan, 1.0])
        with self.assertRaises(DivergenceError):
            opt.step(0.1, epoch=4)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        self.assertEqual(opt.step_count, 0)

    def test_duplicate_parameter(self):
        p = Tensor(np.ones(1), requires_grad=True)
        with self.assertRaises(ConfigError):
            Adam([ParamGroup("a", {"p": p}), ParamGroup("b", {"p": p})])

    def test_cosine_schedule(self):
        lrs = [cosine_lr(e, 20) for e in range(21)]
        self.assertTrue(all(a >= b for a, b in zip(lrs, lrs[1:])))
        self.assertAlmostEqual(lrs[0], 1e-3)
        self.assertAlmostEqual(lrs[-1], 1e-4)
        with self.assertRaises(ConfigError):
            cosine_lr(21, 20)


@pytest.fixture
def trained_state():
    state = ModelState(TINY, n_classes=3, seed=1)
    state.optimizer = Adam.single(dict(state.named_parameters()))
    x = np.random.default_rng(0).standard_normal((4, 2, 260)).astype(np.float32)
    loss = state.forward_predictor(state.forward_projector(state.forward_encoder(x))).sum()
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step(1e-3)
    state.epoch = 7
    state.rng.random(5)
    return state, x


def test_checkpoint_round_trip(trained_state, tmp_path):
    state, x = trained_state
    path = save_checkpoint(state, tmp_path / "model.ckpt", extra={"note": "tiny"})
    loaded = load_checkpoint(path)
    assert loaded.epoch == 7
    assert loaded.n_classes == 3
    assert list(loaded.components()) == list(state.components())
    for name, value in state.state_arrays().items():
        np.testing.assert_array_equal(loaded.state_arrays()[name], value)
    assert loaded.optimizer.step_count == 1
    for name, (m, v) in state.optimizer.moments.items():
        np.testing.assert_array_equal(loaded.optimizer.moments[name][0], m)
        np.testing.assert_array_equal(loaded.optimizer.moments[name][1], v)
    assert loaded.rng.random() == state.rng.random()
    np.testing.assert_array_equal(loaded.logits(x), state.logits(x))
    manifest, _ = read_manifest(path)
    assert manifest["extra"] == {"note": "tiny"}
    assert manifest["architecture"]["widths"] == [4, 4, 4, 8]


def test_backbone_only_checkpoint(trained_state, tmp_path):
    state, x = trained_state
    loaded = load_checkpoint(save_checkpoint(state, tmp_path / "bb.ckpt", components=("backbone",)))
    assert list(loaded.components()) == ["backbone"]
    assert loaded.optimizer is None
    np.testing.assert_array_equal(loaded.encode(x), state.encode(x))


def test_corrupt_checkpoint(trained_state, tmp_path):
    state, _ = trained_state
    path = save_checkpoint(state, tmp_path / "model.ckpt")
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    other = tmp_path / "other.bin"
    other.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(FormatError):
        load_checkpoint(other)
