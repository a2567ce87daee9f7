"""Layer shapes, float training gradients, and int8 inference."""
import numpy as np
import pytest

from tools.zsecc import nn, quantizer
from tools.zsecc.errors import ShapeError
from tools.zsecc.nn import Layer, Network, QuantizedLayer, QuantizedNetwork
from tools.zsecc.quantizer import QuantizedBias, QuantizedTensor


def _small_net(seed: int = 0) -> Network:
    specs = [nn.flatten(), nn.linear(5, 16), nn.relu(), nn.linear(3, 5)]
    return nn.init_network(specs, seed, (1, 4, 4))


def _numeric_grad(net: Network, x, y, lam: float, layer: int, eps: float = 1e-6) -> np.ndarray:
    w = net.layers[layer].weight
    grad = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        orig = w[idx]
        w[idx] = orig + eps
        plus, _ = net.forward_backward(x, y, lam, quantize_weights=False)
        w[idx] = orig - eps
        minus, _ = net.forward_backward(x, y, lam, quantize_weights=False)
        w[idx] = orig
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


class TestShapes:
    def test_reference_network(self):
        net = nn.reference_network(seed=1)
        assert nn.check_shapes(net.specs, (1, 28, 28)) == (10,)
        assert [s.kind for s in net.specs if s.parametric] == [
            nn.LayerKind.CONV2D, nn.LayerKind.CONV2D, nn.LayerKind.LINEAR]

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            nn.check_shapes([nn.flatten(), nn.linear(10, 100)], (1, 8, 8))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            nn.conv2d(4, 1, 2)

    def test_layer_names(self):
        assert nn.layer_name(3, nn.conv2d(16, 8, 3)) == "conv2d3"

    def test_init_is_seeded(self):
        a = nn.reference_network(seed=5)
        b = nn.reference_network(seed=5)
        assert all(np.array_equal(x.weight, y.weight) for (_, x), (_, y) in zip(a.parametric(), b.parametric()))


class TestFloatTraining:
    def test_gradient_check(self, rng):
        net = _small_net()
        x = rng.uniform(0, 1, size=(6, 1, 4, 4))
        y = rng.integers(0, 3, size=6)
        lam = 0.01
        _, grads = net.forward_backward(x, y, lam, quantize_weights=False)
        for g_index, layer in enumerate((1, 3)):
            numeric = _numeric_grad(net, x, y, lam, layer)
            analytic = grads[g_index][0]
            rel = np.abs(numeric - analytic) / np.maximum(1e-8, np.abs(numeric) + np.abs(analytic))
            assert rel.max() < 1e-3

    def test_conv_gradient_check(self, rng):
        specs = [nn.conv2d(2, 1, 3), nn.relu(), nn.maxpool(2), nn.flatten(), nn.linear(3, 8)]
        net = nn.init_network(specs, 2, (1, 4, 4))
        x = rng.uniform(0, 1, size=(4, 1, 4, 4))
        y = rng.integers(0, 3, size=4)
        _, grads = net.forward_backward(x, y, 0.0, quantize_weights=False)
        numeric = _numeric_grad(net, x, y, 0.0, 0)
        assert np.allclose(grads[0][0], numeric, atol=1e-5)

    def test_qat_uses_fake_quantized_weights(self, rng):
        net = _small_net(1)
        x = rng.uniform(0, 1, size=(8, 1, 4, 4))
        y = rng.integers(0, 3, size=8)
        loss_q, grads_q = net.forward_backward(x, y, 1e-3, quantize_weights=True)
        shadow = net.copy()
        for _, layer in shadow.parametric():
            layer.weight = quantizer.fake_quantize(layer.weight)
        loss_f, grads_f = shadow.forward_backward(x, y, 1e-3, quantize_weights=False)
        assert loss_q == pytest.approx(loss_f)
        for (dq, bq), (df, bf) in zip(grads_q, grads_f):
            assert np.allclose(dq, df)
            assert np.allclose(bq, bf)

    def test_frobenius_term(self, rng):
        net = _small_net(2)
        x = rng.uniform(0, 1, size=(4, 1, 4, 4))
        y = rng.integers(0, 3, size=4)
        lam = 0.5
        loss0, grads0 = net.forward_backward(x, y, 0.0, quantize_weights=False)
        loss1, grads1 = net.forward_backward(x, y, lam, quantize_weights=False)
        sq = sum(float(np.sum(l.weight ** 2)) for _, l in net.parametric())
        assert loss1 == pytest.approx(loss0 + lam * sq)
        for (_, layer), (d0, _), (d1, _) in zip(net.parametric(), grads0, grads1):
            assert np.allclose(d1 - d0, 2 * lam * layer.weight)

    def test_trained_accuracy(self, trained_net, synthetic):
        _, test = synthetic
        assert nn.evaluate_float(trained_net, test) > 0.5


class TestInt8Inference:
    def test_zero_weights_give_zero_logits(self):
        spec = nn.linear(4, 16)
        layer = QuantizedLayer(spec, QuantizedTensor(np.zeros((4, 16), dtype=np.int8), 0.1),
                               QuantizedBias(np.zeros(4, dtype=np.int32), 0.1 / 127))
        qnet = QuantizedNetwork((QuantizedLayer(nn.flatten()), layer), (1, 4, 4))
        images = np.full((3, 4, 4), 200, dtype=np.uint8)
        assert not nn.forward_int8(qnet, images).any()

    def test_accumulator_is_exact(self):
        spec = nn.conv2d(1, 1, 1)
        w = QuantizedTensor(np.full((1, 1, 1, 1), -127, dtype=np.int8), 0.01)
        b = QuantizedBias(np.zeros(1, dtype=np.int32), 0.01 / 127)
        qnet = QuantizedNetwork((QuantizedLayer(spec, w, b),), (1, 1, 1))
        x = np.full((1, 1, 1, 1), 127, dtype=np.int8)
        assert nn.forward_int8(qnet, x, accumulators=True).reshape(-1).tolist() == [-16129]

    def test_single_linear_matches_float(self, rng):
        w = QuantizedTensor(rng.integers(-127, 128, size=(3, 4)).astype(np.int8), 0.02)
        s_in = 1 / 127
        b = QuantizedBias(rng.integers(-1000, 1000, size=3).astype(np.int32), w.scale * s_in)
        qnet = QuantizedNetwork((QuantizedLayer(nn.flatten()), QuantizedLayer(nn.linear(3, 4), w, b)),
                                (1, 2, 2))
        images = rng.integers(0, 256, size=(20, 2, 2)).astype(np.uint8)
        x_q = quantizer.quantize(nn.images_to_float(images), scale=qnet.layers[1].input_scale)
        expected = nn.dequantized_network(qnet).forward(quantizer.dequantize(x_q))
        assert np.allclose(nn.forward_int8(qnet, images), expected)

    def test_input_shape_checked(self, tiny_qnet):
        with pytest.raises(ShapeError):
            nn.forward_int8(tiny_qnet, np.zeros((2, 9, 9), dtype=np.uint8))

    @staticmethod
    def _float_oracle(qnet: QuantizedNetwork, images: np.ndarray) -> np.ndarray:
        first = next(layer for layer in qnet.layers if layer.spec.parametric)
        x_q = quantizer.quantize(nn.images_to_float(images), scale=first.input_scale)
        return nn.dequantized_network(qnet).forward(quantizer.dequantize(x_q))

    def test_random_model_logits_within_tolerance(self, rng):
        net = nn.init_network([nn.flatten(), nn.linear(16, 64), nn.relu(), nn.linear(10, 16)],
                              seed=11, input_shape=(1, 8, 8))
        for _, layer in net.parametric():
            layer.bias = rng.normal(scale=0.1, size=layer.bias.shape)
        images = rng.integers(0, 256, size=(200, 8, 8)).astype(np.uint8)
        qnet = nn.quantize_network(net, images)
        expected = self._float_oracle(qnet, images)
        output_scale = np.max(np.abs(expected)) / 127
        assert np.max(np.abs(nn.forward_int8(qnet, images) - expected)) <= 3 * output_scale

    def test_int8_agrees_with_float(self, ref_qnet, synthetic):
        _, test = synthetic
        int8 = nn.predict(ref_qnet, test.images)
        ref = self._float_oracle(ref_qnet, test.images).argmax(axis=1)
        assert np.mean(int8 == ref) >= 0.99

    def test_quantized_weights_are_per_tensor(self, trained_net, ref_qnet):
        for (_, layer), (_, q) in zip(trained_net.parametric(), ref_qnet.weight_tensors()):
            assert q == quantizer.quantize(layer.weight)

    def test_weight_hook_applied(self, trained_net, synthetic):
        def zero(q):
            return QuantizedTensor(np.zeros_like(q.values), q.scale)

        qnet = nn.quantize_network(trained_net, synthetic[0].images[:50], weight_hook=zero)
        assert all(not t.values.any() for _, t in qnet.weight_tensors())

    def test_with_weights_and_equality(self, tiny_qnet):
        same = tiny_qnet.with_weights([t for _, t in tiny_qnet.weight_tensors()])
        assert same == tiny_qnet
        zeroed = tiny_qnet.with_weights(
            [QuantizedTensor(np.zeros_like(t.values), t.scale) for _, t in tiny_qnet.weight_tensors()])
        assert zeroed != tiny_qnet


def test_dequantized_network_layers(tiny_qnet):
    net = nn.dequantized_network(tiny_qnet)
    assert isinstance(net.layers[1], Layer)
    assert np.allclose(net.layers[1].weight, quantizer.dequantize(tiny_qnet.layers[1].weights))
