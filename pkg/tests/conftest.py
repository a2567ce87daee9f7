"""Shared fixtures for zsecc tests.

Session-scoped fixtures build the expensive objects once: a small synthetic
dataset, a briefly trained reference CNN and its int8 versions. ``tiny_qnet``
is a hand-built two-layer int8 network whose weights already satisfy the
block constraint, with a dataset labelled by its own predictions (clean
accuracy 1.0), so fault tests stay fast.
"""
from __future__ import annotations

import numpy as np
import pytest

from tools.zsecc import nn
from tools.zsecc.datasets import Dataset, generate_synthetic
from tools.zsecc.nn import QuantizedLayer, QuantizedNetwork, TrainConfig
from tools.zsecc.quantizer import QuantizedBias, QuantizedTensor
from tools.zsecc.wot import hard_throttle


def _compliant_weights(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    v = rng.integers(-64, 64, size=int(np.prod(shape)))
    v[7::8] = rng.integers(-127, 128, size=v[7::8].size)
    return v.astype(np.int8).reshape(shape)


def build_tiny_qnet(seed: int = 0) -> QuantizedNetwork:
    """Flatten -> Linear(16, 64) -> ReLU -> Linear(10, 16) on 1x8x8 inputs."""
    rng = np.random.default_rng(seed)
    s_in1, s_in2 = 1 / 127, 0.05
    w1 = QuantizedTensor(_compliant_weights(rng, (16, 64)), 0.01)
    w2 = QuantizedTensor(_compliant_weights(rng, (10, 16)), 0.02)
    b1 = QuantizedBias(rng.integers(-500, 500, size=16).astype(np.int32), w1.scale * s_in1)
    b2 = QuantizedBias(rng.integers(-500, 500, size=10).astype(np.int32), w2.scale * s_in2)
    layers = (
        QuantizedLayer(nn.flatten()),
        QuantizedLayer(nn.linear(16, 64), w1, b1),
        QuantizedLayer(nn.relu()),
        QuantizedLayer(nn.linear(10, 16), w2, b2),
    )
    return QuantizedNetwork(layers, (1, 8, 8))


@pytest.fixture(scope="session")
def tiny_qnet() -> QuantizedNetwork:
    return build_tiny_qnet(0)


@pytest.fixture(scope="session")
def tiny_data(tiny_qnet) -> Dataset:
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(300, 8, 8)).astype(np.uint8)
    return Dataset(images, nn.predict(tiny_qnet, images), "test", 10)


@pytest.fixture(scope="session")
def noncompliant_qnet(tiny_qnet) -> QuantizedNetwork:
    tensors = [t for _, t in tiny_qnet.weight_tensors()]
    values = tensors[0].values.copy()
    values.reshape(-1)[5] = 100
    tensors[0] = QuantizedTensor(values, tensors[0].scale)
    return tiny_qnet.with_weights(tensors)


@pytest.fixture(scope="session")
def synthetic() -> tuple[Dataset, Dataset]:
    return (generate_synthetic(7, 10, 800, "train"), generate_synthetic(7, 10, 200, "test"))


@pytest.fixture(scope="session")
def trained_net(synthetic) -> nn.Network:
    train, _ = synthetic
    net = nn.reference_network(seed=3)
    net, _ = nn.train(net, train, TrainConfig(epochs=4, batch_size=32, seed=3))
    return net


@pytest.fixture(scope="session")
def ref_qnet(trained_net, synthetic) -> QuantizedNetwork:
    return nn.quantize_network(trained_net, synthetic[0].images[:200])


@pytest.fixture(scope="session")
def compliant_qnet(ref_qnet) -> QuantizedNetwork:
    return hard_throttle(ref_qnet)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)
