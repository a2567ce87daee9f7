"""Throttling, census statistics and the WOT training loop."""
import csv
import logging

import numpy as np
import pytest

from tools.zsecc import inplace, nn, wot
from tools.zsecc.datasets import generate_synthetic
from tools.zsecc.errors import ArgumentError
from tools.zsecc.quantizer import QuantizedTensor, quantize
from tools.zsecc.wot import WotConfig


def _tensor(values, scale: float = 0.01) -> QuantizedTensor:
    return QuantizedTensor(np.asarray(values, dtype=np.int8), scale)


@pytest.fixture(scope="module")
def small_data():
    return (generate_synthetic(9, 10, 256, "train", size=8),
            generate_synthetic(9, 10, 128, "test", size=8))


def _small_net():
    return nn.reference_network(seed=4, input_shape=(1, 8, 8))


class TestThrottle:
    def test_example(self):
        t = wot.throttle(_tensor([100, -100, 5, 64, -65, -64, 63, 127]))
        assert t.values.tolist() == [63, -64, 5, 63, -64, -64, 63, 127]
        assert t.scale == 0.01

    def test_keeps_shape(self):
        values = np.full((2, 8), 120, dtype=np.int8)
        t = wot.throttle(_tensor(values))
        assert t.values.shape == (2, 8)
        assert t.values[:, :7].max() == 63
        assert (t.values[:, 7] == 120).all()

    def test_idempotent_and_minimal(self, rng):
        blocks = 1_000_000
        values = rng.integers(-128, 128, size=8 * blocks).astype(np.int8)
        once = wot.throttle(_tensor(values))
        assert wot.throttle(once) == once
        pos = np.arange(values.size) % 8
        eighth = pos == 7
        assert np.array_equal(once.values[eighth], values[eighth])
        assert np.array_equal(once.values[~eighth], np.clip(values[~eighth], -64, 63))
        assert inplace.first_violation(once.values.reshape(-1, 8)) is None

    def test_sync_float(self):
        weights = np.array([0.5, 0.9, -0.9])
        before = _tensor([50, 90, -90])
        after = _tensor([50, 63, -64])
        out = wot.sync_float_from_throttle(weights, before, after)
        assert np.allclose(out, [0.5, 0.63, -0.64])
        assert weights[1] == 0.9

    def test_sync_with_explicit_scale(self):
        out = wot.sync_float_from_throttle(np.array([2.0]), _tensor([100]), _tensor([63]), scale=0.1)
        assert out[0] == pytest.approx(6.3)


class TestCensus:
    def _qnet(self, tiny_qnet, flat_index, value=100):
        tensors = [t for _, t in tiny_qnet.weight_tensors()]
        v = np.zeros_like(tensors[0].values)
        v.reshape(-1)[flat_index] = value
        zero = [QuantizedTensor(np.zeros_like(t.values), t.scale) for t in tensors]
        zero[0] = QuantizedTensor(v, tensors[0].scale)
        return tiny_qnet.with_weights(zero)

    def test_position_bucket(self, tiny_qnet):
        record = wot.census(self._qnet(tiny_qnet, 13))
        assert record.histogram[5] == 1
        assert sum(record.histogram) == 1
        assert record.large_count == 1

    def test_eighth_position_not_counted(self, tiny_qnet):
        record = wot.census(self._qnet(tiny_qnet, 15, -100))
        assert record.histogram[7] == 1
        assert record.large_count == 0

    def test_matches_brute_force(self, ref_qnet):
        record = wot.census(ref_qnet, iteration=7)
        hist = [0] * 8
        for _, t in ref_qnet.weight_tensors():
            for i, v in enumerate(t.values.reshape(-1).tolist()):
                if v < -64 or v > 63:
                    hist[i % 8] += 1
        assert list(record.histogram) == hist
        assert record.large_count == sum(hist[:7])
        assert record.iteration == 7

    def test_bands_sum_to_100(self, ref_qnet):
        assert sum(wot.census(ref_qnet).bands) == pytest.approx(100.0)

    def test_crowded_blocks(self, tiny_qnet):
        qnet = self._qnet(tiny_qnet, 0)
        v = qnet.weight_tensors()[0][1].values.copy()
        v.reshape(-1)[3] = -90
        tensors = [t for _, t in qnet.weight_tensors()]
        tensors[0] = QuantizedTensor(v, tensors[0].scale)
        assert wot.census(qnet.with_weights(tensors)).crowded_blocks == 1

    def test_compliant_model_has_no_large_values(self, compliant_qnet):
        assert wot.census(compliant_qnet).large_count == 0

    def test_layer_census(self, ref_qnet):
        rows = wot.layer_census(ref_qnet)
        assert [name for name, _ in rows] == [name for name, _ in ref_qnet.weight_tensors()]
        assert sum(r.large_count for _, r in rows) == wot.census(ref_qnet).large_count


class TestWotConfig:
    @pytest.mark.parametrize("kwargs", [
        {"lam": -1.0},
        {"learning_rate": 0.0},
        {"target_accuracy": 1.5},
        {"eval_interval": 0},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ArgumentError):
            WotConfig(**kwargs)


class TestWotTrain:
    def test_zero_target_converges_immediately(self, small_data):
        train, test = small_data
        result = wot.wot_train(_small_net(), train, WotConfig(target_accuracy=0.0, max_epochs=3),
                               eval_set=test)
        assert result.converged
        assert result.iterations == 0
        assert [r.iteration for r in result.log] == [0, 0]
        assert result.log[0].acc_after is not None
        assert result.log[-1].large_count == 0

    def test_unreachable_target(self, small_data, caplog):
        train, test = small_data
        cfg = WotConfig(target_accuracy=1.0, max_epochs=1, batch_size=32, eval_interval=3,
                        calibration_samples=64)
        with caplog.at_level(logging.WARNING, logger="tools.zsecc.wot"):
            result = wot.wot_train(_small_net(), train, cfg, eval_set=test)
        assert not result.converged
        assert result.iterations == 8
        # checkpoints at 0, 3, 6 and the epoch end, then the returned model
        assert [r.iteration for r in result.log] == [0, 3, 6, 8, 8]
        assert any("did not reach target" in r.message for r in caplog.records)
        assert wot.census(result.qnet).large_count == 0
        for _, t in result.qnet.weight_tensors():
            inplace.protect_tensor(t)

    def test_census_falls_to_zero(self, small_data):
        train, test = small_data
        cfg = WotConfig(target_accuracy=1.0, max_epochs=2, batch_size=32, eval_interval=4,
                        calibration_samples=64)
        result = wot.wot_train(_small_net(), train, cfg, eval_set=test)
        counts = [r.large_count for r in result.log]
        # He-uniform weights put about half of all values outside [-64, 63]
        assert counts[0] > 0
        assert max(counts[1:]) < counts[0]
        assert counts[-1] == 0
        assert result.log[-1].acc_after == max(r.acc_after for r in result.log[:-1])

    def test_result_network_matches_qnet(self, small_data):
        train, test = small_data
        cfg = WotConfig(target_accuracy=1.0, max_epochs=1, batch_size=64, eval_interval=100,
                        calibration_samples=64)
        result = wot.wot_train(_small_net(), train, cfg, eval_set=test)
        for (_, layer), (_, q) in zip(result.network.parametric(), result.qnet.weight_tensors()):
            assert wot.throttle(quantize(layer.weight)) == q

    def test_deterministic(self, small_data):
        train, test = small_data
        cfg = WotConfig(target_accuracy=1.0, max_epochs=1, batch_size=64, eval_interval=2,
                        calibration_samples=64)
        a = wot.wot_train(_small_net(), train, cfg, eval_set=test)
        b = wot.wot_train(_small_net(), train, cfg, eval_set=test)
        assert a.qnet == b.qnet
        assert [r.acc_after for r in a.log] == [r.acc_after for r in b.log]

    @pytest.mark.slow
    def test_recovers_baseline_accuracy(self, trained_net, ref_qnet, synthetic):
        train, test = synthetic
        baseline = nn.evaluate(ref_qnet, test)
        cfg = WotConfig(target_accuracy=baseline, max_epochs=10, eval_interval=5,
                        calibration_samples=200)
        result = wot.wot_train(trained_net.copy(), train, cfg, eval_set=test)
        assert nn.evaluate(result.qnet, test) >= baseline - 0.01
        assert wot.census(result.qnet).large_count == 0


def test_census_csv(tmp_path):
    log = [wot.CensusRecord(0, 12, 0.9, 0.85), wot.CensusRecord(200, 0, 0.91, 0.91)]
    path = wot.write_census_csv(log, tmp_path / "out" / "census.csv")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == list(wot.CENSUS_HEADER)
    assert rows[1] == ["0", "12", "0.900000", "0.850000"]
    assert len(rows) == 3
