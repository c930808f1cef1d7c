import copy

import numpy as np
import pytest

from resnorm_asc.compression import (CompressConfig, PruneMask, QuantScheme, compress, current_mask, distill_compress,
                                     magnitude_prune, pack, quantize_sym, quantized_model, size_from_counts, unpack)
from resnorm_asc.data import FeatureSet
from resnorm_asc.model import FormatError, ModelConfig, build, count_params, save_checkpoint
from resnorm_asc.tensor import Tensor
from resnorm_asc.train import TrainConfig, predict_logits, train


def toy_set(n=32, t=10, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    tilt = np.linspace(-1, 1, 256)[None, :, None] * np.where(y == 1, 1.0, -1.0)[:, None, None]
    x = (rng.normal(size=(n, 256, t)) + 2 * tilt).astype(np.float32)
    return FeatureSet(x, y, np.array(["A"] * n, dtype=object), np.arange(n))


QUICK = TrainConfig(epochs=1, warmup_epochs=0, batch_size=16, peak_lr=0.05, seed=0)


@pytest.fixture(scope="module", params=["resnorm", "global"])
def trained(request):
    model = build(ModelConfig(base_channels=2, num_classes=2, norm_mode=request.param), seed=0)
    train(model, toy_set(), QUICK)
    return model


class TestQuantize:
    def test_known_values(self):
        q, scale = quantize_sym(np.array([1.0, -0.5]))
        assert q.tolist() == [127, -64]
        assert scale == np.float32(1 / 127)

    def test_zero_tensor(self):
        q, _ = quantize_sym(np.zeros(4))
        assert not q.any()

    def test_scheme_validation(self):
        with pytest.raises(ValueError):
            QuantScheme(conv_bits=4)
        assert not QuantScheme(None).enabled


class TestPrune:
    def test_fraction(self):
        g = build(ModelConfig(base_channels=4), seed=0)
        m = magnitude_prune(g, 0.5)
        assert m.kept == m.total - int(np.floor(0.5 * m.total + 0.5))

    def test_full_width_count(self):
        g = build(ModelConfig(), seed=0)
        m = magnitude_prune(g, 0.89)
        assert m.total == 300320 and m.kept == 33035

    def test_weights_zeroed(self):
        g = build(ModelConfig(base_channels=4), seed=0)
        m = magnitude_prune(g, 0.7)
        for conv in g.conv_layers():
            assert not conv.weight.data[~m.masks[conv.name]].any()

    def test_ties_break_by_layer_then_index(self):
        g = build(ModelConfig(base_channels=2), seed=0)
        for conv in g.conv_layers():
            conv.weight.data[...] = 1.0
        m = magnitude_prune(g, 0.25)
        flat = np.concatenate([m.masks[c.name].ravel() for c in g.conv_layers()])
        k = m.total - m.kept
        assert not flat[:k].any() and flat[k:].all()

    @pytest.mark.parametrize("ratio", [1.0, 1.5, -0.1])
    def test_bad_ratio(self, ratio):
        with pytest.raises(ValueError):
            magnitude_prune(build(ModelConfig(base_channels=2)), ratio)

    def test_layer_scope(self):
        g = build(ModelConfig(base_channels=4), seed=0)
        m = magnitude_prune(g, 0.5, scope="layer")
        for mask in m.masks.values():
            assert abs(mask.mean() - 0.5) <= 0.5 / mask.size + 1e-9

    def test_current_mask(self):
        g = build(ModelConfig(base_channels=2), seed=0)
        assert current_mask(g).sparsity == 0.0
        magnitude_prune(g, 0.6)
        assert abs(current_mask(g).sparsity - 0.6) < 1e-3


class TestSize:
    def test_from_counts(self):
        assert round(size_from_counts(66100, 29400), 2) == 121.97
        assert round(size_from_counts(0, 62700), 2) == 122.46

    def test_report_matches_inventory(self, trained):
        g = copy.deepcopy(trained)
        m = magnitude_prune(g, 0.8)
        _, report = pack(g, QuantScheme(8))
        other = count_params(g)["totals"]["other_params"]
        fp32 = 512 if g.config.norm_mode == "global" else 0
        assert report.payload_bytes == m.kept + 2 * other + 4 * fp32
        assert report.kib == report.payload_bytes / 1024

    def test_full_width_packed_size(self):
        g = build(ModelConfig(), seed=0)
        magnitude_prune(g, 0.89)
        _, report = pack(g, QuantScheme(8))
        assert report.payload_bytes == 33035 + 2 * 14650


class TestPack:
    @pytest.mark.parametrize("bits", [8, 16])
    def test_round_trip_bitwise(self, trained, bits):
        g = copy.deepcopy(trained)
        magnitude_prune(g, 0.6)
        scheme = QuantScheme(bits)
        data, _ = pack(g, scheme)
        back, header = unpack(data)
        x = toy_set(4, seed=5).x
        np.testing.assert_array_equal(predict_logits(back, x), predict_logits(quantized_model(g, scheme), x))
        assert header["scheme"]["conv_bits"] == bits

    def test_sparsity_pattern_preserved(self, trained):
        g = copy.deepcopy(trained)
        m = magnitude_prune(g, 0.6)
        back, _ = unpack(pack(g)[0])
        for conv in back.conv_layers():
            kept = conv.mask if conv.mask is not None else np.ones(conv.weight.shape, dtype=bool)
            np.testing.assert_array_equal(kept, m.masks[conv.name])

    def test_unpruned_uses_dense_records(self, trained):
        _, report = pack(trained)
        assert {r.encoding for r in report.rows} <= {"dense8", "dense16", "dense32"}
        assert report.index_bytes == 0

    def test_corruption_rejected(self, trained):
        data = bytearray(pack(trained)[0])
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(FormatError):
            unpack(bytes(data))

    def test_truncation_rejected(self, trained):
        data = pack(trained)[0]
        with pytest.raises(FormatError):
            unpack(data[:-7])

    def test_meta_round_trip(self, trained):
        _, header = unpack(pack(trained, meta={"seed": 3})[0])
        assert header["meta"] == {"seed": 3}

    def test_float_scheme_rejected(self, trained):
        with pytest.raises(ValueError):
            pack(trained, QuantScheme(None))


class TestCompress:
    def test_noop_is_identical(self, trained):
        cfg = CompressConfig(prune_ratio=0.0, conv_bits=None)
        student, mask, _, history = compress(trained, toy_set(), cfg)
        assert history == [] and mask.sparsity == 0
        assert save_checkpoint(student) == save_checkpoint(trained)

    def test_mask_survives_fine_tune(self, trained):
        cfg = CompressConfig(prune_ratio=0.7, finetune=QUICK)
        student, mask, _, _ = compress(trained, toy_set(), cfg, teacher=trained)
        for conv in student.conv_layers():
            assert not conv.weight.data[~mask.masks[conv.name]].any()

    def test_quantized_weights_on_grid(self, trained):
        cfg = CompressConfig(prune_ratio=0.5, finetune=QUICK)
        student, _, scheme, _ = compress(trained, toy_set(), cfg)
        for conv in quantized_model(student, scheme).conv_layers():
            w = conv.weight.data
            scale = np.abs(w).max() / 127
            np.testing.assert_allclose(w / scale, np.round(w / scale), atol=1e-3)

    def test_distill_pipeline(self, trained):
        cfg = CompressConfig(prune_ratio=0.5, train=QUICK, finetune=QUICK)
        data = toy_set()
        res = distill_compress(trained, data, cfg, eval_set=data)
        assert res.compressed_report is not None and res.dense_report is not None
        back, _ = unpack(res.packed)
        np.testing.assert_array_equal(predict_logits(back, data.x[:4]), predict_logits(res.compressed, data.x[:4]))
        assert abs(res.mask.sparsity - 0.5) < 1e-2

    def test_prune_mask_shape_checked(self, trained):
        g = copy.deepcopy(trained)
        name = g.conv_layers()[0].name
        with pytest.raises(ValueError):
            PruneMask({name: np.ones((1, 1), dtype=bool)}).apply(g)


class TestQuantAwareEval:
    def test_qat_eval_matches_export(self, trained):
        from resnorm_asc.compression import attach
        from resnorm_asc.model import RunContext
        from resnorm_asc.tensor import no_grad
        g = copy.deepcopy(trained)
        attach(g, magnitude_prune(g, 0.5), QuantScheme(8))
        x = toy_set(4, seed=3).x
        with no_grad():
            qat = g.forward(Tensor(x[:, None]), RunContext(qat=True)).data
        np.testing.assert_array_equal(qat, predict_logits(quantized_model(g, QuantScheme(8)), x))
