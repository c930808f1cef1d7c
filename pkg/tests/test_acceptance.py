"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

The lines are collected in ``conftest.ACCEPTANCE_LINES`` and printed in the
pytest terminal summary. Criteria 6 and 7 train small models on the synthetic
benchmark and take several minutes each.
"""
import copy
import time

import numpy as np
import pytest

from resnorm_asc.compression import (CompressConfig, QuantScheme, distill_compress, magnitude_prune, pack,
                                     quantized_model, size_from_counts, unpack)
from resnorm_asc.devsim import DB_TO_NEPER, SplitSpec, make_benchmark
from resnorm_asc.model import (BCResBlock, Conv, GlobalAvgPool, ModelConfig, NetworkGraph, ResNormLayer, RunContext,
                               build, count_params, receptive_field, shape_chain)
from resnorm_asc.model import Act, MaxPool, Norm
from resnorm_asc.normalization import SubSpectralNorm, freq_in, res_norm
from resnorm_asc.ops import ConvSpec, activation, conv2d, pool2d, softmax_xent
from resnorm_asc.tensor import Tensor, grad_check
from resnorm_asc.train import SpecAugConfig, TrainConfig, evaluate, lr_at, predict_logits, train

SEEDS = (0, 1, 2)
# desk-scale benchmark: 3 s clips, 50 test clips per device
DURATION = 3.0
SPLIT = SplitSpec(test_per_device=50)
EPOCHS = 20
DOMAIN_WIDTH = 4
COMPRESS_WIDTH = 32


def emit(log, number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(line)
    log.append(line)
    return ok


def recipe(t_frames, seed, epochs=EPOCHS):
    # time-mask width scaled from 80 of 330 frames to the clip length
    spec = SpecAugConfig(time_param=round(80 * t_frames / 330))
    return TrainConfig(epochs=epochs, warmup_epochs=1, batch_size=32, seed=seed, specaug=spec)


@pytest.fixture(scope="session")
def benchmarks():
    return {s: make_benchmark(seed=s, split=SPLIT, duration=DURATION) for s in SEEDS}


def test_parameter_accounting(acceptance_log):
    full = count_params(build(ModelConfig(base_channels=80)))
    small = count_params(build(ModelConfig(base_channels=10)))
    n80, n10 = full["totals"]["total"], small["totals"]["total"]
    ok = abs(n80 - 315_000) <= 0.03 * 315_000 and abs(n10 - 8_100) <= 0.05 * 8_100 and len(full["rows"]) > 0
    assert emit(acceptance_log, 1, ok, f"c=80 total {n80} (conv {full['totals']['conv_params']}), "
                f"c=10 total {n10}, {len(full['rows'])} per-layer rows")


def test_size_accounting(acceptance_log):
    a = size_from_counts(int8_params=66_100, fp16_params=29_400)
    b = size_from_counts(fp16_params=62_700)
    ok = abs(a - 121.9) <= 0.1 and abs(b - 122.5) <= 0.1
    assert emit(acceptance_log, 2, ok, f"{a:.2f} KiB (target 121.9), {b:.2f} KiB (target 122.5)")


def test_prune_arithmetic(acceptance_log):
    mask = magnitude_prune(build(ModelConfig(base_channels=80), seed=0), 0.89, scope="global")
    ok = abs(mask.kept - 33_000) <= 500
    assert emit(acceptance_log, 3, ok, f"{mask.kept} of {mask.total} conv weights kept (target 33.0k +/- 0.5k)")


def _f64(rng, shape):
    return Tensor(rng.normal(size=shape), dtype=np.float64, requires_grad=True)


def _two_block_model(rng):
    r = np.random.default_rng(0)
    dt = np.float64
    layers = [
        ResNormLayer("input_norm", 0.1, 1e-5),
        Conv("front.conv", ConvSpec(1, 4, (5, 5), (2, 2), (2, 2)), "conv", False, r, dt),
        Norm("front.bn", 4, 1, 1e-5, dt),
        Act("front.relu", "relu"),
        BCResBlock("b0", 4, 2, 4, 0.0, 1e-5, r, dt),
        BCResBlock("b1", 2, 2, 4, 0.0, 1e-5, r, dt),
        ResNormLayer("stage.resnorm", 0.1, 1e-5),
        MaxPool("pool"),
        Conv("classifier", ConvSpec(2, 3), "conv", True, r, dt),
        GlobalAvgPool("global_pool"),
    ]
    g = NetworkGraph(ModelConfig(base_channels=2, dropout=0.0), layers)
    x = Tensor(rng.normal(size=(2, 1, 256, 8)), dtype=dt)
    run = RunContext(training=True)
    return (lambda *_: softmax_xent(g.forward(x, run), np.array([0, 2]))), g.parameters()


def test_gradient_correctness(acceptance_log):
    rng = np.random.default_rng(0)
    start = time.time()
    errors = {}
    x = _f64(rng, (2, 3, 6, 5))
    for name, spec in {"conv2d": ConvSpec(3, 2, (3, 3), (2, 2), (1, 1)),
                       "dw-freq": ConvSpec(3, 3, (3, 1), (1, 1), (1, 0), groups=3),
                       "dw-time": ConvSpec(3, 3, (1, 3), (1, 1), (0, 1), groups=3)}.items():
        w, b = _f64(rng, spec.weight_shape), _f64(rng, spec.out_channels)
        probe = rng.normal(size=(2, spec.out_channels, *spec.output_hw(6, 5)))
        errors[name] = grad_check(lambda a, k, c, s=spec, p=probe: (conv2d(a, k, c, s) * p).sum(), [x, w, b])
    xp = _f64(rng, (2, 2, 5, 6))
    for kind in ("max", "avg"):
        probe = rng.normal(size=(2, 2, 2, 3))
        errors[f"{kind}-pool"] = grad_check(lambda a, k=kind, p=probe: (pool2d(a, k) * p).sum(), [xp])
    xn = _f64(rng, (2, 3, 4, 5))
    probe = rng.normal(size=xn.shape)
    errors["freq_in"] = grad_check(lambda a: (freq_in(a) * probe).sum(), [xn])
    errors["res_norm"] = grad_check(lambda a: (res_norm(a, 0.1) * probe).sum(), [xn])
    ssn = SubSpectralNorm(3, 2, dtype=np.float64)
    ssn.gamma, ssn.beta = _f64(rng, (3, 2)), _f64(rng, (3, 2))
    errors["ssn"] = grad_check(lambda a, g, b: (ssn(a, training=True) * probe).sum(), [xn, ssn.gamma, ssn.beta])
    errors["swish"] = grad_check(lambda a: (activation(a, "swish") * probe).sum(), [xn])
    errors["softmax-ce"] = grad_check(lambda z: softmax_xent(z, np.array([0, 3, 1])), [_f64(rng, (3, 4))])
    loss, params = _two_block_model(rng)
    errors["2-block model"] = grad_check(loss, params, max_entries=6, rng=np.random.default_rng(1))
    worst = max(errors, key=errors.get)
    elapsed = time.time() - start
    ok = errors[worst] < 1e-5 and elapsed < 60
    assert emit(acceptance_log, 4, ok, f"worst relative error {errors[worst]:.2e} ({worst}) over {len(errors)} "
                f"checks in {elapsed:.1f}s")


def test_device_invariance(acceptance_log):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        c, t = int(rng.integers(1, 4)), int(rng.integers(4, 40))
        x = rng.normal(size=(1, c, 256, t))
        # a dB gain per mel bin is an additive offset on log-mel features
        gain = rng.uniform(-6, 6, size=(1, 1, 256, 1)) * DB_TO_NEPER
        a = freq_in(Tensor(x.astype(np.float32))).data
        b = freq_in(Tensor((x + gain).astype(np.float32))).data
        worst = max(worst, float(np.abs(a - b).max()))
    assert emit(acceptance_log, 5, worst < 1e-3, f"max |FreqIN(distorted) - FreqIN(clean)| = {worst:.2e} "
                "over 1000 tensors")


def test_domain_shift(acceptance_log, benchmarks):
    start = time.time()
    gaps, rows = [], []
    for seed, bench in benchmarks.items():
        unseen = {}
        for mode in ("resnorm", "global"):
            model = build(ModelConfig(base_channels=DOMAIN_WIDTH, norm_mode=mode), seed=seed)
            train(model, bench.train, recipe(bench.train.x.shape[-1], seed))
            unseen[mode] = evaluate(model, bench.test).mean_over(bench.split.unseen)
        gaps.append(unseen["resnorm"] - unseen["global"])
        rows.append(f"seed {seed}: {unseen['resnorm']:.1f} vs {unseen['global']:.1f}")
    gap = float(np.mean(gaps))
    minutes = (time.time() - start) / 60
    ok = gap >= 5.0 and minutes < 30
    assert emit(acceptance_log, 6, ok, f"unseen-device gain of ResNorm over global norm {gap:+.1f} points "
                f"({'; '.join(rows)}) in {minutes:.1f} min")


def test_compression_pipeline(acceptance_log, benchmarks):
    drops, rows = [], []
    for seed, bench in benchmarks.items():
        t = bench.train.x.shape[-1]
        dense = build(ModelConfig(base_channels=COMPRESS_WIDTH), seed=seed)
        train(dense, bench.train, recipe(t, seed))
        cfg = CompressConfig(prune_ratio=0.89, prune_scope="global", conv_bits=8,
                             finetune=TrainConfig(epochs=30, warmup_epochs=0, peak_lr=0.05, batch_size=32,
                                                  seed=seed + 100, specaug=recipe(t, seed).specaug))
        res = distill_compress(dense, bench.train, cfg, eval_set=bench.test, student=dense)
        drop = res.dense_report.overall - res.compressed_report.overall
        drops.append(drop)
        rows.append(f"seed {seed}: {res.dense_report.overall:.1f} -> {res.compressed_report.overall:.1f} "
                    f"({res.size.kib:.2f} KiB)")
    drop = float(np.mean(drops))
    assert emit(acceptance_log, 7, drop <= 3.0, f"mean accuracy drop {drop:.1f} points at c={COMPRESS_WIDTH} "
                f"({'; '.join(rows)})")


def test_schedule(acceptance_log):
    cfg, spe = TrainConfig(), 10
    peak = lr_at(cfg, cfg.warmup_epochs * spe, spe)
    mid = lr_at(cfg, int((cfg.warmup_epochs + (cfg.epochs - cfg.warmup_epochs) / 2) * spe), spe)
    final = lr_at(cfg, cfg.epochs * spe, spe)
    ok = lr_at(cfg, 0, spe) == 0.0 and peak == 0.06 and abs(mid - 0.03) < 1e-12 and final < 1e-9
    assert emit(acceptance_log, 8, ok, f"lr(0)={lr_at(cfg, 0, spe)}, lr(warmup end)={peak}, "
                f"midpoint={mid:.15f}, final={final:.1e}")


TABLE_SHAPES = {
    "front.conv": (1, 160, 128, 165),
    "stage1.block1": (1, 80, 128, 165),
    "pool1": (1, 80, 64, 82),
    "stage2.block1": (1, 120, 64, 82),
    "pool2": (1, 120, 32, 41),
    "stage3.block1": (1, 160, 32, 41),
    "stage4.block2": (1, 200, 32, 41),
    "classifier": (1, 10, 32, 41),
    "global_pool": (1, 10),
}


def test_structure(acceptance_log):
    g = build(ModelConfig())
    chain = dict(shape_chain(g, 330))
    bad = [name for name, shape in TABLE_SHAPES.items() if chain.get(name) != shape]
    blocks, pools, sites = len(g.blocks()), g.count_kind("maxpool"), g.count_kind("resnorm")
    rf = receptive_field(g)
    rf_conv = receptive_field(g, count_pool_extent=False)
    ok = not bad and blocks == 9 and pools == 2 and sites == 5 and rf_conv[:2] == (109, 109)
    assert emit(acceptance_log, 9, ok, f"shape rows ok={not bad}, blocks {blocks}, max-pools {pools}, ResNorm sites "
                f"{sites}; receptive field {rf[0]}x{rf[1]} including pool windows, {rf_conv[0]}x{rf_conv[1]} "
                f"without (reference 109x109, delta +{rf[0] - 109})")


def test_round_trip(acceptance_log):
    rng = np.random.default_rng(0)
    g = build(ModelConfig(base_channels=10), seed=0)
    for layer in g.norm_layers():
        norm = layer.norm
        norm.stats.mean = rng.normal(scale=0.1, size=norm.stats.mean.shape).astype(np.float32)
        norm.stats.var = rng.uniform(0.5, 2.0, size=norm.stats.var.shape).astype(np.float32)
        norm.gamma.data = rng.uniform(0.5, 1.5, size=norm.gamma.shape).astype(np.float32)
    magnitude_prune(g, 0.89)
    scheme = QuantScheme(8)
    data, size = pack(g, scheme)
    loaded, _ = unpack(data)
    x = rng.normal(size=(4, 256, 96)).astype(np.float32)
    a = predict_logits(loaded, x)
    b = predict_logits(quantized_model(g, scheme), x)
    ok = np.array_equal(a, b)
    assert emit(acceptance_log, 10, ok, f"packed {len(data)} bytes ({size.kib:.2f} KiB payload), "
                f"max |logit diff| {np.abs(a - b).max():.1e} on a fixed batch of 4")
