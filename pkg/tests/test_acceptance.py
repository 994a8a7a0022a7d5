"""Acceptance suite: one test per numbered criterion.

Run `pytest tests/test_acceptance.py -v`; each test_criterion_NN line
in the verbose output is the pass/fail record for that criterion, and
every test also prints a CRITERION n: PASS line with the measured
numbers. Criteria 5 through 8 share four session-scoped desk-scale
training runs (2,000 train / 400 test images, 60 epochs each, a couple
of minutes per run on one CPU core).
"""

import math

import numpy as np
import numpy.testing as npt
import pytest

from dgconv.config import parse_config
from dgconv.core import (
    BatchNorm2d,
    ConvFilter,
    conv2d_forward,
    linear_backward,
    linear_forward,
)
from dgconv.data import synth_dataset
from dgconv.dgc import (
    DgcLayerConfig,
    GlobalGating,
    HeadwiseGating,
    dgc_backward,
    dgc_forward,
    init_dgc_layer,
    kept_channels,
)
from dgconv.runtime import (
    LayerShape,
    execute_plan,
    mac_dense,
    mac_dgc,
    plan_from_forward,
    run_benchmark,
)
from dgconv.train import PruneSchedule, evaluate, fit, prune_rate_at
from conftest import numerical_grad, rel_error

DESK = """
model = conv:3:8:3:2:1, dgc:8:16:3:2:1, dgc:16:32:3:2:1, dgc:32:64:3:1:1
classes = 2
batch_size = 64
epochs = 60
lr = 0.05
weight_decay = 1e-4
lasso = 1e-5
prune_rate = 0.5
heads = 4
squeeze = 8
seed = 0
"""


def desk_config(**overrides):
    lines = []
    for line in DESK.strip().splitlines():
        key = line.split("=")[0].strip()
        if key in overrides:
            line = f"{key} = {overrides.pop(key)}"
        lines.append(line)
    lines += [f"{k} = {v}" for k, v in overrides.items()]
    return parse_config("\n".join(lines))


def report(num, detail):
    print(f"CRITERION {num}: PASS [{detail}]", flush=True)


@pytest.fixture(scope="session")
def desk_data():
    """2-class image task in the 32x32 binary-batch format: 2000/400 split."""
    return synth_dataset(seed=0, classes=2, count=2400).split(2000)


def _desk_run(config, desk_data):
    train, test = desk_data
    result = fit(config, train)
    metrics = evaluate(result.net, test, result.threshold_state)
    return result, metrics


@pytest.fixture(scope="session")
def run_headwise(desk_data):
    return _desk_run(desk_config(), desk_data)


@pytest.fixture(scope="session")
def run_dense_baseline(desk_data):
    return _desk_run(desk_config(prune_rate=0), desk_data)


@pytest.fixture(scope="session")
def run_global(desk_data):
    return _desk_run(desk_config(gating="global"), desk_data)


@pytest.fixture(scope="session")
def run_global_angle(desk_data):
    return _desk_run(desk_config(gating="global", angle="1e-4"), desk_data)


def test_criterion_01_mac_model_exactness():
    """Cost formulas hold with integer exactness; the reference shape
    saves a factor within 0.1% of 1 / (1 - prune_rate) = 4."""
    rng = np.random.default_rng(11)
    for _ in range(20):
        heads = int(rng.choice([2, 4, 8]))
        d = int(rng.choice([2, 4, 8]))
        c = d * int(rng.integers(1, 9))
        cp = heads * int(rng.integers(1, 9))
        k = int(rng.choice([1, 3, 5]))
        oh, ow = int(rng.integers(2, 33)), int(rng.integers(2, 33))
        rate = float(rng.choice([0.25, 0.5, 0.75]))
        shape = LayerShape(c, cp, k, oh, ow)
        assert mac_dense(shape) == k * k * cp * c * oh * ow
        rep = mac_dgc(shape, rate, heads, d)
        kept = kept_channels(c, rate)
        assert rep.saliency_macs == heads * 2 * c * c // d
        assert rep.conv_macs == heads * (k * k * kept * (cp // heads) * oh * ow)
        assert rep.total_macs == rep.saliency_macs + rep.conv_macs
        assert rep.dense_macs == mac_dense(shape)
    ref = LayerShape(64, 64, 3, 32, 32)
    rep = mac_dgc(ref, 0.75, 4, 16)
    assert rep.dense_macs == 37_748_736
    assert rep.saliency_macs == 2_048
    assert rep.conv_macs == 9_437_184
    ratio = rep.saving_ratio
    assert abs(ratio - 4.0) / 4.0 <= 1e-3
    report(1, f"20 random shapes exact; reference ratio {ratio:.5f}")


def _saliency_oracle(head, x, keep_sign):
    p = x.mean(axis=(2, 3))
    z2 = np.maximum(p @ head.w_squeeze.T + head.b_squeeze,
                    0.0) @ head.w_expand.T + head.b_expand
    return z2 if keep_sign else np.maximum(z2, 0.0)


def _dense_oracle(layer, x, gating):
    """Mask-amplify-convolve with each head's full filter bank, then
    interleave head outputs; shares no gather or shuffle code with the
    layer implementation."""
    cfg = layer.config
    keep_sign = isinstance(gating, GlobalGating)
    outs = []
    for head in layer.heads:
        g = _saliency_oracle(head, x, keep_sign)
        if keep_sign:
            mask = np.abs(g) >= gating.threshold
        else:
            keep = kept_channels(cfg.in_channels, gating.prune_rate)
            order = np.argsort(-g, axis=1, kind="stable")[:, :keep]
            mask = np.zeros_like(g, dtype=bool)
            np.put_along_axis(mask, order, True, axis=1)
        ghat = g * mask
        xh = x * ghat[:, :, None, None]
        outs.append(conv2d_forward(
            xh, ConvFilter(head.filters, cfg.stride, cfg.padding)))
    n, slots, oh, ow = outs[0].shape
    full = np.empty((n, cfg.heads * slots, oh, ow))
    for h in range(cfg.heads):
        full[:, h::cfg.heads] = outs[h]
    return full


def test_criterion_02_oracle_equivalence():
    """Both execution paths match the dense oracle at 1e-10 over the whole
    small-shape grid; index-plan execution is bit-identical to eval."""
    rng = np.random.default_rng(7)
    cases = 0
    for c in (4, 8, 16):
        for cp in (4, 8, 16):
            for k in (1, 3):
                for heads in (2, 4):
                    for rate in (0.25, 0.5, 0.75):
                        cfg = DgcLayerConfig(c, cp, k, 1, k // 2, heads=heads,
                                             squeeze=2 if c == 4 else 4,
                                             prune_rate=rate)
                        layer = init_dgc_layer(cfg, rng)
                        x = rng.normal(size=(2, c, 4, 4))
                        gating = HeadwiseGating(rate)
                        want = _dense_oracle(layer, x, gating)
                        for training in (True, False):
                            fwd = dgc_forward(x, layer, gating,
                                              training=training)
                            npt.assert_allclose(fwd.output, want, rtol=0,
                                                atol=1e-10)
                        fwd = dgc_forward(x, layer, gating, training=False)
                        for s in range(2):
                            got = execute_plan(
                                plan_from_forward(layer, fwd, s), x[s])
                            npt.assert_array_equal(got, fwd.output[s])
                        cases += 1
    for thr in (0.05, 0.2):
        cfg = DgcLayerConfig(8, 8, 3, 1, 1, heads=2, squeeze=4)
        layer = init_dgc_layer(cfg, rng)
        x = rng.normal(size=(3, 8, 5, 5))
        gating = GlobalGating(thr)
        want = _dense_oracle(layer, x, gating)
        fwd = dgc_forward(x, layer, gating, training=False)
        npt.assert_allclose(fwd.output, want, rtol=0, atol=1e-10)
        for s in range(3):
            got = execute_plan(plan_from_forward(layer, fwd, s), x[s])
            npt.assert_array_equal(got, fwd.output[s])
        cases += 1
    report(2, f"{cases} configurations, both paths, plans bit-identical")


def _stable_layer(cfg, n=2, hw=4, margin=5e-3):
    for seed in range(500):
        gen = np.random.default_rng(seed)
        layer = init_dgc_layer(cfg, gen)
        x = gen.normal(size=(n, cfg.in_channels, hw, hw))
        ok = True
        for head in layer.heads:
            p = x.mean(axis=(2, 3))
            z1 = p @ head.w_squeeze.T + head.b_squeeze
            z2 = np.maximum(z1, 0.0) @ head.w_expand.T + head.b_expand
            g = np.maximum(z2, 0.0)
            gaps = np.abs(np.diff(np.sort(g, axis=1), axis=1))
            if min(np.abs(z1).min(), np.abs(z2).min(), gaps.min()) < margin:
                ok = False
                break
        if ok:
            return layer, x, gen
    raise AssertionError("no selection-stable seed found")


def test_criterion_03_gradient_correctness():
    """Finite differences at selection-stable points: every gated-layer
    parameter, batch norm, and the linear head under 1e-5 relative error;
    unselected filter slices get exactly zero gradient."""
    cfg = DgcLayerConfig(4, 4, 3, 1, 1, heads=2, squeeze=2, prune_rate=0.5)
    layer, x, gen = _stable_layer(cfg)
    gating = HeadwiseGating(0.5)
    fwd = dgc_forward(x, layer, gating, training=True)
    r = gen.normal(size=fwd.output.shape)

    def loss():
        return (dgc_forward(x, layer, gating, training=True).output
                * r).sum()

    grads = dgc_backward(fwd, layer, r)
    worst = 0.0
    checks = [(x, grads.grad_input)]
    for h, head in enumerate(layer.heads):
        checks += [(head.filters, grads.grad_filters[h]),
                   (head.w_squeeze, grads.grad_w_squeeze[h]),
                   (head.b_squeeze, grads.grad_b_squeeze[h]),
                   (head.w_expand, grads.grad_w_expand[h]),
                   (head.b_expand, grads.grad_b_expand[h])]
    for arr, analytic in checks:
        num = numerical_grad(loss, arr)
        err = rel_error(analytic, num)
        worst = max(worst, err)
        assert err < 1e-5

    for h in range(cfg.heads):
        mask = fwd.masks[h]
        always_off = ~mask.any(axis=0)
        if always_off.any():
            npt.assert_array_equal(
                grads.grad_filters[h][:, always_off], 0.0)

    bn = BatchNorm2d(3)
    bn.gamma[:] = gen.normal(size=3) + 1.5
    bn.beta[:] = gen.normal(size=3)
    xb = gen.normal(size=(4, 3, 5, 5))
    rb = gen.normal(size=xb.shape)

    def bn_loss():
        return (bn.forward(xb, training=True) * rb).sum()

    bn.forward(xb, training=True)
    gx = bn.backward(rb)
    for arr, analytic in ((xb, gx), (bn.gamma, bn.grad_gamma.copy()),
                          (bn.beta, bn.grad_beta.copy())):
        err = rel_error(analytic, numerical_grad(bn_loss, arr))
        worst = max(worst, err)
        assert err < 1e-5

    w = gen.normal(size=(6, 4))
    b = gen.normal(size=4)
    xl = gen.normal(size=(3, 6))
    rl = gen.normal(size=(3, 4))

    def lin_loss():
        return (linear_forward(xl, w, b) * rl).sum()

    gx, gw, gb = linear_backward(xl, w, rl)
    for arr, analytic in ((xl, gx), (w, gw), (b, gb)):
        err = rel_error(analytic, numerical_grad(lin_loss, arr))
        worst = max(worst, err)
        assert err < 1e-5
    report(3, f"worst relative error {worst:.2e}; pruned slices exactly 0")


def test_criterion_04_scaling_invariance():
    """Multiplying one head's saliency by c > 0 changes no selection on
    100 inputs and leaves batch-statistics-normalized outputs equal."""
    cfg = DgcLayerConfig(8, 8, 3, 1, 1, heads=2, squeeze=4, prune_rate=0.5)
    rng = np.random.default_rng(19)
    layer = init_dgc_layer(cfg, rng)
    # channel variance must dwarf the normalizer's eps, else the eps term
    # (not the scaling property) dominates the comparison
    for head in layer.heads:
        head.filters *= 20.0
    x = rng.normal(size=(100, 8, 6, 6))
    gating = HeadwiseGating(0.5)
    base = dgc_forward(x, layer, gating, training=True)
    bn = BatchNorm2d(8)
    base_bn = bn.forward(base.output, training=True)
    for c in (0.5, 2.0, 10.0):
        saved_w = layer.heads[0].w_expand.copy()
        saved_b = layer.heads[0].b_expand.copy()
        layer.heads[0].w_expand *= c
        layer.heads[0].b_expand *= c
        try:
            scaled = dgc_forward(x, layer, gating, training=True)
            for h in range(cfg.heads):
                npt.assert_array_equal(scaled.masks[h], base.masks[h])
            scaled_bn = BatchNorm2d(8).forward(scaled.output, training=True)
            npt.assert_allclose(scaled_bn, base_bn, rtol=1e-5, atol=1e-5)
        finally:
            layer.heads[0].w_expand[:] = saved_w
            layer.heads[0].b_expand[:] = saved_b
    report(4, "selections identical, post-BN outputs within 1e-5 "
              "for c in {0.5, 2, 10} on 100 inputs")


def test_criterion_05_schedule_conformance_and_smooth_loss(run_headwise):
    """Three-stage sparsity ramp plus a bounded-spike check on desk-scale
    training loss during the ramp stage."""
    sched = PruneSchedule(60, 0.5)
    for e in range(5):
        assert prune_rate_at(e, sched) == 0.0
    for e in range(45, 60):
        assert prune_rate_at(e, sched) == 0.5
    rates = [prune_rate_at(e, sched) for e in range(60)]
    assert all(b >= a for a, b in zip(rates, rates[1:]))
    sched150 = PruneSchedule(150, 0.75)
    npt.assert_allclose(prune_rate_at(62, sched150), 0.37125, rtol=1e-12)

    result, _ = run_headwise
    losses = [m.loss_total for m in result.history]
    assert len(losses) == 60
    ratios = [losses[e] / np.mean(losses[e - 5:e]) for e in range(5, 45)]
    assert max(ratios) <= 2.0
    report(5, f"ramp exact; max stage-2 loss/trailing-mean "
              f"{max(ratios):.3f} <= 2")


def test_criterion_06_accuracy_retention(run_headwise, run_dense_baseline):
    _, pruned = run_headwise
    _, dense = run_dense_baseline
    gap = abs(pruned.accuracy - dense.accuracy)
    assert gap <= 0.03
    assert pruned.per_layer_prune_rates == [0.5, 0.5, 0.5]
    assert dense.per_layer_prune_rates == [0.0, 0.0, 0.0]
    report(6, f"accuracy {pruned.accuracy:.4f} (pruned) vs "
              f"{dense.accuracy:.4f} (dense), gap {gap:.4f} <= 0.03")


def test_criterion_07_global_threshold_calibration(run_global):
    """Network-wide realized pruning lands within 2 points of the target;
    the per-layer breakdown is part of the evaluation report."""
    result, metrics = run_global
    assert result.threshold_state is not None
    assert result.threshold_state.initialized
    assert metrics.threshold == result.threshold_state.threshold
    rates = metrics.per_layer_prune_rates
    assert len(rates) == 3 and all(0.0 <= r <= 1.0 for r in rates)
    weights = np.array([4 * c for c in (8, 16, 32)], dtype=float)
    overall = float(np.dot(rates, weights) / weights.sum())
    assert abs(overall - 0.5) <= 0.02
    report(7, f"realized {overall:.4f} vs target 0.5; per-layer "
              + "/".join(f"{r:.3f}" for r in rates))


def test_criterion_08_angle_loss_effect(run_global, run_global_angle):
    _, plain = run_global
    _, angled = run_global_angle
    assert angled.mean_abs_cos < plain.mean_abs_cos
    report(8, f"mean |cos| {angled.mean_abs_cos:.4f} (angle on) < "
              f"{plain.mean_abs_cos:.4f} (off)")


def test_criterion_09_benchmark_ordering():
    """Median batch-1 times keep the grouped <= gated <= dense order on
    ResNet18-like shapes, and the gated decomposition adds up."""
    shapes = [(64, 64, 56, 3), (128, 128, 28, 3), (256, 256, 14, 3)]
    results = run_benchmark(shapes, repeats=15, warmup=3, seed=0)
    by_shape = {}
    for r in results:
        by_shape.setdefault(r.shape, {})[r.variant] = r
    lines = []
    for shape, rs in by_shape.items():
        sgc, dgc, dense = (rs[v].median_s for v in ("sgc", "dgc", "dense"))
        assert sgc <= dgc <= dense, (shape, sgc, dgc, dense)
        comp_sum = sum(rs["dgc"].components_s.values())
        assert comp_sum == pytest.approx(rs["dgc"].mean_s,
                                         rel=0.2, abs=1e-4)
        lines.append(f"{shape} {sgc * 1e3:.2f}<={dgc * 1e3:.2f}"
                     f"<={dense * 1e3:.2f}ms")
    report(9, "; ".join(lines))


def test_criterion_10_determinism_and_persistence(tmp_path):
    cfg = parse_config("""
model = conv:3:4:3:2:1, dgc:4:8:3:2:1
classes = 2
batch_size = 32
epochs = 4
lr = 0.05
heads = 2
squeeze = 4
prune_rate = 0.5
seed = 3
""")
    data = synth_dataset(seed=1, classes=2, count=96)
    ckpt_a = str(tmp_path / "a.ckpt")
    ckpt_b = str(tmp_path / "b.ckpt")
    run_a = fit(cfg, data, checkpoint_path=ckpt_a)
    run_b = fit(cfg, data, checkpoint_path=ckpt_b)
    assert [m.csv_line() for m in run_a.history] == \
        [m.csv_line() for m in run_b.history]
    for name, arr in run_a.net.parameters().items():
        npt.assert_array_equal(arr, run_b.net.parameters()[name], err_msg=name)
    with open(ckpt_a, "rb") as fa, open(ckpt_b, "rb") as fb:
        assert fa.read() == fb.read()

    mid = str(tmp_path / "mid.ckpt")
    ckpt_c = str(tmp_path / "c.ckpt")
    saved = []

    def hook(epoch, metrics, net):
        if epoch == 1:
            with open(ckpt_c, "rb") as src, open(mid, "wb") as dst:
                dst.write(src.read())
            saved.append(epoch)
    full = fit(cfg, data, checkpoint_path=ckpt_c, epoch_hook=hook)
    assert saved == [1]
    ckpt_d = str(tmp_path / "d.ckpt")
    resumed = fit(cfg, data, checkpoint_path=ckpt_d, resume_from=mid)
    assert [m.csv_line() for m in resumed.history] == \
        [m.csv_line() for m in full.history[2:]]
    with open(ckpt_c, "rb") as fc, open(ckpt_d, "rb") as fd:
        assert fc.read() == fd.read()
    report(10, "two fresh runs byte-identical; resume reproduces the "
               "uninterrupted run exactly")
