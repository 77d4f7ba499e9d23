"""Acceptance criteria 1-10.

Each test carries ``criterion(n)``; the terminal summary prints one
PASS/FAIL line per criterion (see ``conftest.py``). The desk task is the
bundled class-balanced MNIST subset (4000 train / 1000 test). Models shared
by several criteria are trained once per session.
"""
from __future__ import annotations

import json
import time

import numpy as np
import pytest

from bitflip_bnn.attack import (
    AttackConfig,
    attack_batch,
    attacked_layers,
    bit_scores,
    deploy,
    progressive_step,
    run_attack,
)
from bitflip_bnn.binarizer import binarize_backward, binarize_forward, schedule_tk
from bitflip_bnn.cli import main as cli
from bitflip_bnn.core import Network, accuracy, cross_entropy, cross_entropy_grad, predictions
from bitflip_bnn.datasets import mnist_subset, synth_blobs
from bitflip_bnn.growth import (
    GrowthConfig,
    build_grown_model,
    early_growth,
    gumbel_sigmoid,
    gumbel_sigmoid_grad,
    init_growth,
    masked_capacity_copy,
    masked_conv_forward,
    stage1,
)
from bitflip_bnn.models import build, convnet, mlp, resnet_tiny, with_precision
from bitflip_bnn.quantizer import (
    BitAddress,
    binarize_layer,
    bit_flip_deltas,
    code_range,
    dequantize,
    flip_bit,
    hamming,
    quantize_layer,
)
from bitflip_bnn.core import conv2d
from bitflip_bnn.training import TrainConfig, train
from conftest import numeric_grad, rel_err

SEEDS = (0, 1, 2)
BUDGET = 2000
EPOCHS = 8
LR = {"quant": 0.5, "binary_weight": 0.5, "bnn": 2.0}
BASE_WIDTH = 2  # underfitting x1 complete BNN of criteria 6-7 (criterion 5 uses the same width)
ORDER_WIDTH = 16  # precision-ordering models of criterion 7


def crit(n, title):
    return pytest.mark.criterion(n, title=title)


def detail(record_property, text):
    record_property("detail", text)


# ------------------------------------------------------------ shared models


@pytest.fixture(scope="session")
def desk():
    tr, te = mnist_subset()
    return tr.images.astype(np.float32), tr.labels, te.images.astype(np.float32), te.labels


def _fit(preset, width, seed, desk):
    x, y, _, _ = desk
    net = build("convnet", preset, width=width, seed=seed)
    train(net, x, y, TrainConfig(epochs=EPOCHS, lr=LR[preset], seed=seed))
    return net


def _attack(net, seed, desk, **kw):
    _, _, tx, ty = desk
    cfg = AttackConfig(budget=kw.pop("budget", BUDGET), rounds=1, seed=seed, **kw)
    ax, ay = attack_batch(tx, ty, cfg.attack_batch, seed, 0)
    return run_attack(net, cfg, ax, ay, tx, ty)


@pytest.fixture(scope="session")
def base_bnns(desk):
    return {s: _fit("bnn", BASE_WIDTH, s, desk) for s in SEEDS}


@pytest.fixture(scope="session")
def grown_bnns(desk):
    x, y, _, _ = desk
    out = {}
    for s in SEEDS:
        base = build("convnet", "bnn", width=BASE_WIDTH, seed=s)
        tc = TrainConfig(epochs=EPOCHS, lr=LR["bnn"], seed=s)
        # stage 2 gets the same budget as the x1 model
        out[s] = early_growth(base, x, y, GrowthConfig(max_multiplier=4, seed=s), tc, tc)
    return out


@pytest.fixture(scope="session")
def order_models(desk):
    return {(p, s): _fit(p, ORDER_WIDTH, s, desk) for p in ("quant", "binary_weight", "bnn") for s in SEEDS}


@pytest.fixture(scope="session")
def untargeted_reports(desk, base_bnns, grown_bnns, order_models):
    reps = {}
    for (p, s), net in order_models.items():
        reps[(p, s)] = _attack(deploy(net), s, desk)
    for s in SEEDS:
        reps[("base", s)] = _attack(deploy(base_bnns[s]), s, desk)
        reps[("grown", s)] = _attack(deploy(grown_bnns[s].model), s, desk)
    return reps


def _flips(rep):
    # a run that never reached random guess counts as beyond the cap
    return rep.n_flips if rep.success else BUDGET + 1


# -------------------------------------------------------------- criterion 1


GRAPHS = {
    "conv-bn-relu-pool-linear": lambda: convnet((3, 4), (2, 6, 6), 4, head_bn=False),
    "conv-bn-hardtanh": lambda: convnet((3,), (1, 6, 6), 3, act="hardtanh"),
    "linear-bn-relu": lambda: mlp((6, 5), 4, 3, batchnorm=True),
    "residual": lambda: resnet_tiny(3, 1, (1, 4, 4), 3),
    "soft-bnn": lambda: with_precision(convnet((3, 4), (1, 4, 4), 3), "bnn"),
}


@crit(1, "gradient suites (layers, binarizer, gumbel-sigmoid)")
def test_c1_gradient_suites(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst_layer = 0.0
    for name, make in GRAPHS.items():
        g = make()
        net = Network(g, seed=5, dtype=np.float64).train()
        net.tk = (1.0, 1.0)
        x = rng.standard_normal((6,) + tuple(g.input_shape))
        y = rng.integers(0, g.num_classes, 6)
        logits = net.forward(x)
        grads = net.backward(cross_entropy_grad(logits, y))
        for i, p in enumerate(net.params):
            for key, arr in p.items():
                for idx in rng.choice(arr.size, size=min(8, arr.size), replace=False):
                    num = numeric_grad(lambda: cross_entropy(net.forward(x), y), arr, idx)
                    worst_layer = max(worst_layer, float(rel_err(grads[i][key].reshape(-1)[idx], num)))
    assert worst_layer < 1e-4

    worst_bin = 0.0
    for i in range(0, 31):
        t, k = schedule_tk(i, 30)
        edge = np.sqrt(2.0) / t
        h = 1e-4 * edge
        z = np.linspace(-edge, edge, 1001)[1:-1]
        z = z[(np.abs(z) > 2 * h) & (np.abs(np.abs(z) - edge) > 2 * h)]
        fd = (binarize_forward(z + h, t, k) - binarize_forward(z - h, t, k)) / (2 * h)
        worst_bin = max(worst_bin, float(np.max(rel_err(binarize_backward(z, t, k), fd))))
    assert worst_bin < 1e-5

    worst_gate = 0.0
    m = np.linspace(-3, 3, 61)
    for form in ("logit", "printed"):
        for g0, g1 in [(0.0, 0.0), (0.4, -1.1), (-1.7, 0.9)]:
            for beta, temp in [(1.0, 2 / 3), (4.0, 1.0), (0.5, 0.3)]:
                h = 1e-2 * temp / beta

                def f(d):
                    return gumbel_sigmoid(m + d, beta, temp, g0, g1, form)

                fd = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)
                g = gumbel_sigmoid_grad(m, beta, temp, g0, g1, form)
                worst_gate = max(worst_gate, float(np.max(rel_err(g, fd, floor=1e-9))))
    assert worst_gate < 1e-6
    elapsed = time.perf_counter() - t0
    detail(record_property, f"layers {worst_layer:.1e}, binarizer {worst_bin:.1e}, gate {worst_gate:.1e}, "
                            f"{elapsed:.1f}s")
    assert elapsed < 60


# -------------------------------------------------------------- criterion 2


@crit(2, "binarization analytics")
def test_c2_binarizer_analytics(record_property):
    assert schedule_tk(0, 17) == (0.01, 100.0)
    assert schedule_tk(17, 17) == (10.0, 1.0)
    worst_jump = 0.0
    rng = np.random.default_rng(2)
    for T in (1, 7, 30):
        for i in range(T + 1):
            t, k = schedule_tk(i, T)
            edge = np.sqrt(2.0) / t
            inner = binarize_forward(np.nextafter(edge, 0.0), t, k)
            outer = binarize_forward(edge, t, k)
            worst_jump = max(worst_jump, abs(outer - inner), abs(binarize_forward(-edge, t, k) + inner))
            z = rng.standard_normal(2000) * 3 * edge
            assert np.array_equal(binarize_forward(-z, t, k), -binarize_forward(z, t, k))
    assert worst_jump < 1e-9
    detail(record_property, f"max jump {worst_jump:.1e}")


# -------------------------------------------------------------- criterion 3


@crit(3, "quantizer suite")
def test_c3_quantizer_suite(record_property):
    rng = np.random.default_rng(3)
    addresses = 0
    for trial in range(60):
        n_bits = (1, 2, 4, 8)[trial % 4]
        size = int(rng.integers(1, 65))
        w = rng.standard_normal(size) * 10.0 ** rng.uniform(-3, 2)
        qw = binarize_layer(w, scale=float(np.abs(w).mean())) if n_bits == 1 else quantize_layer(w, n_bits)
        if n_bits > 1:
            assert np.all(np.abs(w - dequantize(qw)) <= qw.scale / 2)
        deltas = bit_flip_deltas(qw)
        base = dequantize(qw)
        lo, hi = code_range(n_bits)
        for i in range(size):
            for b in range(n_bits):
                a = BitAddress(0, i, b)
                f = flip_bit(qw, a)
                assert flip_bit(f, a) == qw and hamming(f, qw) == 1
                assert lo <= f.codes[i] <= hi
                assert (dequantize(f) - base)[i] == deltas[i, b]
                addresses += 1
    detail(record_property, f"{addresses} addresses checked")


# -------------------------------------------------------------- criterion 4


@crit(4, "masking equivalence")
def test_c4_masking_equivalence(record_property):
    rng = np.random.default_rng(4)
    worst_conv = 0.0
    for _ in range(50):
        c_in, c_out, size = (int(v) for v in rng.integers((1, 1, 3), (4, 9, 9)))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.standard_normal((2, c_in, size, size))
        w = np.sign(rng.standard_normal((c_out, c_in, 3, 3)))
        mb = rng.integers(0, 2, c_out)
        full = masked_conv_forward(x, w, mb, stride, pad)
        on = np.flatnonzero(mb)
        if on.size:
            worst_conv = max(worst_conv, float(np.max(np.abs(full[:, on] - conv2d(x, w[on], None, stride, pad)))))
        assert not full[:, mb == 0].any()
    assert worst_conv < 1e-6

    worst_logit = 0.0
    for seed in range(6):
        preset = ("bnn", "fp32", "binary_weight")[seed % 3]
        graph = with_precision(convnet((3, 5), (1, 8, 8), 4), preset) if seed < 3 else \
            with_precision(mlp((6, 7), 5, 3, batchnorm=True), preset)
        base = Network(graph, seed=seed, dtype=np.float64)
        cap, masks, _ = init_growth(base, GrowthConfig(max_multiplier=3, seed=seed))
        for mk in masks.values():
            mk.m_fp = rng.uniform(-1, 1, mk.size)
            mk.latched = mk.base | (rng.random(mk.size) < 0.3)
        for b in cap.buffers.values():
            b["running_mean"][:] = rng.standard_normal(b["running_mean"].shape)
            b["running_var"][:] = rng.uniform(0.5, 2.0, b["running_var"].shape)
        cap.eval()
        grown = build_grown_model(cap, masks, seed).eval()
        x = rng.standard_normal((5,) + tuple(graph.input_shape))
        diff = np.abs(grown.predict(x) - masked_capacity_copy(cap, masks).predict(x))
        worst_logit = max(worst_logit, float(diff.max()))
    assert worst_logit < 1e-6
    detail(record_property, f"conv {worst_conv:.1e}, logits {worst_logit:.1e}")


# -------------------------------------------------------------- criterion 5


@crit(5, "growth behaviour on an underfitting x1 BNN")
def test_c5_growth_behaviour(desk, record_property):
    t0 = time.perf_counter()
    x, y, _, _ = desk
    x, y = x[:1000], y[:1000]
    seed = 0
    tc = TrainConfig(epochs=4, lr=LR["bnn"], seed=seed)
    small = build("convnet", "bnn", width=BASE_WIDTH, seed=seed)
    train(small, x, y, tc)
    fit_x1 = accuracy(small, x, y)
    cfg = GrowthConfig(max_multiplier=4, max_epochs=20, seed=seed)
    net, masks, state = init_growth(build("convnet", "bnn", width=BASE_WIDTH, seed=seed), cfg)
    stage1(net, masks, state, x, y, tc, cfg)
    hist = state.history
    for a, b in zip(hist, hist[1:]):
        assert all(b[l] >= a[l] for l in a)
    grown = build_grown_model(net, masks, seed)
    train(grown, x, y, tc)
    fit_grown = accuracy(grown, x, y)
    elapsed = time.perf_counter() - t0
    detail(record_property, f"x1 train acc {fit_x1:.1f}% vs grown {fit_grown:.1f}%, {len(state.events)} events, "
                            f"converged at epoch {state.epochs}/{cfg.max_epochs}, {elapsed:.0f}s")
    assert fit_x1 < 90.0  # the x1 model underfits its own training set
    assert len(state.events) >= 1
    assert state.converged and state.epochs < cfg.max_epochs
    assert elapsed < 600


# -------------------------------------------------------------- criterion 6


@crit(6, "accuracy recovery: grown RA-BNN >= x1 BNN + 1.0 pt")
def test_c6_accuracy_recovery(desk, base_bnns, grown_bnns, record_property):
    _, _, tx, ty = desk
    base = [accuracy(base_bnns[s], tx, ty) for s in SEEDS]
    grown = [accuracy(grown_bnns[s].model, tx, ty) for s in SEEDS]
    widths = [grown_bnns[s].widths for s in SEEDS]
    detail(record_property, f"x1 {np.mean(base):.2f}% {[round(v, 1) for v in base]} vs grown "
                            f"{np.mean(grown):.2f}% {[round(v, 1) for v in grown]}; widths {widths}")
    assert np.mean(grown) >= np.mean(base) + 1.0


# -------------------------------------------------------------- criterion 7


@crit(7, "robustness ordering: bnn > binary_weight > 8-bit, RA-BNN >= bnn")
def test_c7_robustness_ordering(untargeted_reports, record_property):
    med = {}
    for key in ("quant", "binary_weight", "bnn", "base", "grown"):
        flips = [_flips(untargeted_reports[(key, s)]) for s in SEEDS]
        med[key] = float(np.median(flips))
        detail(record_property, f"{key} {flips}")
    assert med["bnn"] > med["binary_weight"] > med["quant"]
    assert med["grown"] >= med["base"]


# -------------------------------------------------------------- criterion 8


@crit(8, "attack correctness")
def test_c8_untargeted_loss_monotone(untargeted_reports, record_property):
    n = 0
    for rep in untargeted_reports.values():
        for a, b in zip(rep.records, rep.records[1:]):
            assert b.loss_before == a.loss_after
        for r in rep.records:
            assert r.loss_after >= r.loss_before
            n += 1
    detail(record_property, f"{n} accepted flips monotone over {len(untargeted_reports)} runs")


@crit(8, "attack correctness")
def test_c8_budget_zero(desk, base_bnns, order_models):
    nets = [deploy(base_bnns[0]), deploy(order_models[("quant", 0)]), deploy(order_models[("binary_weight", 0)])]
    for net in nets:
        rep = _attack(net, 0, desk, budget=0)
        assert rep.n_flips == 0 and rep.pa == rep.ca


@crit(8, "attack correctness")
def test_c8_targeted_success(desk, base_bnns, order_models, record_property):
    _, _, tx, ty = desk
    wins = 0
    runs = [(base_bnns[s], s) for s in SEEDS] + [(order_models[("quant", s)], s) for s in SEEDS]
    for net, s in runs:
        net = deploy(net)
        target = (s + 3) % 10
        cfg = AttackConfig(mode="targeted", target_class=target, budget=BUDGET, rounds=1, seed=s)
        ax, ay = attack_batch(tx, ty, cfg.attack_batch, s, 0)
        rep = run_attack(net, cfg, ax, ay, tx, ty)
        if rep.status != "success":
            continue
        wins += 1
        saved = dict(net.qweights)
        try:
            for r in rep.records:
                net.qweights[r.layer] = flip_bit(net.qweights[r.layer], r.address)
            share = float(np.mean(predictions(net, ax) == target))
        finally:
            net.qweights = saved
        assert share >= 0.9
    detail(record_property, f"targeted successes {wins}/{len(runs)}")
    assert wins >= 1


# -------------------------------------------------------------- criterion 9


def _estimator_trial(net, x, y):
    """Return (argmax in shortlist, chosen / exhaustive best gain)."""
    logits = net.forward(x)
    loss = cross_entropy(logits, y)
    grads = net.backward(cross_entropy_grad(logits, y))
    exhaustive = {}
    for l in attacked_layers(net):
        q = net.qweights[l]
        assert q.size * q.n_bits <= 64
        for w in range(q.size):
            for b in range(q.n_bits):
                saved = dict(net.qweights)
                net.qweights[l] = flip_bit(q, BitAddress(l, w, b))
                exhaustive[(l, w, b)] = cross_entropy(net.forward(x), y) - loss
                net.qweights = saved
    best = max(exhaustive, key=lambda a: (exhaustive[a], tuple(-v for v in a)))
    shortlist = set()
    for l in attacked_layers(net):
        shortlist |= {(c.layer, c.weight, c.bit) for c in bit_scores(net.qweights[l], grads[l]["weight_eff"], 10)}
    rec = progressive_step(net, x, y, AttackConfig(budget=1))
    chosen = rec.loss_after - rec.loss_before if rec else 0.0
    return best in shortlist, chosen / exhaustive[best] if exhaustive[best] > 0 else 1.0


def _tiny(preset, hidden, classes, dim, bits, seed):
    ds = synth_blobs(600, classes, dim, seed=seed, separation=4.0)
    net = Network(with_precision(mlp((hidden,), dim, classes, batchnorm=True), preset, bits), seed=seed,
                  dtype=np.float64)
    train(net, ds.images[:400], ds.labels[:400], TrainConfig(epochs=4, lr=0.1, batch_size=32, seed=seed,
                                                             dtype="float64"))
    return deploy(net), ds.images[400:], ds.labels[400:]


@crit(9, "estimator quality vs exhaustive oracle")
@pytest.mark.parametrize("setup", ["bnn 8-8-8", "8-bit 8-1-2"])
def test_c9_estimator_vs_oracle(setup, record_property):
    hits, good = 0, 0
    for trial in range(20):
        if setup.startswith("bnn"):
            net, tx, ty = _tiny("bnn", 8, 8, 8, 1, trial)  # two 64-weight binary layers
        else:
            net, tx, ty = _tiny("quant", 1, 2, 8, 8, trial)  # 8 and 2 weights at 8 bits
        x, y = attack_batch(tx, ty, 128, trial, 0)
        hit, ratio = _estimator_trial(net, x, y)
        hits += hit
        good += ratio >= 0.5
        net._cache = None
    detail(record_property, f"{setup}: argmax in top-10 {hits}/20, >=50% of best {good}/20")
    assert hits >= 16 and good >= 18


# ------------------------------------------------------------- criterion 10


REPRO = """\
[model]
arch = convnet
precision = bnn
width = 4
[train]
epochs = 2
lr = 2.0
seed = {seed}
[data]
train_size = 1000
test_size = 300
[attack]
budget = 300
rounds = 2
"""


@crit(10, "reproducibility incl. checkpoint round trip")
def test_c10_reproducibility(tmp_path, record_property):
    from bitflip_bnn.checkpoint import load_checkpoint, save_checkpoint

    cfg = tmp_path / "run.ini"
    cfg.write_text(REPRO.format(seed=5))
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for d in (a, b):
        assert cli(["train", "--config", str(cfg), "--out", str(d)]) == 0
        assert cli(["attack", "--config", str(cfg), "--out", str(d)]) in (2, 3)
    for name in ("metrics.csv", "model.ckpt", "report.json", "round_0.json", "round_1.json", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    # reload, re-save and attack the copy
    net, header = load_checkpoint(a / "model.ckpt")
    c.mkdir()
    save_checkpoint(net, c / "model.ckpt", header["seed"], header["growth"], header["extra"])
    assert (c / "model.ckpt").read_bytes() == (a / "model.ckpt").read_bytes()
    assert cli(["eval", "--config", str(cfg), "--out", str(c)]) == 0
    assert (c / "eval.csv").read_bytes() == (a / "metrics.csv").read_bytes()
    assert cli(["attack", "--config", str(cfg), "--out", str(c)]) in (2, 3)
    assert (c / "report.json").read_bytes() == (a / "report.json").read_bytes()
    rep = json.loads((a / "report.json").read_text())
    detail(record_property, f"{rep['n_flips']} flips, status {rep['status']}, identical across 3 runs")
