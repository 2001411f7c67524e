"""The twelve acceptance criteria, one test each, at their stated tolerances.

Every test carries a ``criterion`` marker; ``conftest.py`` prints a
PASS/FAIL line per criterion in the terminal summary, with the measured
value attached.  Run on their own with ``pytest tests/test_acceptance.py``.
"""

import hashlib
import itertools
import math
import time

import numpy as np
import pytest

from cracknet.cagm import CAGM, CagmConfig, complexity_estimate, linear_attention
from cracknet.complexity import config_report, count_flops, count_params
from cracknet.data import (SynthConfig, denormalize, hflip, normalize, rot90, split_80_20,
                           synth_generate, vflip)
from cracknet.losses import (BinaryLossConfig, MultiClassLossConfig, bce, binary_combined,
                             dice_binary, dice_multiclass, multiclass_combined, one_hot, weighted_ce)
from cracknet.metrics import (confusion, dice, f1, miou, per_class_dice, per_class_iou,
                              per_class_precision, per_class_recall, precision, recall)
from cracknet.model import ContextCrackNet, ModelConfig
from cracknet.nn import BatchNorm2d, Conv2d, Dense, batchnorm2d, maxpool2d, upsample2x
from cracknet.rfem import RFEM, RfemConfig
from cracknet.tensor import (Tensor, concat, exp, finite_diff_check, log, matmul, no_grad, permute,
                             power, relu, reshape, sigmoid, softmax)
from cracknet.train import (ABLATION_GRID, AdamWState, PlateauScheduler, TrainConfig, ablate,
                            adamw_step, train)

SEEDS = range(10)
FD_TOL = 1e-4


# -- 1 ---------------------------------------------------------------------

def _gradient_cases(rng):
    """(name, f, tensors) triples; every input is at most 2x8x8x8."""
    def t(*shape, lo=None, hi=None):
        data = rng.normal(size=shape) if lo is None else rng.uniform(lo, hi, size=shape)
        return Tensor(data)

    cases = []
    a, b = t(2, 3, 4), t(2, 3, 4)
    wa = rng.normal(size=(2, 3, 4))
    den = t(2, 3, 4, lo=0.5, hi=2.0)
    w_cat = rng.normal(size=(2, 6, 4))
    cases += [
        ("add", lambda x: ((x + b) * wa).sum(), [a, b]),
        ("mul", lambda x: (x * b * wa).sum(), [a, b]),
        ("div", lambda x: (x / den * wa).sum(), [a, den]),
        ("power", lambda x: (power(x, 3.0) * wa).sum(), [a]),
        ("relu", lambda x: (relu(x) * wa).sum(), [a]),
        ("sigmoid", lambda x: (sigmoid(x) * wa).sum(), [a]),
        ("exp", lambda x: (exp(x) * wa).sum(), [a]),
        ("log", lambda x: (log(x) * wa).sum(), [t(2, 3, 4, lo=0.2, hi=3.0)]),
        ("softmax", lambda x: (softmax(x, axis=-1) * wa).sum(), [a]),
        ("reshape/permute", lambda x: (permute(reshape(x, (2, 12)), (1, 0)) * wa.reshape(12, 2)).sum(), [a]),
        ("concat", lambda x: (concat([x, b], axis=1) * w_cat).sum(), [a, b]),
        ("getitem", lambda x: (x[:, 1:, ::2] * wa[:, 1:, ::2]).sum(), [a]),
        ("mean", lambda x: (x.mean(axis=1) * wa[:, 0]).sum(), [a]),
    ]
    m1, m2 = t(2, 3, 5), t(5, 4)
    w_mm = rng.normal(size=(2, 3, 4))
    cases.append(("matmul", lambda x: (matmul(x, m2) * w_mm).sum(), [m1, m2]))

    x4 = t(2, 3, 8, 8)
    conv = Conv2d(3, 4, 3, stride=2, padding=1, rng=rng)
    w_conv = rng.normal(size=(2, 4, 4, 4))
    cases.append(("conv2d", lambda x: (conv(x) * w_conv).sum(), [x4, conv.weight, conv.bias]))
    bn = BatchNorm2d(3)
    bn.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[...] = rng.normal(size=3)
    w_bn = rng.normal(size=(2, 3, 8, 8))
    cases.append(("batchnorm", lambda x: (batchnorm2d(x, bn, "train") * w_bn).sum(), [x4, bn.gamma, bn.beta]))
    dense = Dense(5, 3, rng=rng)
    w_d = rng.normal(size=(2, 4, 3))
    cases.append(("dense", lambda x: (dense(x) * w_d).sum(), [t(2, 4, 5), dense.weight, dense.bias]))
    w_mp = rng.normal(size=(2, 3, 4, 4))
    cases.append(("maxpool", lambda x: (maxpool2d(x, 3, 2, 1) * w_mp).sum(), [x4]))
    w_up = rng.normal(size=(2, 3, 8, 8))
    cases.append(("upsample", lambda x: (upsample2x(x) * w_up).sum(), [t(2, 3, 4, 4)]))

    cagm = CAGM(CagmConfig(4, 3, 3, rank=3), rng=rng)
    w_c = rng.normal(size=(2, 4, 3, 3))
    cases.append(("cagm", lambda x: (cagm(x) * w_c).sum(),
                  [t(2, 4, 3, 3), cagm.query.weight, cagm.key.weight, cagm.value.weight,
                   cagm.key_proj, cagm.value_proj, cagm.out.weight]))
    rfem = RFEM(RfemConfig(3, 2, 2), rng=rng)
    fd = t(2, 2, 4, 4)
    w_r = rng.normal(size=(2, 2, 4, 4))
    cases.append(("rfem", lambda x: (rfem(x, fd) * w_r).sum(),
                  [t(2, 3, 4, 4), fd, rfem.gate_x.weight, rfem.gate_g.weight, rfem.psi.weight,
                   rfem.psi.bias, rfem.block.conv1.weight]))

    p = t(2, 1, 6, 6, lo=0.05, hi=0.95)
    y = (rng.uniform(size=(2, 1, 6, 6)) < 0.3).astype(float)
    cases += [
        ("bce", lambda x: bce(x, y), [p]),
        ("dice_binary", lambda x: dice_binary(x, y), [p]),
        ("binary_combined", lambda x: binary_combined(x, y, BinaryLossConfig(1.0, 1.0)), [p]),
    ]
    logits = t(2, 3, 5, 5)
    oh = one_hot(rng.integers(0, 3, size=(2, 5, 5)), 3)
    cw = rng.uniform(0.5, 2.0, 3)
    cases += [
        ("dice_multiclass", lambda x: dice_multiclass(softmax(x, axis=1), oh), [logits]),
        ("weighted_ce", lambda x: weighted_ce(softmax(x, axis=1), oh, cw), [logits]),
        ("multiclass_combined", lambda x: multiclass_combined(
            softmax(x, axis=1), oh, MultiClassLossConfig(1.0, 1.0, class_weights=tuple(cw))), [logits]),
    ]
    return cases


@pytest.mark.criterion(1, "gradient correctness (central FD, h=1e-5, rel < 1e-4, 10 seeds)")
def test_c01_gradients(detail):
    start = time.perf_counter()
    worst, worst_name, n_checks = 0.0, "", 0
    for seed in SEEDS:
        for name, f, tensors in _gradient_cases(np.random.default_rng(seed)):
            assert all(x.data.size <= 2 * 8 * 8 * 8 for x in tensors[:1])
            err = finite_diff_check(f, tensors, h=1e-5)
            n_checks += 1
            if err > worst:
                worst, worst_name = err, f"{name}@seed{seed}"
    elapsed = time.perf_counter() - start
    detail(f"{n_checks} checks, worst {worst:.2e} ({worst_name}), {elapsed:.0f} s")
    assert worst < FD_TOL
    assert elapsed < 120


# -- 2 ---------------------------------------------------------------------

def _naive_attention(x, m):
    q = x @ m.query.weight.data + m.query.bias.data
    k = x @ m.key.weight.data + m.key.bias.data
    v = x @ m.value.weight.data + m.value.bias.data
    out = np.zeros_like(q)
    for b in range(x.shape[0]):
        for i in range(x.shape[1]):
            s = np.array([q[b, i] @ k[b, j] for j in range(x.shape[1])]) / math.sqrt(q.shape[-1])
            w = np.exp(s - s.max())
            out[b, i] = (w / w.sum()) @ v[b]
    return out


@pytest.mark.criterion(2, "linear attention with k=N, E=F=I equals naive softmax attention (1e-10)")
def test_c02_linear_attention_oracle(detail):
    grids = {1: (1, 1), 2: (1, 2), 4: (2, 2), 9: (3, 3), 16: (4, 4)}
    worst = 0.0
    for n, (h, w) in grids.items():
        for seed in SEEDS:
            m = CAGM(CagmConfig(5, h, w, rank=n), rng=np.random.default_rng(seed))
            m.key_proj.data[...] = np.eye(n)
            m.value_proj.data[...] = np.eye(n)
            x = np.random.default_rng(1000 + seed).normal(size=(2, n, 5))
            with no_grad():
                z = linear_attention(Tensor(x), m).data
            worst = max(worst, float(np.max(np.abs(z - _naive_attention(x, m)))))
    detail(f"max |diff| {worst:.1e} over N in {{1,2,4,9,16}} x 10 seeds")
    assert worst < 1e-10


# -- 3 ---------------------------------------------------------------------

@pytest.mark.criterion(3, "softmax rows sum to 1 (1e-12); gate maps strictly inside (0,1)")
def test_c03_attention_normalization(detail):
    row_err, psi_lo, psi_hi, forwards = 0.0, 1.0, 0.0, 0
    for seed in SEEDS:
        for size in (32, 64):
            m = ContextCrackNet(ModelConfig(height=size, width=size, seed=seed))
            x = Tensor(np.random.default_rng(seed).normal(size=(2, 3, size, size)))
            for mode in ("train", "eval"):
                getattr(m, mode)()
                with no_grad():
                    m(x)
                forwards += 1
                a = m.cagm.last_attention
                row_err = max(row_err, float(np.max(np.abs(a.sum(axis=-1) - 1.0))))
                for psi in m.attention_maps():
                    psi_lo, psi_hi = min(psi_lo, float(psi.min())), max(psi_hi, float(psi.max()))
    detail(f"{forwards} forwards, row error {row_err:.1e}, gate range [{psi_lo:.3e}, 1 - {1 - psi_hi:.3e}]")
    assert row_err < 1e-12
    assert 0.0 < psi_lo and psi_hi < 1.0


# -- 4 ---------------------------------------------------------------------

@pytest.mark.criterion(4, "forward returns [B,K,H,W] over sizes x classes x ablation flags")
def test_c04_shape_contract(detail):
    checked = 0
    for size, K, (cagm, rfem) in itertools.product((32, 64, 128), (1, 2, 3),
                                                   itertools.product((False, True), repeat=2)):
        m = ContextCrackNet(ModelConfig(height=size, width=size, num_classes=K, use_cagm=cagm, use_rfem=rfem))
        with no_grad():
            out = m(Tensor(np.random.default_rng(size + K).normal(size=(2, 3, size, size))))
        assert out.shape == (2, K, size, size)
        checked += 1
    detail(f"{checked} combinations")


# -- 5 ---------------------------------------------------------------------

@pytest.mark.criterion(5, "overfit 8 synthetic 64x64 samples to train Dice >= 0.95 within 200 epochs")
def test_c05_overfit(detail):
    samples = synth_generate(SynthConfig(count=8, size=64), 0)
    model = ContextCrackNet(ModelConfig())
    cfg = TrainConfig(lr=1e-4, weight_decay=1e-5, batch_size=8, epochs=200, alpha=1.0, beta=1.0,
                      augment=False)
    start = time.perf_counter()
    result = train(model, samples, samples, cfg)
    elapsed = time.perf_counter() - start
    dices = [r["dice"] for r in result.history]
    best = max(dices)
    hit = next((r["epoch"] for r in result.history if r["dice"] >= 0.95), None)
    detail(f"best train Dice {best:.4f} (final {dices[-1]:.4f}), reached 0.95 at epoch {hit}, "
           f"final lr {result.history[-1]['lr']:.2e}, {elapsed:.0f} s")
    assert elapsed < 600
    assert best >= 0.95


# -- 6 ---------------------------------------------------------------------

@pytest.mark.criterion(6, "ablation grid wiring: open gates equal baseline, CAGM off bypasses")
def test_c06_ablation_wiring(detail, tmp_path):
    x = Tensor(np.random.default_rng(6).normal(size=(2, 3, 64, 64)))
    for use_cagm in (False, True):
        gated = ContextCrackNet(ModelConfig(use_cagm=use_cagm, use_rfem=True))
        plain = ContextCrackNet(ModelConfig(use_cagm=use_cagm, use_rfem=False))
        shared = set(dict(plain.state_dict()))
        plain.load_state_dict({k: v for k, v in gated.state_dict().items() if k in shared})
        for stage in gated.decoder:
            stage.psi.weight.data[...] = 0.0
            stage.psi.bias.data[...] = 1000.0
        with no_grad():
            assert np.array_equal(gated(x).data, plain(x).data)
        assert all(np.all(p == 1.0) for p in gated.attention_maps())

    off = ContextCrackNet(ModelConfig(use_cagm=False))
    with no_grad():
        feats = off.encode(x)
        assert off.bottleneck(feats.f3) is feats.f3
        assert np.array_equal(off.decode(feats, feats.f3).data, off(x).data)

    data = synth_generate(SynthConfig(count=5, size=32), 6)
    rows = ablate(ModelConfig(height=32, width=32), data[:4], data[4:], TrainConfig(epochs=1, batch_size=4),
                  tmp_path)
    assert [(r["configuration"], r["use_rfem"], r["use_cagm"]) for r in rows] == list(ABLATION_GRID)
    params = {r["configuration"]: r["params"] for r in rows}
    assert params["RFEM + CAGM"] > params["RFEM Only"] > params["Baseline"]
    assert params["RFEM + CAGM"] > params["CAGM Only"] > params["Baseline"]
    detail("4 rows; params " + ", ".join(f"{k} {v}" for k, v in params.items()))


# -- 7 ---------------------------------------------------------------------

def _brute_force(pred, target, K):
    """Per-pixel tallies, then the textbook ratios with the empty-class convention."""
    tp, fp, fn = [0] * K, [0] * K, [0] * K
    for p, t in zip(pred.ravel().tolist(), target.ravel().tolist()):
        if p == t:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[t] += 1
    iou, dsc, prec, rec = [], [], [], []
    for c in range(K):
        iou.append(1.0 if tp[c] + fp[c] + fn[c] == 0 else tp[c] / (tp[c] + fp[c] + fn[c]))
        dsc.append(1.0 if tp[c] + fp[c] + fn[c] == 0 else 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c]))
        prec.append(1.0 if tp[c] + fp[c] == 0 else tp[c] / (tp[c] + fp[c]))
        rec.append(1.0 if tp[c] + fn[c] == 0 else tp[c] / (tp[c] + fn[c]))
    return iou, dsc, prec, rec


@pytest.mark.criterion(7, "metrics equal brute force on 100 random 16x16 pairs; F1 == Dice (1e-12)")
def test_c07_metric_oracles(detail):
    rng = np.random.default_rng(7)
    f1_gap = 0.0
    for i in range(100):
        K = 2 if i < 50 else 3
        pred, target = rng.integers(0, K, size=(16, 16)), rng.integers(0, K, size=(16, 16))
        c = confusion(pred, target, K)
        iou, dsc, prec, rec = _brute_force(pred, target, K)
        assert per_class_iou(c).tolist() == iou
        assert per_class_dice(c).tolist() == dsc
        assert per_class_precision(c).tolist() == prec
        assert per_class_recall(c).tolist() == rec
        assert miou(c) == sum(iou) / K
        if K == 2:
            assert (dice(c), precision(c), recall(c)) == (dsc[1], prec[1], rec[1])
        f1_gap = max(f1_gap, abs(f1(c) - dice(c)))
    detail(f"100 pairs exact; max |F1 - Dice| {f1_gap:.1e}")
    assert f1_gap <= 1e-12


# -- 8 ---------------------------------------------------------------------

@pytest.mark.criterion(8, "BCE(0.5) = ln 2; perfect Dice loss = 0; combined = weighted sum (1e-12)")
def test_c08_loss_analytics(detail):
    rng = np.random.default_rng(8)
    y = (rng.uniform(size=(2, 1, 8, 8)) < 0.3).astype(float)
    half = bce(Tensor(np.full((2, 1, 8, 8), 0.5)), y).item()
    assert abs(half - math.log(2)) <= 1e-9
    perfect = dice_binary(Tensor(y), y).item()
    assert abs(perfect) <= 1e-9
    oh = one_hot(rng.integers(0, 3, size=(2, 8, 8)), 3)
    assert abs(dice_multiclass(Tensor(oh), oh).item()) <= 1e-9

    gap = 0.0
    for seed in SEEDS:
        r = np.random.default_rng(seed)
        p = Tensor(r.uniform(0.01, 0.99, size=(2, 1, 8, 8)))
        a, b = r.uniform(0.1, 3.0, size=2)
        whole = binary_combined(p, y, BinaryLossConfig(a, b)).item()
        gap = max(gap, abs(whole - (a * bce(p, y).item() + b * dice_binary(p, y).item())))
        probs = softmax(Tensor(r.normal(size=(2, 3, 8, 8))), axis=1)
        g, d = r.uniform(0.1, 3.0, size=2)
        w = r.uniform(0.5, 2.0, size=3)
        whole = multiclass_combined(probs, oh, MultiClassLossConfig(g, d, class_weights=tuple(w))).item()
        parts = g * weighted_ce(probs, oh, w).item() + d * dice_multiclass(probs, oh).item()
        gap = max(gap, abs(whole - parts))
    detail(f"|BCE-ln2| {abs(half - math.log(2)):.1e}, perfect Dice {perfect:.1e}, combined gap {gap:.1e}")
    assert gap <= 1e-12


# -- 9 ---------------------------------------------------------------------

@pytest.mark.criterion(9, "plateau halves lr after exactly 5 stale epochs; AdamW decay is exact")
def test_c09_scheduler_optimizer(detail):
    s = PlateauScheduler(1e-4)
    events = [s.step(0.7) for _ in range(11)]
    # the first call sets the best value; each later equal value is stale
    assert events[:5] == [None] * 5 and events[5] == 5e-5
    assert events[6:10] == [None] * 4 and events[10] == 2.5e-5

    lr, wd = 1e-4, 1e-5
    p = np.random.default_rng(9).normal(size=7)
    expected = p.copy()
    state = AdamWState()
    for _ in range(50):
        adamw_step([p], [np.zeros(7)], state, lr, wd)
        expected = expected * (1 - lr * wd)
        assert np.array_equal(p, expected)
    detail("reductions at epochs 6 and 11; 50 zero-gradient steps bit-exact")


# -- 10 --------------------------------------------------------------------

@pytest.mark.criterion(10, "complexity fixtures exact; full-width report vs reference; CAGM linear in N")
def test_c10_complexity(detail):
    fixtures = [
        (Conv2d(1, 1, 3, padding=1), (1, 1, 4, 4), 10, 2 * 9 * 16 + 16),
        (Conv2d(3, 2, 1), (1, 3, 5, 5), 8, 2 * 3 * 2 * 25 + 2 * 25),
        (Conv2d(3, 4, 7, stride=2, padding=3), (1, 3, 8, 8), 592, 2 * 49 * 3 * 4 * 16 + 4 * 16),
    ]
    for layer, shape, params, flops in fixtures:
        assert count_params(layer) == params
        assert count_flops(layer, shape) == flops

    rep = config_report(ModelConfig.full_width(448))
    dev = rep.reference_deviation()
    text = rep.to_text()
    assert "82.05" in text and "243.78" in text
    ratio_cfg = (CagmConfig(1024, 28, 28, rank=16), CagmConfig(1024, 56, 28, rank=16))
    a, b = (complexity_estimate(c)["attention"] for c in ratio_cfg)
    ratio = b / a
    detail(f"448 full width: {dev['params_m']:.2f} M params ({dev['params_dev_pct']:+.1f}% vs 82.05), "
           f"{dev['gflops']:.2f} GFLOPs ({dev['gflops_dev_pct']:+.1f}% vs 243.78); CAGM 2N ratio {ratio:.4f}")
    assert 1.9 <= ratio <= 2.1


# -- 11 --------------------------------------------------------------------

def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.mark.criterion(11, "identical seed/config/data give identical history CSV and checkpoint hash")
def test_c11_determinism(detail, tmp_path):
    data = synth_generate(SynthConfig(count=5, size=64), 11)
    train_set, val_set = split_80_20(data, 11)
    cfg = TrainConfig(epochs=3, batch_size=2, seed=11)
    for run in ("a", "b"):
        train(ContextCrackNet(ModelConfig(seed=11)), train_set, val_set, cfg, tmp_path / run)
    same_csv = (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()
    digest = _sha(tmp_path / "a" / "best.ckpt")
    detail(f"history equal {same_csv}; checkpoint sha256 {digest[:16]}")
    assert same_csv
    assert digest == _sha(tmp_path / "b" / "best.ckpt")


# -- 12 --------------------------------------------------------------------

@pytest.mark.criterion(12, "flip/rot involutions, normalize inverse (1e-12), exact seeded 80:20 split")
def test_c12_pipeline_invariants(detail):
    samples = synth_generate(SynthConfig(count=10, size=32), 12)
    inv_err = 0.0
    for s in samples:
        for op in (hflip, vflip):
            twice = op(op(s))
            assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)
        r = s
        for _ in range(4):
            r = rot90(r)
        assert np.array_equal(r.image, s.image) and np.array_equal(r.mask, s.mask)
        inv_err = max(inv_err, float(np.max(np.abs(denormalize(normalize(s.image)) - s.image))))
    assert inv_err < 1e-12

    ids = sorted(s.id for s in samples)
    for seed in SEEDS:
        a, b = split_80_20(samples, seed)
        a2, b2 = split_80_20(samples, seed)
        assert [s.id for s in a] == [s.id for s in a2] and [s.id for s in b] == [s.id for s in b2]
        assert len(a) == 8 and len(b) == 2
        assert sorted(s.id for s in a + b) == ids and not {s.id for s in a} & {s.id for s in b}
    detail(f"normalize round trip {inv_err:.1e}; 10 seeds partition-exact")
