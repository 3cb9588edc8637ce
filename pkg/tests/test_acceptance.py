"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Criteria 9 and 10 train the desk-scale model (a few minutes each on CPU).
"""
import itertools
import math
import time

import numpy as np
import pytest
import torch

from shadowpairs import checkpoint as ckpt_io
from shadowpairs.data import Detection, ImageSample, ShadowObjectInstance
from shadowpairs.decoder import Attention
from shadowpairs.evaluation import evaluate, ground_truth_detections, instance_ap, measure_fps, soap
from shadowpairs.experiments import ablation, overfit
from shadowpairs.features import ExtractorConfig
from shadowpairs.losses import LossWeights, PointSample, bce, box_aware_ce, hungarian, match, shadow_direction_loss, smooth_l1
from shadowpairs.decoder import LayerPrediction
from shadowpairs.model import ModelConfig, PairDetector
from shadowpairs.synthetic import SceneConfig, generate_dataset
from shadowpairs.training import TrainConfig, Trainer, to_tensors, total_loss

W = LossWeights()
ABLATION_SEEDS = (0, 1)


@pytest.fixture
def verdict(capsys):
    def record(number: int, title: str, passed: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\nCRITERION {number:>2} {'PASS' if passed else 'FAIL'}: {title}" + (f" [{detail}]" if detail else ""))
        assert passed, f"criterion {number} failed: {detail}"

    return record


def test_01_loss_formula_fidelity(verdict):
    zero = torch.zeros(1, 2, dtype=torch.float64)
    d1 = shadow_direction_loss(torch.tensor([[0.25, 0.0]], dtype=torch.float64), zero, W).item()
    d2 = shadow_direction_loss(torch.tensor([[1.0, 0.0]], dtype=torch.float64), zero, W).item()

    def point(epoch):
        s = PointSample(
            torch.zeros(1, 1, 2, dtype=torch.float64),
            torch.zeros(1, 1, dtype=torch.float64),
            torch.full((1, 1), 0.9, dtype=torch.float64),
            torch.zeros(1, 1, dtype=torch.bool),
        )
        return box_aware_ce(s, W, epoch).item()

    after, before = point(W.gate_epoch), point(W.gate_epoch - 1)
    ok = (
        abs(d1 - 0.00625) <= 1e-9
        and abs(d2 - 0.075) <= 1e-9
        and abs(after - W.alpha * -math.log(0.1)) <= 1e-6
        and abs(before - -math.log(0.1)) <= 1e-6
    )
    verdict(1, "loss formula fidelity", ok, f"direction {d1:.10f}, {d2:.10f}; box-aware {after:.6f}, {before:.6f}")


def test_02_branch_continuity(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for beta in rng.uniform(0, 2, 100):
        beta = float(beta) or 1e-3
        below = smooth_l1(torch.tensor([np.nextafter(beta, 0.0)], dtype=torch.float64), beta).item()
        quadratic = 0.5 * beta**2 / beta
        linear = beta - 0.5 * beta
        at = smooth_l1(torch.tensor([beta], dtype=torch.float64), beta).item()
        worst = max(worst, abs(quadratic - linear), abs(below - at))
    verdict(2, "smooth-L1 branch continuity", worst <= 1e-12, f"max gap {worst:.2e}")


def _brute(cost):
    n, g = cost.shape
    if n >= g:
        return min(sum(cost[q, j] for j, q in enumerate(p)) for p in itertools.permutations(range(n), g))
    return min(sum(cost[i, j] for i, j in enumerate(p)) for p in itertools.permutations(range(g), n))


def test_03_matching_oracle(verdict):
    rng = np.random.default_rng(3)
    exact = True
    for _ in range(200):
        n, g = (int(v) for v in rng.integers(1, 7, 2))
        cost = rng.normal(size=(n, g))
        pairs = hungarian(cost)
        if n >= g:
            total = sum(cost[q, j] for j, q in sorted((j, q) for q, j in pairs))
        else:
            total = sum(cost[i, j] for i, j in sorted(pairs))
        exact &= total == _brute(cost)
    gen = torch.Generator().manual_seed(3)
    invariant = True
    for _ in range(50):
        n, gts = 6, int(torch.randint(1, 5, (1,), generator=gen))
        masks = torch.rand(gts, 16, 16, generator=gen) < 0.3
        pred = LayerPrediction(torch.randn(1, n, 16, generator=gen), torch.randn(1, n, 16, generator=gen), torch.randn(1, n, generator=gen), 0)
        pts = torch.rand(128, 2, generator=gen)
        a = match(pred, 0, (4, 4), masks, W, pts).pairs
        shaken = LayerPrediction(pred.object_mask_logits, 50 * torch.randn(1, n, 16, generator=gen), pred.class_logits, 0)
        invariant &= match(shaken, 0, (4, 4), masks, W, pts).pairs == a
    verdict(3, "matching oracle", exact and invariant, f"exhaustive-equal={exact}, shadow-invariant={invariant}")


def _pair_scene():
    ob1 = np.zeros((32, 32), bool)
    ob1[4:12, 4:12] = True
    sh1 = np.zeros((32, 32), bool)
    sh1[12:16, 8:14] = True
    ob2 = np.zeros((32, 32), bool)
    ob2[18:26, 18:28] = True
    sh2 = np.zeros((32, 32), bool)
    sh2[20:28, 28:32] = True
    img = np.random.default_rng(0).random((32, 32, 3))
    return ImageSample(img, [ShadowObjectInstance(ob1, sh1, 1), ShadowObjectInstance(ob2, sh2, 2)])


def test_04_gradient_correctness(verdict):
    torch.manual_seed(4)
    cfg = ModelConfig(extractor=ExtractorConfig(channel_count=32, stem_width=8, stage_widths=(16, 16, 32)), num_layers=1, n_activation=4, n_auxiliary=2)
    model = PairDetector(cfg).double()
    images, targets = to_tensors([_pair_scene()], dtype=torch.float64)
    weights = LossWeights(gate_epoch=0)

    def loss():
        return total_loss(model, images, targets, weights, 1, 128, torch.Generator().manual_seed(9))

    total, terms = loss()
    active = all(v.item() > 0 for v in terms.values())
    model.zero_grad()
    total.backward()
    params = list(model.parameters())
    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    picks = np.random.default_rng(4).choice(sum(sizes), 10, replace=False)
    worst, eps = 0.0, 1e-6
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p, i = params[k].view(-1), int(flat - offsets[k])
            old = p[i].item()
            p[i] = old + eps
            up = loss()[0].item()
            p[i] = old - eps
            down = loss()[0].item()
            p[i] = old
            numeric = (up - down) / (2 * eps)
            analytic = params[k].grad.view(-1)[i].item()
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
    verdict(4, "total-loss gradient vs finite differences", active and worst <= 1e-3, f"all terms active={active}, max rel err {worst:.2e}")


def test_05_box_aware_dominance(verdict):
    rng = np.random.default_rng(5)
    ok = True
    one = LossWeights(alpha=1.0)
    worst_one = 0.0
    for _ in range(500):
        m, k = int(rng.integers(1, 4)), int(rng.integers(1, 9))
        s = PointSample(
            torch.zeros(m, k, 2, dtype=torch.float64),
            torch.tensor(rng.integers(0, 2, (m, k)), dtype=torch.float64),
            torch.tensor(rng.random((m, k)), dtype=torch.float64),
            torch.tensor(rng.random((m, k)) < 0.5),
        )
        plain = bce(s.probs, s.labels).mean(dim=1).mean().item()
        aware = box_aware_ce(s, W, W.gate_epoch).item()
        deviant = bool(((~s.inside_box) & (s.labels == 0) & (s.probs > 0.5)).any())
        ok &= aware >= plain and ((aware == plain) != deviant)
        worst_one = max(worst_one, abs(box_aware_ce(s, one, W.gate_epoch).item() - plain))
    verdict(5, "box-aware dominance", ok and worst_one <= 1e-12, f"equality-iff-no-deviant={ok}, alpha=1 gap {worst_one:.1e}")


def test_06_masked_attention_contracts(verdict):
    torch.manual_seed(6)
    att = Attention(32, 4)
    q, x = torch.randn(2, 5, 32), torch.randn(2, 12, 32)
    unmasked = att(q, x, x, None)
    all_true = torch.equal(att(q, x, x, torch.ones(2, 5, 12, dtype=torch.bool)), unmasked)
    empty = att(q, x, x, torch.zeros(2, 5, 12, dtype=torch.bool))
    fallback = bool(torch.isfinite(empty).all()) and torch.equal(empty, unmasked)
    single = torch.zeros(2, 5, 12, dtype=torch.bool)
    single[:, :, 7] = True
    out = att(q, x, x, single)
    closed = att.out_proj(att.v_proj(x[:, 7]))[:, None].expand_as(out)
    err = (out - closed).abs().max().item()
    verdict(6, "masked-attention contracts", all_true and fallback and err <= 1e-6, f"all-true bitwise={all_true}, fallback={fallback}, single-key err {err:.1e}")


def _iou_scene():
    def strip(cols):
        m = np.zeros((4, 40), bool)
        m[0, list(cols)] = True
        return m

    gt = ImageSample(np.zeros((4, 40, 3)), [ShadowObjectInstance(strip(range(10)), strip(range(20, 24)), 1)])
    det = Detection(0.9, strip(range(9)).astype(float), strip([20, 21, 22, 30]).astype(float))
    miss = ImageSample(np.zeros((4, 40, 3)), [ShadowObjectInstance(strip(range(10)), strip(range(20, 30)), 1)])
    objects_only = Detection(0.9, strip(range(10)).astype(float), np.zeros((4, 40)))
    return gt, det, miss, objects_only


def test_07_metric_oracles(verdict):
    scenes = generate_dataset(seed=7, n=8)
    r = evaluate(ground_truth_detections(scenes), scenes)
    perfect = r.soap_segm == r.assoc_ap_segm == r.inst_ap_segm == 1.0
    gt, det, miss, objects_only = _iou_scene()
    s = soap([[det]], [gt])
    inst = instance_ap([[objects_only]], [miss])
    verdict(7, "metric oracles", perfect and s == 0.3 and inst == 0.5, f"perfect={perfect}, SOAP={s!r}, inst AP={inst!r}")


def test_08_layer_count(verdict):
    counts = {}
    for layers in (1, 2, 3):
        cfg = ModelConfig(extractor=ExtractorConfig(channel_count=32, stem_width=8, stage_widths=(16, 16, 32)), num_layers=layers, n_activation=4, n_auxiliary=2)
        counts[layers] = len(PairDetector(cfg)(torch.rand(1, 3, 64, 64)).predictions)
    verdict(8, "layer-count contract", all(counts[g] == g + 1 for g in counts), f"predictions per depth {counts}")


def test_09_overfit_sanity(verdict):
    r = overfit()
    rep = r.report
    ok = r.iterations <= 2000 and rep.soap_segm >= 0.5 and rep.inst_ap_segm >= 0.6
    verdict(9, "overfit sanity", ok, f"{r.iterations} iters, {r.seconds:.0f}s, SOAP_segm {rep.soap_segm:.3f}, inst AP_segm {rep.inst_ap_segm:.3f}")


def test_10_ablation_direction(verdict):
    res = ablation(seeds=ABLATION_SEEDS)
    mean = {k: {m: float(np.mean([getattr(r.report, m) for r in runs])) for m in ("soap_segm", "soap_bbox")} for k, runs in res.items()}
    base, direction, box = mean["baseline"], mean["direction"], mean["box_aware"]
    ok = (
        direction["soap_segm"] >= base["soap_segm"] - 0.02
        and box["soap_segm"] >= base["soap_segm"] - 0.02
        and box["soap_bbox"] >= base["soap_bbox"] - 0.02
    )
    detail = (
        f"mean over seeds {ABLATION_SEEDS}: SOAP_segm base {base['soap_segm']:.3f} / +direction {direction['soap_segm']:.3f} / "
        f"+box-aware {box['soap_segm']:.3f}; SOAP_bbox base {base['soap_bbox']:.3f} / +box-aware {box['soap_bbox']:.3f}"
    )
    verdict(10, "ablation direction (held-out)", ok, detail)


def test_11_determinism_and_resume(verdict):
    scenes = SceneConfig(height=64, width=64, object_radius_range=(6, 10), pair_range=(1, 2))
    data = generate_dataset(seed=11, n=4, config=scenes)
    mc = ModelConfig(extractor=ExtractorConfig(channel_count=32, stem_width=8, stage_widths=(16, 16, 32)), n_activation=4, n_auxiliary=2)
    tc = TrainConfig(lr=1e-3, warmup_iters=2, epochs=4, batch_size=2, points=128, seed=11)

    def fresh():
        return Trainer(data, mc, tc, W)

    a, b = fresh().run(), fresh().run()
    same = a.history[-1]["total"] == b.history[-1]["total"]
    half = fresh()
    half.run(stop_after_epoch=2)
    snap = ckpt_io.from_trainer(half)
    resumed = fresh()
    ckpt_io.resume(resumed, snap)
    c = resumed.run()
    resume_ok = c.history[-1]["total"] == a.history[-1]["total"] and all(torch.equal(p, q) for p, q in zip(a.model.parameters(), c.model.parameters()))
    verdict(11, "determinism and resume", same and resume_ok, f"seeded identical={same}, resume identical={resume_ok}, final loss {a.history[-1]['total']:.6f}")


def test_12_fps_harness(verdict):
    results = {}
    for delay in (0.01, 0.02):
        rep = measure_fps(lambda _: time.sleep(delay), [None] * 10, warmup=2)
        results[delay] = rep.fps
    ok = abs(results[0.01] - 100) / 100 <= 0.10 and abs(results[0.02] - 50) / 50 <= 0.10
    verdict(12, "fps harness sanity", ok, f"10ms -> {results[0.01]:.1f} fps, 20ms -> {results[0.02]:.1f} fps")
