"""Acceptance criteria, one test each; the terminal summary prints a PASS/FAIL line per criterion."""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from _helpers import fovea_dataset, ground_truth_vessels
from bilateral_vit.datasets import synth_dataset
from bilateral_vit.evaluation import evaluate, is_hit
from bilateral_vit.inference import extract_fovea, predict
from bilateral_vit.network import (
    SIG_STRIDES,
    build_model,
    decoder_forward,
    encoder_forward,
    vessel_branch_forward,
)
from bilateral_vit.preprocessing import AugmentParams, apply_augmentation, make_fovea_mask
from bilateral_vit.training import TrainConfig, combined_loss, evaluate_loss, lr_at, train
from bilateral_vit.types import DiseaseStatus, EvalThresholds, FundusSample, NetworkConfig, PreprocessTransform, Variant

criterion = pytest.mark.criterion


def _brute_force_accuracy(triples, multiplier, statuses, stratum):
    hits = total = 0
    for (gx, gy, px, py, r), status in zip(triples, statuses):
        if stratum != "overall" and status != stratum:
            continue
        total += 1
        if math.sqrt((gx - px) ** 2 + (gy - py) ** 2) <= multiplier * r:
            hits += 1
    return None if total == 0 else 100.0 * hits / total


@criterion(1, "evaluation equals brute-force scorer on 1000 random triples")
def test_evaluation_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 1000
    gt = rng.uniform(0, 2000, (n, 2))
    radius = rng.uniform(20, 150, n)
    pred = gt + rng.normal(0, 1, (n, 2)) * radius[:, None] * rng.uniform(0, 2.5, (n, 1))
    # Seed some exact boundary cases: integer 3-4-5 offsets landing on m*R for the preset multipliers.
    for i, m in zip(range(0, 100, 10), (0.125, 0.25, 0.5, 1.0, 2.0) * 2):
        gt[i] = np.round(gt[i])
        radius[i] = 40.0
        pred[i] = gt[i] + np.array([3.0, 4.0]) * (m * 40.0 / 5.0)
    statuses = rng.choice(["normal", "diseased"], n)
    samples = [FundusSample(id=str(i), image=np.zeros((1, 1)), fovea_xy=(float(gt[i, 0]), float(gt[i, 1])),
                            disc_radius_R=float(radius[i]), disease_status=DiseaseStatus(statuses[i]))
               for i in range(n)]
    preds = {str(i): (float(pred[i, 0]), float(pred[i, 1])) for i in range(n)}
    triples = [(s.fovea_xy[0], s.fovea_xy[1], *preds[s.id], s.disc_radius_R) for s in samples]
    for preset in (EvalThresholds.messidor(), EvalThresholds.palm()):
        report = evaluate(preds, samples, preset)
        for m in preset.multipliers:
            for stratum in ("overall", "normal", "diseased"):
                assert report.accuracy(m, stratum) == _brute_force_accuracy(triples, m, statuses, stratum)
    elapsed = time.perf_counter() - start
    print(f"criterion 1: {n} triples, both presets, {elapsed:.2f}s")
    assert elapsed < 5.0


@criterion(2, "distance exactly 1.0*R is a hit at multiplier 1")
def test_inclusive_boundary():
    assert is_hit((0.0, 0.0), (30.0, 40.0), 50.0, 1.0)
    assert is_hit((10.0, 10.0), (10.0, 35.5), 25.5, 1.0)
    sample = FundusSample(id="b", image=np.zeros((1, 1)), fovea_xy=(100.0, 100.0), disc_radius_R=5.0)
    report = evaluate({"b": (103.0, 104.0)}, [sample], EvalThresholds.messidor())
    assert report.accuracy(1.0) == 100.0
    assert report.accuracy(0.5) == 0.0


@criterion(3, "shape suite: all variants, S in {64,128}, batch in {1,2}")
def test_shape_suite():
    start = time.perf_counter()
    for variant in Variant:
        for size in (64, 128):
            model = build_model(NetworkConfig.toy(variant, input_size=size)).eval()
            for n in (1, 2):
                img = torch.randn(n, 3, size, size)
                vessel = torch.rand(n, 1, size, size) if variant.needs_vessel_map else None
                with torch.no_grad():
                    pyr = encoder_forward(model, img)
                    assert tuple(pyr.bottleneck.shape[2:]) == (size // 16, size // 16)
                    sig = None
                    if variant.has_vessel_branch:
                        branch_in = img if variant is Variant.VIT_VBFUNDUS_MFF else vessel
                        sig = vessel_branch_forward(model, branch_in)
                        assert [tuple(f.shape[2:]) for f in sig] == [(size // s, size // s) for s in SIG_STRIDES]
                    out = decoder_forward(model, pyr, sig)
                    assert tuple(out.shape) == (n, 1, size, size)
                    assert torch.equal(out, model(img, vessel))
    elapsed = time.perf_counter() - start
    print(f"criterion 3: shape suite {elapsed:.1f}s")
    assert elapsed < 120


def _finite_difference_check(seed=0, h=1e-6):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64) * 2
    target = (torch.rand(2, 1, 8, 8, generator=g) > 0.6).double()
    x = logits.clone().requires_grad_(True)
    combined_loss(x, target).backward()
    analytic = x.grad.detach()
    numeric = torch.zeros_like(logits)
    flat = logits.view(-1)
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        numeric.view(-1)[i] = (combined_loss(plus.view_as(logits), target)
                               - combined_loss(minus.view_as(logits), target)) / (2 * h)
    return (torch.linalg.norm(analytic - numeric) / torch.linalg.norm(analytic)).item()


@criterion(4, "gradient flow in every variant; loss gradient matches finite differences")
def test_gradient_flow():
    start = time.perf_counter()
    for variant in Variant:
        model = build_model(NetworkConfig.toy(variant), seed=1).train()
        img = torch.randn(2, 3, 64, 64)
        vessel = torch.rand(2, 1, 64, 64) if variant.needs_vessel_map else None
        target = torch.zeros(2, 1, 64, 64)
        target[:, :, 20:30, 30:40] = 1
        combined_loss(model(img, vessel), target).backward()
        dead = [name for name, p in model.named_parameters()
                if p.requires_grad and (p.grad is None or p.grad.abs().max() == 0)]
        assert dead == [], f"{variant.value}: zero gradient in {dead}"
    rel = max(_finite_difference_check(seed) for seed in range(3))
    elapsed = time.perf_counter() - start
    print(f"criterion 4: max relative FD error {rel:.2e}, {elapsed:.1f}s")
    assert rel < 1e-4
    assert elapsed < 120


@criterion(5, "toy overfit: loss < 0.3 and >= 7/8 within R/4 after 200 iterations")
def test_toy_overfit():
    start = time.perf_counter()
    synth = synth_dataset(8, 64, seed=0)
    data = fovea_dataset(synth)
    model = build_model(NetworkConfig.toy(Variant.VIT_VB_MFF), seed=0)
    result = train(model, data, TrainConfig(epochs=50, batch_size=2, seed=0))
    assert result.iterations == 200
    loss = evaluate_loss(model, data)
    provider = ground_truth_vessels(synth)
    hits = sum(is_hit(s.fovea_xy, predict(model, s, vessel_provider=provider).xy, s.disc_radius_R, 0.25)
               for s in synth.samples)
    elapsed = time.perf_counter() - start
    print(f"criterion 5: final loss {loss:.3f}, {hits}/8 within R/4, {elapsed:.0f}s")
    assert loss < 0.3
    assert hits >= 7
    assert elapsed < 600


@criterion(6, "lr schedule endpoints 1e-3 / 1e-7 and monotone")
def test_schedule_endpoints():
    assert math.isclose(lr_at(0), 1e-3, rel_tol=1e-9)
    assert math.isclose(lr_at(200), 1e-7, rel_tol=1e-9)
    lrs = [lr_at(e) for e in range(201)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


@criterion(7, "transform round trip within 1e-6; augmented mask centroid within 1 px")
def test_coordinate_round_trip():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        x0, y0 = rng.integers(0, 400, 2)
        w, h = rng.integers(1, 3000, 2)
        side = max(w, h)
        left, top = (side - w) // 2, (side - h) // 2
        size = int(rng.choice([64, 128, 256, 512]))
        t = PreprocessTransform((int(x0), int(y0), int(x0 + w), int(y0 + h)),
                                (int(left), int(top), int(side - w - left), int(side - h - top)), size / side, size)
        p = rng.uniform(-50, 3500, 2)
        q = t.inverse(t.forward(p))
        worst = max(worst, abs(q[0] - p[0]), abs(q[1] - p[1]))
    assert worst <= 1e-6

    size, offsets = 64, []
    for seed in range(200):
        r = np.random.default_rng([99, seed])
        fovea = tuple(r.uniform(18, 46, 2))
        params = AugmentParams.sample([99, seed])
        _, mask, _ = apply_augmentation(params, np.zeros((size, size, 3)), make_fovea_mask(fovea, 5, size))
        ys, xs = np.nonzero(mask)
        px, py = params.map_point(fovea, (size, size))
        offsets.append(math.hypot(xs.mean() - px, ys.mean() - py))
    print(f"criterion 7: round-trip error {worst:.1e}, max centroid offset {max(offsets):.2f}px")
    assert max(offsets) <= 1.0


def _sort_median(values):
    s = sorted(values)
    n = len(s)
    return float(s[n // 2]) if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2.0


@criterion(8, "per-axis median equals sort-based median; empty set falls back to argmax")
def test_median_extractor():
    rng = np.random.default_rng(8)
    for _ in range(500):
        h, w = rng.integers(4, 80, 2)
        prob = rng.uniform(0, 0.5, (h, w))
        k = int(rng.integers(1, h * w // 2 + 1))
        idx = rng.choice(h * w, k, replace=False)
        prob.flat[idx] = rng.uniform(0.5000001, 1.0, k)
        ys, xs = divmod(idx, w)
        est = extract_fovea(prob)
        assert not est.empty_set
        assert est.x == _sort_median(xs.tolist()) and est.y == _sort_median(ys.tolist())
    prob = rng.uniform(0, 0.4, (30, 20))
    prob[9, 7] = 0.45
    est = extract_fovea(prob)
    assert est.empty_set and (est.x, est.y) == (7.0, 9.0)


@criterion(9, "vessel input changes vit_vb_mff output; vit_plain rejects it")
def test_vessel_branch_sensitivity():
    model = build_model(NetworkConfig.toy(Variant.VIT_VB_MFF), seed=2).eval()
    img = torch.randn(1, 3, 64, 64)
    vessel = torch.rand(1, 1, 64, 64)
    with torch.no_grad():
        a = model(img, vessel)
        b = model(img, 1.0 - vessel)
    diff = (a - b).abs().max().item()
    print(f"criterion 9: max abs output change {diff:.3g}")
    assert diff > 1e-6
    plain = build_model(NetworkConfig.toy(Variant.VIT_PLAIN)).eval()
    with pytest.raises(ValueError, match="does not accept a vessel map"):
        plain(img, vessel)
    with pytest.raises(ValueError, match="no vessel branch"):
        vessel_branch_forward(plain, vessel)


FULL_SCALE_ENV = ("BILATERAL_MESSIDOR_CKPT", "BILATERAL_MESSIDOR_DATA", "BILATERAL_PALM_CKPT", "BILATERAL_PALM_DATA")


@criterion(10, "optional full-scale gate on real Messidor/PALM (not run in CI)")
@pytest.mark.skipif(not all(os.environ.get(k) for k in FULL_SCALE_ENV),
                    reason="needs real Messidor/PALM data and GPU-trained checkpoints")
def test_full_scale_gate():
    from bilateral_vit.datasets import load_dataset
    from bilateral_vit.pipeline import evaluate_checkpoint

    gates = (("MESSIDOR", EvalThresholds.messidor(), 0.5, 99.0), ("PALM", EvalThresholds.palm(), 1.0, 90.0))
    for name, thresholds, m, floor in gates:
        samples, _ = load_dataset(os.environ[f"BILATERAL_{name}_DATA"], split="test")
        out = Path(os.environ.get("BILATERAL_REPORT_DIR", "full_scale_reports")) / name.lower()
        report, _ = evaluate_checkpoint(os.environ[f"BILATERAL_{name}_CKPT"], samples, thresholds, out)
        assert report.accuracy(m) >= floor
