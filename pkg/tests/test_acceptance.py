"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or as a script with
``python3 tests/test_acceptance.py``. The reports of criteria 3, 4 and 8 are
cached so the determinism check can compare them against a fresh rerun.
"""

from __future__ import annotations

import json
import math
import sys
import time

import numpy as np
import pytest
import scipy.linalg
import torch

from enas_us.controller import (
    BaselineState,
    ControllerConfig,
    ControllerPolicy,
    reinforce_objective,
    reinforce_update,
    sample_batch,
)
from enas_us.datapipe import (
    Label,
    Provenance,
    RoiImage,
    augment_all,
    expand,
    fold_of,
    low_rank,
    mirror,
    rotate,
    stratified_folds,
    svd_rank,
    svd_truncate,
    synthetic_stripes,
)
from enas_us.genotype import CountingConfig, OpKind, random_arch, validate
from enas_us.nets import enumerate_parameters, instantiate
from enas_us.searchspace import (
    PUBLISHED_PARAMS,
    build_alexnet,
    build_network,
    deviation_pct,
    make_stack_plan,
    network_param_count,
)
from enas_us.trainer import (
    SearchConfig,
    TrainConfig,
    compute_metrics,
    evaluate,
    fold_split,
    search,
    search_split,
    to_tensors,
    train_from_scratch,
)

_REPORTS: dict[int, str] = {}


def announce(number: int, passed: bool, detail: str, capsys=None) -> None:
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)


def timed(fn, *args):
    start = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - start


def dump(report) -> str:
    return json.dumps(report, sort_keys=True)


def source_fixture(per_class: int, side: int, seed: int) -> list[RoiImage]:
    rng = np.random.default_rng(seed)
    return [RoiImage(rng.integers(0, 256, (side, side), dtype=np.uint8), label, f"{label.name.lower()}/{i:03d}.png")
            for label in Label for i in range(per_class)]


# -- 1: metric arithmetic ------------------------------------------------------

def criterion_1():
    m = compute_metrics(tn=227, fp=35, fn=21, tp=241)
    published = {"acc": 89.3, "tpr": 92.0, "tnr": 86.7, "pr": 87.5}
    pct = {k: 100 * v for k, v in m.rates().items()}
    gaps = {k: abs(pct[k] - published[k]) for k in ("tpr", "tnr", "pr")}
    passed = round(pct["acc"], 1) == published["acc"] and all(g <= 0.5 for g in gaps.values())
    detail = ", ".join(f"{k} {pct[k]:.2f}%" for k in ("acc", "tpr", "tnr", "pr"))
    return passed, detail


# -- 2: stack plans ------------------------------------------------------------

def criterion_2():
    got = {v: make_stack_plan(v).pattern() for v in ("ENAS7", "ENAS17")}
    want = {"ENAS7": "NRNRNNN", "ENAS17": "N" * 5 + "R" + "N" * 5 + "R" + "N" * 5}
    return got == want, f"ENAS7 {got['ENAS7']}, ENAS17 {got['ENAS17']}"


# -- 3: augmentation -------------------------------------------------------------

def criterion_3():
    rng = np.random.default_rng(3)
    expected = {Provenance.MIRROR, Provenance.ROT90, Provenance.ROT180, Provenance.ROT270,
                Provenance.SVD45, Provenance.SVD35, Provenance.SVD25}
    failures = []
    worst_ey = 0.0
    digests = []
    for i in range(50):
        h, w = rng.integers(8, 48, size=2)
        img = RoiImage(rng.integers(0, 256, (h, w), dtype=np.uint8), Label(i % 2), f"r/{i}.png")
        outs = augment_all(img)
        if len(outs) != 7 or {o.provenance for o in outs} != expected:
            failures.append(f"{i}: provenances")
        if not np.array_equal(mirror(mirror(img)).pixels, img.pixels):
            failures.append(f"{i}: mirror")
        turned = img
        for _ in range(4):
            turned = rotate(turned, 90)
        if not np.array_equal(turned.pixels, img.pixels) or np.array_equal(rotate(img, 90).pixels, img.pixels):
            failures.append(f"{i}: rot90 order")
        if np.abs(svd_truncate(img, 1.0).pixels.astype(int) - img.pixels).max() > 1:
            failures.append(f"{i}: full-rank svd")
        s = scipy.linalg.svd(img.pixels.astype(np.float64), compute_uv=False, lapack_driver="gesvd")
        for ratio in (0.45, 0.35, 0.25):
            k = svd_rank(img.pixels.shape, ratio)
            err = np.linalg.norm(img.pixels - low_rank(img.pixels, k))
            oracle = math.sqrt(math.fsum(s[k:] ** 2))
            worst_ey = max(worst_ey, abs(err - oracle) / oracle)
        digests.append([int(o.pixels.astype(np.int64).sum()) for o in outs])
    if worst_ey >= 1e-9:
        failures.append(f"Eckart-Young rel err {worst_ey:.2e}")
    total = len(expand(source_fixture(262, 4, 0)))
    if total != 4192:
        failures.append(f"fixture expands to {total}")
    report = {"digests": digests, "expanded": total, "failures": failures}
    return not failures, f"50 images, worst Eckart-Young rel err {worst_ey:.1e}, fixture -> {total}", report


# -- 4: controller bandit ------------------------------------------------------

def target_probability(policy: ControllerPolicy, n: int = 50, seed: int = 99) -> float:
    """Mean SEP_CONV_3 probability over op decisions along freshly sampled paths."""
    gen = torch.Generator().manual_seed(seed)
    ops = [t for t in range(policy.num_decisions) if policy.decision_kind(t)[0]]
    probs = []
    for _, trace in sample_batch(policy, n, gen):
        dist = policy.step_distributions(trace.decisions)
        probs += [float(dist[t][OpKind.SEP_CONV_3]) for t in ops]
    return math.fsum(probs) / len(probs)


def criterion_4():
    torch.manual_seed(0)
    policy = ControllerPolicy(5, ControllerConfig(), seed=0)
    baseline = BaselineState(decay=policy.cfg.baseline_decay)
    gen = torch.Generator().manual_seed(0)
    ops = [t for t in range(policy.num_decisions) if policy.decision_kind(t)[0]]
    hits = []
    for _ in range(500):
        batch = sample_batch(policy, 10, gen)
        rewards = [float(all(tr.decisions[t] == OpKind.SEP_CONV_3 for t in ops)) for _, tr in batch]
        hits.append(sum(rewards))
        reinforce_update(policy, [tr for _, tr in batch], rewards, baseline)
    p = target_probability(policy)
    ceiling = math.exp(1.1) / (math.exp(1.1) + 4 * math.exp(-1.1))
    report = {"target_probability": p, "rewarded_samples": hits, "baseline": baseline.value}
    detail = (f"target probability {p:.4f} (need >= 0.9; tanh-bounded ceiling {ceiling:.4f}), "
              f"{int(sum(hits))} rewarded samples of 5000")
    return p >= 0.9, detail, report


# -- 5: gradient check ---------------------------------------------------------

def criterion_5():
    cfg = ControllerConfig(hidden=8, zero_output=False)
    policy = ControllerPolicy(2, cfg, dtype=torch.float64, seed=5)
    gen = torch.Generator().manual_seed(5)
    traces = [tr for _, tr in sample_batch(policy, 4, gen)]
    seqs = torch.tensor([tr.decisions for tr in traces])
    rewards = [0.9, 0.1, 0.6, 0.3]
    baseline, weight = 0.4, 0.05

    def objective():
        return reinforce_objective(policy, seqs, rewards, baseline, weight)

    policy.zero_grad()
    objective().backward()
    analytic = torch.cat([p.grad.flatten() for p in policy.parameters()])
    numeric = []
    eps = 1e-6
    with torch.no_grad():
        for p in policy.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = objective().item()
                flat[i] = orig - eps
                down = objective().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = float((analytic - numeric).norm() / max(analytic.norm(), numeric.norm()))
    return rel < 1e-3, f"{numeric.numel()} parameters, relative error {rel:.2e}"


# -- 6: parameter counts -------------------------------------------------------

def criterion_6():
    rng = np.random.default_rng(6)
    mismatches = []
    for i in range(10):
        b = int(rng.integers(1, 6))
        variant = ("ENAS7", "ENAS17")[i % 2]
        channels = int(rng.integers(2, 24))
        counting = CountingConfig(*(bool(x) for x in rng.integers(0, 2, size=3)))
        net = build_network(random_arch(b, rng), make_stack_plan(variant, channels, int(rng.integers(2, 5))))
        analytic = network_param_count(net, counting)
        enumerated = enumerate_parameters(instantiate(net, counting), counting)
        if analytic != enumerated:
            mismatches.append((i, analytic, enumerated))
    canonical = network_param_count(build_alexnet(1000, 224))
    enumerated_alex = enumerate_parameters(instantiate(build_alexnet(1000, 224)))
    small = network_param_count(build_alexnet(2, 100))
    adaptive = network_param_count(build_alexnet(2, 100, adaptive_pool=True))
    ref = PUBLISHED_PARAMS["ALEXNET"]
    passed = not mismatches and canonical == enumerated_alex == 61_100_840
    detail = (f"10 configs, {len(mismatches)} mismatches; AlexNet 1000/224 {canonical:,}; "
              f"2/100 {small:,} ({deviation_pct(small, ref):+.2f}% vs {ref:,}), "
              f"with adaptive pool {adaptive:,} ({deviation_pct(adaptive, ref):+.2f}%)")
    return passed, detail


# -- 7: folds --------------------------------------------------------------------

def criterion_7():
    originals = source_fixture(262, 4, 7)
    folds = stratified_folds(originals, k=5, seed=0)
    problems = []
    for label in Label:
        sizes = sorted((sum(1 for im in originals if im.label is label and folds[im.source_id] == f)
                        for f in range(5)), reverse=True)
        if sizes != [53, 53, 52, 52, 52]:
            problems.append(f"{label.name} sizes {sizes}")
    variants = expand(originals)
    if any(fold_of(im, folds) != folds[im.source_id] for im in variants):
        problems.append("variant fold differs from source")
    tested = []
    for f in range(5):
        train, test = fold_split(variants, folds, f, augment=True)
        tested += [im.source_id for im in test]
        if {im.source_id for im in train} & {im.source_id for im in test}:
            problems.append(f"fold {f} leaks")
    if sorted(tested) != sorted(im.source_id for im in originals):
        problems.append("test folds do not partition the originals")
    return not problems, "per-class fold sizes {53,53,52,52,52}, no leakage" if not problems else "; ".join(problems)


# -- 8: end-to-end desk search -------------------------------------------------

def criterion_8():
    torch.set_num_threads(1)
    images = synthetic_stripes(200, 16, seed=0)
    folds = stratified_folds(images, k=5, seed=0)
    scfg = SearchConfig(controller_epochs=5, candidates_per_epoch=2, B=3, base_channels=8, search_plan="ENAS7")
    train, val = search_split(images, folds, 0, scfg, augment=False)
    result, _ = search(to_tensors(train), to_tensors(val), scfg)
    problems = validate(result.best.normal, 3) + validate(result.best.reduction, 3)
    tcfg = TrainConfig(epochs=10, base_channels=8, augment=False)
    train, test = fold_split(images, folds, 0, augment=False)
    net = build_network(result.best, make_stack_plan("ENAS7", tcfg.base_channels))
    trained = train_from_scratch(net, to_tensors(train), tcfg)
    metrics = evaluate(trained.model, test)
    report = {"search": result.report(), "curve": trained.curve, "test": metrics.rates(), "problems": problems}
    detail = f"genotype valid: {not problems}, final test accuracy {100 * metrics.acc:.1f}% on {len(test)} images"
    return not problems and metrics.acc >= 0.95, detail, report


# -- pytest entry points -------------------------------------------------------

def _check(number, fn, budget, capsys):
    try:
        out, seconds = timed(fn)
    except Exception as exc:
        announce(number, False, f"raised {type(exc).__name__}: {exc}", capsys)
        raise
    passed, detail = out[0], out[1]
    if len(out) > 2:
        _REPORTS.setdefault(number, dump(out[2]))
    in_time = seconds < budget
    announce(number, passed and in_time, f"{detail}  [{seconds:.1f}s, budget {budget:.0f}s]", capsys)
    assert passed, detail
    assert in_time, f"took {seconds:.1f}s, budget {budget}s"


def test_criterion_1_metric_consistency(capsys):
    _check(1, criterion_1, 1, capsys)


def test_criterion_2_stack_plans(capsys):
    _check(2, criterion_2, 1, capsys)


def test_criterion_3_augmentation(capsys):
    _check(3, criterion_3, 30, capsys)


def test_criterion_4_bandit_convergence(capsys):
    _check(4, criterion_4, 120, capsys)


def test_criterion_5_gradient_check(capsys):
    _check(5, criterion_5, 60, capsys)


def test_criterion_6_parameter_counts(capsys):
    _check(6, criterion_6, 30, capsys)


def test_criterion_7_fold_integrity(capsys):
    _check(7, criterion_7, 10, capsys)


def test_criterion_8_end_to_end(capsys):
    _check(8, criterion_8, 600, capsys)


@pytest.mark.slow
def test_criterion_9_determinism(capsys):
    torch.set_num_threads(1)
    runs = {3: criterion_3, 4: criterion_4, 8: criterion_8}
    same = {}
    for number, fn in runs.items():
        first = _REPORTS.get(number) or dump(fn()[2])
        same[number] = first == dump(fn()[2])
    passed = all(same.values())
    detail = ", ".join(f"criterion {n}: {'identical' if ok else 'DIFFERS'}" for n, ok in same.items())
    announce(9, passed, detail, capsys)
    assert passed, detail


if __name__ == "__main__":
    torch.set_num_threads(1)
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
