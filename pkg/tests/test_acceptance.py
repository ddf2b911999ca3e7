"""Acceptance criteria at desk scale.

Each test prints one ``PASS``/``FAIL`` line (collected again in the terminal
summary) and then asserts. The run-based criteria share one model cache, so
every (method, seed) pair is fitted once.
"""

import subprocess
import sys
import time
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest

from ssgen import numcore as nc
from ssgen.evalharness.inference import predict_batch, predict_single
from ssgen.evalharness.protocols import (
    DataConfig,
    ModelCache,
    TentGrid,
    build_corpus,
    corpus_key,
    run_rotation_benchmark,
    run_split_study,
    run_tent_comparison,
    tent_method_name,
    visualize_adaptation,
)
from ssgen.evalharness.streams import StreamSpec, build_streams
from ssgen.evalharness.viz import project_2d
from ssgen.trainer import TrainConfig, episode_loss, smoothed
from test_numcore import _primitive_cases
from test_trainer import toy_model, toy_task

SEEDS = tuple(range(5))
DATA = DataConfig(n_per_class=200, source_angles=(15, 30, 60, 75), target_angles=(0, 90))
TRAIN = TrainConfig(iterations=2000)
TENT_DATA = replace(DATA, eval_per_domain=256)  # Tent at batch 1 costs one step per image
TENT_GRID = TentGrid(batch_sizes=(1, 128), steps=(100,))

LINES: list[str] = []


def report(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2} {name}: {detail}"
    LINES.append(line)
    print(line)


@pytest.fixture(scope="session")
def cache():
    return ModelCache()


@pytest.fixture(scope="session")
def rotation(cache):
    return run_rotation_benchmark(DATA, TRAIN, ("full", "invariant", "non_meta"), SEEDS, cache, in_distribution=False)


@pytest.fixture(scope="session")
def full_seed0(cache):
    return cache.get("full", corpus_key("rotation", DATA), build_corpus(DATA), TRAIN, 0)


# ---------------------------------------------------------------- 1, 2: numerics


def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    with nc.float64_mode():
        worst_name, worst = "", 0.0
        for name, (params, fn) in _primitive_cases(np.random.default_rng(0)).items():
            err = nc.gradient_check(fn, params, epsilon=1e-6)
            if err >= worst:
                worst_name, worst = name, err
        cfg = TrainConfig(mc_M=2, mc_N=2, mc_L=2, kl_weight=0.7, kl_warmup=0)
        model = toy_model()
        task = toy_task(np.random.default_rng(1))  # 2 classes, d=4, 2 source domains, batch 4
        params = list(model.named_parameters().values())
        composite = nc.gradient_check(
            lambda: episode_loss(model, task, np.random.default_rng(3), cfg)[0], params, 1e-5, floor=1e-6
        )
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and composite < 1e-4 and elapsed < 60
    report(1, "gradient correctness", ok,
           f"primitives max rel err {worst:.1e} ({worst_name}) < 1e-5, composite {composite:.1e} < 1e-4, {elapsed:.1f}s < 60s")
    assert ok


def test_criterion_02_kl_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        dim = int(rng.integers(1, 5))
        mq, mp = rng.standard_normal(dim), rng.standard_normal(dim)
        lq, lp = rng.uniform(-1, 1, dim), rng.uniform(-1, 1, dim)
        closed = nc.gaussian_kl(nc.GaussianParams(nc.Tensor(mq), nc.Tensor(lq)), nc.GaussianParams(nc.Tensor(mp), nc.Tensor(lp))).item()
        half = rng.standard_normal((500_000, dim))
        z = mq + np.exp(0.5 * lq) * np.concatenate([half, -half])  # antithetic pairs, 10^6 samples
        log_q = -0.5 * (((z - mq) ** 2) / np.exp(lq) + lq).sum(axis=1)
        log_p = -0.5 * (((z - mp) ** 2) / np.exp(lp) + lp).sum(axis=1)
        worst = max(worst, abs(closed - float(np.mean(log_q - log_p))))
    q = nc.GaussianParams(nc.Tensor(rng.standard_normal(4)), nc.Tensor(rng.standard_normal(4)))
    self_kl = abs(nc.gaussian_kl(q, q).item())
    ok = worst < 1e-2 and self_kl <= 1e-12
    report(2, "KL oracle", ok, f"max |closed - MC| {worst:.2e} < 1e-2 over 100 gaussians, KL(q,q) {self_kl:.1e} <= 1e-12")
    assert ok


# ---------------------------------------------------------------- 3: per-sample independence


def test_criterion_03_per_sample_independence(full_seed0):
    ctx = full_seed0.context
    corpus = build_corpus(DATA)
    idx = np.random.default_rng(0).choice(len(corpus.target_domains[0]), 64, replace=False)
    a = corpus.target_domains[0].subset(idx)
    b = corpus.target_domains[1].subset(idx)
    _, batch_logits = predict_batch(ctx, a.images)
    alone = np.stack([predict_single(ctx, img)[1] for img in a.images])
    (stream,) = build_streams([a, b], StreamSpec("multi_domain", (a.domain_id, b.domain_id), 64, shuffle_seed=1))
    _, stream_logits = predict_batch(ctx, stream.images)
    # locate each sample of ``a`` inside the interleaved stream
    position = {img.tobytes(): i for i, img in enumerate(stream.images)}
    interleaved = stream_logits[[position[img.tobytes()] for img in a.images]]
    ok = alone.tobytes() == batch_logits.tobytes() == interleaved.tobytes()
    report(3, "per-sample independence", ok, "64 samples alone / batch of 64 / interleaved multi-domain stream: bitwise equal" if ok else "logits differ")
    assert ok


# ---------------------------------------------------------------- 4, 5: orderings


def _ordering(rotation, number, name, other):
    full = rotation.mean("rotation_ood", "full")
    base = rotation.mean("rotation_ood", other)
    per_seed = []
    for seed in SEEDS:
        f = np.mean([r.accuracy for r in rotation.select(experiment="rotation_ood", method="full", seed=seed)])
        o = np.mean([r.accuracy for r in rotation.select(experiment="rotation_ood", method=other, seed=seed)])
        per_seed.append(f"{f:.3f}/{o:.3f}")
    ok = full > base
    report(number, name, ok, f"full {full:.4f} vs {other} {base:.4f} (per seed {', '.join(per_seed)})")
    return ok


def test_criterion_04_ablation_ordering(rotation):
    assert _ordering(rotation, 4, "ablation ordering", "invariant")


def test_criterion_05_meta_learning_ordering(rotation):
    assert _ordering(rotation, 5, "meta-learning ordering", "non_meta")


def test_criterion_06_split_strategy_ordering(cache, rotation):
    study = run_split_study(DATA, TRAIN, SEEDS, cache=cache)
    ann, clu, rnd = (study.mean("split_study", s) for s in ("annotation", "cluster", "random"))
    ok = ann > rnd
    between = "between" if min(ann, rnd) <= clu <= max(ann, rnd) else "outside"
    report(6, "split-strategy ordering", ok, f"annotation {ann:.4f} vs random {rnd:.4f}; cluster {clu:.4f} ({between}, reported only)")
    assert ok


# ---------------------------------------------------------------- 7: Tent grid


def test_criterion_07_tent_grid_shape(cache, rotation):
    tent = run_tent_comparison(TENT_DATA, TRAIN, SEEDS, TENT_GRID, cache)
    big, one = tent_method_name(128, 100), tent_method_name(1, 100)
    single_big = tent.mean("tent_single_domain", big)
    single_one = tent.mean("tent_single_domain", one)
    multi_big = tent.mean("tent_multi_domain", big)
    ours = [
        [r.accuracy for r in tent.select(experiment=f"tent_{mode}", method="full")] for mode in ("single_domain", "multi_domain")
    ]
    checks = (single_big >= single_one, multi_big <= single_big, ours[0] == ours[1])
    ok = all(checks)
    report(7, "Tent grid shape", ok,
           f"b128 {single_big:.4f} >= b1 {single_one:.4f} [{checks[0]}]; multi b128 {multi_big:.4f} <= single b128 [{checks[1]}]; "
           f"ours equal across modes [{checks[2]}] ({np.mean(ours[0]):.4f}); ERM unadapted {tent.mean('tent_single_domain', 'erm'):.4f}")
    assert ok


# ---------------------------------------------------------------- 8: training sanity


def test_criterion_08_training_sanity(cache, rotation):
    key, corpus = corpus_key("rotation", DATA), build_corpus(DATA)
    details, ok = [], True
    for seed in SEEDS:
        history = cache.get("full", key, corpus, TRAIN, seed).history
        totals = np.array([r["total"] for r in history])
        kls = np.array([r["kl"] for r in history])
        curve = smoothed(totals, window=100)
        early, late = curve[99], curve[1999]
        finite = all(np.isfinite([r[c] for r in history for c in ("ce_posterior", "ce_prior", "kl", "total")]))
        seed_ok = late < early and kls.min() >= 0 and finite and len(history) == 2000
        ok &= seed_ok
        details.append(f"seed {seed}: {early:.3f}->{late:.3f}, min kl {kls.min():.2e}")
    report(8, "training sanity", ok, "; ".join(details))
    assert ok


# ---------------------------------------------------------------- 9: determinism


def test_criterion_09_determinism(tmp_path):
    overrides = [
        "data.n_per_class=40", "data.eval_per_domain=100", "train.iterations=150", "train.pretrain_iterations=50",
        "train.kl_warmup=50", "train.val_every=50", "train.batch=32", "train.support_per_class=3",
        "train.eval_support_per_class=3", "experiment.n_seeds=2", "experiment.methods=[\"full\",\"non_meta\"]",
    ]
    args = [arg for o in overrides for arg in ("--set", o)]
    for run in ("a", "b"):
        for command in ("train", "eval"):
            out = tmp_path / run / command
            subprocess.run([sys.executable, "-m", "ssgen.cli", command, "--out", str(out), *args], check=True, capture_output=True)
    files = ["train/history.csv", "train/model.npz", "train/manifest.json", "eval/metrics.csv", "eval/manifest.json"]
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}
    ok = all(same.values())
    report(9, "determinism", ok, ", ".join(f"{f} {'identical' if v else 'DIFFERS'}" for f, v in same.items()) + " across two processes")
    assert ok


# ---------------------------------------------------------------- 10: visualization


def test_criterion_10_visualization_contract(cache, tmp_path, full_seed0):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((60, 5)) @ rng.standard_normal((5, 5))
    proj = project_2d(x[:40], x[40:])
    coords = np.concatenate([proj.features, proj.prototypes])
    eig = np.sort(np.linalg.eigvalsh(np.cov(x.T)))[::-1][:2]
    gap = float(np.max(np.abs(coords.var(axis=0, ddof=1) - eig)))
    corpus = build_corpus(DATA)
    baseline = cache.get("invariant", corpus_key("rotation", DATA), corpus, TRAIN, 0)
    paths = visualize_adaptation(full_seed0, baseline, corpus.target_domains[0], [0, 1, 2], tmp_path, config_hash="acceptance")
    parsed = 0
    for p in paths:
        ET.parse(p)
        parsed += 1
    ok = gap < 1e-8 and parsed == 4
    report(10, "visualization contract", ok, f"projected variance vs top-2 eigenvalues max gap {gap:.1e} < 1e-8; {parsed} SVGs parsed as XML")
    assert ok

