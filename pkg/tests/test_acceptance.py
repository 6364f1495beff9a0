"""Acceptance criteria, one test each. Details land in the terminal summary."""

import time

import numpy as np
import pytest
from scipy.stats import chisquare

from influprune.dataset import SequenceBatch, SplitSpec, build_sequences, generate_synthetic
from influprune.evaluation import ExperimentConfig, compare_selectors
from influprune.influence import HvpConfig, estimate_ihvp, exact_ihvp_oracle, influence_scores, naive_influence_scores
from influprune.selection import ScoreRecord, SelectionConfig, coverage_select
from influprune.surrogate import SurrogateConfig, SurrogateParams, TrainConfig, train_surrogate
from influprune.target import TargetConfig, effort_scores, pretrain_target
from influprune.toy import convex_toy, validate


@pytest.fixture(scope="module")
def oracle_runs():
    return [validate(seed=s, n_probes=30) for s in (0, 1, 2)]


def test_criterion_1_ihvp_correctness(record_property):
    toy = convex_toy(seed=0)
    assert toy.params.dim <= 500 and len(toy.train) == 200 and toy.n_items <= 50
    v = toy.params.mean_gradient(toy.train)
    exact = exact_ihvp_oracle(toy.params, toy.train, v, damping=toy.damping)
    t0 = time.perf_counter()
    est = estimate_ihvp(toy.params, toy.train, v, HvpConfig(iterations=5000, repeats=4, batch_size=8, damping=toy.damping))
    seconds = time.perf_counter() - t0
    err = np.linalg.norm(est - exact) / np.linalg.norm(exact)
    record_property("detail", f"relative L2 error {err:.4f} (<= 0.05), solve {seconds:.1f}s (<= 120s), dim {toy.params.dim}")
    assert err <= 0.05 and seconds <= 120


def test_criterion_2_single_solve_equals_naive(toy, record_property):
    t0 = time.perf_counter()
    sub = toy.train.take(np.arange(30))
    ihvp = exact_ihvp_oracle(toy.params, sub, toy.params.mean_gradient(sub), damping=toy.damping)
    fast = toy.params.gradients(sub) @ ihvp / len(sub)
    naive = naive_influence_scores(toy.params, sub, damping=toy.damping)
    seconds = time.perf_counter() - t0
    rel = np.linalg.norm(fast - naive) / np.linalg.norm(naive)
    record_property("detail", f"relative error {rel:.2e} (<= 1e-6), {seconds:.2f}s (<= 60s)")
    assert rel <= 1e-6 and seconds <= 60


def test_criterion_3_influence_tracks_loo(oracle_runs, record_property):
    rhos = [r["spearman_influence_vs_loo"] for r in oracle_runs]
    unconverged = sum(len(r["loo_unconverged"]) for r in oracle_runs)
    record_property("detail", f"mean Spearman {np.mean(rhos):.3f} (>= 0.8) per seed {np.round(rhos, 3).tolist()}, unconverged retrains {unconverged}")
    assert np.mean(rhos) >= 0.8


def test_criterion_4_parameter_change(oracle_runs, record_property):
    cos = oracle_runs[0]["min_parameter_change_cosine"]
    record_property("detail", f"min cosine over 10 probes {cos:.4f} (>= 0.9)")
    assert cos >= 0.9


def test_criterion_5_sampler_invariants(record_property):
    rng = np.random.default_rng(2024)
    kinds = ("normal", "constant", "empty-bins", "k-over-budget")
    for trial in range(200):
        kind = kinds[trial % 4]
        n = int(rng.integers(1, 400))
        budget = int(rng.integers(1, n + 1))
        k = int(rng.integers(1, 80))
        if kind == "k-over-budget":
            k = budget + int(rng.integers(1, 50))
        scores = {
            "normal": rng.normal(size=n),
            "constant": np.full(n, 1.5),
            "empty-bins": rng.choice([0.0, 1.0, 50.0], size=n),
            "k-over-budget": rng.exponential(size=n),
        }[kind]
        recs = [ScoreRecord(f"s{i}", 0.0, 0.0, float(x)) for i, x in enumerate(scores)]
        sub = coverage_select(recs, SelectionConfig(budget=budget, n_groups=k, seed=trial))
        assert len(sub.selected) == budget and len(set(sub.selected)) == budget, (trial, kind)

    recs = [ScoreRecord(f"s{i}", 0.0, 0.0, float(i)) for i in range(100)]
    counts = np.zeros(10)
    for seed in range(1000):
        sub = coverage_select(recs, SelectionConfig(budget=5, n_groups=1, seed=seed))
        for sid in sub.selected:
            counts[int(sid[1:]) // 10] += 1
    p = chisquare(counts).pvalue
    record_property("detail", f"200 configurations exact and duplicate-free; K=1 chi-square p={p:.3f} (> 0.01)")
    assert p > 0.01


def _batch(rng, n_items, max_len=5):
    k = int(rng.integers(1, max_len + 1))
    hist = np.full((1, max_len), -1)
    hist[0, :k] = rng.choice(n_items, size=k, replace=False)
    return SequenceBatch(hist, np.array([k]), np.array([int(rng.integers(n_items))]), ("s#0",))


def _central(f, x, step):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        g[j] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def test_criterion_6_gradient_checks(record_property):
    rng = np.random.default_rng(6)
    worst_s = 0.0
    for case in range(20):
        p = SurrogateParams(rng.normal(size=(7, 3)), rng.normal(size=(7, 3)), convex_mode=bool(case % 2))
        b = _batch(rng, 7)
        fd = _central(lambda t: p.with_theta(t).losses(b)[0], p.theta, 1e-5)
        worst_s = max(worst_s, np.abs(p.gradients(b)[0] - fd).max())

    worst_t = 0.0
    for case in range(10):
        arch = ("mpce-large", "tiny-transformer")[case % 2]
        cfg = TargetConfig(architecture=arch, embed_dim=4, n_heads=2, max_history=5, seed=case,
                           pretrain=TrainConfig(2, 4, 0.01, 0.0))
        data = SequenceBatch(*(np.concatenate(x) for x in zip(*[(b.history, b.lengths, b.targets) for b in [_batch(rng, 6) for _ in range(6)]])), tuple(f"u{i}#0" for i in range(6)))
        params = pretrain_target(data, cfg, n_items=6)
        one = data.take([case % 6])
        fd = _central(lambda phi: params.with_phi(phi).losses(one)[0], params.phi, 1e-6)
        worst_t = max(worst_t, np.linalg.norm(params.gradients(one)[0] - fd) / np.linalg.norm(fd))

    memo = SequenceBatch(np.array([[0, 1]]), np.array([2]), np.array([2]), ("u#0",))
    cfg = TargetConfig(embed_dim=8, max_history=2, pretrain_fraction=0.99, pretrain=TrainConfig(2000, 1, 0.2, 0.0))
    effort = effort_scores(pretrain_target(memo, cfg, n_items=4), memo).efforts["u#0"]
    record_property(
        "detail",
        f"surrogate max-abs {worst_s:.1e} (<= 1e-4), target relative {worst_t:.1e} (<= 1e-3), memorised effort {effort:.1e} (<= 1e-6)",
    )
    assert worst_s <= 1e-4 and worst_t <= 1e-3 and effort <= 1e-6


def test_criterion_7_desk_scale_comparison(record_property):
    t0 = time.perf_counter()
    log = generate_synthetic(n_users=1000, n_items=100, density=0.1, drift=0.5, seed=0)
    data = build_sequences(log, SplitSpec(rating_threshold=None))
    report = compare_selectors(data, ["dealrec", "random", "grand", "el2n", "ccs"], [0, 1, 2, 3, 4], ExperimentConfig())
    seconds = time.perf_counter() - t0
    nd = {s: report.values(s, "ndcg", 10) for s in report.strategies()}
    beats = {b: int((nd["dealrec"] >= nd[b]).sum()) for b in ("grand", "el2n")}
    mean_ok = nd["dealrec"].mean() >= nd["random"].mean()
    record_property(
        "detail",
        f"NDCG@10 mean dealrec {nd['dealrec'].mean():.4f} vs random {nd['random'].mean():.4f}; "
        f"dealrec >= grand in {beats['grand']}/5 seeds, >= el2n in {beats['el2n']}/5; {seconds:.0f}s (<= 1800s)\n"
        + report.table(),
    )
    assert len(report.table().splitlines()) == 7
    assert mean_ok and beats["grand"] >= 3 and beats["el2n"] >= 3 and seconds <= 1800


def test_criterion_8_one_solve_amortised(record_property):
    log = generate_synthetic(n_users=2200, n_items=100, density=0.1, drift=0.5, seed=8)
    data = build_sequences(log, SplitSpec(ratios=(1.0, 0.0, 0.0), rating_threshold=None))
    train = data.encode("train")
    assert len(train) >= 10_000
    model = train_surrogate(train.take(np.arange(10_000)), SurrogateConfig(), TrainConfig(epochs=5), n_items=data.n_items)
    cfg = HvpConfig()
    timings = {}
    for n in (1_000, 10_000):
        sub = train.take(np.arange(n))
        t0 = time.perf_counter()
        res = influence_scores(model, sub, cfg)
        timings[n] = time.perf_counter() - t0
        assert res.diagnostics["solver_calls"] == cfg.repeats and len(res.scores) == n
        timings[f"solve{n}"] = res.diagnostics["solve_seconds"]
    record_property(
        "detail",
        f"one solve per call; 1k: {timings[1000]:.2f}s (solve {timings['solve1000']:.2f}s), "
        f"10k: {timings[10000]:.2f}s (solve {timings['solve10000']:.2f}s), ratio {timings[10000] / timings[1000]:.2f} (<= 2)",
    )
    assert timings[10_000] <= 2 * timings[1_000]
