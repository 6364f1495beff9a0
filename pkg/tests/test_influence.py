import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from influprune.dataset import SequenceBatch
from influprune.influence import (
    HvpConfig,
    IhvpDivergenceError,
    average_gradient,
    estimate_ihvp,
    exact_ihvp_oracle,
    influence_scores,
    loo_oracle,
    naive_influence_scores,
    parameter_change,
    read_influence,
    write_influence,
)
from influprune.toy import convex_toy


class Quadratic:
    """Per-sample loss 0.5 * curv * |theta - c_s|^2, so H = curv * I."""

    def __init__(self, centres, theta, curv=1.0):
        self.c, self.t, self.curv = np.asarray(centres, float), np.asarray(theta, float), curv

    @property
    def dim(self):
        return self.t.size

    def _rows(self, batch):
        return np.array([int(i[1:]) for i in batch.ids])

    def gradients(self, batch):
        return self.curv * (self.t - self.c[self._rows(batch)])

    def mean_gradient(self, batch):
        return self.gradients(batch).mean(0)

    def hvp(self, batch, v):
        return self.curv * np.asarray(v)

    def hessian(self, batch):
        return self.curv * np.eye(self.dim)


def ids_batch(n):
    return SequenceBatch(np.zeros((n, 1), int), np.ones(n, int), np.zeros(n, int), tuple(f"s{i}" for i in range(n)))


class TestAverageGradient:
    def test_single_sample(self, toy):
        one = toy.train.take([5])
        np.testing.assert_array_equal(average_gradient(toy.params, one), toy.params.gradients(one)[0])

    def test_cancellation(self):
        q = Quadratic([[1.0, -2.0], [-1.0, 2.0]], [0.0, 0.0])
        assert not average_gradient(q, ids_batch(2)).any()

    def test_matches_direct_sum(self, toy):
        sub = toy.train.take(np.arange(10))
        direct = sum(toy.params.gradients(sub.take([i]))[0] for i in range(10)) / 10
        np.testing.assert_allclose(average_gradient(toy.params, sub), direct, atol=1e-12, rtol=0)


class TestEstimateIhvp:
    def test_identity_hessian_fixed_point(self, rng):
        q = Quadratic(rng.normal(size=(5, 4)), np.zeros(4))
        v = rng.normal(size=4)
        est = estimate_ihvp(q, ids_batch(5), v, HvpConfig(iterations=200, damping=0.0, scale=2.0))
        assert np.linalg.norm(est - v) <= 0.01 * np.linalg.norm(v)

    def test_zero_vector(self, toy):
        assert not estimate_ihvp(toy.params, toy.train, np.zeros(toy.params.dim)).any()

    def test_zero_iterations_warns(self, toy):
        v = np.ones(toy.params.dim)
        with pytest.warns(RuntimeWarning):
            out = estimate_ihvp(toy.params, toy.train, v, HvpConfig(iterations=0, scale=4.0))
        np.testing.assert_array_equal(out, v / 4.0)

    def test_divergence_retries_then_converges(self, rng):
        q = Quadratic(rng.normal(size=(3, 2)), np.zeros(2), curv=30.0)
        diag = {}
        est = estimate_ihvp(q, ids_batch(3), np.ones(2), HvpConfig(iterations=400, damping=0.0, scale=10.0), diag)
        # |1 - curv/scale| < 1 needs scale > curv / 2
        assert diag["retries"] >= 1 and diag["scale"] > 15
        np.testing.assert_allclose(est, np.ones(2) / 30.0, rtol=1e-3)

    def test_divergence_gives_up(self, rng):
        q = Quadratic(rng.normal(size=(3, 2)), np.zeros(2), curv=1e4)
        with pytest.raises(IhvpDivergenceError, match="scale"):
            estimate_ihvp(q, ids_batch(3), np.ones(2), HvpConfig(iterations=400, scale=1.0, max_retries=2))

    def test_norms_every_hundred_steps(self, toy):
        diag = {}
        estimate_ihvp(toy.params, toy.train, toy.params.mean_gradient(toy.train), HvpConfig(iterations=350, repeats=2), diag)
        assert diag["solver_calls"] == 2 and [len(n) for n in diag["norms"]] == [3, 3]

    def test_deterministic(self, toy):
        v = toy.params.mean_gradient(toy.train)
        cfg = HvpConfig(iterations=300, seed=4)
        assert np.array_equal(estimate_ihvp(toy.params, toy.train, v, cfg), estimate_ihvp(toy.params, toy.train, v, cfg))

    def test_error_shrinks_with_iterations(self):
        errors = {100: [], 1000: [], 5000: []}
        for seed in range(5):
            t = convex_toy(seed, n_train=60, n_items=20, embed_dim=4)
            v = t.params.mean_gradient(t.train)
            exact = exact_ihvp_oracle(t.params, t.train, v, t.damping)
            for T in errors:
                est = estimate_ihvp(t.params, t.train, v, HvpConfig(iterations=T, damping=t.damping, seed=seed))
                errors[T].append(np.linalg.norm(est - exact) / np.linalg.norm(exact))
        means = [np.mean(errors[T]) for T in (100, 1000, 5000)]
        assert means[0] >= means[1] >= means[2]


class TestInfluenceScores:
    def test_zero_gradient_sample_scores_zero(self):
        q = Quadratic([[1.0, 0.0], [0.0, 0.0], [-3.0, 2.0]], [0.0, 0.0])
        res = influence_scores(q, ids_batch(3), HvpConfig(iterations=50, damping=0.0, scale=2.0))
        assert res.scores["s1"] == 0.0

    def test_identity_hessian_is_gradient_alignment(self, rng):
        q = Quadratic(rng.normal(size=(6, 3)), rng.normal(size=3))
        b = ids_batch(6)
        res = influence_scores(q, b, HvpConfig(iterations=300, damping=0.0, scale=2.0))
        g = q.gradients(b)
        expected = g @ g.mean(0) / 6
        np.testing.assert_allclose([res.scores[i] for i in b.ids], expected, rtol=1e-6)

    def test_single_solve_for_any_n(self, toy):
        for n in (10, 200):
            cfg = HvpConfig(iterations=100, repeats=3)
            res = influence_scores(toy.params, toy.train.take(np.arange(n)), cfg)
            assert res.diagnostics["solver_calls"] == 3 and len(res.scores) == n

    def test_matches_naive_path_with_exact_inverse(self, toy):
        sub = toy.train.take(np.arange(30))
        exact = exact_ihvp_oracle(toy.params, sub, toy.params.mean_gradient(sub), toy.damping)
        fast = toy.params.gradients(sub) @ exact / 30
        naive = naive_influence_scores(toy.params, sub, toy.damping)
        assert np.linalg.norm(fast - naive) / np.linalg.norm(naive) <= 1e-6

    @given(st.floats(0.01, 100.0))
    @settings(max_examples=10, deadline=None)
    def test_linear_in_v(self, c):
        t = _tiny_toy()
        cfg = HvpConfig(iterations=200, damping=t.damping)
        v = t.params.mean_gradient(t.train)
        a = influence_scores(t.params, t.train, cfg, v=v)
        b = influence_scores(t.params, t.train, cfg, v=c * v)
        np.testing.assert_allclose([b.scores[i] for i in t.train.ids], [c * a.scores[i] for i in t.train.ids], rtol=1e-9, atol=1e-15)

    def test_bit_identical_reruns(self, toy):
        cfg = HvpConfig(iterations=200)
        assert influence_scores(toy.params, toy.train, cfg).scores == influence_scores(toy.params, toy.train, cfg).scores


_TINY = {}


def _tiny_toy():
    if "t" not in _TINY:
        _TINY["t"] = convex_toy(seed=2, n_train=40, n_items=15, embed_dim=3)
    return _TINY["t"]


class TestOracles:
    def test_exact_identity(self, rng):
        q = Quadratic(rng.normal(size=(3, 4)), np.zeros(4))
        v = rng.normal(size=4)
        np.testing.assert_allclose(exact_ihvp_oracle(q, ids_batch(3), v, damping=0.0), v)

    def test_symmetry(self, toy, rng):
        a, b = rng.normal(size=toy.params.dim), rng.normal(size=toy.params.dim)
        lhs = a @ exact_ihvp_oracle(toy.params, toy.train, b, toy.damping)
        rhs = b @ exact_ihvp_oracle(toy.params, toy.train, a, toy.damping)
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))

    def test_refuses_large_models(self, toy):
        with pytest.raises(ValueError, match="exceeds"):
            exact_ihvp_oracle(toy.params, toy.train, np.ones(toy.params.dim), max_dim=10)

    def test_singular_is_fatal(self, rng):
        q = Quadratic(rng.normal(size=(2, 2)), np.zeros(2), curv=0.0)
        with pytest.raises(np.linalg.LinAlgError):
            exact_ihvp_oracle(q, ids_batch(2), np.ones(2), damping=0.0)

    def test_loo_duplicate_is_redundant(self):
        t = _tiny_toy()
        dup = SequenceBatch(
            np.vstack([t.train.history, t.train.history[:1]]),
            np.concatenate([t.train.lengths, t.train.lengths[:1]]),
            np.concatenate([t.train.targets, t.train.targets[:1]]),
            t.train.ids + ("twin",),
        )
        alone = loo_oracle(t.train, t.n_items, t.surrogate_cfg, t.train_cfg, [t.train.ids[0]], base=t.params)
        twin = loo_oracle(dup, t.n_items, t.surrogate_cfg, t.train_cfg, ["twin"])
        # with its twin still present the sample's signal survives the removal
        assert abs(twin.changes["twin"]) < abs(alone.changes[t.train.ids[0]])

    def test_loo_unknown_probe(self):
        t = _tiny_toy()
        with pytest.raises(KeyError):
            loo_oracle(t.train, t.n_items, t.surrogate_cfg, t.train_cfg, ["nope"])


class TestParameterChange:
    def test_zero_gradient_sample(self):
        q = Quadratic([[1.0, 0.0], [0.0, 0.0]], [0.0, 0.0])
        assert not parameter_change(q, ids_batch(2), 1, HvpConfig(iterations=20, scale=2.0)).any()

    def test_duplicating_data_halves_change(self):
        t = _tiny_toy()
        n = len(t.train)
        doubled = t.train.repeat(2)
        from influprune.surrogate import train_surrogate

        params2 = train_surrogate(doubled, t.surrogate_cfg, t.train_cfg, n_items=t.n_items)
        cfg = HvpConfig(iterations=3000, repeats=2, batch_size=4, damping=t.damping)
        one = parameter_change(t.params, t.train, 3, cfg)
        two = parameter_change(params2, doubled, 3, cfg)
        ratio = np.linalg.norm(two) / np.linalg.norm(one)
        assert abs(ratio - 0.5) <= 0.05
        assert n * 2 == len(doubled)


def test_jsonl_roundtrip(tmp_path, toy):
    res = influence_scores(toy.params, toy.train, HvpConfig(iterations=50))
    write_influence(res, tmp_path / "inf.jsonl", tmp_path / "diag.json")
    assert read_influence(tmp_path / "inf.jsonl") == res.scores
    first = json.loads((tmp_path / "inf.jsonl").read_text().splitlines()[0])
    assert set(first) == {"sample_id", "user_id", "influence"}
    diag = json.loads((tmp_path / "diag.json").read_text())
    assert "norms" in diag and not any(k.endswith("_seconds") for k in diag)
