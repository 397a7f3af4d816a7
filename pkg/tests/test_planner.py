import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptp import planner, subgoal_cvae as C
from ptp.errors import ConfigError, InputError, PlanningError
from ptp.planner import LatentPlanBuffer, PlanConfig

LOG_P0 = -4 * math.log(2 * math.pi)


def models(L=3, M=2, d_h=3, d_z=2, seed=0, base=5):
    rng = np.random.default_rng(seed)
    return [C.init_cvae(i + 1, base * M**i, rng, d_h=d_h, d_z=d_z, hidden=(8,)) for i in range(L)]


class ZeroValue:
    def value(self, h, g):
        return np.zeros(len(h))


STUB = ZeroValue()


def test_prior_logpdf_values():
    assert planner.prior_logpdf(np.zeros(8)) == pytest.approx(-7.3516, abs=1e-4)
    assert planner.prior_logpdf(np.zeros(8)) == pytest.approx(LOG_P0, abs=1e-12)
    z = np.zeros(8)
    z[:2] = 1.0
    assert planner.prior_logpdf(z) == pytest.approx(LOG_P0 - 1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=8, max_size=8))
def test_prior_logpdf_symmetric(z):
    z = np.array(z)
    assert planner.prior_logpdf(z) == planner.prior_logpdf(-z)


def test_plan_cost_terms():
    cfg0 = PlanConfig(eta1=0.0, eta2=0.0)
    hg = np.array([1.0, 2.0, 3.0])
    s = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 0.0]])
    z = np.zeros((2, 8))
    assert planner.plan_cost(np.zeros(3), hg, z, s, None, cfg0) == 3.0
    cfg = PlanConfig(eta1=0.0, eta2=0.01)
    c = planner.plan_cost(np.zeros(3), hg, np.zeros((1, 8)), hg[None], None, cfg)
    assert c == pytest.approx(0.01 * 4 * math.log(2 * math.pi), abs=1e-12)
    assert c == pytest.approx(0.0735, abs=1e-4)
    with pytest.raises(InputError):
        planner.plan_cost(np.zeros(3), hg, np.zeros((3, 8)), s, None, cfg)
    with pytest.raises(InputError):
        planner.plan_cost(np.zeros(3), hg, z, s, None, PlanConfig(eta1=0.1))


def test_plan_cost_value_term_uses_consecutive_pairs():
    seen = []

    def value_fn(states, goals):
        seen.append((states.copy(), goals.copy()))
        return np.sum(goals, axis=-1)

    cfg = PlanConfig(eta1=0.5, eta2=0.0)
    h0 = np.array([9.0, 9.0])
    s = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 1.0]])
    c = planner.plan_cost(h0, s[-1], np.zeros((3, 2)), s, value_fn, cfg)
    np.testing.assert_array_equal(seen[0][0], [h0, s[0], s[1]])
    np.testing.assert_array_equal(seen[0][1], s)
    assert c == pytest.approx(-0.5 * (1 + 2 + 4))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 10.0), st.integers(0, 1000))
def test_eta2_scaling_is_linear(lam, seed):
    rng = np.random.default_rng(seed)
    z, s = rng.standard_normal((4, 8)), rng.standard_normal((4, 3))
    hg = rng.standard_normal(3)
    base = planner.plan_cost(np.zeros(3), hg, z, s, None, PlanConfig(eta1=0, eta2=0))
    c1 = planner.plan_cost(np.zeros(3), hg, z, s, None, PlanConfig(eta1=0, eta2=0.01)) - base
    c2 = planner.plan_cost(np.zeros(3), hg, z, s, None, PlanConfig(eta1=0, eta2=0.01 * lam)) - base
    assert c2 == pytest.approx(lam * c1, rel=1e-9, abs=1e-12)


def test_config_validation():
    for bad in (dict(L=0), dict(K=0), dict(M=1), dict(N=1), dict(eta1=-1.0), dict(mppi_lambda=0.0)):
        with pytest.raises(ConfigError):
            PlanConfig(**bad)


def test_sample_candidates_prior_and_buffer():
    m = models(L=1)[0]
    rng = np.random.default_rng(0)
    z, s = planner.sample_candidates(np.zeros(3), m, [], 8, 1024, rng)
    assert z.shape == (1024, 8, 2) and s.shape == (1024, 8, 3)
    e = np.full((2, 2), 7.0)
    z, _ = planner.sample_candidates(np.zeros(3), m, [e], 2, 4, rng, 0.5)
    assert sum(np.array_equal(c, e) for c in z) == 2


def test_prior_candidates_are_centered():
    m = C.init_cvae(1, 5, np.random.default_rng(0), d_h=3, d_z=8, hidden=(4,))
    z, _ = planner.sample_candidates(np.zeros(3), m, [], 8, 1024, np.random.default_rng(1))
    assert abs(z.mean()) <= 3 / math.sqrt(1024 * 8 * 8)


def test_buffer_fifo_and_roundtrip():
    buf = LatentPlanBuffer(2, capacity=64)
    for i in range(65):
        buf[1].append(np.full((3, 2), float(i)))
    assert buf.sizes() == {1: 64, 2: 0}
    assert buf[1][0][0, 0] == 1.0
    back = LatentPlanBuffer.from_json(buf.to_json())
    np.testing.assert_array_equal(back[1][-1], buf[1][-1])


def quadratic_evaluate(target):
    def evaluate(z):
        c = np.sum((z - target) ** 2, axis=(-2, -1))
        return z.copy(), c

    return evaluate


def grid_oracle(target, lo=-3, hi=3, n=601):
    grid = np.linspace(lo, hi, n)
    best = [grid[np.argmin((grid - t) ** 2)] for t in target.ravel()]  # separable cost
    return np.array(best).reshape(target.shape)


@pytest.mark.parametrize("seed", range(10))
def test_mppi_monotone_and_converges_on_quadratic(seed):
    rng = np.random.default_rng(seed)
    target = rng.uniform(-1.5, 1.5, (1, 2))
    cfg = PlanConfig(N=1024, mppi_lambda=0.1)
    res = planner.mppi_refine(rng.standard_normal((1024, 1, 2)), quadratic_evaluate(target), cfg, rng)
    assert np.all(np.diff(res.best_history) <= 0)
    assert np.abs(res.z - grid_oracle(target)).max() < 0.1


def test_mppi_zero_iterations_returns_best_initial():
    z = np.array([[[3.0]], [[0.5]], [[-2.0]]])
    cfg = PlanConfig(mppi_iters=0)
    res = planner.mppi_refine(z, quadratic_evaluate(np.zeros((1, 1))), cfg, np.random.default_rng(0))
    assert res.z[0, 0] == 0.5 and res.best_history == [0.25]


def test_mppi_all_nonfinite_raises():
    with pytest.raises(PlanningError):
        planner.mppi_refine(np.zeros((4, 1, 1)), lambda z: (z, np.full(len(z), np.nan)), PlanConfig(), np.random.default_rng(0))


@pytest.mark.parametrize("L,K,M", list(itertools.product([1, 2, 3], [1, 4, 8], [2, 3])))
def test_plan_length(L, K, M):
    cfg = PlanConfig(L=L, K=K, M=M, N=8, mppi_iters=1)
    p = planner.plan(np.zeros(3), np.ones(3), models(L, M), STUB, None, cfg, np.random.default_rng(0))
    assert len(p.flattened) == K * M ** (L - 1) == cfg.plan_length()
    assert [d["level"] for d in p.per_level] == list(range(L, 0, -1))
    for i, d in enumerate(p.per_level):
        assert len(d["subgoals"]) == K * M**i


def test_plan_is_pure_and_deterministic():
    ms = models()
    buf = LatentPlanBuffer(3)
    cfg = PlanConfig(N=16, mppi_iters=2)
    before = [a.copy() for m in ms for a in m.decoder.arrays()]
    p1 = planner.plan(np.zeros(3), np.ones(3), ms, STUB, buf, cfg, np.random.default_rng(5))
    p2 = planner.plan(np.zeros(3), np.ones(3), ms, STUB, buf, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(p1.flattened, p2.flattened)
    assert buf.sizes() == {1: 0, 2: 0, 3: 0}
    for a, b in zip(before, [a for m in ms for a in m.decoder.arrays()]):
        np.testing.assert_array_equal(a, b)


def test_finest_segments_chain_from_coarse_subgoals():
    ms = models(L=2)
    cfg = PlanConfig(L=2, K=3, M=2, N=8, mppi_iters=0)
    p = planner.plan(np.zeros(3), np.ones(3), ms, STUB, None, cfg, np.random.default_rng(0))
    coarse, fine = p.per_level
    # each fine segment starts from the previous coarse subgoal (h0 for the first)
    starts = [np.zeros(3), *coarse["subgoals"][:-1]]
    for i, start in enumerate(starts):
        z = fine["z"][i * 2 : (i + 1) * 2]
        np.testing.assert_allclose(C.generate_sequence(ms[0], start, z), fine["subgoals"][i * 2 : (i + 1) * 2], atol=1e-12)


def test_check_models():
    with pytest.raises(ConfigError):
        planner.check_models(models(L=2), PlanConfig(L=3))
    bad = models(L=2, M=3)
    with pytest.raises(ConfigError):
        planner.check_models(bad, PlanConfig(L=2, M=2))


def test_buffer_commit_and_reuse():
    ms = models()
    buf = LatentPlanBuffer(3)
    cfg = PlanConfig(N=8, mppi_iters=1)
    p = planner.plan(np.zeros(3), np.ones(3), ms, STUB, buf, cfg, np.random.default_rng(0))
    planner.buffer_commit(buf, p)
    assert buf.sizes() == {1: 1, 2: 1, 3: 1}
    assert buf[1][0].shape == (32, 2) and buf[3][0].shape == (8, 2)
    z, _ = planner.sample_candidates(np.zeros(3), ms[2], buf[3], 8, 4, np.random.default_rng(1), buffer_fraction=1.0)
    for c in z:
        np.testing.assert_array_equal(c, buf[3][0])


def test_plan_json_has_config_echo():
    cfg = PlanConfig(L=1, K=2, N=4, mppi_iters=0)
    p = planner.plan(np.zeros(3), np.ones(3), models(L=1), STUB, None, cfg, np.random.default_rng(0))
    doc = p.to_json(cfg)
    assert doc["config"]["K"] == 2 and len(doc["flattened"]) == 2
