import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import spearmanr

from magekt.irt import (IrtConfig, IrtParams, dump_params, fit_ability, fit_rasch, load_params,
                        negative_log_likelihood, nll_gradient, rasch_probability)

from conftest import make_log, planted_rasch_log


def test_probability_examples():
    assert rasch_probability(0.3, 0.3) == 0.5
    assert rasch_probability(20.0, 0.0) >= 1 - 1e-8
    # sigma(1) = e / (1 + e)
    assert rasch_probability(1.0, 0.0) == pytest.approx(math.e / (1 + math.e), abs=1e-12)
    assert 0.0 <= rasch_probability(-800.0, 0.0) < 1e-300


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_probability_complement(theta, b):
    assert rasch_probability(theta, b) + rasch_probability(b, theta) == pytest.approx(1.0, abs=1e-15)


def test_probability_rejects_non_finite():
    with pytest.raises(ValueError):
        rasch_probability(float("nan"), 0.0)


def test_nll_empty_and_single_record():
    zero = IrtConfig(l2_prior=0.0)
    empty = make_log([])
    assert negative_log_likelihood(IrtParams({}, {}), empty, zero) == 0.0
    one = make_log([("s", "q", "k", 1, 0)])
    assert negative_log_likelihood(IrtParams({"s": 0.4}, {"q": 0.4}), one, zero) == pytest.approx(math.log(2))


def test_nll_matches_per_record_terms():
    log = make_log([("s", "q1", "k", 1, 0), ("s", "q2", "k", 0, 1)])
    params = IrtParams({"s": 0.7}, {"q1": -0.2, "q2": 1.1})
    p1, p2 = 1 / (1 + math.exp(-0.9)), 1 / (1 + math.exp(0.4))
    prior = 0.05 * (0.7 ** 2 + 0.2 ** 2 + 1.1 ** 2)
    expected = -math.log(p1) - math.log(1 - p2) + prior
    assert negative_log_likelihood(params, log, IrtConfig(l2_prior=0.1)) == pytest.approx(expected, rel=1e-12)


def test_nll_unknown_id():
    with pytest.raises(KeyError):
        negative_log_likelihood(IrtParams({"s": 0.0}, {}), make_log([("s", "q", "k", 1, 0)]))


@given(st.integers(0, 10_000))
def test_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    rows = [(f"s{rng.integers(4)}", f"q{rng.integers(5)}", "k", int(rng.integers(2)), i) for i in range(30)]
    log = make_log(rows)
    params = IrtParams({s: float(rng.normal()) for s in log.students}, {q: float(rng.normal()) for q in log.questions})
    cfg = IrtConfig(l2_prior=float(rng.uniform(0, 1)))
    grad = nll_gradient(params, log, cfg)
    for kind in ("theta", "b"):
        for key, x in getattr(params, kind).items():
            h = 1e-5 * (1 + abs(x))

            def at(v):
                vals = {**getattr(params, kind), key: v}
                p = IrtParams(vals, params.b) if kind == "theta" else IrtParams(params.theta, vals)
                return negative_log_likelihood(p, log, cfg)

            numeric = (at(x + h) - at(x - h)) / (2 * h)
            analytic = getattr(grad, kind)[key]
            assert abs(analytic - numeric) <= 1e-5 * max(abs(analytic), abs(numeric), 1.0)


def test_single_record_fit_is_finite_and_ordered():
    p = fit_rasch(make_log([("s", "q", "k", 1, 0)]))
    assert math.isfinite(p.theta["s"]) and p.theta["s"] - p.b["q"] > 0


def test_empty_log_rejected():
    with pytest.raises(ValueError):
        fit_rasch(make_log([]))


def test_planted_recovery_and_gauge():
    log, (theta, b) = planted_rasch_log(60, 40, seed=1)
    p = fit_rasch(log)
    assert p.fit_report.converged
    assert abs(np.mean(list(p.b.values()))) <= 1e-9
    assert spearmanr([p.theta[s] for s in theta], list(theta.values()))[0] >= 0.85
    assert spearmanr([p.b[q] for q in b], list(b.values()))[0] >= 0.9


def test_objective_never_increases():
    log, _ = planted_rasch_log(30, 20, seed=2)
    trace = fit_rasch(log).fit_report.nll_trace
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


def test_stronger_prior_shrinks_norm():
    log, _ = planted_rasch_log(30, 20, seed=3)

    def norm(l2):
        p = fit_rasch(log, IrtConfig(l2_prior=l2))
        # compare in the fitted gauge: the norm at the regularized optimum, before recentering
        t = np.array(list(p.theta.values()))
        bb = np.array(list(p.b.values()))
        shift = -(t.sum() + bb.sum()) / (len(t) + len(bb))
        return float(((t + shift) ** 2).sum() + ((bb + shift) ** 2).sum())

    for l2 in (0.05, 0.1, 0.4, 1.0):
        assert norm(2 * l2) <= norm(l2) + 1e-9


def test_fit_is_deterministic():
    log, _ = planted_rasch_log(20, 10, seed=4)
    assert fit_rasch(log).theta == fit_rasch(log).theta


def test_fit_ability_with_frozen_difficulties():
    b = {"q1": -1.0, "q2": 0.0, "q3": 1.0}
    strong = fit_ability([("q1", 1), ("q2", 1), ("q3", 1)], b)
    weak = fit_ability([("q1", 0), ("q2", 0), ("q3", 0)], b)
    assert weak < 0 < strong and math.isfinite(strong)
    assert fit_ability([], b) == 0.0
    assert fit_ability([("unknown", 1)], b) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        IrtConfig(tol=0)
    with pytest.raises(ValueError):
        IrtConfig(max_iters=0)


def test_params_round_trip():
    log, _ = planted_rasch_log(10, 8, seed=5)
    p = fit_rasch(log)
    buf = io.StringIO()
    dump_params(p, buf, meta={"seed": 0})
    back = load_params(buf.getvalue().splitlines())
    assert back.theta == p.theta and back.b == p.b and back.fit_report.iterations == p.fit_report.iterations


def test_non_finite_params_rejected():
    with pytest.raises(ValueError):
        IrtParams({"s": float("inf")}, {})
