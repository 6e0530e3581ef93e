import math

import numpy as np
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from yopo.adversary import PerturbationBall
from yopo.bounds import (BoundConstants, crossover_n, error_term, error_terms, optimal_n_condition,
                         second_difference_in_n, smoothness_L, training_bound_rhs)
from yopo.dataio import read_metrics, write_metrics
from yopo.trainer import MetricsRecord

finite = st.floats(-1e3, 1e3, allow_nan=False)
vecs = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite)
balls = st.builds(PerturbationBall, st.sampled_from(["linf", "l2"]), st.floats(0, 10))


@given(balls, vecs)
def test_projection_idempotent_and_contained(ball, v):
    p = ball.project(v)
    assert ball.contains(p)
    np.testing.assert_array_equal(ball.project(p), p)


@given(balls, vecs)
def test_projection_is_identity_inside_ball(ball, v):
    inside = ball.project(v) * 0.5
    np.testing.assert_array_equal(ball.project(inside), inside)


pos = lambda lo, hi: st.floats(lo, hi, allow_nan=False, allow_infinity=False)


@st.composite
def constants(draw):
    L = draw(pos(0.1, 100))
    mu = L * draw(pos(0.01, 0.99))
    return BoundConstants(K=draw(pos(0.1, 2)), T=draw(st.integers(1, 4)), mu=mu, L_eta_eta=L,
                          L_theta_eta=draw(pos(0.1, 10)), L_eta_theta=draw(pos(0.1, 10)),
                          L_theta_theta=draw(pos(0.1, 10)), sigma=draw(pos(0, 2)), D_X=draw(pos(0.1, 10)),
                          Delta=draw(pos(0.1, 5)), alpha=draw(pos(0.01, 0.99)) / L)


@given(constants(), st.integers(1, 30), st.integers(1, 30))
def test_error_decreases_in_m(c, m, n):
    first, second = error_terms(c, m, n)
    first_next, second_next = error_terms(c, m + 1, n)
    assume(first > 1e-250)
    assert first_next < first and second_next == second
    e, e_next = error_term(c, m, n), error_term(c, m + 1, n)
    assert e_next <= e
    if first - first_next > 2 * np.spacing(e):
        assert e_next < e


@given(constants(), st.integers(1, 30), st.integers(2, 60))
def test_error_convex_in_n(c, m, n):
    d2 = second_difference_in_n(c, m, n)
    assert d2 >= -1e-12 * max(error_term(c, m, n), 1e-300)


@given(constants(), st.integers(1, 30))
def test_n1_has_no_frozen_term(c, m):
    first, second = error_terms(c, m, 1)
    assert second == 0.0 and error_term(c, m, 1) == first


@given(constants(), st.integers(1, 20), st.integers(1, 40))
def test_alpha_sq_flag_scales_frozen_term(c, m, n):
    _, with_sq = error_terms(c, m, n)
    _, without = error_terms(c, m, n, include_alpha_sq=False)
    assert math.isclose(with_sq, without * c.alpha ** 2, rel_tol=1e-12, abs_tol=1e-300)


@given(constants(), st.integers(1, 12))
@settings(max_examples=60)
def test_crossover_matches_grid_argmin(c, m):
    n_star = crossover_n(c, m, n_max=400)
    assume(n_star < 400)
    errs = [error_term(c, m, n) for n in range(1, 402)]
    assert abs((1 + int(np.argmin(errs))) - n_star) <= 1
    if n_star > 1:
        assert optimal_n_condition(c, m, n_star - 1) > 0
    assert optimal_n_condition(c, m, n_star) <= 0


@given(constants(), st.integers(1, 10), st.integers(1, 10), st.integers(1, 10_000))
def test_training_rhs_decomposition(c, m, n, N):
    expect = 4 * c.sigma * math.sqrt(smoothness_L(c) * c.Delta / N) + 5 * c.L_theta_eta ** 2 / c.mu * error_term(c, m, n)
    assert math.isclose(training_bound_rhs(c, m, n, N), expect, rel_tol=1e-12)
    assert training_bound_rhs(c, m, n, N + 1) <= training_bound_rhs(c, m, n, N)


@given(constants())
def test_constants_round_trip(c):
    assert BoundConstants.from_dict(c.to_dict()) == c


any_float = st.floats(allow_nan=True, allow_infinity=True)
records = st.lists(st.builds(MetricsRecord, st.integers(0, 2 ** 40), any_float, any_float, any_float, any_float,
                             any_float, st.integers(0, 2 ** 40), any_float), max_size=8)


@given(records)
@settings(deadline=None)
def test_metrics_round_trip(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("m") / "metrics.csv"
    write_metrics(path, recs)
    back = read_metrics(path)
    norm = lambda r: tuple("nan" if isinstance(v, float) and math.isnan(v) else v for v in r.astuple())
    assert [norm(r) for r in back] == [norm(r) for r in recs]
    for a, b in zip(back, recs):
        for x, y in zip(a.astuple(), b.astuple()):
            if isinstance(y, float) and not math.isnan(y):
                assert math.copysign(1, x) == math.copysign(1, y)
