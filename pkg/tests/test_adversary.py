import numpy as np
import pytest

from yopo.adversary import (AdversaryConfig, PerturbationBall, ascent_step, pgd_attack, pgd_config, project,
                            with_alpha, yopo_attack)
from yopo.diagnostics import default_concave_instance
from yopo.errors import UsageError
from yopo.hamiltonian import grad_eta, sweep
from yopo.numerics import make_rng


def test_linf_projection_clips():
    b = PerturbationBall("linf", 0.1)
    assert np.array_equal(project(b, [0.5, -0.05, -0.2]), [0.1, -0.05, -0.1])


def test_l2_projection_rescales_rows():
    b = PerturbationBall("l2", 1.0)
    v = np.array([[3.0, 4.0], [0.3, 0.4], [0.0, 0.0]])
    out = b.project(v)
    assert np.allclose(out[0], [0.6, 0.8], rtol=0, atol=1e-15)
    assert np.array_equal(out[1], v[1]) and np.array_equal(out[2], v[2])


def test_ball_validation_and_diameter():
    with pytest.raises(UsageError):
        PerturbationBall("l1", 0.1)
    with pytest.raises(UsageError):
        PerturbationBall("linf", -1.0)
    assert PerturbationBall("linf", 0.1).diameter(4) == pytest.approx(0.4)
    assert PerturbationBall("l2", 0.1).diameter(4) == pytest.approx(0.2)


@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_samples_lie_in_ball(norm):
    b = PerturbationBall(norm, 0.3)
    s = b.sample(make_rng(0, norm), (500, 5))
    assert b.contains(s)


def test_config_defaults_and_validation():
    cfg = AdversaryConfig(m=2, n=5)
    assert cfg.step_size(PerturbationBall("linf", 0.1)) == pytest.approx(0.1 / 20)
    assert with_alpha(cfg, 0.3).step_size(PerturbationBall()) == 0.3
    assert AdversaryConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"m": 0}, {"n": 0}, {"alpha": 0.0}, {"init": "gauss"}, {"selection": "best"}, {"step_rule": "adam"}):
        with pytest.raises(UsageError):
            AdversaryConfig(**bad)


def test_ascent_step_rules():
    b = PerturbationBall("linf", 1.0)
    eta = np.zeros(3)
    g = np.array([0.2, -0.4, 0.0])
    assert np.array_equal(ascent_step(b, eta, g, 0.5, "gradient"), [-0.1, 0.2, 0.0])
    assert np.array_equal(ascent_step(b, eta, g, 0.5, "normalized"), [-0.5, 0.5, 0.0])
    l2 = PerturbationBall("l2", 1.0)
    out = ascent_step(l2, eta, np.array([3.0, 4.0, 0.0]), 0.5, "normalized")
    assert np.allclose(out, [-0.3, -0.4, 0.0], rtol=0, atol=1e-15)


@pytest.mark.parametrize("rule", ["gradient", "normalized"])
def test_yopo_m1_is_pgd_bitwise(small_tanh, rule):
    spec, params = small_tanh
    x = make_rng(0, "x").uniform(size=(6, 4))
    y = np.arange(6) % 3
    ball = PerturbationBall("linf", 0.1)
    a = pgd_attack(spec, params, x, y, ball, 7, 0.02, init="uniform", rng=make_rng(1, "init"), step_rule=rule,
                   keep_iterates=True)
    b = yopo_attack(spec, params, x, y, ball, AdversaryConfig(7, 1, 0.02, "uniform", "last", rule),
                    rng=make_rng(1, "init"), keep_iterates=True)
    assert len(a.iterates) == len(b.iterates) == 8
    for u, v in zip(a.iterates, b.iterates):
        assert np.array_equal(u, v)
    assert a.backprops == b.backprops == 7


def test_pgd_config_helper():
    cfg = pgd_config(4, 0.01)
    assert (cfg.m, cfg.n, cfg.alpha) == (4, 1, 0.01)


def test_backprops_count_is_m(small_tanh):
    spec, params = small_tanh
    res = yopo_attack(spec, params, np.full(4, 0.5), 1, PerturbationBall(), AdversaryConfig(3, 4), rng=make_rng(0, "bp"))
    assert res.backprops == 3
    assert res.grad_norms.shape == (12,)


def test_frozen_inner_updates_use_p1_of_block_start(small_tanh):
    spec, params = small_tanh
    x0 = np.full(4, 0.3)
    ball = PerturbationBall("linf", 0.2)
    cfg = AdversaryConfig(1, 3, 0.01, "zero")
    res = yopo_attack(spec, params, x0, 2, ball, cfg, keep_iterates=True)
    _, co = sweep(spec, params, x0, np.zeros(4), 2)
    eta = np.zeros(4)
    for k in range(3):
        eta = ball.project(eta - 0.01 * grad_eta(spec, params, x0, eta, co.p1))
        assert np.array_equal(eta, res.iterates[k + 1])


def test_instrumented_zeros_at_block_start(small_tanh):
    spec, params = small_tanh
    res = yopo_attack(spec, params, np.full(4, 0.5), 0, PerturbationBall("linf", 0.1), AdversaryConfig(3, 4, 0.01, "zero"),
                      instrument=True)
    assert res.drift.shape == (3, 4) and res.oracle_error.shape == (3, 4)
    assert np.all(res.drift[:, 0] == 0.0) and np.all(res.oracle_error[:, 0] == 0.0)
    assert np.all(res.drift[:, 1:] > 0)
    assert res.backprops == 3


def test_min_grad_norm_selection_picks_smallest_fresh_norm(small_tanh):
    spec, params = small_tanh
    x0 = np.full(4, 0.5)
    ball = PerturbationBall("linf", 0.1)
    cfg = AdversaryConfig(2, 3, 0.01, "zero", "min_grad_norm")
    res = yopo_attack(spec, params, x0, 0, ball, cfg, keep_iterates=True)
    k = int(np.argmin(res.fresh_grad_norms.ravel()))
    assert np.array_equal(res.eta_hat, res.iterates[k + 1])


def test_zero_radius_keeps_eta_zero(small_tanh):
    spec, params = small_tanh
    res = yopo_attack(spec, params, np.full((2, 4), 0.5), np.array([0, 1]), PerturbationBall("linf", 0.0),
                      AdversaryConfig(2, 2, 0.1), rng=make_rng(0, "z"))
    assert np.all(res.eta_hat == 0.0)


def test_uniform_init_needs_rng(small_tanh):
    spec, params = small_tanh
    with pytest.raises(UsageError):
        yopo_attack(spec, params, np.zeros(4), 0, PerturbationBall(), AdversaryConfig(1, 1))


def test_iterates_stay_in_ball(small_tanh):
    spec, params = small_tanh
    ball = PerturbationBall("l2", 0.05)
    res = pgd_attack(spec, params, np.full(4, 0.5), 1, ball, 20, 1.0, keep_iterates=True)
    assert all(ball.contains(e) for e in res.iterates)


def test_pgd_reaches_interior_maximizer_of_concave_instance():
    spec, params, x0, y, ball, mu, L, eta_star = default_concave_instance()
    res = pgd_attack(spec, params, x0, y, ball, 200, 1.0 / L)
    assert np.allclose(res.eta_last, eta_star, atol=1e-10)
