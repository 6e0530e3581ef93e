import numpy as np
import pytest

from yopo.adversary import AdversaryConfig, PerturbationBall
from yopo.dataio import synth_gaussians
from yopo.dynsys import NetworkSpec, Params, init_params
from yopo.errors import UsageError
from yopo.hamiltonian import grad_theta, sweep
from yopo.numerics import make_rng
from yopo.trainer import (EpochSampler, EvalConfig, TrainConfig, evaluate, init_state, robust_loss_estimate,
                          sample_batch, targets_for, train, train_step)


def _data(seed=0, S=40):
    rng = make_rng(seed, "data")
    return rng.uniform(size=(S, 4)), rng.integers(0, 3, size=S)


def test_train_config_round_trip_and_validation():
    cfg = TrainConfig(batch_size=8, steps=3, adversary=AdversaryConfig(2, 3, 0.01), ball=PerturbationBall("l2", 0.5))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(UsageError):
        TrainConfig(batch_size=0)
    with pytest.raises(UsageError):
        TrainConfig(gamma_rule="cosine")
    with pytest.raises(UsageError):
        TrainConfig.from_dict({"lr": 0.1})


def test_gamma_zero_leaves_params_unchanged(small_tanh):
    spec, params = small_tanh
    x, y = _data()
    st = init_state(spec, params.copy(), TrainConfig(batch_size=5, gamma=0.0, adversary=AdversaryConfig(2, 2)), len(x))
    rec = train_step(st, x, y)
    assert np.array_equal(st.params.flat(), params.flat())
    assert rec.step == 1 and np.isfinite(rec.robust_loss) and rec.grad_norm > 0


def test_zero_radius_step_is_plain_sgd(small_tanh):
    spec, params = small_tanh
    x, y = _data(1)
    cfg = TrainConfig(batch_size=5, gamma=0.3, adversary=AdversaryConfig(1, 1), ball=PerturbationBall("linf", 0.0))
    st = init_state(spec, params.copy(), cfg, len(x))
    idx = EpochSampler(len(x), 5, cfg.seed).next_batch()
    train_step(st, x, y)
    traj, co = sweep(spec, params, x[idx], None, y[idx], scale=5)
    expected = params.flat() - 0.3 * grad_theta(spec, params, traj, co).flat()
    assert np.array_equal(st.params.flat(), expected)


def test_two_sample_update_matches_hand_computation():
    # one linear layer, quadratic loss, eps = 0: grad_W = mean_i (W x_i + b - y_i) x_i^T
    spec = NetworkSpec((2, 1), "linear", "quadratic")
    params = Params([np.array([[1.0, 2.0]])], [np.array([0.5])])
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([[1.0], [1.0]])
    cfg = TrainConfig(batch_size=2, gamma=0.5, ball=PerturbationBall("linf", 0.0))
    st = init_state(spec, params, cfg, 2)
    train_step(st, x, y)
    # residuals: 1.5 - 1 = 0.5 and 2.5 - 1 = 1.5; grad_W = [(0.5, 0) + (0, 1.5)] / 2, grad_b = 1
    assert np.allclose(st.params.weights[0], [[1.0 - 0.5 * 0.25, 2.0 - 0.5 * 0.75]], rtol=0, atol=1e-15)
    assert np.allclose(st.params.biases[0], [0.5 - 0.5 * 1.0], rtol=0, atol=1e-15)


def test_backprops_per_step_is_batch_times_m(small_tanh):
    spec, params = small_tanh
    x, y = _data(2)
    st = init_state(spec, params, TrainConfig(batch_size=4, adversary=AdversaryConfig(3, 5)), len(x))
    recs = train(st, x, y, 3)
    assert [r.backprops for r in recs] == [12, 12, 12]
    assert st.backprops == 36


def test_training_is_bitwise_reproducible(small_tanh):
    spec, params = small_tanh
    x, y = _data(3)
    cfg = TrainConfig(batch_size=6, gamma=0.2, adversary=AdversaryConfig(2, 3), seed=11)
    runs = []
    for _ in range(2):
        st = init_state(spec, params.copy(), cfg, len(x))
        recs = train(st, x, y, 15)
        runs.append((st.params.flat(), [r.astuple()[:-1] for r in recs]))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_sampler_full_batch_is_permutation():
    s = EpochSampler(10, 10, 0)
    assert sorted(s.next_batch().tolist()) == list(range(10))


def test_sampler_reproducible_and_drops_partial_batch():
    a, b = EpochSampler(7, 3, 5), EpochSampler(7, 3, 5)
    seq_a = [a.next_batch().tolist() for _ in range(6)]
    assert seq_a == [b.next_batch().tolist() for _ in range(6)]
    # 7 items, batch 3: two batches per epoch, then reshuffle
    assert a.epoch == 2 and a.batches_per_epoch == 2
    assert len(set(seq_a[0]) | set(seq_a[1])) == 6


def test_sampler_rejects_oversized_batch():
    with pytest.raises(UsageError):
        EpochSampler(3, 4, 0)
    with pytest.raises(UsageError):
        sample_batch(make_rng(0), 3, 4)


def test_sampler_frequency_statistics():
    # 10 items, B = 2, 10^4 epochs: index i lands in batch position k with probability 1/5
    s = EpochSampler(10, 2, 2024)
    counts = np.zeros((10, 5))
    for _ in range(10_000):
        for k in range(5):
            counts[s.next_batch(), k] += 1
    sigma = np.sqrt(10_000 * 0.2 * 0.8)
    assert np.all(np.abs(counts - 2000) <= 3 * sigma)


def test_sample_batch_distinct():
    idx = sample_batch(make_rng(0, "sb"), 20, 7)
    assert len(set(idx.tolist())) == 7


def test_targets_for_one_hot():
    spec = NetworkSpec((2, 3), "tanh", "quadratic")
    assert np.array_equal(targets_for(spec, np.array([2, 0])), [[0, 0, 1], [1, 0, 0]])
    ce = NetworkSpec((2, 3), "tanh")
    assert np.array_equal(targets_for(ce, np.array([2, 0])), [2, 0])


def test_eval_zero_radius_robust_equals_clean(small_tanh):
    spec, params = small_tanh
    x, y = _data(4)
    ev = evaluate(spec, params, x, y, PerturbationBall("linf", 0.0))
    assert ev.robust_acc == ev.clean_acc
    assert ev.robust_loss == ev.clean_loss


def test_eval_robust_never_exceeds_clean(small_tanh):
    spec, params = small_tanh
    x, y = _data(5, S=60)
    ev = evaluate(spec, params, x, y, PerturbationBall("linf", 0.3), EvalConfig(steps=10, chunk=16))
    assert ev.robust_acc <= ev.clean_acc
    assert ev.robust_loss >= ev.clean_loss - 1e-12


def test_separable_data_with_analytic_linear_model_is_fully_robust():
    # points near (0.9, 0.1) and (0.1, 0.9); logit gap 2 (x0 - x1) >= 2 * 0.6, an l-inf step of 0.1 moves it by <= 0.4
    rng = make_rng(6, "sep")
    labels = np.arange(40) % 2
    base = np.where(labels[:, None] == 0, [0.9, 0.1], [0.1, 0.9])
    x = np.clip(base + rng.uniform(-0.1, 0.1, size=base.shape), 0, 1)
    spec = NetworkSpec((2, 2), "linear")
    params = Params([np.array([[1.0, -1.0], [-1.0, 1.0]])], [np.zeros(2)])
    ev = evaluate(spec, params, x, labels, PerturbationBall("linf", 0.1))
    assert ev.clean_acc == 1.0 and ev.robust_acc == 1.0


def test_smoke_convergence_on_synthetic_task():
    spec = NetworkSpec((10, 16, 2), ("tanh", "linear"))
    ball = PerturbationBall("linf", 0.05)
    before, after = [], []
    for seed in range(5):
        ds = synth_gaussians(make_rng(seed, "synth"), 400, 10, 2, 4.0)
        cfg = TrainConfig(batch_size=20, gamma=0.5, adversary=AdversaryConfig(2, 3, step_rule="normalized"),
                          ball=ball, seed=seed)
        st = init_state(spec, init_params(spec, make_rng(seed, "init")), cfg, len(ds))
        before.append(robust_loss_estimate(spec, st.params, ds.inputs, ds.labels, ball))
        train(st, ds.inputs, ds.labels, 200)
        after.append(robust_loss_estimate(spec, st.params, ds.inputs, ds.labels, ball))
    assert np.mean(after) < np.mean(before)


def test_unresolved_gamma_is_usage_error(small_tanh):
    spec, params = small_tanh
    x, y = _data()
    st = init_state(spec, params, TrainConfig(batch_size=4, gamma_rule="theory"), len(x))
    with pytest.raises(UsageError):
        train_step(st, x, y)
