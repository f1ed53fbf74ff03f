import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import corenet.trainer as T
from corenet.datasets import synthetic_blobs
from corenet.moments import ExactMoments, feature_moments
from corenet.netspec import parse_network
from corenet.modelfile import model_bytes

from oracles import hysteresis_reference, scalar_forward, vote_scores

TOY = "input 8 8 1\nclasses 2\nT-8\nS-16\nP-16\nN-16\n"


# -- elementwise operations -----------------------------------------------------------

def test_weighted_sum_examples():
    assert T.weighted_sum(np.ones((3, 3, 8)), np.ones((3, 3, 8))) == 72
    assert T.weighted_sum(np.zeros((3, 3, 8)), np.ones((3, 3, 8))) == 0
    assert T.weighted_sum([1, 0, 1], [1, -1, -1]) == 0
    with pytest.raises(T.ShapeError):
        T.weighted_sum(np.ones(3), np.ones(4))


def test_batch_norm_examples():
    assert T.batch_norm(3.0, 3.0, 2.0, 0.0) == 0.0
    assert T.batch_norm(5.0, 3.0, 1.0, 0.5) == pytest.approx(2 / 1.0001 + 0.5, abs=1e-12)
    assert T.batch_norm(5.0, 3.0, 1.0, 0.5) == pytest.approx(2.49980, abs=1e-5)
    assert T.batch_norm(4.0, 4.0, 0.0, 0.7) == 0.7


def test_binary_activation_examples():
    assert T.binary_activation(0.0) == 1
    assert T.binary_activation(-1e-9) == 0
    assert T.binary_activation(7.3) == 1


def test_surrogate_examples():
    assert T.surrogate_derivative(0.0) == 1.0
    assert T.surrogate_derivative(0.25) == 0.75
    assert T.surrogate_derivative(-2.0) == 0.0


def test_project_weight_examples():
    for prev in (-1, 0, 1):
        assert T.project_weight(0.61, prev, 0.1) == 1
    assert T.project_weight(0.55, 0, 0.1) == 0
    assert T.project_weight(0.55, 1, 0.1) == 1
    assert T.project_weight(-0.35, -1, 0.1) == 0


@settings(max_examples=500, deadline=None)
@given(st.floats(-1, 1), st.sampled_from([-1, 0, 1]), st.floats(0, 0.49))
def test_project_weight_matches_reference(w, prev, h):
    q = T.project_weight(w, prev, h)
    assert q == hysteresis_reference(w, prev, h)
    assert T.project_weight(w, q, h) == q


@settings(max_examples=300, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.sampled_from([-1, 0, 1]), st.floats(0, 0.49))
def test_project_weight_monotone(a, b, prev, h):
    lo, hi = min(a, b), max(a, b)
    assert T.project_weight(lo, prev, h) <= T.project_weight(hi, prev, h)


def test_zero_hysteresis_is_plain_rounding():
    w = np.array([-1, -0.5, -0.49, 0, 0.49, 0.5, 1])
    for prev in (-1, 0, 1):
        assert T.project_weight(w, prev, 0.0).tolist() == [-1, -1, 0, 0, 0, 1, 1]


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([-0.5, 0.5]), st.floats(0.01, 0.3), st.sampled_from([-1, 0, 1]),
       st.lists(st.floats(-0.999, 0.999), min_size=1, max_size=20))
def test_hysteresis_no_chatter(centre, h, start, offsets):
    ws = [centre + 0.999 * h * o for o in offsets]
    q = T.project_weight(ws[0], start, h)
    for w in ws[1:]:
        assert T.project_weight(w, q, h) == q


def test_project_weight_vectorised(rng):
    w = rng.uniform(-1, 1, (50, 7))
    prev = rng.integers(-1, 2, (50, 7))
    out = T.project_weight(w, prev, 0.2)
    ref = np.vectorize(hysteresis_reference)(w, prev, 0.2)
    assert np.array_equal(out, ref)
    assert out.dtype == np.int8


def test_sparsity_penalty_examples():
    assert T.sparsity_penalty(np.zeros(5), 1e-4) == (0.0, pytest.approx(np.zeros(5)))
    c, g = T.sparsity_penalty([0.2], 1e-4)
    assert c == pytest.approx(2e-6) and g[0] == pytest.approx(2e-5)
    assert T.sparsity_penalty([0.5, 0.5], 1e-4)[0] == pytest.approx(2.5e-5)


def test_sparsity_gradient_finite_difference(rng):
    ybar = rng.random(6)
    _, g = T.sparsity_penalty(ybar, 0.37)
    h = 1e-6
    for f in range(6):
        up, dn = ybar.copy(), ybar.copy()
        up[f] += h
        dn[f] -= h
        fd = (T.sparsity_penalty(up, 0.37)[0] - T.sparsity_penalty(dn, 0.37)[0]) / (2 * h)
        assert abs(fd - g[f]) <= 1e-4 * abs(g[f])


# -- schedule and config --------------------------------------------------------------

def test_lr_schedule_two_drops():
    cfg = T.TrainConfig(lr=0.1, lr_drops=(10, 20), epochs=30)
    assert cfg.learning_rate(5) == pytest.approx(0.1)
    assert cfg.learning_rate(15) == pytest.approx(0.01)
    assert cfg.learning_rate(25) == pytest.approx(0.001)
    assert T.TrainConfig(lr=1, bias_lr=0.1, lr_drops=(1, 2)).bias_learning_rate(2) == \
        pytest.approx(0.001)


def test_config_validation_and_size_defaults():
    with pytest.raises(ValueError):
        T.TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        T.TrainConfig(hysteresis=0.5)
    small = T.TrainConfig.for_chips(0.5)
    assert small.weight_decay == 0 and small.gamma == 0
    big = T.TrainConfig.for_chips(4)
    assert big.weight_decay == 1e-7 and big.gamma == 1e-4
    assert T.TrainConfig().momentum == 0.9


def _one_param_model(w_h):
    net = parse_network("input 1 1 1\nclasses 1\nT-1\nN-1\n")
    model = T.init_model(net, 0)
    p = model.params[1]
    p.hidden_weights[:] = w_h
    p.trinary_weights = T.project_weight(p.hidden_weights, 0, 0.1)
    return model


def test_sgd_zero_gradient_keeps_weights():
    model = _one_param_model(0.3)
    g = T.Gradients({0: np.zeros((3, 3, 1, 1)), 1: np.zeros((1, 1, 1, 1))},
                    {0: np.zeros(1), 1: np.zeros(1)}, 0.0, 0.0)
    before = model.params[1].hidden_weights.copy()
    T.sgd_step(model, g, T.TrainConfig(weight_decay=0), 0)
    assert np.array_equal(model.params[1].hidden_weights, before)


def test_sgd_clips_hidden_weights():
    model = _one_param_model(0.95)
    cfg = T.TrainConfig(lr=1.0, momentum=0.9, weight_decay=0)
    g = T.Gradients({1: np.full((1, 1, 1, 1), -0.2)}, {1: np.zeros(1)}, 0.0, 0.0)
    T.sgd_step(model, g, cfg, 0)
    assert model.params[1].hidden_weights[0, 0, 0, 0] == 1.0
    assert model.params[1].trinary_weights[0, 0, 0, 0] == 1


def test_sgd_momentum_rule():
    model = _one_param_model(0.0)
    p = model.params[1]
    p.momentum[:] = 0.05
    cfg = T.TrainConfig(lr=0.5, momentum=0.9, weight_decay=0.1)
    g = T.Gradients({1: np.full((1, 1, 1, 1), 0.2)}, {1: np.zeros(1)}, 0.0, 0.0)
    T.sgd_step(model, g, cfg, 0)
    m = 0.9 * 0.05 - 0.5 * (0.2 + 0.1 * 0.0)
    assert p.momentum[0, 0, 0, 0] == pytest.approx(m)
    assert p.hidden_weights[0, 0, 0, 0] == pytest.approx(m)


# -- statistics -----------------------------------------------------------------------

def _transduction_stats(values):
    net = parse_network("input 1 1 1\nclasses 1\nT-1\nN-1\n")
    model = T.init_model(net, 0)
    model.params[0].hidden_weights[:] = 0
    model.params[0].hidden_weights[1, 1, 0, 0] = 1.0
    T.finalize_deploy_stats(model, np.array(values, float).reshape(-1, 1, 1, 1))
    return model.stats[0]


def test_deploy_stats_single_example():
    st_ = _transduction_stats([2.5])
    assert st_.mu[0] == 2.5 and st_.sigma[0] == 0.0 and st_.mode == "deploy"


def test_deploy_stats_population_deviation():
    st_ = _transduction_stats([2.0, 4.0])
    assert st_.mu[0] == 3.0 and st_.sigma[0] == 1.0


def test_deploy_stats_empty_set():
    net = parse_network("input 1 1 1\nclasses 1\nT-1\nN-1\n")
    with pytest.raises(ValueError):
        T.finalize_deploy_stats(T.init_model(net), np.zeros((0, 1, 1, 1)))


def test_deploy_stats_independent_of_chunking(rng):
    net = parse_network(TOY)
    x = rng.random((37, 8, 8, 1))
    a, b = T.init_model(net, 5), T.init_model(net, 5)
    T.finalize_deploy_stats(a, x, chunk=512)
    T.finalize_deploy_stats(b, x, chunk=5)
    for k in a.stats:
        assert np.array_equal(a.stats[k].mu, b.stats[k].mu)
        assert np.array_equal(a.stats[k].sigma, b.stats[k].sigma)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=40), st.integers(0, 9))
def test_exact_moments_order_independent(vals, seed):
    v = np.array(vals).reshape(-1, 1)
    perm = np.random.default_rng(seed).permutation(len(v))
    acc = ExactMoments(1)
    for part in np.array_split(v[perm], 3):
        acc.update(part)
    assert acc.result() == feature_moments(v)
    mu, sigma = feature_moments(v)
    assert mu[0] == pytest.approx(np.mean(v), rel=1e-12, abs=1e-9)
    assert sigma[0] == pytest.approx(np.std(v), rel=1e-9, abs=1e-6)


# -- forward --------------------------------------------------------------------------

def _deploy_model(text, seed=0, n=20):
    net = parse_network(text)
    model = T.init_model(net, seed)
    x = np.random.default_rng(seed).random((n, *net.shapes()[0]))
    T.finalize_deploy_stats(model, x)
    return model, x


def test_forward_matches_scalar_loops():
    model, x = _deploy_model("input 5 5 2\nclasses 2\nT-4\nS-8(2)\nP-8(2)\nN-4\n", seed=2)
    fwd = T.forward(model, x[:4], "deploy")
    ref = scalar_forward(model, x[:4])
    for k in range(len(model.net.layers)):
        if k == 0:  # real-valued sums: compare decisions away from float ties
            assert np.mean(fwd.activations[0] == ref[0]) > 0.999
        else:
            assert np.array_equal(fwd.activations[k], ref[k])
    assert np.array_equal(fwd.scores, vote_scores(model.net, fwd.activations[-1]))


def test_forward_all_zero_negative_bias():
    model, _ = _deploy_model(TOY)
    for p in model.params.values():
        p.bias[:] = -5.0
        p.hidden_weights[:] = 0.0
        if p.trinary_weights is not None:
            p.trinary_weights[:] = 0
    for st_ in model.stats.values():
        st_.mu[:] = 0.0
    fwd = T.forward(model, np.zeros((3, 8, 8, 1)), "deploy")
    assert all(a.sum() == 0 for a in fwd.activations)
    assert np.all(fwd.scores == 0) and np.all(fwd.predictions == 0)


def test_single_vote_decides():
    net = parse_network("input 2 2 1\nclasses 5\nT-5\nN-5\n")
    final = np.zeros((1, 2, 2, 5))
    final[0, 1, 0, 3] = 1
    scores = T.class_scores(net, final)
    assert scores.tolist() == [[0, 0, 0, 1, 0]]
    assert int(np.argmax(scores)) == 3


def test_forward_rejects_bad_shape_and_missing_stats():
    model, _ = _deploy_model(TOY)
    with pytest.raises(T.ShapeError):
        T.forward(model, np.zeros((1, 7, 8, 1)))
    raw = T.init_model(parse_network(TOY))
    with pytest.raises(ValueError, match="deploy"):
        T.forward(raw, np.zeros((1, 8, 8, 1)), "deploy")


def test_activations_binary_and_weights_trinary():
    model, x = _deploy_model(TOY)
    fwd = T.forward(model, x, "batch")
    for a in fwd.activations:
        assert set(np.unique(a)) <= {0.0, 1.0}
    for k, p in model.params.items():
        if k:
            assert set(np.unique(p.trinary_weights)) <= {-1, 0, 1}
        assert np.abs(p.hidden_weights).max() <= 1


def test_batch_and_deploy_agree_on_full_set(rng):
    net = parse_network(TOY)
    model = T.init_model(net, 9)
    x = rng.random((30, 8, 8, 1))
    T.finalize_deploy_stats(model, x)
    a = T.forward(model, x, "batch")
    b = T.forward(model, x, "deploy")
    for u, v in zip(a.activations, b.activations):
        assert np.array_equal(u, v)


def test_dropout_train_only_and_unscaled(rng):
    net = parse_network("input 4 4 1\nclasses 2\nT-8\nD rate=0.5\nN-8\n")
    model = T.init_model(net, 1)
    x = rng.random((10, 4, 4, 1))
    T.finalize_deploy_stats(model, x)
    y, cache = T.layer_forward(model, 1, np.ones((10, 4, 4, 8)), train=True, rng=rng)
    assert set(np.unique(y)) <= {0.0, 1.0} and 0 < y.mean() < 1
    y2, _ = T.layer_forward(model, 1, np.ones((10, 4, 4, 8)), train=False)
    assert np.all(y2 == 1)


# -- backward -------------------------------------------------------------------------

def test_zero_surrogate_region_blocks_gradient(rng):
    net = parse_network("input 4 4 1\nclasses 2\nT-4\nN-4\n")
    model = T.init_model(net, 0)
    model.params[1].bias[:] = 50.0  # |r| > 1 everywhere in the last layer
    x = rng.random((6, 4, 4, 1))
    fwd = T.forward(model, x, "batch")
    assert np.all(np.abs(fwd.caches[1].r) > 1)
    g = T.backward(model, fwd, rng.integers(0, 2, 6))
    assert np.all(g.weights[1] == 0) and np.all(g.weights[0] == 0)


def _smooth(r):
    r = np.asarray(r)
    return np.where(r < -1, 0, np.where(r < 0, (1 + r) ** 2 / 2,
                                        np.where(r < 1, 1 - (1 - r) ** 2 / 2, 1.0)))


def test_backward_matches_finite_differences_of_smoothed_net(monkeypatch, rng):
    """Replacing the step by its integral-of-surrogate makes the trainer's
    gradient the true gradient, which finite differences can then check."""
    orig = T.layer_forward

    def smooth_forward(model, k, x, mode="deploy", train=False, rng=None):
        y, c = orig(model, k, x, mode, train, rng)
        return (y if c.r is None else _smooth(c.r)), c

    def real_scores(net, final):
        return final.reshape(final.shape[0], -1) @ T.readout_matrix(net)

    monkeypatch.setattr(T, "layer_forward", smooth_forward)
    monkeypatch.setattr(T, "class_scores", real_scores)
    net = parse_network("input 4 4 2\nclasses 2\nT-3\nS-4\nP-4\nN-4\n")
    model = T.init_model(net, 1)
    for p in model.params.values():
        p.bias[:] = rng.normal(0, 0.3, p.bias.shape)
    x = rng.random((5, 4, 4, 2))
    lab = rng.integers(0, 2, 5)

    def loss():
        f = T.forward(model, x, "batch")
        return T.backward(model, f, lab, gamma=0.3, logit_scale=3.0)

    g = loss()
    h = 1e-6
    for k, p in model.params.items():
        w = p.weights.astype(float).copy()
        num = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            for sgn in (1, -1):
                w2 = w.copy()
                w2[idx] += sgn * h
                if p.trinary_weights is None:
                    p.hidden_weights = w2
                else:
                    p.trinary_weights = w2
                num[idx] += sgn * loss().loss / (2 * h)
        if p.trinary_weights is None:
            p.hidden_weights = w
        else:
            p.trinary_weights = w
        assert np.abs(num - g.weights[k]).max() <= 1e-5 * max(1.0, np.abs(num).max())
        nb = np.zeros_like(p.bias)
        b = p.bias.copy()
        for i in range(len(b)):
            for sgn in (1, -1):
                p.bias = b.copy()
                p.bias[i] += sgn * h
                nb[i] += sgn * loss().loss / (2 * h)
        p.bias = b
        assert np.abs(nb - g.bias[k]).max() <= 1e-5 * max(1.0, np.abs(nb).max())


def test_readout_matrix_read_only():
    m = T.readout_matrix(parse_network(TOY))
    with pytest.raises(ValueError):
        m[0, 0] = 5


# -- training -------------------------------------------------------------------------

def test_training_is_deterministic():
    net = parse_network(TOY)
    x, y = synthetic_blobs(80, seed=3)
    cfg = T.TrainConfig(lr=1, bias_lr=0.1, epochs=2, batch_size=16, logit_scale=10, seed=4)
    a, ra = T.train(net, x, y, cfg)
    b, rb = T.train(net, x, y, cfg)
    assert model_bytes(a) == model_bytes(b)
    assert [r.as_dict() for r in ra] == [r.as_dict() for r in rb]


def test_blobs_learned_quickly():
    net = parse_network(TOY)
    x, y = synthetic_blobs(600, seed=0)
    xt, yt = synthetic_blobs(300, seed=1)
    cfg = T.TrainConfig(lr=1, bias_lr=0.1, epochs=5, batch_size=16, logit_scale=10,
                        gamma=0, weight_decay=0, seed=0)
    model, recs = T.train(net, x, y, cfg, xt, yt)
    assert recs[-1].test_accuracy >= 0.95
    assert model.deployable
    assert all(np.abs(p.hidden_weights).max() <= 1 for k, p in model.params.items() if k)


def test_train_rejects_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.train(parse_network(TOY), np.zeros((4, 6, 6, 1)), np.zeros(4, int), T.TrainConfig())
