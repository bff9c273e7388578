import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prednet import autograd as ag
from prednet import kernels as K
from prednet.autograd import Tensor
from prednet.core import PredNet, PredNetConfig
from prednet.errors import ConfigError, ContractError, DimensionError
from prednet.plus import (
    ClassifierConfig,
    PredNetPlus,
    aggregate_logits,
    axis_groups,
    class_loss,
    multitask_loss,
    sequence_label,
    time_weights,
    topk_hits,
)

CORE = PredNetConfig(num_layers=3, a_channels=(1, 2, 4), r_channels=(2, 4, 4), input_size=(16, 16))
SMALL_HEAD = dict(encoder_channels=(3, 3), decoder_channels=3, feedback_channels=2)


def plus_model(seed=0, **kw):
    return PredNetPlus(CORE, ClassifierConfig(**{**SMALL_HEAD, **kw}), seed)


def test_classifier_config_validation():
    with pytest.raises(ConfigError):
        ClassifierConfig(beta=0, gamma=0)
    with pytest.raises(ConfigError):
        ClassifierConfig(alpha=-1)
    with pytest.raises(ConfigError):
        ClassifierConfig(group_map=(0, 1))
    with pytest.raises(ConfigError):
        ClassifierConfig(head="transformer")
    with pytest.raises(ConfigError):
        PredNetPlus(PredNetConfig(num_layers=1, a_channels=(1,), r_channels=(2,), input_size=(4, 4)), ClassifierConfig())


def test_axis_groups_pair_opposites():
    assert axis_groups(8) == (0, 1, 2, 3, 0, 1, 2, 3)


def test_time_weights():
    np.testing.assert_allclose(time_weights(0.0, 5), np.full(5, 0.2))
    w = time_weights(2.0, 10)
    assert w.sum() == pytest.approx(1.0) and np.all(np.diff(w) > 0)
    assert w[-1] / w[-2] == pytest.approx(math.exp(2.0 / 10))
    with pytest.raises(ContractError):
        time_weights(1.0, 0)


def test_aggregate_alpha_zero_is_softmax_of_mean(rng):
    logits = [Tensor(rng.normal(size=8)) for _ in range(4)]
    mean = np.mean([l.data.astype(np.float64) for l in logits], axis=0)
    np.testing.assert_allclose(aggregate_logits(logits, 0.0).data, K.softmax(Tensor(mean)).data, rtol=1e-6)


@given(arrays(np.float64, 8, elements=st.floats(-5, 5)), st.floats(0, 50), st.integers(1, 12))
def test_aggregate_constant_logits_ignores_alpha(z, alpha, T):
    out = aggregate_logits([Tensor(z)] * T, alpha, T).data
    np.testing.assert_allclose(out, K.softmax(Tensor(z)).data, rtol=1e-5, atol=1e-7)


def test_aggregate_large_alpha_tracks_last_frame(rng):
    logits = [Tensor(rng.normal(size=8)) for _ in range(5)]
    np.testing.assert_allclose(aggregate_logits(logits, 400.0).data, K.softmax(logits[-1]).data, atol=1e-6)
    with pytest.raises(ContractError):
        aggregate_logits(logits, 1.0, T=4)


@given(arrays(np.float64, (3, 2, 8), elements=st.floats(-30, 30)), st.floats(0, 10))
def test_aggregate_is_a_distribution(z, alpha):
    probs = aggregate_logits([Tensor(z[t]) for t in range(3)], alpha).data
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(probs >= 0)


def test_multitask_gamma_zero_is_scaled_frame_loss():
    cfg = ClassifierConfig(beta=0.7, gamma=0.0)
    frame = Tensor(0.3)
    probs = np.full(8, 1 / 8)
    assert multitask_loss(frame, probs, 2, cfg).item() == pytest.approx(0.3 * 0.7, rel=1e-7)


def test_class_loss_perfect_prediction_is_zero():
    probs = np.eye(8)[5]
    lp = Tensor(np.where(probs > 0, 0.0, -50.0))
    assert class_loss(lp, probs, 5, ClassifierConfig()).item() == 0.0


def test_class_loss_group_example_values():
    cfg = ClassifierConfig(group_map=axis_groups(8))
    lp = np.full(8, -5.0)
    lp[1] = -1.0  # p[label] = e^-1
    probs = np.zeros(8)
    probs[2] = 1.0  # the model's top-1 class sits in another group
    assert class_loss(Tensor(lp), probs, 1, cfg).item() == pytest.approx(2.0)
    probs = np.zeros(8)
    probs[5] = 1.0  # same axis group as the label: no penalty
    assert class_loss(Tensor(lp), probs, 1, cfg).item() == pytest.approx(1.0)


def test_class_loss_label_errors():
    lp, probs = Tensor(np.zeros((2, 8))), np.full((2, 8), 1 / 8)
    for bad in ([0], [0, 8], [-1, 0], [0.5, 1.0]):
        with pytest.raises(ContractError):
            class_loss(lp, probs, np.asarray(bad), ClassifierConfig())
    with pytest.raises(DimensionError):
        class_loss(Tensor(np.zeros((2, 5))), np.full((2, 5), 0.2), [0, 1], ClassifierConfig())


def test_zero_weights_give_zero_logits(rng):
    model = plus_model()
    for name, p in model.params.items():
        if name.startswith("cls."):
            p.data = np.zeros_like(p.data)
    state = None
    for _ in range(3):
        logits, state, _ = model.classify_step(Tensor(rng.random((2, 4, 4, 4))), state)
        assert logits.shape == (2, 8) and not logits.data.any()


def test_logits_converge_for_constant_input(rng):
    model = plus_model(1)
    R = Tensor(rng.random((1, 4, 4, 4)))
    state, history = None, []
    with ag.no_grad():
        for _ in range(20):
            logits, state, _ = model.classify_step(R, state)
            history.append(logits.data.astype(np.float64))
    steps = [np.abs(history[i + 1] - history[i]).max() for i in range(19)]
    assert steps[-1] < 1e-3 and steps[-1] < steps[0]


def test_classify_step_shape_error():
    model = plus_model()
    with pytest.raises(DimensionError):
        model.classify_step(Tensor(np.zeros((1, 3, 4, 4))))
    with pytest.raises(DimensionError):
        model.decode_feedback(Tensor(np.zeros((1, 3, 2, 2))))


def test_classify_step_gradient():
    rng = np.random.default_rng(4)
    with ag.precision(np.float64):
        model = plus_model(2)
        names = sorted(n for n in model.params if n.startswith("cls."))
        R = [Tensor(rng.random((2, 4, 4, 4)), requires_grad=True) for _ in range(2)]

        def f(*args):
            for n, w in zip(names, args):
                model.params[n] = w
            state, total = None, None
            for r in args[len(names) :]:
                logits, state, _ = model.classify_step(r, state)
                term = ag.sum(ag.tanh(logits))
                total = term if total is None else total + term
            return total

        err = ag.grad_check(f, [model.params[n] for n in names] + R, eps=1e-6)
    assert err < 1e-3


@pytest.mark.parametrize("layers", [2, 3, 4])
def test_feedback_matches_second_top_layer(layers):
    cfg = PredNetConfig(num_layers=layers, a_channels=(1,) + (2,) * (layers - 1), r_channels=(2,) * layers, input_size=(16, 16))
    model = PredNetPlus(cfg, ClassifierConfig(**SMALL_HEAD))
    trace = model.rollout(np.random.default_rng(0).random((2, 1, 16, 16)))
    R = trace.states[0][layers - 2].R
    for fb in model.class_trace(trace).feedback_maps:
        assert fb.shape == (1, 2) + R.shape[2:]


def test_zero_features_give_zero_feedback():
    model = plus_model()
    assert not model.decode_feedback(Tensor(np.zeros((2, 3, 4, 4)))).data.any()


def test_zero_decoder_plus_matches_vanilla_forward(rng):
    vanilla, plus = PredNet(CORE, 3), plus_model(3)
    plus.zero_decoder()
    seq = rng.random((2, 5, 1, 16, 16))
    np.testing.assert_array_equal(vanilla.rollout(seq).prediction_array(), plus.rollout(seq).prediction_array())


def test_class_trace_probabilities(rng):
    model = plus_model()
    ct = model.class_trace(model.rollout(rng.random((3, 4, 1, 16, 16))))
    assert len(ct.per_t_logits) == 4
    np.testing.assert_allclose(ct.aggregate_probs.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(ct.aggregate_probs.data > 0)


def class_grads(model, seq, labels, gamma):
    model.classifier.gamma = gamma
    for p in model.parameters():
        p.grad = None
    ag.backward(model.loss(model.rollout(seq), labels), model.parameters())
    return {n: p.grad.astype(np.float64).copy() for n, p in model.params.items()}


def test_class_loss_gradient_reaches_r_units(rng):
    model = plus_model()
    seq, labels = rng.random((2, 4, 1, 16, 16)), np.array([1, 6])
    g = class_grads(model, seq, labels, 1.0)
    f = class_grads(model, seq, labels, 0.0)
    diff = sum(np.linalg.norm(g[n] - f[n]) for n in g if ".R." in n)
    assert diff > 0


def test_class_gradient_scales_with_gamma(rng):
    model = plus_model(5)
    seq, labels = rng.random((2, 4, 1, 16, 16)), np.array([0, 3])
    frame_only = class_grads(model, seq, labels, 0.0)
    norms = []
    for gamma in (0.5, 1.0, 2.0):
        g = class_grads(model, seq, labels, gamma)
        norms.append(np.sqrt(sum(np.sum((g[n] - frame_only[n]) ** 2) for n in g if ".R." in n)))
    assert norms[0] <= norms[1] <= norms[2]
    assert norms[1] / norms[0] == pytest.approx(2.0, rel=1e-3)
    assert norms[2] / norms[1] == pytest.approx(2.0, rel=1e-3)


def test_superset_gradients_match_vanilla(rng):
    vanilla = PredNet(CORE, 7)
    plus = plus_model(7, gamma=0.0)
    plus.zero_decoder()
    seq, labels = rng.random((2, 4, 1, 16, 16)), np.array([2, 5])
    ag.backward(vanilla.loss(vanilla.rollout(seq)), vanilla.parameters())
    ag.backward(plus.loss(plus.rollout(seq), labels), plus.parameters())
    for name, p in vanilla.params.items():
        q = plus.params[name]
        if q.shape == p.shape:
            assert np.array_equal(p.grad, q.grad), name
        else:  # feedback input columns were appended to R_{L-2}'s gate weights
            assert np.array_equal(p.grad, q.grad[:, : p.shape[1]]), name
    for name, q in plus.params.items():
        if name not in vanilla.params:
            assert not q.grad.any(), name


def test_conv_head_variant(rng):
    model = plus_model(head="conv")
    assert "cls.enc0.W" in model.params and "cls.enc0.W_i" not in model.params
    trace = model.rollout(rng.random((2, 3, 1, 16, 16)))
    assert model.class_trace(trace).aggregate_probs.shape == (2, 8)


@settings(max_examples=20)
@given(arrays(np.float64, (4, 8), elements=st.floats(0.01, 1)), st.integers(1, 8))
def test_top5_at_least_top1(p, k):
    p = p / p.sum(axis=1, keepdims=True)
    labels = np.arange(4) % 8
    assert np.all(topk_hits(p, labels, 5) >= topk_hits(p, labels, 1))
    assert topk_hits(p, labels, 8).all()


def test_sequence_label_is_final_direction():
    assert sequence_label([3, 3, 7, 7]) == 7
