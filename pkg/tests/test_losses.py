"""Loss terms: closed forms, brute-force oracles, gradient checks, composition."""
import math

import numpy as np
import pytest

from fedl2t import (
    ContractError,
    GradBuffer,
    InputError,
    ModelParams,
    ModelSpec,
    adaptive_scale,
    backward,
    compose_P_loss,
    compose_T_loss,
    forward,
    init_model,
    kl_output,
    mse_features,
    proximal,
    task_ce,
)
from fedl2t.losses import EPS_DENOM, EPS_PROB

from test_nn import finite_diff_grad, grad_rel_err

SPEC = ModelSpec(input_dim=3, base_hidden=(4,), feature_dim=4)


def random_instance(rng, n=6):
    params = init_model(SPEC, rng)
    x = rng.normal(size=(n, 3))
    y = (rng.uniform(size=n) > 0.5).astype(int)
    return params, x, y


def param_grad_of(term, trace):
    """Flatten a LossTerm's student gradients through the network."""
    grads = backward(trace, term.d_logits, term.d_features, GradBuffer.zeros(SPEC))
    if term.d_params is not None:
        grads.values += term.d_params
    return grads.values


# ---------------------------------------------------------------------------
# task cross-entropy
# ---------------------------------------------------------------------------

def test_task_ce_closed_forms():
    params = ModelParams.zeros(SPEC)  # probs are [0.5, 0.5] everywhere
    trace = forward(params, np.zeros((1, 3)))
    term = task_ce(trace, np.array([1]))
    assert term.value == pytest.approx(math.log(2.0), abs=1e-12)

    # confident correct prediction: loss collapses to ~0
    rng = np.random.default_rng(0)
    strong = init_model(SPEC, rng)
    strong.values *= 50.0
    x = rng.normal(size=(4, 3))
    probs = forward(strong, x).probs
    labels = probs.argmax(axis=1)
    confident = probs[np.arange(4), labels] > 1.0 - 1e-9
    assert confident.any()
    value = task_ce(forward(strong, x), labels).value
    assert value < 0.1


def test_task_ce_matches_per_sample_loop():
    rng = np.random.default_rng(1)
    params, x, y = random_instance(rng, n=9)
    trace = forward(params, x)
    term = task_ce(trace, y)
    looped = 0.0
    for i in range(9):
        p = min(max(trace.probs[i, 1], EPS_PROB), 1.0 - EPS_PROB)
        looped += -(y[i] * math.log(p) + (1 - y[i]) * math.log(1.0 - p))
    assert term.value == pytest.approx(looped / 9, abs=1e-12)


def test_task_ce_rejects_bad_labels():
    trace = forward(ModelParams.zeros(SPEC), np.zeros((2, 3)))
    with pytest.raises(InputError):
        task_ce(trace, np.array([0, 2]))
    with pytest.raises(InputError):
        task_ce(trace, np.array([0]))


def test_task_ce_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(10):
        params, x, y = random_instance(rng)
        trace = forward(params, x)
        analytic = param_grad_of(task_ce(trace, y), trace)
        numeric = finite_diff_grad(lambda p: task_ce(forward(p, x), y).value, params)
        assert grad_rel_err(analytic, numeric) <= 1e-4


# ---------------------------------------------------------------------------
# output-level KL distillation
# ---------------------------------------------------------------------------

def test_kl_identity_and_closed_form():
    rng = np.random.default_rng(3)
    params, x, _ = random_instance(rng)
    trace = forward(params, x)
    assert kl_output(trace.probs.copy(), trace).value == pytest.approx(0.0, abs=1e-12)

    zeros = forward(ModelParams.zeros(SPEC), np.zeros((1, 3)))  # student [0.5, 0.5]
    term = kl_output(np.array([[1.0, 0.0]]), zeros)
    assert term.value == pytest.approx(math.log(2.0), abs=1e-12)


def test_kl_matches_direct_summation_and_nonnegative():
    rng = np.random.default_rng(4)
    for _ in range(25):
        params, x, _ = random_instance(rng, n=5)
        trace = forward(params, x)
        t_logits = rng.normal(size=(5, 2)) * 2.0
        e = np.exp(t_logits - t_logits.max(axis=1, keepdims=True))
        teacher = e / e.sum(axis=1, keepdims=True)
        term = kl_output(teacher, trace)
        direct = 0.0
        for i in range(5):
            for c in range(2):
                t = teacher[i, c]
                if t > 0:
                    direct += t * (math.log(t) - math.log(max(trace.probs[i, c], EPS_PROB)))
        assert term.value >= 0.0
        assert term.value == pytest.approx(direct / 5, abs=1e-12)


def test_kl_asymmetric_and_validates_teacher():
    rng = np.random.default_rng(5)
    params, x, _ = random_instance(rng, n=4)
    other = init_model(SPEC, rng)
    trace_a, trace_b = forward(params, x), forward(other, x)
    ab = kl_output(trace_a.probs, trace_b).value
    ba = kl_output(trace_b.probs, trace_a).value
    assert ab != pytest.approx(ba, abs=1e-9)

    with pytest.raises(InputError):
        kl_output(np.array([[0.5, 0.6]] * 4), trace_a)  # rows sum to 1.1
    with pytest.raises(InputError):
        kl_output(np.array([[-0.1, 1.1]] * 4), trace_a)  # negative entry
    with pytest.raises(InputError):
        kl_output(np.full((3, 2), 0.5), trace_a)  # batch mismatch


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    for _ in range(10):
        params, x, _ = random_instance(rng)
        teacher = forward(init_model(SPEC, rng), x).probs  # frozen constant
        trace = forward(params, x)
        analytic = param_grad_of(kl_output(teacher, trace), trace)
        numeric = finite_diff_grad(lambda p: kl_output(teacher, forward(p, x)).value, params)
        assert grad_rel_err(analytic, numeric) <= 1e-4


# ---------------------------------------------------------------------------
# feature-level MSE distillation
# ---------------------------------------------------------------------------

def test_mse_features_cases():
    rng = np.random.default_rng(7)
    params, x, _ = random_instance(rng)
    trace = forward(params, x)
    assert mse_features(trace.features.copy(), trace).value == 0.0

    # one sample, two feature dims, teacher [1, 1] vs student [0, 0] -> 1.0
    tiny_spec = ModelSpec(input_dim=2, base_hidden=(2,), feature_dim=2)
    tiny = forward(ModelParams.zeros(tiny_spec), np.zeros((1, 2)))
    assert mse_features(np.array([[1.0, 1.0]]), tiny).value == pytest.approx(1.0, abs=1e-15)

    with pytest.raises(InputError):
        mse_features(np.zeros((6, 5)), trace)


def test_mse_matches_element_loop():
    rng = np.random.default_rng(8)
    params, x, _ = random_instance(rng, n=5)
    trace = forward(params, x)
    teacher = rng.normal(size=trace.features.shape)
    term = mse_features(teacher, trace)
    looped = 0.0
    for i in range(5):
        for j in range(SPEC.feature_dim):
            looped += (trace.features[i, j] - teacher[i, j]) ** 2
    assert term.value == pytest.approx(looped / (5 * SPEC.feature_dim), abs=1e-12)


def test_mse_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    for _ in range(10):
        params, x, _ = random_instance(rng)
        teacher = forward(init_model(SPEC, rng), x).features
        trace = forward(params, x)
        analytic = param_grad_of(mse_features(teacher, trace), trace)
        numeric = finite_diff_grad(lambda p: mse_features(teacher, forward(p, x)).value, params)
        assert grad_rel_err(analytic, numeric) <= 1e-4


# ---------------------------------------------------------------------------
# adaptive scaling
# ---------------------------------------------------------------------------

def test_adaptive_scale_arithmetic_and_guard():
    rng = np.random.default_rng(10)
    params, x, _ = random_instance(rng)
    trace = forward(params, x)
    raw = kl_output(forward(init_model(SPEC, rng), x).probs, trace)

    scaled = adaptive_scale(raw, 0.5, 0.5)
    assert scaled.value == pytest.approx(raw.value / (1.0 + EPS_DENOM), rel=1e-12)
    np.testing.assert_allclose(scaled.d_logits, raw.d_logits / (1.0 + EPS_DENOM), rtol=1e-12)

    guarded = adaptive_scale(raw, 0.0, 0.0)
    assert math.isfinite(guarded.value)
    assert guarded.value == pytest.approx(raw.value / EPS_DENOM, rel=1e-12)


def test_adaptive_scale_strictly_decreasing_in_task_losses():
    rng = np.random.default_rng(11)
    params, x, _ = random_instance(rng)
    trace = forward(params, x)
    raw = mse_features(rng.normal(size=trace.features.shape), trace)
    for _ in range(200):
        a = rng.uniform(0.0, 3.0)
        b = rng.uniform(0.0, 3.0)
        bump = rng.uniform(1e-6, 2.0)
        assert adaptive_scale(raw, a + bump, b).value < adaptive_scale(raw, a, b).value


# ---------------------------------------------------------------------------
# proximal
# ---------------------------------------------------------------------------

def test_proximal_cases():
    rng = np.random.default_rng(12)
    p = init_model(SPEC, rng)
    identical = proximal(p, p.copy(), mu=0.3)
    assert identical.value == 0.0
    assert not identical.d_params.any()

    spec1 = ModelSpec(input_dim=1, base_hidden=(1,), feature_dim=1)
    a = ModelParams(spec1, np.array([1.0, -1.0, 0.0, 0.0, 0.0, 0.0]))
    b = ModelParams.zeros(spec1)
    term = proximal(a, b, mu=0.2)
    assert term.value == pytest.approx(0.2, abs=1e-15)
    np.testing.assert_allclose(term.d_params[:2], [0.2, -0.2])

    with pytest.raises(ContractError):
        proximal(a, ModelParams.zeros(SPEC), mu=0.2)
    with pytest.raises(InputError):
        proximal(a, b, mu=-0.1)


def test_proximal_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    p = init_model(SPEC, rng)
    anchor = init_model(SPEC, rng)
    analytic = proximal(p, anchor, mu=0.4).d_params
    numeric = finite_diff_grad(lambda q: proximal(q, anchor, mu=0.4).value, p)
    assert grad_rel_err(analytic, numeric) <= 1e-4


# ---------------------------------------------------------------------------
# composed totals
# ---------------------------------------------------------------------------

def _mutual_terms(rng, n=6):
    """One batch of both-model traces plus all composed-loss ingredients."""
    p_params, x, y = random_instance(rng, n=n)
    t_params = init_model(SPEC, rng)
    trace_p, trace_t = forward(p_params, x), forward(t_params, x)
    task_p, task_t = task_ce(trace_p, y), task_ce(trace_t, y)
    kl_to_t = adaptive_scale(kl_output(trace_p.probs, trace_t), task_p.value, task_t.value)
    kl_to_p = adaptive_scale(kl_output(trace_t.probs, trace_p), task_t.value, task_p.value)
    feat_to_t = adaptive_scale(mse_features(trace_p.features, trace_t), task_p.value, task_t.value)
    feat_to_p = adaptive_scale(mse_features(trace_t.features, trace_p), task_t.value, task_p.value)
    return p_params, t_params, x, y, trace_p, trace_t, task_p, task_t, kl_to_t, kl_to_p, feat_to_t, feat_to_p


def test_compose_T_reduces_to_task_when_models_identical():
    rng = np.random.default_rng(14)
    params, x, y = random_instance(rng)
    trace = forward(params, x)
    task = task_ce(trace, y)
    kl = adaptive_scale(kl_output(trace.probs, trace), task.value, task.value)
    feat = adaptive_scale(mse_features(trace.features, trace), task.value, task.value)
    total = compose_T_loss(task, kl, feat)
    assert total.value == pytest.approx(task.value, abs=1e-15)


def test_compose_totals_match_term_by_term_recomputation():
    rng = np.random.default_rng(15)
    for _ in range(20):
        (p_params, _t, x, y, trace_p, trace_t, task_p, task_t,
         kl_to_t, kl_to_p, feat_to_t, feat_to_p) = _mutual_terms(rng)
        peer = init_model(SPEC, rng)
        trace_c = forward(peer, x)
        task_c = task_ce(trace_c, y)
        peer_kl = adaptive_scale(kl_output(trace_c.probs, trace_p), task_c.value, task_p.value)
        peer_feat = adaptive_scale(
            mse_features(trace_c.features, trace_p), task_c.value, task_p.value
        )
        anchor = init_model(SPEC, rng)
        prox = proximal(p_params, anchor, mu=0.2)
        lam = 0.5

        total_t = compose_T_loss(task_t, kl_to_t, feat_to_t)
        assert total_t.value == pytest.approx(
            task_t.value + kl_to_t.value + feat_to_t.value, abs=1e-12
        )

        total_p = compose_P_loss(
            task_p, kl_to_p, feat_to_p, prox=prox, peer_kl=peer_kl, peer_feat=peer_feat,
            lambda_c=lam,
        )
        expected = (
            task_p.value + kl_to_p.value + feat_to_p.value
            + lam * (peer_kl.value + peer_feat.value) + prox.value
        )
        assert total_p.value == pytest.approx(expected, abs=1e-12)


def test_compose_P_lambda_zero_annihilates_cross_terms():
    rng = np.random.default_rng(16)
    (p_params, _t, x, y, trace_p, _tt, task_p, _taskt,
     _klt, kl_to_p, _featt, feat_to_p) = _mutual_terms(rng)
    peer = init_model(SPEC, rng)
    trace_c = forward(peer, x)
    task_c = task_ce(trace_c, y)
    peer_kl = adaptive_scale(kl_output(trace_c.probs, trace_p), task_c.value, task_p.value)
    peer_feat = adaptive_scale(mse_features(trace_c.features, trace_p), task_c.value, task_p.value)

    with_peers = compose_P_loss(
        task_p, kl_to_p, feat_to_p, peer_kl=peer_kl, peer_feat=peer_feat, lambda_c=0.0
    )
    without = compose_P_loss(task_p, kl_to_p, feat_to_p, lambda_c=0.0)
    assert with_peers.value == without.value
    assert np.array_equal(with_peers.d_logits, without.d_logits)
    assert np.array_equal(with_peers.d_features, without.d_features)


def test_compose_P_requires_peer_terms_when_weighted():
    rng = np.random.default_rng(17)
    (_p, _t, _x, _y, _tp, _tt, task_p, _taskt,
     _klt, kl_to_p, _featt, feat_to_p) = _mutual_terms(rng)
    with pytest.raises(ContractError):
        compose_P_loss(task_p, kl_to_p, feat_to_p, lambda_c=0.5)


def test_compose_rejects_mixed_batches():
    rng = np.random.default_rng(18)
    params, x, y = random_instance(rng, n=6)
    trace = forward(params, x)
    task = task_ce(trace, y)
    other_trace = forward(params, rng.normal(size=(3, 3)))
    stray = kl_output(other_trace.probs.copy(), other_trace)
    with pytest.raises(ContractError):
        compose_T_loss(task, stray, adaptive_scale(mse_features(trace.features, trace), 1, 1))


def test_composed_T_gradient_matches_finite_differences():
    """Full transfer-model objective vs finite differences with frozen teachers."""
    rng = np.random.default_rng(19)
    for _ in range(8):
        p_params, x, y = random_instance(rng)
        t_params = init_model(SPEC, rng)
        trace_p = forward(p_params, x)
        task_p = task_ce(trace_p, y)
        base_task_t = task_ce(forward(t_params, x), y)
        denom = (task_p.value, base_task_t.value)  # frozen at the base point
        teacher_probs = trace_p.probs
        teacher_feats = trace_p.features

        def total_t_value(t):
            trace_t = forward(t, x)
            task_t = task_ce(trace_t, y)
            kl = adaptive_scale(kl_output(teacher_probs, trace_t), *denom)
            feat = adaptive_scale(mse_features(teacher_feats, trace_t), *denom)
            return compose_T_loss(task_t, kl, feat)

        trace_t = forward(t_params, x)
        total = total_t_value(t_params)
        analytic = param_grad_of(total, trace_t)
        numeric = finite_diff_grad(lambda t: total_t_value(t).value, t_params)
        assert grad_rel_err(analytic, numeric) <= 1e-4


def test_composed_P_gradient_matches_finite_differences():
    """Full personalized-model objective vs finite differences with frozen teachers."""
    rng = np.random.default_rng(20)
    for _ in range(8):
        p_params, x, y = random_instance(rng)
        t_params = init_model(SPEC, rng)
        peer_params = init_model(SPEC, rng)
        anchor = init_model(SPEC, rng)
        trace_t = forward(t_params, x)
        trace_c = forward(peer_params, x)
        task_t = task_ce(trace_t, y)
        task_c = task_ce(trace_c, y)
        base_task_p = task_ce(forward(p_params, x), y)
        denom_t = (task_t.value, base_task_p.value)
        denom_c = (task_c.value, base_task_p.value)

        def total_p_value(p):
            trace_p = forward(p, x)
            task_p = task_ce(trace_p, y)
            kl = adaptive_scale(kl_output(trace_t.probs, trace_p), *denom_t)
            feat = adaptive_scale(mse_features(trace_t.features, trace_p), *denom_t)
            peer_kl = adaptive_scale(kl_output(trace_c.probs, trace_p), *denom_c)
            peer_feat = adaptive_scale(mse_features(trace_c.features, trace_p), *denom_c)
            return compose_P_loss(
                task_p, kl, feat, prox=proximal(p, anchor, mu=0.2),
                peer_kl=peer_kl, peer_feat=peer_feat, lambda_c=0.5,
            )

        trace_p = forward(p_params, x)
        analytic = param_grad_of(total_p_value(p_params), trace_p)
        numeric = finite_diff_grad(lambda p: total_p_value(p).value, p_params)
        assert grad_rel_err(analytic, numeric) <= 1e-4


def test_teacher_side_never_receives_gradients():
    """Perturbing the teacher changes values but no gradient ever targets it."""
    rng = np.random.default_rng(21)
    params, x, _ = random_instance(rng)
    trace = forward(params, x)
    teacher_a = forward(init_model(SPEC, rng), x)
    term_a = kl_output(teacher_a.probs, trace)
    # a LossTerm carries student-side gradients only; the teacher array is untouched
    teacher_copy = teacher_a.probs.copy()
    _ = term_a.d_logits * 2.0
    assert np.array_equal(teacher_a.probs, teacher_copy)
    assert term_a.d_params is None and term_a.d_features is None
