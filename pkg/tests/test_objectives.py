import math

import numpy as np
import pytest

from helpers import (
    assert_grads_close,
    finite_difference_grad,
    pipeline_loss_and_grads,
    selection_margins_ok,
)
from sdcl import encoder as enc
from sdcl import mixture as mix
from sdcl import objectives as obj
from sdcl.rngstream import stream


def make_inputs(pos=0.0, neg=(0.0,), pos_set=(0.0,), eta=0.0, gamma=1.0):
    return obj.EstimatorInputs(
        pos_score=pos,
        neg_scores=np.array(neg, dtype=float),
        pos_set_scores=np.array(pos_set, dtype=float),
        eta=eta,
        gamma=gamma,
    )


# ---------------------------------------------------------------------------
# contrastive_loss
# ---------------------------------------------------------------------------


def test_contrastive_symmetric_case():
    assert abs(obj.contrastive_loss(0.0, np.zeros(1)) - math.log(2.0)) < 1e-15


def test_contrastive_direct_evaluation():
    # s+ = gamma^2 = 1, one negative at -1: loss = log(1 + e^{-2})
    expected = math.log(1.0 + math.exp(-2.0))
    assert abs(obj.contrastive_loss(1.0, np.array([-1.0])) - expected) < 1e-15
    assert abs(expected - 0.12692801104297263) < 1e-15


def test_contrastive_requires_negatives():
    with pytest.raises(ValueError):
        obj.contrastive_loss(0.0, np.array([]))


# ---------------------------------------------------------------------------
# g_estimate
# ---------------------------------------------------------------------------


def test_g_estimate_eta_zero_is_clamped_mean():
    inputs = make_inputs(neg=(-1.0, 1.0), eta=0.0, gamma=1.0)
    expected = max(0.5 * (math.exp(-1) + math.exp(1)), math.exp(-1))
    assert abs(obj.g_estimate(inputs) - expected) < 1e-15


def test_g_estimate_clamp_activation():
    # g0 = 2 e^{-1} - e = -1.98252... -> clamped to e^{-1}
    inputs = make_inputs(neg=(-1.0,), pos_set=(1.0,), eta=0.5, gamma=1.0)
    g0 = 2 * math.exp(-1) - math.exp(1)
    assert abs(g0 - (-1.9825229461161603)) < 1e-12
    assert abs(obj.g_estimate(inputs) - math.exp(-1)) < 1e-15


def test_g_estimate_no_clamp():
    # g0 = 2 e - e^{-1} = 5.06868...
    inputs = make_inputs(neg=(1.0,), pos_set=(-1.0,), eta=0.5, gamma=1.0)
    assert abs(obj.g_estimate(inputs) - (2 * math.e - math.exp(-1))) < 1e-14
    assert abs(obj.g_estimate(inputs) - 5.068684215746648) < 1e-12


def test_g_estimate_eta_domain():
    with pytest.raises(ValueError):
        obj.g_estimate(make_inputs(eta=1.0))
    with pytest.raises(ValueError):
        obj.g_estimate(make_inputs(eta=-0.1))


def test_g_estimate_many_matches_scalar():
    rng = stream(40, 0)
    gamma = math.sqrt(2.0)
    neg = rng.uniform(-2, 2, size=(50, 7))
    pos = rng.uniform(-2, 2, size=(50, 3))
    eta = rng.uniform(0, 0.95, size=50)
    batch = obj.g_estimate_many(neg, pos, eta, gamma)
    for i in range(50):
        single = obj.g_estimate(
            make_inputs(neg=neg[i], pos_set=pos[i], eta=eta[i], gamma=gamma)
        )
        assert abs(batch[i] - single) < 1e-14


def test_clamp_invariant_quick_fuzz():
    rng = stream(41, 0)
    gamma = rng.uniform(0.5, 3.0, size=2000)
    neg = rng.uniform(-1, 1, size=(2000, 5)) * gamma[:, None] ** 2
    pos = rng.uniform(-1, 1, size=(2000, 2)) * gamma[:, None] ** 2
    eta = rng.uniform(0, 0.99, size=2000)
    g = obj.g_estimate_many(neg, pos, eta, gamma)
    assert np.all(g >= np.exp(-(gamma**2)))


# ---------------------------------------------------------------------------
# debiased_loss
# ---------------------------------------------------------------------------


def test_debiased_reduces_to_contrastive_bitwise():
    rng = stream(42, 0)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        gamma = math.sqrt(2.0)
        pos = float(rng.uniform(-2, 2))
        neg = rng.uniform(-2, 2, size=n)
        inputs = make_inputs(pos=pos, neg=neg, pos_set=(pos,), eta=0.0, gamma=gamma)
        # clamp inactive iff sum exp(neg) > n * exp(-gamma^2); true here since
        # every term exceeds e^{-4} > e^{-2} ... keep only unclamped cases
        if np.sum(np.exp(neg)) <= n * math.exp(-(gamma**2)):
            continue
        assert obj.debiased_loss(inputs) == obj.contrastive_loss(pos, neg)


def test_debiased_clamped_composition():
    # clamped g = e^{-1}, s+ = 0, N = 1: loss = log(1 + e^{-1})
    inputs = make_inputs(pos=0.0, neg=(-1.0,), pos_set=(1.0,), eta=0.5, gamma=1.0)
    expected = math.log(1.0 + math.exp(-1.0))
    assert abs(obj.debiased_loss(inputs) - expected) < 1e-15
    assert abs(expected - 0.3132616875182228) < 1e-15


def test_g0_eta_derivative_sign():
    # d g0 / d eta has the sign of mean_u e^s - mean_v e^s
    rng = stream(43, 0)
    for _ in range(100):
        neg = rng.uniform(-1, 1, size=4)
        pos_set = rng.uniform(-1, 1, size=3)
        eta = float(rng.uniform(0.05, 0.9))
        h = 1e-6

        def g0(e):
            return (np.mean(np.exp(neg)) - e * np.mean(np.exp(pos_set))) / (1 - e)

        deriv = (g0(eta + h) - g0(eta - h)) / (2 * h)
        sign = np.sign(np.mean(np.exp(neg)) - np.mean(np.exp(pos_set)))
        assert np.sign(deriv) == sign or abs(deriv) < 1e-9


# ---------------------------------------------------------------------------
# asymptotic loss
# ---------------------------------------------------------------------------


def random_discrete_spec(seed, n_classes=3, n_points=6, dim=4):
    rng = stream(seed, 77)
    probs = rng.random(n_classes) + 0.2
    probs /= probs.sum()
    pmfs = rng.random((n_classes, n_points)) + 0.05
    pmfs /= pmfs.sum(axis=1, keepdims=True)
    return mix.MixtureSpec(
        class_dist=mix.ClassDistribution(probs),
        conditionals=mix.DiscreteConditionals(
            points=rng.standard_normal((n_points, dim)), pmfs=pmfs
        ),
        templates=tuple(((c,),) for c in range(n_classes)),
        template_weights=tuple((1.0,) for _ in range(n_classes)),
        vocab_size=n_classes,
    )


def test_asymptotic_needs_two_classes():
    spec = random_discrete_spec(1, n_classes=1)
    params = enc.init_params(4, 8, 5, stream(1, 0))
    with pytest.raises(ValueError):
        obj.asymptotic_loss(spec, params, 4)


def test_asymptotic_constant_encoder_closed_form():
    spec = random_discrete_spec(2)
    params = enc.init_params(4, 8, 5, stream(2, 0))
    params.w1[:] = 0.0
    params.w2[:] = 0.0  # output = gamma * b2 / ||b2|| for every input
    for n in (1, 7, 63):
        assert abs(obj.asymptotic_loss(spec, params, n) - math.log(1 + n)) < 1e-10


def test_asymptotic_matches_brute_force_enumeration():
    spec = random_discrete_spec(3)
    params = enc.init_params(4, 8, 5, stream(3, 0))
    n = 5
    emb, _ = enc.forward_features(params, spec.conditionals.points)
    scores = emb @ emb.T
    rho = spec.class_dist.probs
    pmfs = spec.conditionals.pmfs
    brute = 0.0
    for c in range(spec.num_classes):
        neg_prior = rho.copy()
        neg_prior[c] = 0.0
        neg_prior = neg_prior / (1 - rho[c])
        for i in range(pmfs.shape[1]):
            for j in range(pmfs.shape[1]):
                inner = 0.0
                for cc in range(spec.num_classes):
                    for kk in range(pmfs.shape[1]):
                        inner += neg_prior[cc] * pmfs[cc, kk] * math.exp(scores[i, kk])
                s = scores[i, j]
                brute += (
                    rho[c]
                    * pmfs[c, i]
                    * pmfs[c, j]
                    * (math.log(math.exp(s) + n * inner) - s)
                )
    assert abs(obj.asymptotic_loss(spec, params, n) - brute) < 1e-10


def test_estimator_unbiased_under_oracle_eta():
    # with eta = rho(c_x), E[g0] equals the exact clean-negative expectation
    spec = random_discrete_spec(4)
    params = enc.init_params(4, 8, 5, stream(4, 0))
    emb, _ = enc.forward_features(params, spec.conditionals.points)
    scores = emb @ emb.T
    exp_scores = np.exp(scores)
    rho = spec.class_dist.probs
    pmfs = spec.conditionals.pmfs
    marginal = rho @ pmfs
    for c in range(spec.num_classes):
        eta = rho[c]
        # E[g0] over u ~ D, v ~ D_c (linearity of expectation)
        e_g0 = (exp_scores @ marginal - eta * (exp_scores @ pmfs[c])) / (1 - eta)
        target = exp_scores @ mix.exact_negative_pmf(spec, c)
        assert np.max(np.abs(e_g0 - target)) < 1e-10


def test_asymptotic_continuous_mode_mc():
    spec = mix.MixtureSpec(
        class_dist=mix.ClassDistribution(np.array([0.5, 0.5])),
        conditionals=mix.GaussianConditionals(
            means=np.array([[1.0, 0.0], [-1.0, 0.0]]), stddevs=np.array([0.3, 0.3])
        ),
        templates=(((0,),), ((1,),)),
        template_weights=((1.0,), (1.0,)),
        vocab_size=2,
    )
    params = enc.init_params(2, 8, 4, stream(5, 0))
    value = obj.asymptotic_loss(spec, params, 8, mc_pairs=200, mc_negatives=32, rng=stream(5, 1))
    assert math.isfinite(value)
    with pytest.raises(ValueError):
        obj.asymptotic_loss(spec, params, 8)


# ---------------------------------------------------------------------------
# negative handling
# ---------------------------------------------------------------------------


def handling_fixture(seed=50, n=6, dim=4):
    rng = stream(seed, 0)
    anchor = rng.standard_normal(dim)
    pos = rng.standard_normal(dim)
    negs = rng.standard_normal((n, dim))
    return anchor, pos, negs


def test_handling_identity_cases():
    anchor, pos, negs = handling_fixture()
    res = obj.apply_negative_handling(
        obj.NegativeHandling(kind="remove_by_sim", threshold=np.inf), anchor, pos, negs
    )
    assert np.array_equal(res.kept, np.arange(6))
    assert not res.fallback
    negs_classes = np.array([1, 2, 3, 1, 2, 3])
    res = obj.apply_negative_handling(
        obj.NegativeHandling(kind="remove_by_label"), anchor, pos, negs,
        neg_classes=negs_classes, anchor_class=0,
    )
    assert np.array_equal(res.kept, np.arange(6))


def test_handling_remove_by_label_counts():
    anchor, pos, negs = handling_fixture(n=4)
    classes = np.array([0, 1, 0, 2])
    res = obj.apply_negative_handling(
        obj.NegativeHandling(kind="remove_by_label"), anchor, pos, negs,
        neg_classes=classes, anchor_class=0,
    )
    assert res.kept.tolist() == [1, 3]


def test_handling_fallback_retains_least_similar():
    anchor, pos, negs = handling_fixture(n=4)
    sims = negs @ pos
    res = obj.apply_negative_handling(
        obj.NegativeHandling(kind="remove_by_sim", threshold=float(sims.min()) - 1.0),
        anchor, pos, negs,
    )
    assert res.fallback
    assert res.kept.tolist() == [int(np.argmin(sims))]


def test_handling_resample_keeps_lowest():
    anchor, pos, negs = handling_fixture(n=5)
    sims = negs @ pos
    res = obj.apply_negative_handling(
        obj.NegativeHandling(kind="resample_by_sim", keep_count=2), anchor, pos, negs
    )
    assert set(res.kept.tolist()) == set(np.argsort(sims)[:2].tolist())
    with pytest.raises(ValueError):
        obj.apply_negative_handling(
            obj.NegativeHandling(kind="resample_by_sim", keep_count=9), anchor, pos, negs
        )


def test_handling_reweight_sums_to_n():
    anchor, pos, negs = handling_fixture(n=7)
    res = obj.apply_negative_handling(
        obj.NegativeHandling(kind="reweight_by_sim", temperature=0.5), anchor, pos, negs
    )
    assert abs(res.weights.sum() - 7.0) < 1e-12
    sims = negs @ pos
    # weights decrease with similarity
    order = np.argsort(sims)
    assert np.all(np.diff(res.weights[order]) <= 1e-12)


# ---------------------------------------------------------------------------
# in-batch loss: values and gradients
# ---------------------------------------------------------------------------


def test_in_batch_cl_matches_scalar_ops():
    rng = stream(60, 0)
    params = enc.init_params(4, 8, 5, rng, gamma=math.sqrt(2.0))
    a_x = rng.standard_normal((5, 4))
    p_x = rng.standard_normal((5, 4))
    a_emb, _ = enc.forward_features(params, a_x)
    p_emb, _ = enc.forward_features(params, p_x)
    result = obj.in_batch_loss(a_emb, p_emb, objective="cl", gamma=params.gamma)
    manual = 0.0
    for i in range(5):
        neg = [float(a_emb[i] @ p_emb[j]) for j in range(5) if j != i]
        manual += obj.contrastive_loss(float(a_emb[i] @ p_emb[i]), np.array(neg))
    assert abs(result.loss - manual / 5) < 1e-12


def test_in_batch_dcl_matches_scalar_ops():
    rng = stream(61, 0)
    params = enc.init_params(4, 8, 5, rng, gamma=1.0)
    a_x = rng.standard_normal((4, 4))
    p_x = rng.standard_normal((4, 4))
    a_emb, _ = enc.forward_features(params, a_x)
    p_emb, _ = enc.forward_features(params, p_x)
    etas = rng.uniform(0.05, 0.5, size=4)
    result = obj.in_batch_loss(a_emb, p_emb, objective="dcl", gamma=1.0, etas=etas)
    manual = 0.0
    for i in range(4):
        neg = np.array([float(a_emb[i] @ p_emb[j]) for j in range(4) if j != i])
        pos = float(a_emb[i] @ p_emb[i])
        manual += obj.debiased_loss(
            make_inputs(pos=pos, neg=neg, pos_set=(pos,), eta=float(etas[i]), gamma=1.0)
        )
    assert abs(result.loss - manual / 4) < 1e-12


HANDLING_CASES = [
    None,
    obj.NegativeHandling(kind="remove_by_sim", threshold=0.3),
    obj.NegativeHandling(kind="reweight_by_sim", temperature=0.7),
    obj.NegativeHandling(kind="resample_by_sim", keep_count=2),
    obj.NegativeHandling(kind="remove_by_label"),
]


@pytest.mark.parametrize("objective", ["cl", "dcl"])
@pytest.mark.parametrize("handling", HANDLING_CASES)
def test_pipeline_gradients_match_fd(objective, handling):
    checked = 0
    attempt = 0
    while checked < 3 and attempt < 30:
        attempt += 1
        rng = stream(62, attempt)
        params = enc.init_params(3, 6, 4, rng, gamma=math.sqrt(2.0), gamma_trainable=True)
        a_x = rng.standard_normal((4, 3))
        p_x = rng.standard_normal((4, 3))
        classes = rng.integers(0, 3, size=4)
        etas = rng.uniform(0.05, 0.6, size=4) if objective == "dcl" else None
        if not selection_margins_ok(
            params, a_x, p_x, handling=handling, etas=etas,
            objective=objective, classes=classes, margin=5e-3,
        ):
            continue
        loss, analytic, _ = pipeline_loss_and_grads(
            params, a_x, p_x, objective=objective, etas=etas,
            handling=handling, classes=classes,
        )

        def loss_fn(p):
            value, _, _ = pipeline_loss_and_grads(
                p, a_x, p_x, objective=objective, etas=etas,
                handling=handling, classes=classes,
            )
            return value

        fd = finite_difference_grad(params, loss_fn)
        assert_grads_close(analytic, fd)
        checked += 1
    assert checked >= 3, "not enough well-separated configurations found"


def test_dcl_clamped_gamma_gradient():
    # drive the estimator into its clamp and check the floor's gamma term
    rng = stream(63, 0)
    params = enc.init_params(3, 6, 4, rng, gamma=1.2, gamma_trainable=True)
    a_x = rng.standard_normal((3, 3))
    p_x = a_x + 0.01 * rng.standard_normal((3, 3))  # high pos similarity
    etas = np.full(3, 0.85)  # heavy correction forces g0 below the floor
    loss, analytic, result = pipeline_loss_and_grads(
        params, a_x, p_x, objective="dcl", etas=etas
    )
    assert result.clamp_fraction > 0

    def loss_fn(p):
        value, _, _ = pipeline_loss_and_grads(p, a_x, p_x, objective="dcl", etas=etas)
        return value

    fd = finite_difference_grad(params, loss_fn)
    assert_grads_close(analytic, fd)


@pytest.mark.parametrize("objective", ["cl", "dcl"])
def test_vectorized_path_matches_loop(objective):
    # an infinite removal threshold keeps every negative, forcing the loop
    # path through math identical to the vectorized no-handling path
    rng = stream(64, 0)
    for _ in range(10):
        b = int(rng.integers(2, 10))
        a = rng.standard_normal((b, 5))
        a *= 1.2 / np.linalg.norm(a, axis=1, keepdims=True)
        p = rng.standard_normal((b, 5))
        p *= 1.2 / np.linalg.norm(p, axis=1, keepdims=True)
        etas = rng.uniform(0.0, 0.9, size=b) if objective == "dcl" else None
        fast = obj.in_batch_loss(a, p, objective=objective, gamma=1.2, etas=etas)
        slow = obj.in_batch_loss(
            a, p, objective=objective, gamma=1.2, etas=etas,
            handling=obj.NegativeHandling(kind="remove_by_sim", threshold=np.inf),
        )
        assert abs(fast.loss - slow.loss) < 1e-12
        assert np.allclose(fast.d_anchor, slow.d_anchor, atol=1e-12)
        assert np.allclose(fast.d_positive, slow.d_positive, atol=1e-12)
        assert abs(fast.d_gamma - slow.d_gamma) < 1e-12
        assert fast.clamp_fraction == slow.clamp_fraction


def test_in_batch_loss_max_negatives():
    rng = stream(65, 0)
    params = enc.init_params(4, 8, 5, rng, gamma=1.0)
    a_emb, _ = enc.forward_features(params, rng.standard_normal((5, 4)))
    p_emb, _ = enc.forward_features(params, rng.standard_normal((5, 4)))
    result = obj.in_batch_loss(a_emb, p_emb, objective="cl", gamma=1.0, max_negatives=2)
    manual = 0.0
    for i in range(5):
        pool = [j for j in range(5) if j != i][:2]
        neg = np.array([float(a_emb[i] @ p_emb[j]) for j in pool])
        manual += obj.contrastive_loss(float(a_emb[i] @ p_emb[i]), neg)
    assert abs(result.loss - manual / 5) < 1e-12
    with pytest.raises(ValueError):
        obj.in_batch_loss(a_emb, p_emb, objective="cl", gamma=1.0, max_negatives=5)


def test_in_batch_loss_rejects_bad_inputs():
    emb = np.ones((1, 3))
    with pytest.raises(ValueError):
        obj.in_batch_loss(emb, emb, objective="cl", gamma=1.0)
    emb = np.ones((3, 3))
    with pytest.raises(ValueError):
        obj.in_batch_loss(emb, emb, objective="dcl", gamma=1.0)  # missing etas
    with pytest.raises(ValueError):
        obj.in_batch_loss(emb, emb, objective="dcl", gamma=1.0, etas=np.array([0.1, 1.0, 0.2]))
