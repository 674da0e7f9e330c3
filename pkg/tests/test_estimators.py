import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from tubelik import estimators as est
from tubelik.estimators import (
    BankTag,
    IndependenceError,
    SampleBank,
    Surrogate,
    arm_logprob,
    cubo,
    elbo,
    elbo_k,
    finetune_surrogate_arm,
    isvgb,
    isvgb_split,
    population_bound,
    population_from_logliks,
    surrogate_arm,
    surrogate_fixed,
    surrogate_self,
    tube,
    tvo_upper,
    two_sided_interval,
)
from tubelik.models import (
    CondModel,
    GroundTruthJoint,
    TOY_A_SPACE,
    bank_logliks,
    bayes_model_from_joint,
    exact_logprob,
    fit_arm,
    perturb_model,
    random_model,
    sample_from_model,
    toy_a_joint,
    toy_a_model,
)
from tubelik.seqspace import Regime, SeqSpace, decode_block, derive_rng, enumerate_orders

A, B = 0, 1
TOY_AB = np.log([0.10, 0.15])      # Toy-A, x = (A, B), orderings (0,1) and (1,0)
LOG_P_AB = math.log(0.125)

finite_ll = st.lists(st.floats(-30, 0, allow_nan=False), min_size=1, max_size=12)


def tagged(ll, stream, start):
    return SampleBank(ll, BankTag(stream, start, start + len(ll)))


# --- ELBO / ELBO_K ----------------------------------------------------------


def test_toy_a_bank_logliks():
    bank = enumerate_orders(2, Regime.ao_arm())
    np.testing.assert_allclose(bank_logliks(toy_a_model(), [A, B], bank), TOY_AB, atol=1e-15)


def test_elbo_examples():
    e = elbo([TOY_AB[0]])
    assert e.value == pytest.approx(-2.30259, abs=1e-5)
    assert e.direction == "lower" and e.bound_preserving
    assert elbo([-np.inf]).value == -np.inf
    with pytest.raises(ValueError):
        elbo(TOY_AB)


def test_elbo_k_examples():
    assert elbo_k(TOY_AB).value == pytest.approx(-2.07944, abs=1e-5)
    assert elbo_k([-1.5]).value == elbo([-1.5]).value
    assert elbo_k([-1.5, -1.5]).value == elbo_k([-1.5]).value
    assert elbo_k([-np.inf, -np.inf]).value == -np.inf


def test_elbo_k_bayes_model_equals_exact():
    joint = GroundTruthJoint.random(SeqSpace(3, 3), derive_rng(0))
    model = bayes_model_from_joint(joint)
    bank = enumerate_orders(3, Regime.ao_arm())
    x = np.array([2, 0, 1])
    ll = bank_logliks(model, x, bank)
    assert elbo([ll[3]]).value == pytest.approx(joint.logprob(x), abs=1e-12)


# --- TUBE -------------------------------------------------------------------


def test_tube_examples():
    bank = tagged(TOY_AB, "est", 0)
    assert tube(bank, surrogate_fixed(math.log(0.125))).value == pytest.approx(-2.07944, abs=1e-5)
    v = tube(bank, surrogate_fixed(math.log(0.1))).value
    assert v == pytest.approx(math.log(0.1) + 0.25, abs=1e-12)
    assert v == pytest.approx(-2.05259, abs=1e-5)
    assert v >= LOG_P_AB
    # tangent line: log a <= log b + (a - b) / b at a = 1, b = e
    assert est.tube_value(np.array([0.0]), 1.0) == pytest.approx(1 / math.e, abs=1e-12)


def test_tube_record():
    e = tube(tagged(TOY_AB, "est", 0), surrogate_fixed(-2.0))
    assert e.direction == "upper" and e.bound_preserving
    rec = e.to_record()
    assert rec["estimator"] == "tube" and rec["params"]["K"] == 2


def test_tube_self_surrogate_independence():
    bank = tagged(TOY_AB, "s", 0)
    psi = surrogate_self(tagged(TOY_AB[:1], "s", 1))
    with pytest.raises(IndependenceError):
        tube(bank, psi)
    with pytest.raises(IndependenceError):
        tube(SampleBank(TOY_AB), surrogate_self(tagged(TOY_AB, "s", 5)))
    ok = surrogate_self(tagged(TOY_AB, "s", 2))
    assert tube(bank, ok).value == pytest.approx(LOG_P_AB, abs=1e-12)
    parts = tagged(np.concatenate([TOY_AB, TOY_AB]), "t", 0).split(2, 2)
    assert not parts[0].tag.overlaps(parts[1].tag)
    assert tube(parts[0], surrogate_self(parts[1])).value == pytest.approx(LOG_P_AB, abs=1e-12)


def test_surrogate_validation():
    with pytest.raises(ValueError):
        Surrogate("fixed", -np.inf)
    with pytest.raises(ValueError):
        Surrogate("other", 0.0)
    with pytest.raises(ValueError):
        surrogate_self([])


def test_surrogate_self_examples():
    psi = surrogate_self(tagged(TOY_AB[:1], "m", 0))
    assert psi.label == "psi_pi" and psi.log_psi == TOY_AB[0]
    psi = surrogate_self(tagged(TOY_AB, "m", 0))
    assert psi.log_psi == pytest.approx(LOG_P_AB, abs=1e-15)
    assert psi.label == "psi_M2"


def test_two_sided_interval_brackets_exact_on_enumeration():
    lo, hi = two_sided_interval(tagged(TOY_AB, "e", 0), surrogate_fixed(math.log(0.2)))
    assert lo.value <= LOG_P_AB <= hi.value


@settings(max_examples=100)
@given(finite_ll, finite_ll)
def test_tube_affinity(a, b):
    a, b = np.array(a), np.array(b)
    log_psi = -3.0
    joined = est.tube_value(np.concatenate([a, b]), log_psi)
    p_hat = (len(a) * np.mean(np.exp(a)) + len(b) * np.mean(np.exp(b))) / (len(a) + len(b))
    direct = log_psi + (p_hat - math.exp(log_psi)) / math.exp(log_psi)
    assert joined == pytest.approx(direct, rel=1e-12, abs=1e-12)


@settings(max_examples=100)
@given(finite_ll, st.floats(-30, 0))
def test_tube_dominates_elbo_k_pointwise(ll, log_psi):
    ll = np.array(ll)
    assert est.tube_value(ll, log_psi) >= est.elbo_k_value(ll) - 1e-12


# --- ARM surrogates ---------------------------------------------------------


def test_surrogate_arm_examples():
    bayes = bayes_model_from_joint(toy_a_joint())
    assert surrogate_arm(bayes, [A, B]).log_psi == pytest.approx(math.log(0.5 * 0.2), abs=1e-12)
    assert surrogate_arm(bayes, [A, B]).log_psi == pytest.approx(-2.30259, abs=1e-5)
    uniform = CondModel(TOY_A_SPACE, np.full((1, 2, 3, 2), 0.5), 0.0, "explicit")
    assert arm_logprob(uniform, [A, B]) == pytest.approx(math.log(0.25), abs=1e-15)
    point = np.zeros((1, 2, 3, 2))
    point[..., B] = 1.0
    point_arm = CondModel(TOY_A_SPACE, point, 0.0, "explicit")
    assert surrogate_arm(point_arm, [B, B]).log_psi == 0.0
    with pytest.raises(ValueError):
        surrogate_arm(point_arm, [A, B])


def test_finetune_on_own_samples_recovers_arm():
    joint = GroundTruthJoint.random(SeqSpace(2, 3), derive_rng(1))
    arm = fit_arm(joint.sample(derive_rng(2), 5000), SeqSpace(2, 3), 1.0)
    # draw along the ARM's own left-to-right factorization
    samples = _arm_samples(arm, 100_000)
    ft = finetune_surrogate_arm(arm, samples, alpha=0.0)
    reachable = _prefix_mask(3)
    assert np.max(np.abs(ft.tables[:, reachable] - arm.tables[:, reachable])) < 0.02


def _arm_samples(arm, size):
    from tubelik.models import sample_block
    return sample_block(arm, derive_rng(4), np.tile(np.arange(arm.n), (size, 1)))


def _prefix_mask(n):
    """Boolean index over (position, key) of prefix contexts for V = 2."""
    from tubelik.models import Context
    mask = np.zeros((n, 3 ** (n - 1)), dtype=bool)
    for d in range(n):
        for prefix in range(2**d):
            states = [int(b) for b in np.binary_repr(prefix, d)] if d else []
            ctx = Context(tuple(states) + (None,) * (n - d))
            mask[d, ctx.key(d, 2)] = True
    return mask


def test_finetune_single_sample_alpha_zero_is_point_mass():
    arm = fit_arm(np.array([[0, 1], [1, 1]]), TOY_A_SPACE, 1.0)
    ft = finetune_surrogate_arm(arm, np.tile([1, 0], (4, 1)), alpha=0.0)
    assert arm_logprob(ft, [1, 0]) == 0.0
    with pytest.raises(ValueError):
        finetune_surrogate_arm(arm, np.zeros((0, 2)), alpha=1.0)


def test_finetune_improves_agreement_on_perturbed_model():
    space = SeqSpace(2, 4)
    joint = GroundTruthJoint.random(space, derive_rng(5))
    model = perturb_model(bayes_model_from_joint(joint), 0.5, derive_rng(6))
    arm = fit_arm(joint.sample(derive_rng(7), 4000), space, 1.0)
    ft = finetune_surrogate_arm(arm, sample_from_model(model, derive_rng(8), Regime.ao_arm(),
                                                       100_000), alpha=1.0)
    xs = joint.sample(derive_rng(9), 256)
    exact = np.array([exact_logprob(model, x, Regime.ao_arm()) for x in xs])
    err_arm = np.mean(np.abs([arm_logprob(arm, x) for x in xs] - exact))
    err_ft = np.mean(np.abs([arm_logprob(ft, x) for x in xs] - exact))
    assert err_ft < err_arm


# --- CUBO -------------------------------------------------------------------


def test_cubo_examples():
    assert cubo(TOY_AB, 1.0).value == elbo_k(TOY_AB).value
    v = cubo(TOY_AB, 2.0).value
    assert v == pytest.approx(0.5 * math.log((0.01 + 0.0225) / 2), abs=1e-12)
    assert v == pytest.approx(-2.059831, abs=1e-6)
    assert v >= LOG_P_AB
    for beta in (1.0, 2.0, 7.5):
        assert cubo([-3.2, -3.2], beta).value == -3.2
    assert not cubo(TOY_AB).bound_preserving
    with pytest.raises(ValueError):
        cubo(TOY_AB, 0.5)


@settings(max_examples=100)
@given(finite_ll)
def test_cubo_beta_one_is_elbo_k_bitwise(ll):
    ll = np.array(ll)
    assert est.cubo_value(ll, 1.0) == est.elbo_k_value(ll)


# --- TVO --------------------------------------------------------------------


def quad_thermodynamic_integral(ll, weights):
    p = np.exp(ll)

    def integrand(beta):
        q = weights * p**beta
        return float(np.sum(q * ll) / np.sum(q))

    value, _ = integrate.quad(integrand, 0.0, 1.0, epsabs=1e-13, epsrel=1e-13)
    return value


def test_tvo_examples():
    for grid in (1, 5, 200):
        assert tvo_upper([-4.0, -4.0, -4.0], grid).value == -4.0
    w = np.array([0.1, 0.15]) / 0.25
    assert tvo_upper(TOY_AB, 1).value == pytest.approx(float(np.sum(w * TOY_AB)), abs=1e-15)
    v = tvo_upper(TOY_AB, 200).value
    integral = quad_thermodynamic_integral(TOY_AB, np.array([0.5, 0.5]))
    assert integral == pytest.approx(LOG_P_AB, abs=1e-10)
    assert v >= integral
    assert not tvo_upper(TOY_AB).bound_preserving
    with pytest.raises(ValueError):
        tvo_upper([-np.inf, -np.inf])


def test_tvo_ignores_zero_likelihood_orderings():
    assert tvo_upper([-np.inf, -1.0], 10).value == -1.0


@pytest.mark.parametrize("seed", range(5))
def test_population_tvo_upper_bounds_quadrature(seed):
    rng = derive_rng(seed)
    ll = rng.normal(-5, 2, size=7)
    weights = rng.dirichlet(np.ones(7))
    integral = quad_thermodynamic_integral(ll, weights)
    exact = population_from_logliks("exact", ll, weights)
    assert integral == pytest.approx(exact, abs=1e-9)
    for grid in (1, 2, 10, 200):
        assert population_from_logliks("tvo", ll, weights, grid=grid) >= exact - 1e-12
    assert est.thermodynamic_integrand(1.0, ll, weights) >= est.thermodynamic_integrand(0.3, ll, weights)


# --- IS-VG-B ----------------------------------------------------------------


def test_isvgb_example():
    pairs = [(tagged([math.log(0.10)], "i", 0), tagged([math.log(0.15)], "i", 1)),
             (tagged([math.log(0.15)], "i", 2), tagged([math.log(0.10)], "i", 3))]
    e = isvgb(pairs)
    first = (math.log(0.10) + math.log(0.15)) / 2
    assert first == pytest.approx(-2.09985, abs=1e-5)
    assert math.log(13 / 12) == pytest.approx(0.08004, abs=1e-5)
    assert e.value == pytest.approx(first + math.log(13 / 12), abs=1e-12)
    assert e.value == pytest.approx(-2.01981, abs=1e-5)
    assert e.params == {"K": 4, "n_pairs": 2, "s": 1}


def test_isvgb_constant_and_preconditions():
    pairs = isvgb_split(tagged(np.full(8, -2.5), "c", 0), n_pairs=2)
    assert isvgb(pairs).value == -2.5
    with pytest.raises(ValueError):
        isvgb(pairs[:1])
    with pytest.raises(IndependenceError):
        isvgb([(tagged([-1.0], "d", 0), tagged([-1.0], "d", 0)),
               (tagged([-1.0], "d", 1), tagged([-1.0], "d", 2))])
    with pytest.raises(ValueError):
        est.isvgb_layout(np.zeros(6), 2)


def test_isvgb_split_matches_kernel_layout():
    ll = derive_rng(0).normal(size=12)
    pairs = isvgb_split(tagged(ll, "z", 0), n_pairs=3)
    assert isvgb(pairs).value == pytest.approx(
        float(est.isvgb_value(*est.isvgb_layout(ll, 3))), abs=1e-15)


# --- population bounds ------------------------------------------------------


def test_population_examples_toy_a():
    model = toy_a_model()
    x = [A, B]
    exact = exact_logprob(model, x, Regime.ao_arm())
    assert population_bound("exact", model, x, Regime.ao_arm()) == pytest.approx(exact, abs=1e-15)
    assert population_bound("tube", model, x, Regime.ao_arm(), log_psi=exact) == pytest.approx(
        exact, abs=1e-15)
    c1 = population_bound("cubo", model, x, Regime.ao_arm(), beta=1.0)
    c2 = population_bound("cubo", model, x, Regime.ao_arm(), beta=2.0)
    assert c1 == pytest.approx(-2.07944, abs=1e-5)
    assert c2 == pytest.approx(-2.059831, abs=1e-6)
    assert c1 <= c2
    for grid in (1, 2, 10, 200):
        assert population_bound("tvo", model, x, Regime.ao_arm(), grid=grid) >= exact
    assert population_bound("elbo", model, x, Regime.ao_arm()) == pytest.approx(
        float(np.mean(TOY_AB)), abs=1e-15)
    with pytest.raises(ValueError):
        population_bound("nope", model, x, Regime.ao_arm())


def test_ordering_variance_toy_a():
    assert est.ordering_variance(TOY_AB, math.log(0.125)) == pytest.approx(0.04, rel=1e-12)
    assert est.ordering_variance(np.full(4, -2.0)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 3), st.integers(2, 4), st.integers(0, 2**31))
def test_population_sandwich(v, n, seed):
    rng = derive_rng(seed)
    model = random_model(SeqSpace(v, n), rng)
    x = rng.integers(0, v, size=n)
    for regime in (Regime.ao_arm(), Regime.mdm(2)):
        exact = exact_logprob(model, x, regime)
        assert population_bound("elbo", model, x, regime) <= exact + 1e-12
        for c in (0.5, 1.0, 2.0):
            assert population_bound("tube", model, x, regime,
                                    log_psi=exact + math.log(c)) >= exact - 1e-12
        betas = [1.0, 1.5, 2.0, 3.0, 5.0]
        cubos = [population_bound("cubo", model, x, regime, beta=b) for b in betas]
        assert all(a <= b + 1e-12 for a, b in zip(cubos, cubos[1:]))


# --- replicate properties ---------------------------------------------------


def _perturbed_toy_ll():
    model = perturb_model(bayes_model_from_joint(toy_a_joint()), 0.5, derive_rng(21))
    bank = enumerate_orders(2, Regime.ao_arm())
    return np.array([bank_logliks(model, x, bank) for x in decode_block(np.arange(4), 2, 2)])


def test_cubo_biased_downward_at_k2():
    ll = _perturbed_toy_ll()[1]
    pop = population_from_logliks("cubo", ll, beta=2.0)
    idx = derive_rng(22).integers(0, ll.size, size=(100_000, 2))
    mean = float(np.mean(est.cubo_value(ll[idx], 2.0)))
    se = float(np.std(est.cubo_value(ll[idx], 2.0)) / math.sqrt(100_000))
    assert mean < pop - 4 * se


def test_elbo_k_monotone_in_k():
    space = SeqSpace(3, 4)
    model = perturb_model(bayes_model_from_joint(GroundTruthJoint.random(space, derive_rng(23))),
                          0.5, derive_rng(24))
    ll = bank_logliks(model, np.array([0, 2, 1, 1]), enumerate_orders(4, Regime.ao_arm()))
    rng = derive_rng(25)
    means = [float(np.mean(est.elbo_k_value(ll[rng.integers(0, ll.size, size=(20_000, k))])))
             for k in (1, 2, 4, 8, 16)]
    assert all(a < b for a, b in zip(means, means[1:]))
    assert means[-1] < population_from_logliks("exact", ll)
