import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from pydantic import ValidationError

from tubelik import experiments as ex
from tubelik.estimators import ordering_variance
from tubelik.models import toy_a_joint, toy_a_model
from tubelik.seqspace import Regime


def small_config(**overrides):
    data = {
        "schema_version": 1,
        "space": {"vocab_size": 2, "length": 4},
        "data": {"train_size": 512, "test_size": 32},
        "sweep": {"replicates": 20},
        "ablation": {"replicates": 4, "finetune_samples": 256},
        "propcheck": {"replicates": 2000, "k_grid": [1, 4]},
    }
    data.update(overrides)
    return ex.ExperimentConfig.model_validate(data)


@pytest.fixture(scope="module")
def setup():
    return ex.build_setup(small_config())


@pytest.fixture(scope="module")
def table(setup):
    return ex.run_comparison_table(setup)


# --- perplexity -------------------------------------------------------------


def test_perplexity_examples():
    assert ex.perplexity(0.0, 5) == 1.0
    assert ex.perplexity(-6 * math.log(3), 6) == pytest.approx(3.0, rel=1e-12)
    assert ex.perplexity(math.log(0.125), 2) == pytest.approx(2.8284, abs=1e-4)
    with pytest.raises(ValueError):
        ex.perplexity(-1.0, 0)


@given(st.floats(-50, 0), st.floats(-50, 0), st.integers(1, 16))
def test_perplexity_inverts_order(a, b, n):
    if a >= b:
        assert ex.perplexity(a, n) <= ex.perplexity(b, n)


# --- config -----------------------------------------------------------------


@pytest.mark.parametrize("n,size", [(4, 24), (8, 64), (16, 128), (6, 48)])
def test_default_bank_sizes(n, size):
    cfg = ex.ExperimentConfig.model_validate(
        {"schema_version": 1, "space": {"vocab_size": 2, "length": n}})
    assert cfg.bank_size == size


def test_default_regimes():
    labels = [r.label for r in small_config().regimes]
    assert labels == ["NFE=1", "NFE=2", "NFE=4", "AO-ARM"]


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"schema_version": 2},
    {"evaluation": {"reseeds": 1}},
    {"evaluation": {"bank_size": 10}},
    {"evaluation": {"typo_key": 3}},
    {"sweep": {"betas": [0.5, 1.0]}},
    {"space": {"vocab_size": 2, "length": 4, "block_size": 3}},
    {"ground_truth": {"kind": "block-markov"}},
])
def test_config_rejects_invalid(bad):
    with pytest.raises((ValidationError, ValueError)):
        small_config(**bad)


def test_config_requires_schema_version():
    with pytest.raises(ValidationError):
        ex.ExperimentConfig.model_validate({"space": {"vocab_size": 2, "length": 4}})


# --- comparison table -------------------------------------------------------


def test_table_shape(table):
    assert len(table.rows) == 4 * len(ex.TABLE_ESTIMATORS)
    csv = table.to_csv()
    assert csv.splitlines()[0] == ",".join(ex.EstimateTable.COLUMNS)


def test_nfe1_row_bit_identical(table):
    rows = [r for r in table.rows if r.regime == "NFE=1"]
    assert len({r.mean_nats for r in rows}) == 1
    assert len({r.mean_ppl for r in rows}) == 1
    assert all(r.std_ppl == 0.0 for r in rows)


def test_exact_flag_on_enumerated_ao_arm(table):
    assert table.get("AO-ARM", "elbo_k").exact
    assert not table.get("NFE=4", "elbo_k").exact      # 4^4 > 24: sampled bank
    assert not table.get("AO-ARM", "tube").exact


def test_gap_is_tube_vs_arm(table):
    for regime in ("NFE=2", "AO-ARM"):
        tube = table.get(regime, "tube")
        assert tube.gap == pytest.approx(abs(tube.mean_ppl - table.arm_ppl), abs=1e-15)


def test_tube_never_flagged(table):
    assert not any(r.violation for r in table.rows if r.estimator == "tube")


def test_bayes_model_ao_arm_row_is_exact():
    cfg = small_config(model={"source": "bayes"})
    setup = ex.build_setup(cfg)
    table = ex.run_comparison_table(setup)
    exact = float(np.mean(ex.exact_block_values(setup.model, setup.test, Regime.ao_arm())))
    for name in ("tube", "elbo_k", "elbo", "cubo", "tvo_upper", "isvgb"):
        assert table.get("AO-ARM", name).mean_nats == pytest.approx(exact, abs=1e-12)
    assert exact == pytest.approx(float(np.mean(setup.joint.logprob(setup.test))), abs=1e-12)


def test_table_deterministic_and_thread_independent(setup):
    a = ex.run_comparison_table(setup).to_csv()
    b = ex.run_comparison_table(ex.build_setup(small_config())).to_csv()
    c = ex.run_comparison_table(setup, jobs=3).to_csv()
    assert a == b == c


def test_multi_block_table_runs():
    cfg = small_config(space={"vocab_size": 2, "length": 6, "block_size": 3},
                       ground_truth={"kind": "block-markov"},
                       evaluation={"bank_size": 8})
    setup = ex.build_setup(cfg)
    table = ex.run_comparison_table(setup)
    rows = [r for r in table.rows if r.regime == "NFE=1"]
    assert len({r.mean_nats for r in rows}) == 1
    assert table.get("AO-ARM", "elbo_k").exact       # 3! = 6 <= 8


def test_csv_uses_twelve_significant_digits():
    text = ex.rows_to_csv(["v", "flag"], [[math.pi, True], [1e-20 / 3, False]])
    assert text == "v,flag\n3.14159265359,true\n3.33333333333e-21,false\n"


# --- CUBO sweep -------------------------------------------------------------


def test_sweep_full_bank_beta_one_equals_exact(setup):
    cells = ex.cubo_sweep(setup, betas=[1.0, 2.0], bank_sizes=[4, 24])
    exact = float(np.mean(ex.exact_block_values(setup.model, setup.test, Regime.ao_arm())))
    full = next(c for c in cells if c.beta == 1.0 and c.bank_size == 24)
    assert full.mean_nats == pytest.approx(exact, abs=1e-12)
    assert not full.violation
    assert all(c.mean_nats >= full.mean_nats - 1e-12 for c in cells if c.bank_size == 24)


def test_sweep_constant_likelihood_never_flagged():
    setup = ex.build_setup(small_config(model={"source": "bayes"}))
    cells = ex.cubo_sweep(setup, bank_sizes=[2, 4, 24], replicates=10)
    assert not any(c.violation for c in cells)


def test_sweep_flags_small_banks_on_perturbed_model():
    setup = ex.build_setup(ex.stress_config(0, data={"train_size": 512, "test_size": 64}))
    cells = ex.cubo_sweep(setup, betas=[1.0, 5.0], bank_sizes=[2, 720], replicates=50)
    assert any(c.violation for c in cells if c.bank_size == 2)
    assert not any(c.violation for c in cells if c.bank_size == 720)


def test_sweep_rejects_oversized_banks(setup):
    with pytest.raises(ValueError):
        ex.cubo_sweep(setup, bank_sizes=[25])


# --- ablation ---------------------------------------------------------------


def test_ablation_records(setup):
    records = ex.surrogate_ablation(setup, m_grid=[1, 2, 4], replicates=6)
    names = [(r.surrogate, r.m) for r in records]
    assert names[:4] == [("psi_pi", 1), ("psi_M", 1), ("psi_M", 2), ("psi_M", 4)]
    assert {"psi_ARM", "psi_ARM-FT", "psi_exact"} <= {r.surrogate for r in records}
    assert records[0].mean_nats == records[1].mean_nats
    assert all(r.mean_gap >= -0.05 for r in records)
    assert ex.ablation_to_csv(records).startswith("surrogate,m,")


def test_ablation_oracle_surrogate_is_unbiased():
    setup = ex.build_setup(ex.stress_config(1, data={"train_size": 512, "test_size": 64}))
    records = ex.surrogate_ablation(setup, m_grid=[1], replicates=40, k=4)
    oracle = next(r for r in records if r.surrogate == "psi_exact")
    se = oracle.std_ppl / math.sqrt(40)
    # std is reported in PPL; convert the gap to PPL for the comparison
    ppl_exact = ex.perplexity(oracle.reference_nats, 6)
    assert abs(oracle.mean_ppl - ppl_exact) < 4 * se + 1e-3


# --- unbiasedness / variance ------------------------------------------------


def test_toy_a_theoretical_variance():
    setup = ex.Setup(small_config(space={"vocab_size": 2, "length": 2}), toy_a_joint(),
                     np.zeros((0, 2), int), np.array([[0, 1]]), toy_a_model(), toy_a_model())
    (stats,) = ex.unbiasedness_variance_study(setup, k_grid=[1, 4], replicates=20_000,
                                              log_psi=math.log(0.125))
    assert stats[0].theoretical_variance == pytest.approx(0.04, rel=1e-12)
    assert stats[1].theoretical_variance == pytest.approx(0.01, rel=1e-12)
    assert stats[0].population == pytest.approx(math.log(0.125), abs=1e-15)
    for s in stats:
        assert s.std_error == pytest.approx(math.sqrt(s.variance / s.replicates))
        assert abs(s.z_score) < 5
        assert s.variance_rel_error < 0.1


def test_bayes_model_has_no_ordering_variance():
    setup = ex.build_setup(small_config(model={"source": "bayes"}))
    (stats,) = ex.unbiasedness_variance_study(setup, replicates=1000)
    for s in stats:
        assert s.theoretical_variance < 1e-25
        assert s.variance < 1e-25


def test_propcheck_csv(setup):
    studies = ex.unbiasedness_variance_study(setup, studies=2, replicates=500)
    text = ex.propcheck_to_csv(studies)
    assert len(text.splitlines()) == 1 + 2 * 2
    assert "z_score" in text.splitlines()[0]


def test_violation_study_small():
    setup = ex.build_setup(ex.stress_config(0, data={"train_size": 512, "test_size": 8}))
    report = ex.violation_study(setup, k=4, replicates=2000)
    assert not report.below_exact("tube")
    assert report.fraction_below["tube"] == 0.0
    assert report.below_exact("elbo_k")


def test_ordering_variance_matches_replicate_variance():
    ll = np.log([0.1, 0.15])
    assert ordering_variance(ll, math.log(0.125)) == pytest.approx(0.04)
