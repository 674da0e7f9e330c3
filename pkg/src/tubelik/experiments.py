"""Toy-scale likelihood-estimation experiments.

Everything is driven by an :class:`ExperimentConfig` and a master seed.  Each
random stream is derived from ``(seed, task keys...)`` so results do not depend
on how work is split across threads.
"""

from __future__ import annotations

import io
import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import estimators as est
from .logspace import log_mean_exp
from .models import (
    CondModel,
    GroundTruthJoint,
    bank_logliks,
    bayes_model_from_joint,
    exact_logprob,
    fit_arm,
    fit_tabular,
    perturb_model,
    sample_from_model,
)
from .seqspace import (
    EnumerationCapError,
    OrderBank,
    Regime,
    SeqSpace,
    block_layout,
    derive_rng,
    enumerate_orders,
    sample_bank,
)

DEFAULT_BANK_SIZES = {4: 24, 8: 64, 16: 128}
UPPER_ESTIMATORS = ("cubo", "tvo_upper", "isvgb", "tube")
TABLE_ESTIMATORS = ("cubo", "tvo_upper", "isvgb", "tube", "elbo_k", "elbo")
# Relative slack for comparing nats values that may tie exactly.
TIE_TOL = 1e-9
# Table cells are flagged only when the mean sits this many standard errors below the reference.
VIOLATION_Z = 3.0


def perplexity(loglik, token_count: int):
    """Per-token perplexity ``exp(-loglik / token_count)``.

    Higher log-likelihood means lower perplexity, so log-likelihood upper
    bounds become perplexity lower bounds.
    """
    if token_count < 1:
        raise ValueError("token_count must be >= 1")
    return np.exp(-np.asarray(loglik, dtype=np.float64) / token_count)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SpaceConfig(_Strict):
    vocab_size: int = Field(ge=2)
    length: int = Field(ge=1)
    block_size: int | None = None

    def build(self) -> SeqSpace:
        return SeqSpace(self.vocab_size, self.length, self.block_size)


class GroundTruthConfig(_Strict):
    kind: Literal["random-joint", "block-markov"] = "random-joint"
    seed: int = 0
    concentration: float = Field(1.0, gt=0)


class DataConfig(_Strict):
    train_size: int = Field(4096, ge=0)
    test_size: int = Field(256, ge=1)


class ModelConfig(_Strict):
    source: Literal["fit", "bayes", "perturbed"] = "fit"
    epsilon: float = Field(0.5, ge=0, le=1)
    alpha: float = Field(1.0, ge=0)
    masks: Literal["all", "left_to_right"] | int = "all"


class EvalConfig(_Strict):
    nfe: list[int] | None = None
    ao_arm: bool = True
    grouping: Literal["iid", "chunked"] = "iid"
    bank_size: int | None = None
    reseeds: int = Field(10, ge=2)
    beta: float = Field(est.DEFAULT_BETA, ge=1)
    tvo_grid: int = Field(est.DEFAULT_TVO_GRID, ge=1)
    isvgb_pairs: int = Field(est.DEFAULT_ISVGB_PAIRS, ge=2)

    @field_validator("nfe")
    @classmethod
    def _positive(cls, v):
        if v is not None and (not v or min(v) < 1):
            raise ValueError("nfe entries must be >= 1")
        return v


class SweepConfig(_Strict):
    betas: list[float] = [1.0, 1.5, 2.0, 3.0, 5.0]
    bank_sizes: list[int] | None = None
    replicates: int = Field(100, ge=1)

    @field_validator("betas")
    @classmethod
    def _beta_ge_one(cls, v):
        if not v or min(v) < 1:
            raise ValueError("CUBO betas must be >= 1")
        return v


class AblationConfig(_Strict):
    m_grid: list[int] | None = None
    regime: Literal["ao-arm"] | int = "ao-arm"
    replicates: int = Field(10, ge=2)
    finetune_samples: int = Field(4096, ge=1)
    finetune_alpha: float = Field(1.0, ge=0)


class PropcheckConfig(_Strict):
    k_grid: list[int] = [1, 2, 4, 8]
    replicates: int = Field(100_000, ge=2)
    studies: int = Field(1, ge=1)
    test_index: int = Field(0, ge=0)
    sequence: list[int] | None = None
    surrogate: Literal["exact", "arm"] = "exact"


class ExperimentConfig(_Strict):
    """Versioned experiment description; unknown keys are rejected."""

    schema_version: Literal[1]
    space: SpaceConfig
    ground_truth: GroundTruthConfig = GroundTruthConfig()
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    evaluation: EvalConfig = EvalConfig()
    sweep: SweepConfig = SweepConfig()
    ablation: AblationConfig = AblationConfig()
    propcheck: PropcheckConfig = PropcheckConfig()
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        space = self.space.build()
        b = self.bank_size
        if b % 2 or b % (2 * self.evaluation.isvgb_pairs):
            raise ValueError(
                f"bank size {b} must be a multiple of 2 * isvgb_pairs = "
                f"{2 * self.evaluation.isvgb_pairs}"
            )
        if self.ground_truth.kind == "block-markov" and space.num_blocks == 1:
            raise ValueError("block-markov ground truth needs more than one block")
        if self.evaluation.nfe is not None and max(self.evaluation.nfe) > 4 * space.block_size:
            raise ValueError("nfe values beyond 4 * block_size are not supported")
        return self

    @property
    def seq_space(self) -> SeqSpace:
        return self.space.build()

    @property
    def bank_size(self) -> int:
        if self.evaluation.bank_size is not None:
            return self.evaluation.bank_size
        n = self.seq_space.block_size
        return DEFAULT_BANK_SIZES.get(n, 8 * n)

    @property
    def regimes(self) -> list[Regime]:
        n = self.seq_space.block_size
        nfe = self.evaluation.nfe
        if nfe is None:
            nfe = [2**i for i in range(n.bit_length()) if 2**i <= n]
        out = [Regime.mdm(t, self.evaluation.grouping) for t in nfe]
        if self.evaluation.ao_arm:
            out.append(Regime.ao_arm())
        return out


# ---------------------------------------------------------------------------
# setup: data, model, ARM baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Setup:
    config: ExperimentConfig
    joint: GroundTruthJoint
    train: np.ndarray
    test: np.ndarray
    model: CondModel
    arm: CondModel

    @property
    def space(self) -> SeqSpace:
        return self.model.space


def generate_data(config: ExperimentConfig) -> tuple[GroundTruthJoint, np.ndarray, np.ndarray]:
    gt = config.ground_truth
    joint = GroundTruthJoint.random(
        config.seq_space, derive_rng(gt.seed, "joint"), gt.kind, gt.concentration
    )
    train = joint.sample(derive_rng(config.seed, "train"), config.data.train_size)
    test = joint.sample(derive_rng(config.seed, "test"), config.data.test_size)
    return joint, train, test


def build_model(config: ExperimentConfig, joint: GroundTruthJoint, train: np.ndarray) -> CondModel:
    mc = config.model
    if mc.source == "fit":
        if len(train) == 0:
            raise ValueError("fitting needs a nonempty training corpus")
        return fit_tabular(train, config.seq_space, mc.alpha, mc.masks,
                           derive_rng(config.seed, "fit-masks"))
    bayes = bayes_model_from_joint(joint)
    if mc.source == "bayes":
        return bayes
    return perturb_model(bayes, mc.epsilon, derive_rng(config.seed, "perturb"))


def build_setup(config: ExperimentConfig, model: CondModel | None = None) -> Setup:
    joint, train, test = generate_data(config)
    if model is None:
        model = build_model(config, joint, train)
    arm = fit_arm(train if len(train) else test, config.seq_space, max(config.model.alpha, 1e-3))
    return Setup(config, joint, train, test, model, arm)


# ---------------------------------------------------------------------------
# per-block log-likelihood matrices
# ---------------------------------------------------------------------------


def master_bank(n: int, regime: Regime, size: int, seed: int) -> OrderBank:
    """Full enumeration when the prior's support fits in ``size``, else ``size`` i.i.d. draws."""
    if regime.num_orderings(n) <= size:
        try:
            return enumerate_orders(n, regime)
        except EnumerationCapError:
            pass
    return sample_bank(n, regime, size, seed)


def block_loglik_matrices(model: CondModel, xs: np.ndarray, bank: OrderBank) -> list[np.ndarray]:
    """Per block, the ``(N, K)`` matrix of ``log p(x^block | pi_k, previous block)``."""
    layout = block_layout(model.space)
    out = []
    for b, block in enumerate(layout):
        prev = None if b == 0 else xs[:, list(layout[b - 1])]
        out.append(bank_logliks(model, xs[:, list(block)], bank, prev))
    return out


def exact_block_values(model: CondModel, xs: np.ndarray, regime: Regime) -> np.ndarray:
    """Exact per-sequence log-likelihoods ``(N,)`` (sum of per-block exact values)."""
    layout = block_layout(model.space)
    total = np.zeros(len(xs))
    for i, x in enumerate(xs):
        prev = None
        for block in layout:
            xb = x[list(block)]
            total[i] += exact_logprob(model, xb, regime, prev)
            prev = xb
    return total


def arm_block_logliks(arm: CondModel, xs: np.ndarray) -> list[np.ndarray]:
    """Per block, the ``(N,)`` chain-rule log-likelihood of the left-to-right ARM."""
    layout = block_layout(arm.space)
    identity = np.arange(arm.n)
    out = []
    for b, block in enumerate(layout):
        prev = None if b == 0 else xs[:, list(layout[b - 1])]
        out.append(arm.logliks(xs[:, list(block)], identity, prev))
    return out


# ---------------------------------------------------------------------------
# comparison table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TableRow:
    l_prime: int
    regime: str
    estimator: str
    mean_ppl: float
    std_ppl: float
    mean_nats: float
    violation: bool
    gap: float
    exact: bool = False


@dataclass
class EstimateTable:
    """Estimator x regime summary; ``gap`` is ``|TUBE_PPL - ARM_PPL|`` of the row's regime."""

    rows: list[TableRow]
    arm_ppl: float
    arm_nats: float

    COLUMNS = ("l_prime", "regime", "estimator", "mean_ppl", "std_ppl", "mean_nats",
               "violation", "gap", "exact")

    def get(self, regime: str, estimator: str) -> TableRow:
        for row in self.rows:
            if row.regime == regime and row.estimator == estimator:
                return row
        raise KeyError((regime, estimator))

    def to_csv(self) -> str:
        return rows_to_csv(self.COLUMNS, [
            [r.l_prime, r.regime, r.estimator, r.mean_ppl, r.std_ppl, r.mean_nats,
             r.violation, r.gap, r.exact] for r in self.rows
        ])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".12g")
    return str(v)


def rows_to_csv(columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _row_estimates(ll_blocks: Sequence[np.ndarray], cfg: EvalConfig) -> dict[str, np.ndarray]:
    """Per-sequence values ``(N,)`` of every estimator on one shared row draw."""
    out = {name: 0.0 for name in TABLE_ESTIMATORS}
    for ll in ll_blocks:
        k = ll.shape[-1]
        half = k // 2
        log_psi = est.elbo_k_value(ll[:, half:])
        out["tube"] = out["tube"] + est.tube_value(ll[:, :half], log_psi)
        out["cubo"] = out["cubo"] + est.cubo_value(ll, cfg.beta)
        out["tvo_upper"] = out["tvo_upper"] + est.tvo_upper_value(ll, cfg.tvo_grid)
        out["isvgb"] = out["isvgb"] + est.isvgb_value(*est.isvgb_layout(ll, cfg.isvgb_pairs))
        out["elbo_k"] = out["elbo_k"] + est.elbo_k_value(ll)
        out["elbo"] = out["elbo"] + ll[:, 0]
    return out


def _regime_rows(setup: Setup, regime: Regime, arm_ppl: float) -> list[TableRow]:
    config = setup.config
    cfg = config.evaluation
    space = setup.space
    n, length = space.block_size, space.length
    size = config.bank_size
    bank = master_bank(n, regime, size, _seed_int(config.seed, "master", regime.label))
    ll_blocks = block_loglik_matrices(setup.model, setup.test, bank)

    # Reference: ELBO_K over the whole master bank (exact when it is the full support).
    ref_nats = float(np.mean(sum(log_mean_exp(ll) for ll in ll_blocks)))

    per_reseed = {name: [] for name in TABLE_ESTIMATORS}
    for r in range(cfg.reseeds):
        rng = derive_rng(config.seed, "row", regime.label, r)
        idx = rng.integers(0, len(bank), size=size)
        values = _row_estimates([ll[:, idx] for ll in ll_blocks], cfg)
        for name, v in values.items():
            per_reseed[name].append(float(np.mean(v)))

    summaries = {}
    for name in TABLE_ESTIMATORS:
        if name == "elbo_k":
            nats = np.array([ref_nats])
        else:
            nats = np.asarray(per_reseed[name])
        summaries[name] = _summary(nats, length)
    gap = abs(summaries["tube"][0] - arm_ppl)
    rows = []
    for name in TABLE_ESTIMATORS:
        mean_ppl, std_ppl, mean_nats = summaries[name]
        nats = np.asarray(per_reseed[name]) if name != "elbo_k" else np.zeros(1)
        slack = VIOLATION_Z * _std_error(nats)
        violation = name in UPPER_ESTIMATORS and _below(mean_nats + slack, ref_nats)
        rows.append(TableRow(n, regime.label, name, mean_ppl, std_ppl, mean_nats, violation, gap,
                             exact=(name == "elbo_k" and bank.is_enumerated)))
    return rows


def _summary(nats: np.ndarray, length: int) -> tuple[float, float, float]:
    """Mean and std of per-replicate perplexity, and mean nats; exact when replicates tie."""
    if np.all(nats == nats[0]):
        return float(perplexity(nats[0], length)), 0.0, float(nats[0])
    ppl = perplexity(nats, length)
    return float(np.mean(ppl)), float(np.std(ppl, ddof=1)), float(np.mean(nats))


def _std_error(values: np.ndarray) -> float:
    if values.size < 2 or np.all(values == values[0]):
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


def _below(value: float, reference: float) -> bool:
    return value < reference - TIE_TOL * max(1.0, abs(reference))


def _seed_int(seed: int, *keys) -> int:
    return int(derive_rng(seed, *keys).integers(0, 2**63 - 1))


def run_comparison_table(setup: Setup, jobs: int = 1) -> EstimateTable:
    """Every estimator on shared ordering draws, per regime, over ``reseeds`` row draws."""
    space = setup.space
    arm_nats = float(np.mean(sum(arm_block_logliks(setup.arm, setup.test))))
    arm_ppl = float(perplexity(arm_nats, space.length))
    regimes = setup.config.regimes
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda r: _regime_rows(setup, r, arm_ppl), regimes))
    else:
        parts = [_regime_rows(setup, r, arm_ppl) for r in regimes]
    return EstimateTable([row for part in parts for row in part], arm_ppl, arm_nats)


# ---------------------------------------------------------------------------
# replicate studies on the full ordering support
# ---------------------------------------------------------------------------


def support_logliks(setup: Setup, regime: Regime | None = None) -> tuple[OrderBank, list[np.ndarray]]:
    """Enumerated bank and per-block ``(N, |support|)`` matrices for the test set."""
    bank = enumerate_orders(setup.space.block_size, regime or Regime.ao_arm())
    return bank, block_loglik_matrices(setup.model, setup.test, bank)


def replicate_draws(rng: np.random.Generator, support: int, replicates: int, k: int) -> np.ndarray:
    """``(replicates, k)`` i.i.d. indices into a uniformly weighted support."""
    return rng.integers(0, support, size=(replicates, k))


def estimator_replicates(
    ll: np.ndarray,
    k: int,
    replicates: int,
    rng: np.random.Generator,
    beta: float = est.DEFAULT_BETA,
    grid: int = est.DEFAULT_TVO_GRID,
    n_pairs: int = est.DEFAULT_ISVGB_PAIRS,
    chunk: int = 2048,
) -> dict[str, np.ndarray]:
    """Replicate means of every estimator at budget ``k`` for each row of ``ll``.

    ``ll`` is ``(N, S)``: log-likelihoods of ``N`` sequences over the whole
    uniformly weighted support.  TUBE uses a ``k/2 + k/2`` split with the
    second half as its self-surrogate; IS-VG-B uses ``s = k / (2 n_pairs)``.
    Returns arrays of shape ``(N,)``.
    """
    ll = np.asarray(ll, dtype=np.float64)
    n_seq, support = ll.shape
    sums = {name: np.zeros(n_seq) for name in ("tube", "cubo", "tvo_upper", "isvgb", "elbo_k")}
    use_isvgb = k % (2 * n_pairs) == 0
    for i in range(n_seq):
        done = 0
        while done < replicates:
            r = min(chunk, replicates - done)
            draws = ll[i, replicate_draws(rng, support, r, k)]
            half = k // 2
            if half:
                sums["tube"][i] += est.tube_value(draws[:, :half],
                                                  est.elbo_k_value(draws[:, half:])).sum()
            sums["cubo"][i] += est.cubo_value(draws, beta).sum()
            sums["tvo_upper"][i] += est.tvo_upper_value(draws, grid).sum()
            sums["elbo_k"][i] += est.elbo_k_value(draws).sum()
            if use_isvgb:
                sums["isvgb"][i] += est.isvgb_value(*est.isvgb_layout(draws, n_pairs)).sum()
            done += r
    out = {name: s / replicates for name, s in sums.items()}
    if not use_isvgb:
        del out["isvgb"]
    if k < 2:
        del out["tube"]
    return out


@dataclass(frozen=True)
class ViolationReport:
    """Replicate means (test-set averages, nats) against the exact log-likelihood."""

    k: int
    replicates: int
    exact_nats: float
    mean_nats: dict[str, float]
    fraction_below: dict[str, float]
    min_margin: dict[str, float]

    def below_exact(self, name: str) -> bool:
        return _below(self.mean_nats[name], self.exact_nats)


def violation_study(setup: Setup, k: int = 4, replicates: int = 10_000,
                    seed: int | None = None) -> ViolationReport:
    """Do the replicate means of each estimator land below ``log p(x)``?

    Single-block AO-ARM only: the exact value is the mean over the whole support.
    """
    if setup.space.num_blocks != 1:
        raise ValueError("violation study runs on single-block spaces")
    bank, (ll,) = support_logliks(setup)
    exact = log_mean_exp(ll, axis=-1)
    rng = derive_rng(setup.config.seed if seed is None else seed, "violation", k)
    cfg = setup.config.evaluation
    means = estimator_replicates(ll, k, replicates, rng, cfg.beta, cfg.tvo_grid, cfg.isvgb_pairs)
    return ViolationReport(
        k, replicates, float(np.mean(exact)),
        {name: float(np.mean(v)) for name, v in means.items()},
        {name: float(np.mean(v < exact)) for name, v in means.items()},
        {name: float(np.min(v - exact)) for name, v in means.items()},
    )


# ---------------------------------------------------------------------------
# CUBO sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepCell:
    beta: float
    bank_size: int
    mean: float
    mean_nats: float
    violation: bool


def cubo_sweep(setup: Setup, betas: Sequence[float] | None = None,
               bank_sizes: Sequence[int] | None = None,
               replicates: int | None = None) -> list[SweepCell]:
    """Replicate-mean CUBO over (beta, number of orderings), flagged against the exact value.

    Orderings are subsets (without replacement) of the enumerated AO-ARM
    support; the full-support cell uses the whole bank once.
    """
    sc = setup.config.sweep
    betas = list(sc.betas if betas is None else betas)
    if min(betas) < 1:
        raise ValueError("CUBO betas must be >= 1")
    replicates = sc.replicates if replicates is None else replicates
    bank, ll_blocks = support_logliks(setup)
    total = len(bank)
    if bank_sizes is None:
        bank_sizes = sc.bank_sizes or sorted({s for s in (2, 4, 8, 16, total // 2, total)
                                              if 1 <= s <= total})
    if max(bank_sizes) > total:
        raise ValueError(f"bank sizes cannot exceed the {total} enumerated orderings")
    exact_nats = float(np.mean(sum(log_mean_exp(ll, axis=-1) for ll in ll_blocks)))
    length = setup.space.length
    cells = []
    for size in bank_sizes:
        rng = derive_rng(setup.config.seed, "sweep", size)
        if size == total:
            subsets = np.arange(total)[None, :]
        else:
            subsets = np.stack([rng.choice(total, size=size, replace=False)
                                for _ in range(replicates)])
        for beta in betas:
            per_rep = sum(est.cubo_value(ll[:, subsets], beta) for ll in ll_blocks)
            nats = float(np.mean(per_rep))
            cells.append(SweepCell(beta, int(size), float(perplexity(nats, length)), nats,
                                   _below(nats, exact_nats)))
    return cells


def sweep_to_csv(cells: Sequence[SweepCell]) -> str:
    return rows_to_csv(("beta", "bank_size", "mean", "mean_nats", "violation"),
                       [[c.beta, c.bank_size, c.mean, c.mean_nats, c.violation] for c in cells])


# ---------------------------------------------------------------------------
# surrogate ablation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRecord:
    surrogate: str
    m: int | None
    mean_ppl: float
    std_ppl: float
    mean_nats: float
    mean_gap: float
    reference_nats: float


def surrogate_ablation(setup: Setup, m_grid: Sequence[int] | None = None,
                       replicates: int | None = None, k: int | None = None,
                       include_oracle: bool = True) -> list[AblationRecord]:
    """TUBE with a fixed estimation budget ``k`` under different surrogates.

    ``psi_M`` draws its ``M`` orderings independently of the ``k`` estimation
    draws; the grid is nested (``psi_M`` uses the first ``M`` of ``max(M)``
    draws), and ``psi_pi`` is ``psi_M`` at ``M = 1``.  Gaps are TUBE minus the
    exact log-likelihood.
    """
    config = setup.config
    ac = config.ablation
    replicates = ac.replicates if replicates is None else replicates
    k = config.bank_size // 2 if k is None else k
    space = setup.space
    n = space.block_size
    regime = Regime.ao_arm() if ac.regime == "ao-arm" else Regime.mdm(ac.regime, config.evaluation.grouping)
    if m_grid is None:
        m_grid = ac.m_grid or [2**i for i in range(int(math.log2(config.bank_size // 2)) + 1)]
    m_grid = sorted(set(m_grid))
    m_max = m_grid[-1]

    exact_blocks = [_exact_per_block(setup.model, setup.test, regime, b)
                    for b in range(space.num_blocks)]
    reference = sum(exact_blocks)

    arm_blocks = arm_block_logliks(setup.arm, setup.test)
    ft_samples = sample_from_model(setup.model, derive_rng(config.seed, "ft-samples"),
                                   regime, ac.finetune_samples)
    arm_ft = est.finetune_surrogate_arm(setup.arm, ft_samples, ac.finetune_alpha)
    ft_blocks = arm_block_logliks(arm_ft, setup.test)

    labels = [("psi_pi", 1)] + [("psi_M", m) for m in m_grid] + [("psi_ARM", None), ("psi_ARM-FT", None)]
    if include_oracle:
        labels.append(("psi_exact", None))
    values = {lab: [] for lab in labels}
    for r in range(replicates):
        est_blocks = block_loglik_matrices(
            setup.model, setup.test, sample_bank(n, regime, k, _seed_int(config.seed, "abl-estimate", r)))
        psi_blocks = block_loglik_matrices(
            setup.model, setup.test, sample_bank(n, regime, m_max, _seed_int(config.seed, "abl-surrogate", r)))
        totals = {lab: 0.0 for lab in labels}
        for b, (est_ll, psi_draws) in enumerate(zip(est_blocks, psi_blocks)):
            for lab in labels:
                name, m = lab
                if name in ("psi_pi", "psi_M"):
                    log_psi = est.elbo_k_value(psi_draws[:, :m])
                elif name == "psi_ARM":
                    log_psi = arm_blocks[b]
                elif name == "psi_ARM-FT":
                    log_psi = ft_blocks[b]
                else:
                    log_psi = exact_blocks[b]
                totals[lab] = totals[lab] + est.tube_value(est_ll, log_psi)
        for lab in labels:
            values[lab].append(totals[lab])

    ref_mean = float(np.mean(reference))
    records = []
    for lab in labels:
        per_rep = np.asarray(values[lab])          # (replicates, N)
        mean_ppl, std_ppl, mean_nats = _summary(per_rep.mean(axis=1), space.length)
        records.append(AblationRecord(lab[0], lab[1], mean_ppl, std_ppl, mean_nats,
                                      mean_nats - ref_mean, ref_mean))
    return records


def _exact_per_block(model: CondModel, xs: np.ndarray, regime: Regime, b: int) -> np.ndarray:
    layout = block_layout(model.space)
    block = list(layout[b])
    prev_block = None if b == 0 else list(layout[b - 1])
    return np.array([
        exact_logprob(model, x[block], regime, None if prev_block is None else x[prev_block])
        for x in xs
    ])


def ablation_to_csv(records: Sequence[AblationRecord]) -> str:
    return rows_to_csv(
        ("surrogate", "m", "mean_ppl", "std_ppl", "mean_nats", "mean_gap", "reference_nats"),
        [[r.surrogate, "" if r.m is None else r.m, r.mean_ppl, r.std_ppl, r.mean_nats,
          r.mean_gap, r.reference_nats] for r in records],
    )


# ---------------------------------------------------------------------------
# unbiasedness and variance of the TUBE estimator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReplicateStats:
    estimator: str
    k: int
    replicates: int
    mean: float
    variance: float
    std_error: float
    population: float
    theoretical_variance: float

    @property
    def z_score(self) -> float:
        if self.std_error == 0:
            return 0.0 if self.mean == self.population else math.inf
        return (self.mean - self.population) / self.std_error

    @property
    def variance_rel_error(self) -> float:
        if self.theoretical_variance == 0:
            return 0.0 if self.variance == 0 else math.inf
        return abs(self.variance - self.theoretical_variance) / self.theoretical_variance


def tube_replicate_stats(ll_support, log_psi: float, k_grid: Sequence[int], replicates: int,
                         rng: np.random.Generator, weights=None) -> list[ReplicateStats]:
    """TUBE replicate mean and variance at each ``K`` for a fixed ``x`` and fixed ``psi``.

    Draws are i.i.d. from the prior over the enumerated support ``ll_support``.
    """
    ll = np.asarray(ll_support, dtype=np.float64)
    population = est.population_from_logliks("tube", ll, weights, log_psi=log_psi)
    var_ratio = est.ordering_variance(ll, log_psi, weights)
    out = []
    for k in k_grid:
        if weights is None:
            idx = replicate_draws(rng, ll.size, replicates, k)
        else:
            idx = rng.choice(ll.size, size=(replicates, k), p=np.asarray(weights))
        values = est.tube_value(ll[idx], log_psi)
        var = float(np.var(values, ddof=1))
        out.append(ReplicateStats("tube", int(k), replicates, float(np.mean(values)), var,
                                  math.sqrt(var / replicates), population, var_ratio / k))
    return out


def unbiasedness_variance_study(setup: Setup, k_grid: Sequence[int] | None = None,
                                replicates: int | None = None, studies: int | None = None,
                                x=None, log_psi: float | None = None) -> list[list[ReplicateStats]]:
    """Repeated replicate studies of TUBE on one block of one sequence.

    By default ``x`` is the first block of test sequence ``propcheck.test_index``
    and ``psi`` is its exact likelihood (``propcheck.surrogate = "exact"``) or
    the ARM chain rule (``"arm"``).
    """
    pc = setup.config.propcheck
    k_grid = pc.k_grid if k_grid is None else k_grid
    replicates = pc.replicates if replicates is None else replicates
    studies = pc.studies if studies is None else studies
    model = setup.model
    n = model.n
    if x is None:
        x = pc.sequence if pc.sequence is not None else setup.test[pc.test_index][:n]
    x = np.asarray(x, dtype=np.int64)[:n]
    bank = enumerate_orders(n, Regime.ao_arm())
    ll = bank_logliks(model, x, bank)
    if log_psi is None:
        if pc.surrogate == "exact":
            log_psi = float(log_mean_exp(ll))
        else:
            log_psi = float(setup.arm.logliks(x, np.arange(n)))
    return [
        tube_replicate_stats(ll, log_psi, k_grid, replicates,
                             derive_rng(setup.config.seed, "propcheck", s))
        for s in range(studies)
    ]


def propcheck_to_csv(studies: Sequence[Sequence[ReplicateStats]]) -> str:
    rows = []
    for s, stats in enumerate(studies):
        for st in stats:
            rows.append([s, st.k, st.replicates, st.mean, st.population, st.std_error, st.z_score,
                         st.variance, st.theoretical_variance, st.variance_rel_error])
    return rows_to_csv(("study", "k", "replicates", "mean", "population", "std_error", "z_score",
                        "variance", "theoretical_variance", "variance_rel_error"), rows)


def stress_config(seed: int = 0, **overrides) -> ExperimentConfig:
    """Perturbed high-variance instance (eps = 0.5, L' = 6, V = 4) used for bias reproduction."""
    data = {
        "schema_version": 1,
        "space": {"vocab_size": 4, "length": 6, "block_size": 6},
        "ground_truth": {"kind": "random-joint", "seed": seed, "concentration": 1.0},
        "data": {"train_size": 4096, "test_size": 256},
        "model": {"source": "perturbed", "epsilon": 0.5},
        "seed": seed,
    }
    data.update(overrides)
    return ExperimentConfig.model_validate(data)
