"""Tabular conditional models shared by the ARM, AO-ARM, MDM and block views.

A :class:`CondModel` stores, for every position ``d`` of a block and every
*context* of the other positions (each masked or revealed), a probability
vector over the vocabulary.  Contexts are dense mixed-radix keys in base
``V + 1`` over the other positions in increasing order (state ``0`` is masked,
state ``v + 1`` is symbol ``v``).  Block models additionally condition on the
fully revealed previous block: table row ``0`` serves the first block and row
``1 + encode_block(prev)`` serves every later block.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .logspace import log_mean_exp
from .seqspace import (
    EnumerationCapError,
    GroupedOrder,
    OrderBank,
    Regime,
    SeqSpace,
    SingleOrder,
    block_layout,
    decode_block,
    encode_block,
    enumerate_orders,
    sample_ranks,
)

MODES = ("bayes-exact", "fitted", "perturbed", "random", "explicit")

# Dense table entries (floats) a model may allocate.
TABLE_CAP = 50_000_000
# Scope caps for the exact dynamic programs (2**n and 3**n states).
DP_SINGLE_CAP = 20
DP_GROUPED_CAP = 12

MODEL_FORMAT = "tubelik.condmodel"
JOINT_FORMAT = "tubelik.joint"


@lru_cache(maxsize=None)
def _radix(n: int, vocab_size: int) -> np.ndarray:
    """``radix[d, j]`` is the weight of position ``j``'s state in position ``d``'s key."""
    base = vocab_size + 1
    r = np.zeros((n, n), dtype=np.int64)
    for d in range(n):
        for j in range(n):
            if j != d:
                r[d, j] = base ** (j if j < d else j - 1)
    r.flags.writeable = False
    return r


@lru_cache(maxsize=None)
def _subset_bits(n: int) -> np.ndarray:
    """Row ``S`` holds the membership bits of subset ``S`` (bit ``j`` = position ``j``)."""
    s = np.arange(2**n, dtype=np.int64)[:, None]
    bits = ((s >> np.arange(n)) & 1).astype(bool)
    bits.flags.writeable = False
    return bits


@dataclass(frozen=True)
class Context:
    """Prediction context: ``states[j]`` is a revealed symbol or ``None`` when masked."""

    states: tuple[int | None, ...]
    prev: tuple[int, ...] | None = None

    def key(self, d: int, vocab_size: int) -> int:
        if self.states[d] is not None:
            raise ValueError(f"position {d} must be masked to be predicted")
        radix = _radix(len(self.states), vocab_size)[d]
        return int(sum(((s + 1) if s is not None else 0) * radix[j]
                       for j, s in enumerate(self.states)))


@dataclass(frozen=True, eq=False)
class CondModel:
    """Dense tabular conditionals ``p(x^d = v | context)`` for one block size.

    ``tables`` has shape ``(P, n, (V+1)**(n-1), V)`` where ``P = 1`` for a
    single-block space and ``V**n + 1`` otherwise.
    """

    space: SeqSpace
    tables: np.ndarray
    alpha: float = 1.0
    mode: str = "fitted"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        tables = np.array(self.tables, dtype=np.float64, copy=True)
        expected = table_shape(self.space)
        if tables.shape != expected:
            raise ValueError(f"tables must have shape {expected}, got {tables.shape}")
        if np.any(tables < 0) or not np.all(np.isfinite(tables)):
            raise ValueError("conditional probabilities must be finite and nonnegative")
        if np.max(np.abs(tables.sum(-1) - 1.0)) > 1e-12:
            raise ValueError("every conditional vector must sum to 1 within 1e-12")
        tables.flags.writeable = False
        object.__setattr__(self, "tables", tables)

    @property
    def n(self) -> int:
        return self.space.block_size

    @property
    def vocab_size(self) -> int:
        return self.space.vocab_size

    def prev_index(self, prev: Sequence[int] | np.ndarray | None) -> np.ndarray | int:
        if prev is None:
            return 0
        if self.space.num_blocks == 1:
            raise ValueError("single-block model has no previous-block context")
        return 1 + encode_block(np.asarray(prev), self.vocab_size)

    def conditional(self, d: int, context: Context) -> np.ndarray:
        return self.tables[self.prev_index(context.prev), d, context.key(d, self.vocab_size)]

    def position_logprobs(self, x, ranks, prev=None) -> np.ndarray:
        """Log conditionals of every position of ``x`` under rank matrices ``ranks``.

        ``x`` is ``(..., n)`` and ``ranks`` is ``(..., n)``; they broadcast
        against each other.  Position ``d`` is conditioned on the positions
        ``j`` with ``ranks[j] < ranks[d]``.
        """
        x = np.asarray(x, dtype=np.int64)
        ranks = np.asarray(ranks, dtype=np.int64)
        radix = _radix(self.n, self.vocab_size)
        revealed = ranks[..., None, :] < ranks[..., :, None]
        keys = np.sum(np.where(revealed, (x[..., None, :] + 1) * radix, 0), axis=-1)
        p_idx = np.asarray(self.prev_index(prev))
        shape = np.broadcast_shapes(keys.shape, x.shape)
        probs = self.tables[
            np.broadcast_to(p_idx[..., None], shape),
            np.broadcast_to(np.arange(self.n), shape),
            np.broadcast_to(keys, shape),
            np.broadcast_to(x, shape),
        ]
        with np.errstate(divide="ignore"):
            return np.log(probs)

    def logliks(self, x, ranks, prev=None) -> np.ndarray:
        """``log p(x | pi)`` for each ordering in ``ranks``; ``-inf`` on zero conditionals."""
        return np.sum(self.position_logprobs(x, ranks, prev), axis=-1)

    def with_mode(self, mode: str) -> "CondModel":
        return CondModel(self.space, self.tables, self.alpha, mode)


def table_shape(space: SeqSpace) -> tuple[int, int, int, int]:
    n, v = space.block_size, space.vocab_size
    p = 1 if space.num_blocks == 1 else v**n + 1
    shape = (p, n, (v + 1) ** (n - 1), v)
    if math.prod(shape) > TABLE_CAP:
        raise EnumerationCapError(
            f"dense tables of shape {shape} exceed the cap of {TABLE_CAP} entries"
        )
    return shape


@dataclass(frozen=True, eq=False)
class GroundTruthJoint:
    """Explicit data distribution: a joint over the first block plus a shared
    block transition ``transition[prev, cur]`` (``None`` for a single block)."""

    space: SeqSpace
    first: np.ndarray
    transition: np.ndarray | None = None
    kind: str = "random-joint"

    def __post_init__(self):
        m = self.space.block_states
        first = np.array(self.first, dtype=np.float64, copy=True).reshape(-1)
        if first.shape != (m,):
            raise ValueError(f"first-block joint must have {m} entries")
        _check_distribution(first, "first-block joint")
        first.flags.writeable = False
        object.__setattr__(self, "first", first)
        if self.space.num_blocks > 1:
            if self.transition is None:
                raise ValueError("multi-block spaces need a block transition")
            trans = np.array(self.transition, dtype=np.float64, copy=True)
            if trans.shape != (m, m):
                raise ValueError(f"transition must have shape {(m, m)}")
            for row in trans:
                _check_distribution(row, "transition row")
            trans.flags.writeable = False
            object.__setattr__(self, "transition", trans)
        elif self.transition is not None:
            raise ValueError("single-block spaces take no transition")

    @classmethod
    def random(
        cls,
        space: SeqSpace,
        rng: np.random.Generator,
        kind: str = "random-joint",
        concentration: float = 1.0,
    ) -> "GroundTruthJoint":
        """Dirichlet-drawn joint.

        ``random-joint`` makes blocks i.i.d. copies of one random block joint;
        ``block-markov`` draws an independent random transition row per
        previous-block state.
        """
        m = space.block_states
        first = rng.dirichlet(np.full(m, concentration))
        transition = None
        if space.num_blocks > 1:
            if kind == "random-joint":
                transition = np.tile(first, (m, 1))
            elif kind == "block-markov":
                transition = rng.dirichlet(np.full(m, concentration), size=m)
            else:
                raise ValueError(f"unknown ground-truth kind {kind!r}")
        elif kind not in ("random-joint", "block-markov"):
            raise ValueError(f"unknown ground-truth kind {kind!r}")
        return cls(space, first, transition, kind)

    def block_rows(self) -> np.ndarray:
        """Per table row (see :class:`CondModel`) the block joint it conditions on."""
        if self.transition is None:
            return self.first[None, :]
        return np.vstack([self.first[None, :], self.transition])

    def logprob(self, x) -> np.ndarray:
        """Exact ``log p(x)`` for one sequence ``(L,)`` or a batch ``(N, L)``."""
        x = np.asarray(x, dtype=np.int64)
        blocks = [encode_block(x[..., list(b)], self.space.vocab_size)
                  for b in block_layout(self.space)]
        with np.errstate(divide="ignore"):
            out = np.log(self.first[blocks[0]])
            for prev, cur in zip(blocks, blocks[1:]):
                out = out + np.log(self.transition[prev, cur])
        return out

    def full(self) -> np.ndarray:
        """Probability of every sequence, indexed by ``encode_block`` over all ``L`` positions."""
        total = self.space.vocab_size**self.space.length
        if total > TABLE_CAP:
            raise EnumerationCapError(f"{total} sequences exceed the cap {TABLE_CAP}")
        all_x = decode_block(np.arange(total), self.space.vocab_size, self.space.length)
        return np.exp(self.logprob(all_x))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        n, v = self.space.block_size, self.space.vocab_size
        idx = [_inverse_cdf(rng, np.cumsum(self.first)[None, :], size)]
        if self.transition is not None:
            cum = np.cumsum(self.transition, axis=1)
            for _ in range(1, self.space.num_blocks):
                idx.append(_inverse_cdf(rng, cum[idx[-1]], size))
        return np.concatenate([decode_block(i, v, n) for i in idx], axis=-1).reshape(size, self.space.length)

    def to_dict(self) -> dict:
        return {
            "format": JOINT_FORMAT,
            "version": 1,
            "space": self.space.to_dict(),
            "kind": self.kind,
            "first": self.first.tolist(),
            "transition": None if self.transition is None else self.transition.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthJoint":
        if d.get("format") != JOINT_FORMAT:
            raise ValueError("not a ground-truth joint file")
        return cls(SeqSpace.from_dict(d["space"]), np.asarray(d["first"]),
                   None if d["transition"] is None else np.asarray(d["transition"]),
                   d.get("kind", "random-joint"))


def _check_distribution(p: np.ndarray, what: str) -> None:
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-10:
        raise ValueError(f"{what} must be nonnegative and sum to 1 within 1e-10")


def _inverse_cdf(rng: np.random.Generator, cum: np.ndarray, size: int) -> np.ndarray:
    u = rng.random(size) * cum[..., -1]
    cum = np.broadcast_to(cum, (size, cum.shape[-1]))
    return np.minimum((u[:, None] >= cum).sum(axis=1), cum.shape[-1] - 1)


# ---------------------------------------------------------------------------
# likelihood under orderings
# ---------------------------------------------------------------------------


def _check_scope(model: CondModel, x, order_size: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    if x.shape[-1] != model.n or order_size != model.n:
        raise ValueError(f"ordering and sequence must cover the {model.n}-position scope")
    return x


def logprob_given_single_order(model: CondModel, x, order: SingleOrder, prev=None) -> float:
    """``log p(x | pi)`` for a permutation; the identity order gives the ARM chain rule."""
    x = _check_scope(model, x, order.size)
    return float(model.logliks(x, order.ranks, prev))


def logprob_given_grouped_order(model: CondModel, x, order: GroupedOrder, prev=None) -> float:
    """Within-step factorized ``log p(x | pi)``: each position sees only earlier groups."""
    x = _check_scope(model, x, order.size)
    return float(model.logliks(x, order.ranks, prev))


def bank_logliks(model: CondModel, x, bank: OrderBank, prev=None) -> np.ndarray:
    """``log p(x | pi_k)`` for every ordering of ``bank``.

    ``x`` may be a batch ``(N, n)`` (with ``prev`` of shape ``(N, n)``), giving
    an ``(N, K)`` matrix.
    """
    x = np.asarray(x, dtype=np.int64)
    if bank.scope != model.n:
        raise ValueError("bank scope does not match the model block size")
    if x.ndim == 1:
        return model.logliks(x, bank.ranks, prev)
    p = None if prev is None else np.asarray(prev)[:, None, :]
    return model.logliks(x[:, None, :], bank.ranks[None, :, :], p)


def _subset_logprobs(model: CondModel, x: np.ndarray, prev) -> np.ndarray:
    """``lp[S, d] = log p(x^d | x^S)`` for every revealed subset ``S`` (bitmask)."""
    n = model.n
    bits = _subset_bits(n)
    radix = _radix(n, model.vocab_size)
    keys = (bits[:, None, :] * (x + 1)[None, None, :] * radix[None, :, :]).sum(-1)
    probs = model.tables[model.prev_index(prev), np.arange(n)[None, :], keys, x[None, :]]
    with np.errstate(divide="ignore"):
        lp = np.log(probs)
    return np.where(bits, -np.inf, lp)


def _exact_single_dp(model: CondModel, x: np.ndarray, prev) -> float:
    """Sum over all ``n!`` orders by dynamic programming over revealed subsets."""
    n = model.n
    if n > DP_SINGLE_CAP:
        raise EnumerationCapError(f"subset DP over 2**{n} states exceeds cap")
    lp = _subset_logprobs(model, x, prev)
    popcount = _subset_bits(n).sum(1)
    f = np.full(2**n, -np.inf)
    f[0] = 0.0
    for k in range(n):
        layer = np.flatnonzero(popcount == k)
        for d in range(n):
            src = layer[(layer >> d) & 1 == 0]
            np.logaddexp.at(f, src | (1 << d), f[src] + lp[src, d])
    return float(f[-1] - math.lgamma(n + 1))


@lru_cache(maxsize=None)
def _subset_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """All ``(S, G)`` with ``G`` a subset of the complement of ``S`` (``3**n`` pairs)."""
    full = 2**n - 1
    src, grp = [], []
    for s in range(2**n):
        comp = full & ~s
        g = comp
        while True:
            src.append(s)
            grp.append(g)
            if g == 0:
                break
            g = (g - 1) & comp
    return np.asarray(src, dtype=np.int64), np.asarray(grp, dtype=np.int64)


def _exact_grouped_dp(model: CondModel, x: np.ndarray, steps: int, prev) -> float:
    """Sum over all ``steps**n`` i.i.d. step assignments, one step at a time."""
    n = model.n
    if n > DP_GROUPED_CAP:
        raise EnumerationCapError(f"grouped DP over 3**{n} pairs exceeds cap")
    lp = _subset_logprobs(model, x, prev)
    src, grp = _subset_pairs(n)
    gbits = _subset_bits(n)[grp]
    step_lp = np.sum(np.where(gbits, lp[src], 0.0), axis=-1)
    g = np.full(2**n, -np.inf)
    g[0] = 0.0
    for _ in range(steps):
        nxt = np.full(2**n, -np.inf)
        np.logaddexp.at(nxt, src | grp, g[src] + step_lp)
        g = nxt
    return float(g[-1] - n * math.log(steps))


def exact_logprob(model: CondModel, x, regime: Regime, prev=None, method: str = "auto") -> float:
    """Exact ``log E_pi[p(x | pi)]`` over one block under the regime's prior.

    ``method="dp"`` sums over orderings with a dynamic program on revealed
    subsets; ``method="enumerate"`` averages over the enumerated ordering bank.
    ``"auto"`` uses the DP wherever it applies (it does not for the chunked
    grouping scheme).
    """
    x = np.asarray(x, dtype=np.int64)
    if x.shape != (model.n,):
        raise ValueError(f"expected a block of {model.n} tokens")
    if method == "auto":
        method = "enumerate" if regime.kind == "mdm" and regime.scheme == "chunked" else "dp"
    if method == "enumerate":
        bank = enumerate_orders(model.n, regime)
        return float(log_mean_exp(bank_logliks(model, x, bank, prev), weights=bank.weights))
    if method != "dp":
        raise ValueError(f"unknown method {method!r}")
    if regime.kind == "ao-arm":
        return _exact_single_dp(model, x, prev)
    if regime.scheme != "iid":
        raise ValueError("the DP only covers the iid grouping scheme")
    return _exact_grouped_dp(model, x, regime.steps, prev)


BlockEstimator = Callable[[int, np.ndarray, np.ndarray | None], float]


def logprob_block(model: CondModel, x, estimator: BlockEstimator) -> float:
    """Compose per-block values ``estimator(b, x_block, prev_block)`` into a sequence value."""
    x = model.space.validate_sequence(x)
    total = 0.0
    prev = None
    for b, block in enumerate(block_layout(model.space)):
        xb = x[list(block)]
        total += float(estimator(b, xb, prev))
        prev = xb
    return total


def exact_sequence_logprob(model: CondModel, x, regime: Regime, method: str = "auto") -> float:
    return logprob_block(
        model, x, lambda b, xb, prev: exact_logprob(model, xb, regime, prev, method)
    )


# ---------------------------------------------------------------------------
# construction: fitting, Bayes-exact conditionals, perturbation
# ---------------------------------------------------------------------------


def _mask_rows(
    n: int, num_examples: int, masks: str | int, rng: np.random.Generator | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Training masks as ``(example index, revealed bits, target bits)`` rows."""
    if masks == "all":
        bits = _subset_bits(n)
        ex = np.repeat(np.arange(num_examples), len(bits))
        revealed = np.tile(bits, (num_examples, 1))
        return ex, revealed, ~revealed
    if masks == "left_to_right":
        prefix = np.tril(np.ones((n, n), dtype=bool), k=-1)
        ex = np.repeat(np.arange(num_examples), n)
        revealed = np.tile(prefix, (num_examples, 1))
        target = np.tile(np.eye(n, dtype=bool), (num_examples, 1))
        return ex, revealed, target
    if isinstance(masks, (int, np.integer)) and masks >= 1:
        if rng is None:
            raise ValueError("sampled masks need an rng")
        rows = num_examples * int(masks)
        ranks = sample_ranks(rng, n, Regime.ao_arm(), rows)
        cut = rng.integers(0, n, size=rows)
        revealed = ranks < cut[:, None]
        return np.repeat(np.arange(num_examples), int(masks)), revealed, ~revealed
    raise ValueError(f"masks must be 'all', 'left_to_right' or a positive int, got {masks!r}")


def count_table(
    corpus,
    space: SeqSpace,
    masks: str | int = "all",
    rng: np.random.Generator | None = None,
    chunk: int = 4096,
) -> np.ndarray:
    """Occurrence counts ``[prev row, position, context key, symbol]`` over a corpus."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise ValueError("corpus must be a nonempty (N, L) array")
    if corpus.shape[1] != space.length:
        raise ValueError(f"corpus sequences must have length {space.length}")
    shape = table_shape(space)
    n, v = space.block_size, space.vocab_size
    radix = _radix(n, v)
    layout = block_layout(space)
    counts = np.zeros(math.prod(shape), dtype=np.float64)
    strides = np.array([shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1])
    for start in range(0, corpus.shape[0], chunk):
        part = corpus[start:start + chunk]
        for b, block in enumerate(layout):
            xb = part[:, list(block)]
            if b == 0:
                prev_idx = np.zeros(len(part), dtype=np.int64)
            else:
                prev_idx = 1 + encode_block(part[:, list(layout[b - 1])], v)
            ex, revealed, target = _mask_rows(n, len(part), masks, rng)
            states = np.where(revealed, xb[ex] + 1, 0)
            for d in range(n):
                sel = target[:, d]
                keys = states[sel] @ radix[d]
                flat = (prev_idx[ex[sel]] * strides[0] + d * strides[1]
                        + keys * strides[2] + xb[ex[sel], d])
                counts += np.bincount(flat, minlength=counts.size)
    return counts.reshape(shape)


def _smooth(counts: np.ndarray, alpha: float, prior: np.ndarray | None) -> np.ndarray:
    v = counts.shape[-1]
    if prior is None:
        prior = np.full(counts.shape, 1.0 / v)
    num = counts + alpha * v * prior
    den = num.sum(-1, keepdims=True)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), prior)


def fit_tabular(
    corpus,
    space: SeqSpace,
    alpha: float = 1.0,
    masks: str | int = "all",
    rng: np.random.Generator | None = None,
) -> CondModel:
    """Count-based conditionals ``(count + alpha) / (total + alpha * V)``.

    ``masks`` picks which (context, target) pairs each example contributes:
    ``"all"`` every revealed subset with every masked target, ``"left_to_right"``
    only prefix contexts (an ARM), or an integer number of random masks per
    example (random order plus random cut, all masked positions targeted).
    Contexts never observed with ``alpha = 0`` fall back to uniform.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    counts = count_table(corpus, space, masks, rng)
    return CondModel(space, _smooth(counts, alpha, None), alpha, "fitted")


def fit_arm(corpus, space: SeqSpace, alpha: float = 1.0) -> CondModel:
    """Left-to-right ARM: only prefix contexts carry counts."""
    return fit_tabular(corpus, space, alpha, masks="left_to_right")


def _conditionals_from_joint(rows: np.ndarray, vocab_size: int, n: int) -> np.ndarray:
    """Exact conditional tables ``(P, n, C, V)`` for each block joint in ``rows``."""
    p_rows = rows.shape[0]
    v = vocab_size
    joint = rows.reshape((p_rows,) + (v,) * n)
    radix = _radix(n, v)
    tables = np.full((p_rows, n, (v + 1) ** (n - 1), v), np.nan)
    for s in range(2**n):
        revealed = [j for j in range(n) if (s >> j) & 1]
        assign = decode_block(np.arange(v ** len(revealed)), v, len(revealed))
        for d in range(n):
            if (s >> d) & 1:
                continue
            keep = sorted(revealed + [d])
            drop = tuple(1 + j for j in range(n) if j not in keep)
            m = joint.sum(axis=drop) if drop else joint
            m = np.moveaxis(m, 1 + keep.index(d), -1).reshape(p_rows, -1, v)
            den = m.sum(-1, keepdims=True)
            cond = np.where(den > 0, m / np.where(den > 0, den, 1.0), 1.0 / v)
            keys = (assign + 1) @ radix[d, revealed] if revealed else np.zeros(1, np.int64)
            tables[:, d, keys] = cond
    return tables


def bayes_model_from_joint(joint: GroundTruthJoint) -> CondModel:
    """Exact conditionals of ``joint``: the order-invariant optimum of the family."""
    space = joint.space
    table_shape(space)
    tables = _conditionals_from_joint(joint.block_rows(), space.vocab_size, space.block_size)
    return CondModel(space, tables, 0.0, "bayes-exact")


def random_model(space: SeqSpace, rng: np.random.Generator, concentration: float = 1.0) -> CondModel:
    """Every conditional vector drawn independently from a symmetric Dirichlet."""
    shape = table_shape(space)
    tables = rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])
    return CondModel(space, tables, 0.0, "random")


def perturb_model(model: CondModel, eps: float, rng: np.random.Generator) -> CondModel:
    """Mix each conditional with an independent uniform-Dirichlet vector: ``(1-eps) p + eps u``."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    if eps == 0.0:
        return model.with_mode("perturbed")
    u = rng.dirichlet(np.ones(model.vocab_size), size=model.tables.shape[:-1])
    mixed = (1.0 - eps) * model.tables + eps * u
    return CondModel(model.space, mixed / mixed.sum(-1, keepdims=True), model.alpha, "perturbed")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_block(model: CondModel, rng: np.random.Generator, ranks, prev=None) -> np.ndarray:
    """Ancestral sampling of ``len(ranks)`` blocks, each along its own ordering.

    Positions sharing a step are drawn independently given earlier steps.
    """
    ranks = np.atleast_2d(np.asarray(ranks, dtype=np.int64))
    size, n = ranks.shape
    radix = _radix(n, model.vocab_size)
    p_idx = np.broadcast_to(np.asarray(model.prev_index(prev)), (size,))
    x = np.zeros((size, n), dtype=np.int64)
    for t in np.unique(ranks):
        states = np.where(ranks < t, x + 1, 0)
        for d in range(n):
            sel = np.flatnonzero(ranks[:, d] == t)
            if sel.size == 0:
                continue
            probs = model.tables[p_idx[sel], d, states[sel] @ radix[d]]
            x[sel, d] = _inverse_cdf(rng, np.cumsum(probs, axis=1), sel.size)
    return x


def sample_sequence(model: CondModel, rng: np.random.Generator, ordering, prev=None) -> np.ndarray:
    """One block sampled along ``ordering``."""
    return sample_block(model, rng, ordering.ranks[None, :], prev)[0]


def sample_from_model(
    model: CondModel, rng: np.random.Generator, regime: Regime, size: int
) -> np.ndarray:
    """Full sequences from the latent-ordering mixture, block by block."""
    blocks = []
    prev = None
    for _ in range(model.space.num_blocks):
        ranks = sample_ranks(rng, model.n, regime, size)
        prev = sample_block(model, rng, ranks, prev)
        blocks.append(prev)
    return np.concatenate(blocks, axis=1)


# ---------------------------------------------------------------------------
# reference instance
# ---------------------------------------------------------------------------

TOY_A_SPACE = SeqSpace(2, 2)


def toy_a_model() -> CondModel:
    """Two tokens over {A=0, B=1}: order-invariant on (A,A), order-dependent on (A,B)."""
    # keys: 0 = other position masked, 1 = other is A, 2 = other is B
    per_position = np.array([[0.5, 0.5], [0.8, 0.2], [0.3, 0.7]])
    return CondModel(TOY_A_SPACE, np.stack([per_position, per_position])[None], 0.0, "explicit")


def toy_a_joint() -> GroundTruthJoint:
    """Joint induced by Toy-A's left-to-right factorization."""
    return GroundTruthJoint(TOY_A_SPACE, np.array([0.4, 0.1, 0.15, 0.35]))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def model_to_dict(model: CondModel, **extra) -> dict:
    p, n, c, _ = model.tables.shape
    flat = [
        [int(pi), int(d), int(k), model.tables[pi, d, k].tolist()]
        for pi in range(p) for d in range(n) for k in range(c)
    ]
    return {
        "format": MODEL_FORMAT,
        "version": 1,
        "space": model.space.to_dict(),
        "mode": model.mode,
        "alpha": model.alpha,
        **extra,
        "tables": flat,
    }


def model_from_dict(d: dict) -> CondModel:
    if d.get("format") != MODEL_FORMAT or d.get("version") != 1:
        raise ValueError("unsupported model file")
    space = SeqSpace.from_dict(d["space"])
    tables = np.full(table_shape(space), np.nan)
    for pi, pos, key, probs in d["tables"]:
        tables[pi, pos, key] = probs
    if np.isnan(tables).any():
        raise ValueError("model file does not cover every (position, context)")
    return CondModel(space, tables, float(d["alpha"]), d["mode"])


def save_model(model: CondModel, path: str | Path, **extra) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, **extra)) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> CondModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_joint(joint: GroundTruthJoint, path: str | Path) -> None:
    Path(path).write_text(json.dumps(joint.to_dict()) + "\n", encoding="utf-8")


def load_joint(path: str | Path) -> GroundTruthJoint:
    return GroundTruthJoint.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_corpus(corpus, space: SeqSpace, path: str | Path) -> None:
    corpus = np.asarray(corpus, dtype=np.int64).reshape(-1, space.length)
    lines = [f"# vocab_size={space.vocab_size} length={space.length} count={len(corpus)}"]
    lines.extend(" ".join(map(str, row)) for row in corpus.tolist())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path: str | Path) -> tuple[np.ndarray, int, int]:
    """Returns ``(corpus, vocab_size, length)``; the header is mandatory."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing corpus header")
    meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    v, length, count = int(meta["vocab_size"]), int(meta["length"]), int(meta["count"])
    rows = [[int(t) for t in ln.split()] for ln in lines[1:] if ln.strip()]
    if len(rows) != count:
        raise ValueError(f"{path}: header announces {count} sequences, found {len(rows)}")
    corpus = np.asarray(rows, dtype=np.int64).reshape(count, length) if rows else np.zeros((0, length), np.int64)
    if corpus.size and (corpus.min() < 0 or corpus.max() >= v):
        raise ValueError(f"{path}: token out of range")
    return corpus, v, length
