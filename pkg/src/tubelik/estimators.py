"""Likelihood bounds on latent-ordering models and their Monte Carlo estimators.

Every estimator consumes per-ordering log-likelihoods ``l_k = log p(x | pi_k)``.
The ``*_value`` kernels are vectorized over leading axes (the bank is the last
axis) and are what the replicate studies call; the public estimator functions
wrap them with bank bookkeeping and return :class:`BoundEstimate` records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .logspace import _shift, log_mean_exp, log_sum_exp, softmax
from .models import CondModel, _smooth, bank_logliks, count_table
from .seqspace import OrderBank, Regime, block_layout, enumerate_orders

SURROGATE_KINDS = ("self", "arm", "arm-ft", "fixed")

DEFAULT_BETA = 2.0
DEFAULT_TVO_GRID = 200
DEFAULT_ISVGB_PAIRS = 2


class IndependenceError(ValueError):
    """Two banks that must be independent share ordering draws."""


@dataclass(frozen=True)
class BankTag:
    """Identifies the draws ``start..stop-1`` of a named ordering stream."""

    stream: str
    start: int
    stop: int

    def overlaps(self, other: "BankTag") -> bool:
        return self.stream == other.stream and self.start < other.stop and other.start < self.stop


@dataclass(frozen=True, eq=False)
class SampleBank:
    """Per-ordering log-likelihoods of one ``x`` plus provenance of the draws."""

    logliks: np.ndarray
    tag: BankTag | None = None
    provenance: str = "sampled"

    def __post_init__(self):
        ll = np.array(self.logliks, dtype=np.float64, copy=True).reshape(-1)
        if np.any(np.isnan(ll)) or np.any(ll == np.inf):
            raise ValueError("log-likelihoods must be finite or -inf")
        ll.flags.writeable = False
        object.__setattr__(self, "logliks", ll)

    def __len__(self) -> int:
        return self.logliks.size

    @classmethod
    def from_orders(cls, model: CondModel, x, bank: OrderBank, prev=None,
                    tag: BankTag | None = None) -> "SampleBank":
        return cls(bank_logliks(model, x, bank, prev), tag, bank.provenance)

    def split(self, *sizes: int) -> list["SampleBank"]:
        """Consecutive sub-banks; tags are narrowed so the parts stay disjoint."""
        if sum(sizes) > len(self):
            raise ValueError("split sizes exceed the bank")
        out, start = [], 0
        for size in sizes:
            tag = None
            if self.tag is not None:
                tag = BankTag(self.tag.stream, self.tag.start + start, self.tag.start + start + size)
            out.append(SampleBank(self.logliks[start:start + size], tag, self.provenance))
            start += size
        return out


@dataclass(frozen=True)
class Surrogate:
    """A strictly positive ``psi(x)`` anchoring the tangent bound, held as ``log psi``."""

    kind: str
    log_psi: float
    num_orders: int | None = None
    source: BankTag | None = None

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if not math.isfinite(self.log_psi):
            raise ValueError("surrogate must be strictly positive and finite (log psi finite)")

    @property
    def label(self) -> str:
        if self.kind == "self":
            return "psi_pi" if self.num_orders == 1 else f"psi_M{self.num_orders}"
        return {"arm": "psi_ARM", "arm-ft": "psi_ARM-FT", "fixed": "psi_fixed"}[self.kind]


@dataclass(frozen=True)
class BoundEstimate:
    """One estimator output; direction and bound preservation follow the estimator, not the value."""

    estimator: str
    value: float
    direction: str
    bound_preserving: bool
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def to_record(self) -> dict:
        return {
            "estimator": self.estimator,
            "params": dict(self.params),
            "value_nats": self.value,
            "direction": self.direction,
            "bound_preserving": self.bound_preserving,
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# vectorized kernels
# ---------------------------------------------------------------------------


def elbo_k_value(ll) -> np.ndarray:
    return log_mean_exp(ll, axis=-1)


def tube_value(ll, log_psi) -> np.ndarray:
    """``log psi + (p_hat - psi) / psi`` with the ratio taken as ``expm1(log p_hat - log psi)``."""
    log_psi = np.asarray(log_psi, dtype=np.float64)
    return log_psi + np.expm1(log_mean_exp(ll, axis=-1) - log_psi)


def cubo_value(ll, beta: float) -> np.ndarray:
    ll = np.asarray(ll, dtype=np.float64)
    m = _shift(ll, -1)
    with np.errstate(divide="ignore"):
        inner = np.log(np.mean(np.exp(beta * (ll - m)), axis=-1, keepdims=True))
    return np.squeeze(m + inner / beta, axis=-1)


def tvo_grid(num_points: int) -> np.ndarray:
    return np.arange(1, num_points + 1, dtype=np.float64) / num_points


def _tvo_inner(ll: np.ndarray, log_w: np.ndarray | float, grid: int) -> np.ndarray:
    m = _shift(ll, -1)
    d = ll - m
    d0 = np.where(np.isfinite(d), d, 0.0)
    log_w = np.asarray(log_w, dtype=np.float64)
    if log_w.ndim:
        log_w = log_w - np.max(log_w)
    # unnormalized weights exp(beta d) w, one row per grid point
    e = np.exp(tvo_grid(grid)[:, None] * d[..., None, :] + log_w)
    num_den = e @ np.stack([d0, np.ones_like(d0)], axis=-1)
    inner = num_den[..., 0] / num_den[..., 1]
    return np.squeeze(m, -1) + np.mean(inner, axis=-1)


def tvo_upper_value(ll, grid: int = DEFAULT_TVO_GRID) -> np.ndarray:
    """Right Riemann sum over ``beta = 1/grid, ..., 1`` with self-normalized weights."""
    return _tvo_inner(np.asarray(ll, dtype=np.float64), 0.0, grid)


def isvgb_value(x_side, y_side) -> np.ndarray:
    """IS-VG-B from X-side and Y-side banks shaped ``(..., n_pairs, s)``."""
    x_side = np.asarray(x_side, dtype=np.float64)
    y_side = np.asarray(y_side, dtype=np.float64)
    per_pair = log_mean_exp(x_side, axis=-1)
    m = _shift(per_pair, -1)
    first = np.squeeze(m, -1) + np.mean(per_pair - m, axis=-1)
    log_ratio = log_sum_exp(y_side, axis=-1) - log_sum_exp(x_side, axis=-1)
    return first + log_mean_exp(log_ratio, axis=-1)


def isvgb_layout(ll, n_pairs: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a bank of ``K = 2 s n_pairs`` draws into X-side and Y-side pair banks."""
    ll = np.asarray(ll, dtype=np.float64)
    k = ll.shape[-1]
    if n_pairs < 2:
        raise ValueError("IS-VG-B needs at least 2 pairs")
    if k % (2 * n_pairs) or k == 0:
        raise ValueError(f"bank size {k} is not a multiple of 2 * n_pairs = {2 * n_pairs}")
    s = k // (2 * n_pairs)
    half = s * n_pairs
    shape = ll.shape[:-1] + (n_pairs, s)
    return ll[..., :half].reshape(shape), ll[..., half:].reshape(shape)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def _as_bank(bank) -> SampleBank:
    return bank if isinstance(bank, SampleBank) else SampleBank(bank)


def elbo(bank) -> BoundEstimate:
    bank = _as_bank(bank)
    if len(bank) != 1:
        raise ValueError("ELBO takes exactly one ordering; use elbo_k for more")
    return BoundEstimate("elbo", float(bank.logliks[0]), "lower", True, {"K": 1})


def elbo_k(bank) -> BoundEstimate:
    bank = _as_bank(bank)
    if len(bank) == 0:
        raise ValueError("empty bank")
    return BoundEstimate("elbo_k", float(elbo_k_value(bank.logliks)), "lower", True,
                         {"K": len(bank)})


def tube(bank, surrogate: Surrogate) -> BoundEstimate:
    """Unbiased Monte Carlo estimate of the tangent upper bound at ``surrogate``.

    A self-surrogate must come from draws disjoint from ``bank``; both banks
    then need tags so that this can be checked.
    """
    bank = _as_bank(bank)
    if len(bank) == 0:
        raise ValueError("empty bank")
    if surrogate.kind == "self":
        if surrogate.source is None or bank.tag is None:
            raise IndependenceError(
                "self-surrogate independence cannot be verified: both banks need tags"
            )
        if surrogate.source.overlaps(bank.tag):
            raise IndependenceError(
                f"self-surrogate draws {surrogate.source} overlap estimation draws {bank.tag}"
            )
    value = float(tube_value(bank.logliks, surrogate.log_psi))
    return BoundEstimate("tube", value, "upper", True,
                         {"K": len(bank), "surrogate": surrogate.label,
                          "M": surrogate.num_orders})


def two_sided_interval(bank, surrogate: Surrogate) -> tuple[BoundEstimate, BoundEstimate]:
    """``(ELBO_K, TUBE)`` from one bank of draws: a lower and an upper estimate."""
    return elbo_k(bank), tube(bank, surrogate)


def surrogate_self(bank) -> Surrogate:
    """``psi_M``: average of ``p(x | pi)`` over the ``M`` orderings of ``bank``."""
    bank = _as_bank(bank)
    if len(bank) == 0:
        raise ValueError("self-surrogate needs at least one ordering")
    log_psi = float(elbo_k_value(bank.logliks))
    return Surrogate("self", log_psi, len(bank), bank.tag)


def surrogate_fixed(log_psi: float) -> Surrogate:
    return Surrogate("fixed", float(log_psi))


def arm_logprob(arm_model: CondModel, x) -> float:
    """Chain-rule log-likelihood of a full sequence under the identity order of every block."""
    x = arm_model.space.validate_sequence(x)
    n = arm_model.n
    total, prev = 0.0, None
    identity = np.arange(n)
    for block in block_layout(arm_model.space):
        xb = x[list(block)]
        total += float(arm_model.logliks(xb, identity, prev))
        prev = xb
    return total


def surrogate_arm(arm_model: CondModel, x, kind: str = "arm") -> Surrogate:
    log_psi = arm_logprob(arm_model, x)
    if not math.isfinite(log_psi):
        raise ValueError("ARM surrogate assigns zero probability; fit it with smoothing")
    return Surrogate(kind, log_psi)


def finetune_surrogate_arm(arm_model: CondModel, model_samples, alpha: float = 1.0) -> CondModel:
    """Refit prefix conditionals on samples from the evaluated model.

    The pretrained ARM acts as the smoothing prior:
    ``p = (count + alpha V p_arm) / (total + alpha V)``; ``alpha = 0`` is a plain refit.
    """
    samples = np.asarray(model_samples)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("fine-tuning needs a nonempty corpus of model samples")
    counts = count_table(samples, arm_model.space, masks="left_to_right")
    return CondModel(arm_model.space, _smooth(counts, alpha, arm_model.tables), alpha, "fitted")


def cubo(bank, beta: float = DEFAULT_BETA) -> BoundEstimate:
    bank = _as_bank(bank)
    if beta < 1:
        raise ValueError("CUBO needs beta >= 1")
    if len(bank) == 0:
        raise ValueError("empty bank")
    return BoundEstimate("cubo", float(cubo_value(bank.logliks, beta)), "upper", False,
                         {"K": len(bank), "beta": beta})


def tvo_upper(bank, grid: int = DEFAULT_TVO_GRID) -> BoundEstimate:
    bank = _as_bank(bank)
    if grid < 1:
        raise ValueError("TVO needs at least one grid point")
    if len(bank) == 0 or not np.any(np.isfinite(bank.logliks)):
        raise ValueError("TVO needs at least one finite log-likelihood")
    return BoundEstimate("tvo_upper", float(tvo_upper_value(bank.logliks, grid)), "upper", False,
                         {"K": len(bank), "grid": grid})


def isvgb(pairs: Sequence[tuple[SampleBank, SampleBank]]) -> BoundEstimate:
    """IS-VG-B from ``n_p >= 2`` pairs of independent ``s``-draw banks ``(X_j, Y_j)``."""
    pairs = [(_as_bank(a), _as_bank(b)) for a, b in pairs]
    if len(pairs) < 2:
        raise ValueError("IS-VG-B needs n_p >= 2 pairs")
    s = len(pairs[0][0])
    if s < 1 or any(len(a) != s or len(b) != s for a, b in pairs):
        raise ValueError("every X/Y bank must hold the same number s >= 1 of draws")
    tags = [t for a, b in pairs for t in (a.tag, b.tag) if t is not None]
    for i, t in enumerate(tags):
        if any(t.overlaps(u) for u in tags[i + 1:]):
            raise IndependenceError("IS-VG-B banks must come from disjoint draws")
    xs = np.stack([a.logliks for a, _ in pairs])
    ys = np.stack([b.logliks for _, b in pairs])
    if np.any(np.all(np.isinf(xs), axis=-1)):
        raise ValueError("an X-side bank has zero likelihood under every ordering")
    return BoundEstimate("isvgb", float(isvgb_value(xs, ys)), "upper", False,
                         {"K": 2 * s * len(pairs), "n_pairs": len(pairs), "s": s})


def isvgb_split(bank, n_pairs: int = DEFAULT_ISVGB_PAIRS) -> list[tuple[SampleBank, SampleBank]]:
    """Cut one bank into ``n_pairs`` X banks followed by ``n_pairs`` Y banks."""
    bank = _as_bank(bank)
    xs, _ = isvgb_layout(bank.logliks, n_pairs)
    s = xs.shape[-1]
    parts = bank.split(*([s] * (2 * n_pairs)))
    return list(zip(parts[:n_pairs], parts[n_pairs:]))


# ---------------------------------------------------------------------------
# population (enumerated) bounds
# ---------------------------------------------------------------------------


def thermodynamic_integrand(beta: float, ll, weights=None) -> float:
    """``E_{q_beta}[log p(x|pi)]`` with ``q_beta`` proportional to ``prior * p(x|pi)**beta``."""
    ll = np.asarray(ll, dtype=np.float64)
    log_w = 0.0 if weights is None else np.log(np.asarray(weights, dtype=np.float64))
    q = softmax(beta * (ll - _shift(ll, -1)) + log_w)
    return float(np.sum(np.where(q > 0, q * ll, 0.0)))


def population_from_logliks(kind: str, ll, weights=None, **params) -> float:
    """Exact value of a bound from the full ordering support and its prior weights."""
    ll = np.asarray(ll, dtype=np.float64)
    exact = float(log_mean_exp(ll, weights=weights))
    if kind == "exact":
        return exact
    if kind == "elbo":
        w = np.full(ll.size, 1.0 / ll.size) if weights is None else np.asarray(weights)
        return float(np.sum(w * ll)) if np.all(np.isfinite(ll[w > 0])) else -math.inf
    if kind == "tube":
        log_psi = float(params["log_psi"])
        if not math.isfinite(log_psi):
            raise ValueError("population TUBE needs a finite log psi")
        return float(log_psi + np.expm1(exact - log_psi))
    if kind == "cubo":
        beta = float(params.get("beta", DEFAULT_BETA))
        if beta < 1:
            raise ValueError("CUBO needs beta >= 1")
        m = float(np.max(ll))
        w = np.full(ll.size, 1.0 / ll.size) if weights is None else np.asarray(weights)
        return m + math.log(float(np.sum(w * np.exp(beta * (ll - m))))) / beta
    if kind == "tvo":
        grid = int(params.get("grid", DEFAULT_TVO_GRID))
        log_w = 0.0 if weights is None else np.log(np.asarray(weights, dtype=np.float64))
        return float(_tvo_inner(ll, log_w, grid))
    raise ValueError(f"unknown population bound {kind!r}")


def population_bound(kind: str, model: CondModel, x, regime: Regime, prev=None,
                     **params) -> float:
    """Population bound of one block, by full enumeration of the ordering prior.

    ``kind="exact"`` is cross-checked against :func:`tubelik.models.exact_logprob`
    in the tests; the other kinds are ``elbo``, ``tube`` (``log_psi``),
    ``cubo`` (``beta``) and ``tvo`` (``grid``).
    """
    bank = enumerate_orders(model.n, regime)
    ll = bank_logliks(model, x, bank, prev)
    return population_from_logliks(kind, ll, bank.weights, **params)


def ordering_variance(ll, log_scale: float = 0.0, weights=None) -> float:
    """``Var_pi[p(x|pi) / exp(log_scale)]`` under the prior, by enumeration."""
    ll = np.asarray(ll, dtype=np.float64)
    w = np.full(ll.size, 1.0 / ll.size) if weights is None else np.asarray(weights)
    r = np.exp(ll - log_scale)
    mean = np.sum(w * r)
    return float(np.sum(w * (r - mean) ** 2))


__all__ = [
    "BankTag", "SampleBank", "Surrogate", "BoundEstimate", "IndependenceError",
    "elbo", "elbo_k", "tube", "two_sided_interval", "cubo", "tvo_upper", "isvgb",
    "isvgb_split", "surrogate_self", "surrogate_fixed", "surrogate_arm", "arm_logprob",
    "finetune_surrogate_arm", "population_bound", "population_from_logliks",
    "thermodynamic_integrand", "ordering_variance", "elbo_k_value", "tube_value",
    "cubo_value", "tvo_upper_value", "isvgb_value", "isvgb_layout",
]
