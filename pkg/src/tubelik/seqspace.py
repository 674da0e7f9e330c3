"""Sequence spaces, generation orderings and ordering banks.

Positions, generation steps and token symbols are all 0-based: a scope of
size ``n`` has positions ``0..n-1`` and a vocabulary of size ``V`` has
symbols ``0..V-1``.

Both kinds of ordering are stored in a single *rank* form: ``ranks[d]`` is the
step at which position ``d`` is revealed, so position ``d`` is predicted
conditioned on exactly the positions ``j`` with ``ranks[j] < ranks[d]``.  For a
single-token ordering the ranks are the inverse permutation; for a grouped
ordering they are the step assignment.
"""

from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

SINGLE_ORDER_CAP = 8
GROUPED_ORDER_CAP = 10**6

GROUPING_SCHEMES = ("iid", "chunked")


class EnumerationCapError(ValueError):
    """Raised when an enumeration would exceed its configured cap."""


def derive_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``; string keys are hashed stably."""
    entropy = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        entropy.append(int(key))
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class SeqSpace:
    """The universe ``{0..V-1}^L`` split into contiguous blocks of ``block_size``."""

    vocab_size: int
    length: int
    block_size: int | None = None

    def __post_init__(self):
        if self.block_size is None:
            object.__setattr__(self, "block_size", self.length)
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.length < 1:
            raise ValueError(f"length must be >= 1, got {self.length}")
        if not 1 <= self.block_size <= self.length:
            raise ValueError(
                f"block_size must lie in [1, {self.length}], got {self.block_size}"
            )
        if self.length % self.block_size:
            raise ValueError(
                f"block_size {self.block_size} does not divide length {self.length}"
            )

    @property
    def num_blocks(self) -> int:
        return self.length // self.block_size

    @property
    def block_states(self) -> int:
        """Number of distinct token assignments of one block."""
        return self.vocab_size**self.block_size

    def validate_sequence(self, x: Sequence[int]) -> np.ndarray:
        arr = np.asarray(x, dtype=np.int64)
        if arr.shape != (self.length,):
            raise ValueError(f"expected a sequence of length {self.length}, got shape {arr.shape}")
        if arr.min(initial=0) < 0 or arr.max(initial=0) >= self.vocab_size:
            raise ValueError(f"tokens must lie in [0, {self.vocab_size})")
        return arr

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "length": self.length,
            "block_size": self.block_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SeqSpace":
        return cls(int(d["vocab_size"]), int(d["length"]), int(d["block_size"]))


def block_layout(space: SeqSpace) -> list[tuple[int, ...]]:
    """Contiguous position sets of each block, in generation order."""
    n = space.block_size
    return [tuple(range(b * n, (b + 1) * n)) for b in range(space.num_blocks)]


def encode_block(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    """Mixed-radix index of block assignments; first position is most significant."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[-1]
    radix = vocab_size ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return tokens @ radix


def decode_block(index: np.ndarray | int, vocab_size: int, n: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    radix = vocab_size ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return (index[..., None] // radix) % vocab_size


@dataclass(frozen=True)
class SingleOrder:
    """A permutation: ``positions[t]`` is the position revealed at step ``t``."""

    positions: tuple[int, ...]

    def __post_init__(self):
        positions = tuple(int(p) for p in self.positions)
        if not positions or sorted(positions) != list(range(len(positions))):
            raise ValueError(f"not a permutation of 0..n-1: {self.positions}")
        object.__setattr__(self, "positions", positions)

    @property
    def size(self) -> int:
        return len(self.positions)

    @property
    def ranks(self) -> np.ndarray:
        ranks = np.empty(self.size, dtype=np.int64)
        ranks[list(self.positions)] = np.arange(self.size)
        return ranks

    @classmethod
    def identity(cls, n: int) -> "SingleOrder":
        return cls(tuple(range(n)))

    @classmethod
    def from_ranks(cls, ranks: Sequence[int]) -> "SingleOrder":
        return cls(tuple(int(p) for p in np.argsort(np.asarray(ranks), kind="stable")))


@dataclass(frozen=True)
class GroupedOrder:
    """An ordered list of ``num_steps`` disjoint, possibly empty position groups.

    Stored as the step assignment ``steps[d]`` of every position ``d``.
    """

    steps: tuple[int, ...]
    num_steps: int

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        if self.num_steps < 1:
            raise ValueError("a grouped ordering needs at least one step")
        if not steps:
            raise ValueError("empty scope")
        if min(steps) < 0 or max(steps) >= self.num_steps:
            raise ValueError(f"step indices must lie in [0, {self.num_steps})")
        object.__setattr__(self, "steps", steps)

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]]) -> "GroupedOrder":
        n = sum(len(g) for g in groups)
        steps = [-1] * n
        for t, group in enumerate(groups):
            for d in group:
                if not 0 <= d < n or steps[d] != -1:
                    raise ValueError("groups must be disjoint and cover 0..n-1")
                steps[d] = t
        if -1 in steps:
            raise ValueError("groups must be disjoint and cover 0..n-1")
        return cls(tuple(steps), len(groups))

    @property
    def size(self) -> int:
        return len(self.steps)

    @property
    def groups(self) -> list[frozenset[int]]:
        out: list[set[int]] = [set() for _ in range(self.num_steps)]
        for d, t in enumerate(self.steps):
            out[t].add(d)
        return [frozenset(g) for g in out]

    @property
    def ranks(self) -> np.ndarray:
        return np.asarray(self.steps, dtype=np.int64)

    def is_all_singletons(self) -> bool:
        return all(len(g) <= 1 for g in self.groups)

    def induced_order(self) -> SingleOrder:
        """The permutation obtained by dropping empty groups; needs singleton groups."""
        if not self.is_all_singletons():
            raise ValueError("only all-singleton groupings induce a single order")
        return SingleOrder(tuple(next(iter(g)) for g in self.groups if g))


Ordering = SingleOrder | GroupedOrder


@dataclass(frozen=True)
class Regime:
    """How orderings are drawn within a block.

    ``kind="ao-arm"`` draws uniform permutations; ``kind="mdm"`` draws grouped
    orderings with ``steps`` generation steps (NFE).  Under ``scheme="iid"`` every
    position picks its step uniformly and independently; under
    ``scheme="chunked"`` a uniform permutation is cut into ``steps`` consecutive
    groups of near-equal size.
    """

    kind: str
    steps: int | None = None
    scheme: str = "iid"

    def __post_init__(self):
        if self.kind not in ("ao-arm", "mdm"):
            raise ValueError(f"unknown regime kind {self.kind!r}")
        if self.kind == "mdm" and (self.steps is None or self.steps < 1):
            raise ValueError("mdm regime needs steps >= 1")
        if self.scheme not in GROUPING_SCHEMES:
            raise ValueError(f"unknown grouping scheme {self.scheme!r}")

    @classmethod
    def ao_arm(cls) -> "Regime":
        return cls("ao-arm")

    @classmethod
    def mdm(cls, steps: int, scheme: str = "iid") -> "Regime":
        return cls("mdm", steps, scheme)

    @property
    def label(self) -> str:
        return "AO-ARM" if self.kind == "ao-arm" else f"NFE={self.steps}"

    def num_orderings(self, n: int) -> int:
        """Size of the support of p(pi) on an ``n``-position scope."""
        if self.kind == "ao-arm":
            return math.factorial(n)
        if self.scheme == "iid":
            return self.steps**n
        sizes = _chunk_sizes(n, self.steps)
        count = math.factorial(n)
        for s in sizes:
            count //= math.factorial(s)
        return count


@dataclass(frozen=True)
class OrderBank:
    """A bank of orderings over one scope, stored as a read-only rank matrix.

    Every bank is uniformly weighted: enumerated banks list each ordering of a
    uniform prior exactly once, sampled banks hold i.i.d. draws.
    """

    scope: int
    ranks: np.ndarray = field(repr=False)
    regime: Regime
    provenance: str
    seed: int | None = None

    def __post_init__(self):
        ranks = np.array(self.ranks, dtype=np.int64, copy=True)
        if ranks.ndim != 2 or ranks.shape[1] != self.scope:
            raise ValueError(f"ranks must have shape (K, {self.scope})")
        if self.provenance not in ("enumerated", "sampled"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "sampled" and self.seed is None:
            raise ValueError("sampled banks must record their seed")
        ranks.flags.writeable = False
        object.__setattr__(self, "ranks", ranks)

    def __len__(self) -> int:
        return self.ranks.shape[0]

    def __iter__(self) -> Iterator[Ordering]:
        for row in self.ranks:
            yield self._make(row)

    def __getitem__(self, i: int) -> Ordering:
        return self._make(self.ranks[i])

    def _make(self, row: np.ndarray) -> Ordering:
        if self.regime.kind == "ao-arm":
            return SingleOrder.from_ranks(row)
        return GroupedOrder(tuple(row.tolist()), self.regime.steps)

    @cached_property
    def weights(self) -> np.ndarray:
        return np.full(len(self), 1.0 / len(self))

    @property
    def is_enumerated(self) -> bool:
        return self.provenance == "enumerated"

    def to_text(self) -> str:
        steps = self.regime.steps if self.regime.kind == "mdm" else self.scope
        header = (
            f"# scope={self.scope} kind={self.regime.kind} steps={steps} "
            f"scheme={self.regime.scheme} provenance={self.provenance} "
            f"seed={'none' if self.seed is None else self.seed}"
        )
        lines = [header]
        for row in self.ranks:
            if self.regime.kind == "ao-arm":
                lines.append(" ".join(str(p) for p in np.argsort(row, kind="stable")))
            else:
                groups = [[] for _ in range(steps)]
                for d, t in enumerate(row):
                    groups[t].append(str(d))
                lines.append(" ".join(f"{t}:{','.join(g)}" for t, g in enumerate(groups)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "OrderBank":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("#"):
            raise ValueError("missing order bank header")
        meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        scope = int(meta["scope"])
        steps = int(meta["steps"])
        regime = (
            Regime.ao_arm()
            if meta["kind"] == "ao-arm"
            else Regime.mdm(steps, meta.get("scheme", "iid"))
        )
        seed = None if meta["seed"] == "none" else int(meta["seed"])
        rows = []
        for line in lines[1:]:
            if regime.kind == "ao-arm":
                rows.append(SingleOrder(tuple(int(p) for p in line.split())).ranks)
            else:
                groups = []
                for tok in line.split():
                    _, body = tok.split(":", 1)
                    groups.append([int(p) for p in body.split(",") if p])
                rows.append(GroupedOrder.from_groups(groups).ranks)
        ranks = np.asarray(rows, dtype=np.int64).reshape(len(rows), scope)
        return cls(scope, ranks, regime, meta["provenance"], seed)


def _chunk_sizes(n: int, steps: int) -> list[int]:
    return [len(c) for c in np.array_split(np.arange(n), steps)]


def _chunk_ranks(perms: np.ndarray, steps: int) -> np.ndarray:
    """Step assignment obtained by cutting each permutation into consecutive chunks."""
    n = perms.shape[-1]
    chunk_of_slot = np.repeat(np.arange(steps), _chunk_sizes(n, steps))
    ranks = np.empty_like(perms)
    np.put_along_axis(ranks, perms, np.broadcast_to(chunk_of_slot, perms.shape), axis=-1)
    return ranks


def enumerate_single_orders(n: int, cap: int = SINGLE_ORDER_CAP) -> OrderBank:
    """All ``n!`` permutations in lexicographic order."""
    if n < 1:
        raise ValueError("scope size must be >= 1")
    if n > cap:
        raise EnumerationCapError(
            f"refusing to enumerate {n}! orderings: scope size {n} exceeds cap {cap}"
        )
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    return OrderBank(n, np.argsort(perms, axis=1), Regime.ao_arm(), "enumerated")


def enumerate_grouped_orders(
    n: int, steps: int, cap: int = GROUPED_ORDER_CAP, scheme: str = "iid"
) -> OrderBank:
    """All grouped orderings with ``steps`` steps, each once, in lexicographic order.

    For ``scheme="iid"`` these are the ``steps**n`` step assignments, each with
    prior weight ``steps**-n``.
    """
    regime = Regime.mdm(steps, scheme)
    count = regime.num_orderings(n)
    if n < 1:
        raise ValueError("scope size must be >= 1")
    if count > cap:
        raise EnumerationCapError(
            f"refusing to enumerate {count} grouped orderings: exceeds cap {cap}"
        )
    if scheme == "iid":
        ranks = np.array(list(itertools.product(range(steps), repeat=n)), dtype=np.int64)
    else:
        if math.factorial(n) > cap:
            raise EnumerationCapError(
                f"chunked enumeration walks {n}! permutations: exceeds cap {cap}"
            )
        perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
        ranks = np.unique(_chunk_ranks(perms, steps), axis=0)
    return OrderBank(n, ranks.reshape(-1, n), regime, "enumerated")


def enumerate_orders(n: int, regime: Regime, cap: int | None = None) -> OrderBank:
    if regime.kind == "ao-arm":
        return enumerate_single_orders(n, SINGLE_ORDER_CAP if cap is None else cap)
    return enumerate_grouped_orders(
        n, regime.steps, GROUPED_ORDER_CAP if cap is None else cap, regime.scheme
    )


def sample_single_order(rng: np.random.Generator, n: int) -> SingleOrder:
    """Uniform random permutation (Fisher-Yates via ``Generator.permutation``)."""
    if n < 1:
        raise ValueError("scope size must be >= 1")
    return SingleOrder(tuple(rng.permutation(n).tolist()))


def sample_grouped_order(
    rng: np.random.Generator, n: int, steps: int, scheme: str = "iid"
) -> GroupedOrder:
    if n < 1 or steps < 1:
        raise ValueError("need n >= 1 and steps >= 1")
    ranks = sample_ranks(rng, n, Regime.mdm(steps, scheme), 1)[0]
    return GroupedOrder(tuple(ranks.tolist()), steps)


def sample_ranks(rng: np.random.Generator, n: int, regime: Regime, size: int) -> np.ndarray:
    """``size`` i.i.d. orderings from p(pi) as a ``(size, n)`` rank matrix."""
    if regime.kind == "mdm" and regime.scheme == "iid":
        return rng.integers(0, regime.steps, size=(size, n), dtype=np.int64)
    perms = rng.permuted(np.tile(np.arange(n, dtype=np.int64), (size, 1)), axis=1)
    if regime.kind == "ao-arm":
        return np.argsort(perms, axis=1)
    return _chunk_ranks(perms, regime.steps)


def sample_bank(n: int, regime: Regime, size: int, seed: int) -> OrderBank:
    """Sampled bank of ``size`` orderings drawn from the stream ``seed``."""
    ranks = sample_ranks(derive_rng(seed, "order-bank"), n, regime, size)
    return OrderBank(n, ranks, regime, "sampled", seed)
