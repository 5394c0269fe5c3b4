"""Synthetic needle-in-a-haystack token streams.

A stream is Zipf-distributed filler over a made-up vocabulary with one
anchored value (the needle), optional look-alike anchored values (decoys),
optional bare injected anchors, and a short query at the end. Everything is
a pure function of the config and its seed.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .. import hashrng
from ..anchors import HiddenStateModel, SEMANTIC_VERBS
from ..errors import ConfigError
from .attention import AttentionModel

NEEDLE_ANCHOR = ("The", " secret", " code", " is:")
DECOY_WORDS = (" access", " entry", " backup", " vault", " master", " door", " alarm", " safe")
INJECTION_ANCHOR = (" key:",)
QUERY = ("\n", "What", " is", " the", " secret", " code", "?")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_VALUE_CHARS = "BCDFGHJKLMNPQRSTVWXZ0123456789"  # no vowels, so values never spell a word
FILLER_WORDS = 4000
EMBED_DIM = 128

# hidden-state families for the learned detector: training uses 0..8, streams use the rest
TRAIN_FAMILIES = tuple(range(9))
NEEDLE_FAMILY = 9
DECOY_FAMILY0 = 10
INJECTION_FAMILY = 30


@dataclass(frozen=True)
class Vocabulary:
    strings: tuple[str, ...]
    index: dict[str, int] = field(repr=False)
    filler_ids: np.ndarray = field(repr=False)
    value_ids: np.ndarray = field(repr=False)
    spaced_value_ids: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.strings)

    def ids(self, tokens) -> list[int]:
        return [self.index[t] for t in tokens]


@functools.lru_cache(maxsize=1)
def vocabulary() -> Vocabulary:
    syll = [c + v for c in _CONSONANTS for v in _VOWELS]
    banned = set(SEMANTIC_VERBS) | {"code", "key", "pin", "token", "secret", "password", "passcode"}
    words = []
    for k in (1, 2):
        words += [" " + "".join(p) for p in itertools.product(syll, repeat=k)]
    special = list(dict.fromkeys(NEEDLE_ANCHOR + DECOY_WORDS + INJECTION_ANCHOR + QUERY))
    words = [w for w in words if w.strip() not in banned and w not in special]
    order = np.random.default_rng(7).permutation(len(words))[:FILLER_WORDS]
    fillers = [words[i] for i in sorted(order)]
    values = [a + b for a in _VALUE_CHARS for b in _VALUE_CHARS]
    strings = special + fillers + values + [" " + v for v in values]
    index = {s: i for i, s in enumerate(strings)}
    if len(index) != len(strings):
        raise AssertionError("vocabulary strings collide")
    base = len(special)
    filler_ids = np.arange(base, base + len(fillers))
    value_ids = np.arange(base + len(fillers), base + len(fillers) + len(values))
    return Vocabulary(tuple(strings), index, filler_ids, value_ids, value_ids + len(values))


@dataclass(frozen=True)
class WorkloadConfig:
    n: int = 4096
    needle_depth: float = 0.5
    needle_len: int = 7
    decoys: int = 0
    injections: int = 0
    query_offset: int = 6
    zipf: float = 1.1
    attention: AttentionModel = AttentionModel()
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.needle_depth <= 1.0:
            raise ConfigError(f"needle_depth must lie in [0, 1], got {self.needle_depth}")
        if self.needle_len < 1:
            raise ConfigError("needle_len must be >= 1")
        if self.decoys < 0 or self.injections < 0 or self.query_offset < 0:
            raise ConfigError("decoys, injections and query_offset must be non-negative")
        if self.zipf <= 0:
            raise ConfigError("zipf exponent must be positive")
        if self.n < len(NEEDLE_ANCHOR) + self.needle_len + self.query_offset + 2:
            raise ConfigError(f"n={self.n} too short for the needle block and query")

    @property
    def query_position(self) -> int:
        return self.n - self.query_offset


@dataclass(frozen=True)
class Block:
    """An anchor phrase followed by a value (``value_len`` may be zero)."""

    kind: str  # "needle", "decoy" or "injection"
    start: int
    anchor_len: int
    value_len: int
    family: int

    @property
    def anchor_end(self) -> int:
        return self.start + self.anchor_len - 1

    @property
    def value_span(self) -> range:
        return range(self.anchor_end + 1, self.anchor_end + 1 + self.value_len)

    @property
    def end(self) -> int:
        return self.anchor_end + self.value_len


@dataclass(frozen=True)
class Workload:
    config: WorkloadConfig
    tokens: np.ndarray = field(repr=False)  # (n + 1,), slot 0 unused
    blocks: tuple[Block, ...]

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def query_position(self) -> int:
        return self.config.query_position

    @property
    def needle(self) -> Block:
        return self.blocks[0]

    @property
    def needle_span(self) -> range:
        return self.needle.value_span

    def strings(self, upto: int | None = None) -> list[str]:
        table = vocabulary().strings
        return [table[i] for i in self.tokens[1:(upto or self.n) + 1]]

    def text(self, upto: int | None = None) -> str:
        return "".join(self.strings(upto))

    def dormant_mask(self) -> np.ndarray:
        """Value tokens of every block; the attention model keeps these cold."""
        mask = np.zeros(self.n + 1, dtype=bool)
        for b in self.blocks:
            mask[b.anchor_end + 1:b.end + 1] = True
        return mask

    def frequency_penalties(self) -> np.ndarray:
        """Occurrences of each position's token id so far, minus one."""
        ids = self.tokens[1:]
        order = np.argsort(ids, kind="stable")
        sorted_ids = ids[order]
        starts = np.r_[0, np.flatnonzero(np.diff(sorted_ids)) + 1]
        lengths = np.diff(np.r_[starts, ids.size])
        occ = np.arange(ids.size) - np.repeat(starts, lengths)
        out = np.zeros(self.n + 1)
        out[1:][order] = occ
        return out


def _decoy_anchor(k: int) -> tuple[str, ...]:
    return ("The", DECOY_WORDS[k % len(DECOY_WORDS)], " code", " is:")


def _place(occupied: list[tuple[int, int]], length: int, target: int, lo: int, hi: int) -> int:
    """First start at or after ``target`` (wrapping to ``lo``) whose block fits in
    ``[lo, hi]`` with a one-token gap around every occupied interval."""
    def free(s: int) -> bool:
        e = s + length - 1
        return e <= hi and all(e < a - 1 or s > b + 1 for a, b in occupied)

    span = hi - lo + 1
    for k in range(span):
        s = lo + (target - lo + k) % span
        if free(s):
            return s
    raise ConfigError(f"no room for a {length}-token block; reduce decoys/injections or raise n")


def build_workload(config: WorkloadConfig) -> Workload:
    vocab = vocabulary()
    n, ell = config.n, config.needle_len
    q = config.query_position
    last = q - 1
    rng = np.random.default_rng([config.seed & 0xFFFFFFFFFFFF, 0x5EED])

    anchor_len = len(NEEDLE_ANCHOR)
    start = max(int(math.floor(config.needle_depth * n)), 1)
    if start + anchor_len + ell - 1 > last:
        # too deep: slide the block back so the value ends right before the query
        start = last - anchor_len - ell + 1
    if start < 1:
        raise ConfigError(f"needle of {ell} tokens does not fit before the query at {q}")
    blocks = [Block("needle", start, anchor_len, ell, NEEDLE_FAMILY)]
    occupied = [(start, blocks[0].end)]

    for k in range(config.decoys):
        target = int((k + 0.5) * last / config.decoys)
        s = _place(occupied, anchor_len + ell, target, 2, last)
        blocks.append(Block("decoy", s, anchor_len, ell, DECOY_FAMILY0 + k % len(DECOY_WORDS)))
        occupied.append((s, s + anchor_len + ell - 1))

    inj_len = len(INJECTION_ANCHOR) + ell
    lo = min(blocks[0].end + 2, max(last - inj_len + 1, 2))
    for k in range(config.injections):
        target = lo + int(k * max(last - lo - inj_len, 1) / max(config.injections, 1))
        s = _place(occupied, inj_len, target, 2, last)
        blocks.append(Block("injection", s, len(INJECTION_ANCHOR), ell, INJECTION_FAMILY))
        occupied.append((s, s + inj_len - 1))

    ranks = np.arange(1, len(vocab.filler_ids) + 1, dtype=float)
    p = ranks ** -config.zipf
    tokens = np.empty(n + 1, dtype=np.int64)
    tokens[0] = -1
    tokens[1:] = rng.choice(vocab.filler_ids, size=n, p=p / p.sum())

    n_values = len(blocks) * ell
    if n_values > len(vocab.value_ids):
        raise ConfigError(f"{n_values} value tokens requested; the value vocabulary holds {len(vocab.value_ids)}")
    values = rng.choice(len(vocab.value_ids), size=n_values, replace=False)
    for k, b in enumerate(blocks):
        if b.kind == "needle":
            phrase = NEEDLE_ANCHOR
        elif b.kind == "decoy":
            phrase = _decoy_anchor(b.family - DECOY_FAMILY0)
        else:
            phrase = INJECTION_ANCHOR
        tokens[b.start:b.anchor_end + 1] = vocab.ids(phrase)
        v = values[k * ell:(k + 1) * ell]
        tokens[b.anchor_end + 1:b.end + 1] = np.r_[vocab.spaced_value_ids[v[:1]], vocab.value_ids[v[1:]]]

    tail = n - q + 1
    query = (QUERY * (tail // len(QUERY) + 1))[:tail] if tail > len(QUERY) else QUERY[len(QUERY) - tail:]
    tokens[q:] = vocab.ids(query)
    return Workload(config, tokens, tuple(blocks))


def trial_seed(master_seed: int, trial: int) -> int:
    """Independent per-trial seed derived from the suite's master seed."""
    return int(hashrng.hash_u64(master_seed, trial) >> np.uint64(1))


# ---------------------------------------------------------------- detector inputs

@functools.lru_cache(maxsize=1)
def embedding_space() -> tuple[np.ndarray, np.ndarray]:
    """(token embeddings, concept embeddings) for the cosine detector.

    Token embeddings are random; the tokens that close an anchor phrase sit
    near one of the concept vectors (noise norm 0.1 of the concept norm).
    """
    vocab = vocabulary()
    rng = np.random.default_rng(4242)
    table = rng.standard_normal((len(vocab), EMBED_DIM))
    concepts = rng.standard_normal((2, EMBED_DIM))
    for tok, c in ((" is:", 0), (" key:", 1)):
        noise = rng.standard_normal(EMBED_DIM)
        noise *= 0.1 * np.linalg.norm(concepts[c]) / np.linalg.norm(noise)
        table[vocab.index[tok]] = concepts[c] + noise
    return table, concepts


def token_embeddings(workload: Workload, upto: int | None = None) -> np.ndarray:
    table, _ = embedding_space()
    return table[workload.tokens[1:(upto or workload.n) + 1]]


HIDDEN_MODEL = HiddenStateModel()


def hidden_states(workload: Workload, model: HiddenStateModel = HIDDEN_MODEL,
                  upto: int | None = None) -> np.ndarray:
    """Synthetic last-layer states, one row per position (position 1 first)."""
    upto = upto or workload.n
    content = model.content_table(len(vocabulary()))
    base = model.base_content(content[workload.tokens[1:upto + 1]])
    for b in workload.blocks:
        if b.anchor_end <= upto:
            base[b.anchor_end - 1] = model.base_anchor(b.family)
    rng = np.random.default_rng([workload.seed & 0xFFFFFFFFFFFF, 0x41D])
    return model.jitter(base, rng)


def with_seed(config: WorkloadConfig, seed: int) -> WorkloadConfig:
    return replace(config, seed=seed)
