"""Anchor detectors.

Four interchangeable detectors emit :class:`AnchorEvent` values:

* regex patterns over detokenized text,
* a semantic lexicon (communication verbs plus patterns),
* cosine similarity against concept embeddings,
* a two-layer MLP over hidden states.

Positions are 1-based throughout the package: the first token is position 1.
"""

from __future__ import annotations

import math
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DetectionError, TrainingError


class Source(str, Enum):
    REGEX = "regex"
    SEMANTIC = "semantic"
    EMBEDDING = "embedding"
    LEARNED = "learned"


@dataclass(frozen=True, order=True)
class AnchorEvent:
    position: int
    confidence: float = 1.0
    source: Source = Source.REGEX

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise DetectionError(f"confidence {self.confidence} outside [0, 1]")


DEFAULT_PATTERNS = (
    r"\bcode(?:\s+is)?:",
    r"\bkey(?:\s+is)?:",
    r"\bpassword(?:\s+is)?:",
    r"\bpasscode(?:\s+is)?:",
    r"\btoken(?:\s+is)?:",
    r"\bsecret(?:\s+is)?:",
    r"\bpin(?:\s+is)?:",
    r"\bauthorization:",
    r"\bapi_key:",
)

SEMANTIC_VERBS = ("said", "told", "remember")


@dataclass(frozen=True)
class PatternSet:
    """Anchor patterns, compiled case-insensitively.

    When ``allowlist`` is given only those patterns fire; it must be a subset
    of ``patterns``.
    """

    patterns: tuple[str, ...]
    allowlist: frozenset[str] | None = None
    _compiled: tuple[re.Pattern, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        pats = tuple(self.patterns)
        object.__setattr__(self, "patterns", pats)
        if not pats:
            raise ConfigError("pattern set is empty")
        if self.allowlist is not None:
            allow = frozenset(self.allowlist)
            object.__setattr__(self, "allowlist", allow)
            extra = allow - set(pats)
            if extra:
                raise ConfigError(f"allowlisted patterns not in the pattern set: {sorted(extra)}")
        compiled = []
        for p in pats:
            if self.allowlist is not None and p not in self.allowlist:
                continue
            try:
                compiled.append(re.compile(p, re.IGNORECASE))
            except re.error as exc:
                raise ConfigError(f"malformed pattern {p!r}: {exc}") from None
        object.__setattr__(self, "_compiled", tuple(compiled))

    @property
    def compiled(self) -> tuple[re.Pattern, ...]:
        return self._compiled

    def with_allowlist(self, allowed: Iterable[str] | None) -> PatternSet:
        return PatternSet(self.patterns, None if allowed is None else frozenset(allowed))


def lexicon(words: Iterable[str] = SEMANTIC_VERBS, extra: Iterable[str] = DEFAULT_PATTERNS) -> PatternSet:
    """Semantic lexicon: bare words get word boundaries, other entries are used verbatim."""
    pats = []
    for w in words:
        pats.append(rf"\b{re.escape(w)}\b" if re.fullmatch(r"\w+", w) else w)
    pats.extend(extra)
    return PatternSet(tuple(dict.fromkeys(pats)))


def load_patterns(path: str | Path, allowlist: Iterable[str] | None = None) -> PatternSet:
    """One pattern per line, UTF-8; blank lines and ``#`` comments are skipped."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read pattern file {path}: {exc}") from exc
    pats = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            pats.append(line)
    return PatternSet(tuple(pats), None if allowlist is None else frozenset(allowlist))


def token_offsets(token_strings: Sequence[str]) -> np.ndarray:
    """End offset (exclusive) of each token in the joined text."""
    return np.cumsum([len(t) for t in token_strings], dtype=np.int64)


def _scan(token_strings: Sequence[str], patterns: PatternSet, source: Source,
          text: str | None = None, ends: np.ndarray | None = None) -> list[AnchorEvent]:
    if not token_strings:
        return []
    if text is None:
        text = "".join(token_strings)
    if ends is None:
        ends = token_offsets(token_strings)
    last_chars = []
    for rx in patterns.compiled:
        last_chars.extend(m.end() - 1 for m in rx.finditer(text) if m.end() > m.start())
    if not last_chars:
        return []
    # a match belongs to the token holding its final character, so the sponsored
    # span starts right after the anchor phrase
    idx = np.searchsorted(ends, np.asarray(last_chars), side="right")
    return [AnchorEvent(int(i) + 1, 1.0, source) for i in np.unique(idx)]


def detect_regex(token_strings: Sequence[str], patterns: PatternSet, *, text: str | None = None,
                 ends: np.ndarray | None = None) -> list[AnchorEvent]:
    return _scan(token_strings, patterns, Source.REGEX, text, ends)


def detect_semantic(token_strings: Sequence[str], lex: PatternSet, *, text: str | None = None,
                    ends: np.ndarray | None = None) -> list[AnchorEvent]:
    return _scan(token_strings, lex, Source.SEMANTIC, text, ends)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise DetectionError(f"embedding dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DetectionError("zero-norm embedding")
    return (a / na[:, None]) @ (b / nb[:, None]).T


def detect_embedding(token_embeddings, concept_embeddings, sim_threshold: float = 0.5) -> list[AnchorEvent]:
    token_embeddings = np.asarray(token_embeddings, dtype=float)
    if token_embeddings.size == 0:
        return []
    best = cosine_matrix(token_embeddings, concept_embeddings).max(axis=1)
    hits = np.flatnonzero(best >= sim_threshold)
    return [AnchorEvent(int(i) + 1, float(min(max(best[i], 0.0), 1.0)), Source.EMBEDDING) for i in hits]


# ---------------------------------------------------------------- learned detector

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh approximation of GELU."""
    x = np.asarray(x, dtype=float)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@dataclass(frozen=True)
class DetectorWeights:
    W1: np.ndarray  # (hidden_dim, mid_dim)
    W2: np.ndarray  # (mid_dim,)
    threshold: float = 0.5

    def __post_init__(self) -> None:
        W1 = np.asarray(self.W1, dtype=float)
        W2 = np.asarray(self.W2, dtype=float).reshape(-1)
        if W1.ndim != 2 or W1.shape[1] != W2.shape[0]:
            raise DetectionError(f"inconsistent detector shapes {W1.shape} and {W2.shape}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"detector threshold must lie in (0, 1), got {self.threshold}")
        object.__setattr__(self, "W1", W1)
        object.__setattr__(self, "W2", W2)

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def mid_dim(self) -> int:
        return self.W1.shape[1]

    def confidences(self, hidden) -> np.ndarray:
        """Row-wise detector output for a ``(n, hidden_dim)`` array."""
        hidden = np.atleast_2d(np.asarray(hidden, dtype=float))
        if hidden.shape[1] != self.hidden_dim:
            raise DetectionError(f"hidden state has dim {hidden.shape[1]}, detector expects {self.hidden_dim}")
        return sigmoid(gelu(hidden @ self.W1) @ self.W2)

    def save(self, path: str | Path) -> None:
        lines = [
            "# sponsorkv mlp detector",
            f"hidden_dim {self.hidden_dim}",
            f"mid_dim {self.mid_dim}",
            f"threshold {self.threshold!r}",
            "W1",
        ]
        lines += [" ".join(repr(float(x)) for x in row) for row in self.W1]
        lines.append("W2")
        lines.append(" ".join(repr(float(x)) for x in self.W2))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> DetectorWeights:
        try:
            raw = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read detector file {path}: {exc}") from exc
        lines = [ln.strip() for ln in raw if ln.strip() and not ln.lstrip().startswith("#")]
        try:
            header = dict(ln.split(None, 1) for ln in lines[:3])
            hidden, mid = int(header["hidden_dim"]), int(header["mid_dim"])
            threshold = float(header["threshold"])
            if lines[3] != "W1" or lines[4 + hidden] != "W2":
                raise ValueError("section markers out of place")
            W1 = np.array([[float(x) for x in ln.split()] for ln in lines[4:4 + hidden]])
            W2 = np.array([float(x) for x in lines[5 + hidden].split()])
        except (KeyError, ValueError, IndexError) as exc:
            raise ConfigError(f"malformed detector file {path}: {exc}") from exc
        if W1.shape != (hidden, mid) or W2.shape != (mid,):
            raise ConfigError(f"{path}: matrix sizes disagree with the header")
        return cls(W1, W2, threshold)


def mlp_forward(hidden, weights: DetectorWeights) -> float:
    hidden = np.asarray(hidden, dtype=float)
    if hidden.ndim != 1:
        raise DetectionError("mlp_forward takes a single hidden vector")
    return float(weights.confidences(hidden)[0])


def detect_learned(hidden_states, weights: DetectorWeights, threshold: float | None = None) -> list[AnchorEvent]:
    """Events above ``threshold`` (the detector's own threshold by default)."""
    conf = weights.confidences(hidden_states)
    cut = weights.threshold if threshold is None else threshold
    return [AnchorEvent(int(i) + 1, float(conf[i]), Source.LEARNED) for i in np.flatnonzero(conf > cut)]


@dataclass(frozen=True)
class TrainConfig:
    mid_dim: int = 32
    steps: int = 400
    lr: float = 0.5
    seed: int = 0
    threshold: float = 0.5


def train_detector(labeled: Sequence[tuple[Sequence[float], bool]], hyperparams: TrainConfig | None = None
                   ) -> DetectorWeights:
    """Full-batch gradient descent on binary cross-entropy."""
    cfg = hyperparams or TrainConfig()
    if not labeled:
        raise TrainingError("no training data")
    X = np.asarray([np.asarray(v, dtype=float) for v, _ in labeled])
    y = np.asarray([1.0 if lab else 0.0 for _, lab in labeled])
    if y.min() == y.max():
        raise TrainingError("training data holds a single class")
    n, d = X.shape
    rng = np.random.default_rng(cfg.seed)
    W1 = rng.standard_normal((d, cfg.mid_dim)) / math.sqrt(d)
    W2 = rng.standard_normal(cfg.mid_dim) / math.sqrt(cfg.mid_dim)
    for _ in range(cfg.steps):
        z1 = X @ W1
        a = gelu(z1)
        p = sigmoid(a @ W2)
        g2 = (p - y) / n
        gW2 = a.T @ g2
        gz1 = np.outer(g2, W2) * _gelu_grad(z1)
        gW1 = X.T @ gz1
        W1 -= cfg.lr * gW1
        W2 -= cfg.lr * gW2
    return DetectorWeights(W1, W2, cfg.threshold)


def f1_score(weights: DetectorWeights, labeled: Sequence[tuple[Sequence[float], bool]]) -> float:
    X = np.asarray([np.asarray(v, dtype=float) for v, _ in labeled])
    y = np.asarray([bool(lab) for _, lab in labeled])
    pred = weights.confidences(X) > weights.threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


# ---------------------------------------------------------------- synthetic hidden states

@dataclass(frozen=True)
class HiddenStateModel:
    """Stand-in for last-layer hidden states.

    Every state carries a constant outlier coordinate (index 0). Anchor tokens
    add a shared anchor direction plus a per-family direction; other tokens
    carry a per-token content direction. Gaussian noise is added per position.
    """

    dim: int = 64
    anchor_strength: float = 2.0
    family_strength: float = 1.5
    content_strength: float = 1.5
    noise: float = 0.35
    seed: int = 20240

    def _unit(self, *key: int) -> np.ndarray:
        v = np.random.default_rng([self.seed, *key]).standard_normal(self.dim)
        v[0] = 0.0
        return v / np.linalg.norm(v)

    @property
    def anchor_axis(self) -> np.ndarray:
        return self._unit(0)

    def family_direction(self, family: int) -> np.ndarray:
        return self._unit(1, family)

    def content_table(self, vocab_size: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 2])
        t = rng.standard_normal((vocab_size, self.dim))
        t[:, 0] = 0.0
        return t / np.linalg.norm(t, axis=1, keepdims=True)

    def base_anchor(self, family: int) -> np.ndarray:
        h = self.anchor_strength * self.anchor_axis + self.family_strength * self.family_direction(family)
        h[0] = 1.0
        return h

    def base_content(self, directions: np.ndarray) -> np.ndarray:
        h = self.content_strength * np.atleast_2d(directions)
        h[:, 0] = 1.0
        return h

    def jitter(self, base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        base = np.atleast_2d(base)
        out = base + rng.standard_normal(base.shape) * (self.noise / math.sqrt(self.dim))
        out[:, 0] = 1.0
        return out


def synthetic_detector_data(model: HiddenStateModel, families: Sequence[int], per_family: int,
                            negatives: int, rng: np.random.Generator) -> list[tuple[np.ndarray, bool]]:
    """Labeled hidden states: ``per_family`` positives from each family plus random negatives."""
    out: list[tuple[np.ndarray, bool]] = []
    for fam in families:
        for h in model.jitter(np.repeat(model.base_anchor(fam)[None, :], per_family, axis=0), rng):
            out.append((h, True))
    dirs = rng.standard_normal((negatives, model.dim))
    dirs[:, 0] = 0.0
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for h in model.jitter(model.base_content(dirs), rng):
        out.append((h, False))
    return out
