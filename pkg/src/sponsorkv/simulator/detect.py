"""Runs a policy's anchor detector over a synthetic stream.

Detection only ever looks at tokens up to the one it reports, so scanning the
whole pre-query stream at once gives the same events as scanning online.
"""

from __future__ import annotations

import functools

import numpy as np

from ..anchors import (DEFAULT_PATTERNS, AnchorEvent, DetectorWeights, PatternSet, TrainConfig,
                       detect_embedding, detect_learned, detect_regex, detect_semantic, lexicon,
                       synthetic_detector_data, train_detector)
from ..errors import ConfigError
from ..sponsorship import RANK_FLOOR
from .workload import HIDDEN_MODEL, TRAIN_FAMILIES, Workload, embedding_space, hidden_states, token_embeddings

DEFAULT_PATTERN_SET = PatternSet(DEFAULT_PATTERNS)


@functools.lru_cache(maxsize=4)
def trained_detector(seed: int = 0) -> DetectorWeights:
    """MLP detector trained on the training families only; cached per process."""
    rng = np.random.default_rng([seed, 0xDE7])
    data = synthetic_detector_data(HIDDEN_MODEL, TRAIN_FAMILIES, 40, 400, rng)
    return train_detector(data, TrainConfig(seed=seed))


def anchor_events(workload: Workload, detector: str, patterns: PatternSet | None = None,
                  upto: int | None = None, ranked: bool = False) -> list[AnchorEvent]:
    """Events on positions ``1..upto`` (the last pre-query position by default)."""
    upto = upto or workload.query_position - 1
    if detector == "regex":
        return detect_regex(workload.strings(upto), patterns or DEFAULT_PATTERN_SET)
    if detector == "semantic":
        lex = lexicon() if patterns is None else lexicon(extra=patterns.patterns).with_allowlist(
            None if patterns.allowlist is None else set(lexicon(extra=()).patterns) | patterns.allowlist)
        return detect_semantic(workload.strings(upto), lex)
    if detector == "embedding":
        _, concepts = embedding_space()
        return detect_embedding(token_embeddings(workload, upto), concepts)
    if detector == "learned":
        weights = trained_detector()
        return detect_learned(hidden_states(workload, upto=upto), weights, RANK_FLOOR if ranked else None)
    raise ConfigError(f"unknown detector {detector!r}")
