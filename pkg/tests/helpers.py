"""Step-by-step replay of a trial through the per-sequence reference policies."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import replace

import numpy as np

from sponsorkv import hashrng
from sponsorkv.policies import PolicySpec, SequenceRun
from sponsorkv.simulator.attention import attention_rows, base_logits
from sponsorkv.simulator.detect import anchor_events
from sponsorkv.simulator.workload import Workload


def replay(spec: PolicySpec, wl: Workload, K: int, patterns=None):
    """Returns (final retained positions, eviction digest) from the reference path."""
    T = wl.query_position - 1
    ta = replace(spec.ta, tie_seed=wl.seed) if spec.ta else None
    run = SequenceRun(spec.name, K, ta=ta, baseline=spec.baseline)
    events = defaultdict(list)
    if spec.uses_anchors:
        for ev in anchor_events(wl, spec.detector, patterns, T, spec.ta.ranked):
            events[ev.position].append(ev)
    model = wl.config.attention
    base = base_logits(wl.seed, wl.dormant_mask(), model)[None, :]
    freq = wl.frequency_penalties()
    seeds = np.array([wl.seed], dtype=np.uint64)
    digest = np.zeros(1, dtype=np.uint64)
    for t in range(1, T + 1):
        cand = sorted(run.state.retained) + [t]
        att = attention_rows(seeds, t, np.array([cand]), base, model)[0]
        before = set(cand)
        state = run.push(int(wl.tokens[t]), float(freq[t]), events=events.get(t, ()),
                         attention=dict(zip(cand, att.tolist())))
        gone = before - set(state.retained)
        assert len(gone) <= 1
        if gone:
            digest = hashrng.hash_u64(digest, t, np.array([gone.pop()]))
    return tuple(sorted(run.state.retained)), f"{int(digest[0]):016x}"
