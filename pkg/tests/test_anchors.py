import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sponsorkv.anchors import (
    DEFAULT_PATTERNS, AnchorEvent, DetectorWeights, PatternSet, Source, TrainConfig, cosine_matrix,
    detect_embedding, detect_learned, detect_regex, detect_semantic, f1_score, gelu, lexicon,
    load_patterns, mlp_forward, sigmoid, synthetic_detector_data, train_detector,
)
from sponsorkv.errors import ConfigError, DetectionError, TrainingError
from sponsorkv.simulator.workload import HIDDEN_MODEL, TRAIN_FAMILIES, WorkloadConfig, build_workload

KEY = r"\bkey(?:\s+is)?:"


def test_code_colon_fires_on_token_closing_the_match():
    toks = ["The", " secret", " code", ":", " XK7", "M9P", "2Q"]
    ev = detect_regex(toks, PatternSet(("code:",)))
    assert [e.position for e in ev] == [4]
    assert ev[0].confidence == 1.0 and ev[0].source is Source.REGEX


def test_needle_template_fires_once_on_is():
    toks = ["The", " secret", " code", " is:", " XK7", "M9P", "2Q"]
    ev = detect_regex(toks, PatternSet(DEFAULT_PATTERNS))
    assert [e.position for e in ev] == [4]


def test_empty_stream():
    assert detect_regex([], PatternSet(("code:",))) == []


def test_malformed_pattern_fails_at_construction():
    with pytest.raises(ConfigError):
        PatternSet(("(unclosed",))
    with pytest.raises(ConfigError):
        PatternSet(())


def test_allowlist_must_be_subset():
    with pytest.raises(ConfigError):
        PatternSet(("a:",), frozenset({"b:"}))


def test_allowlist_silences_injected_keys():
    wl = build_workload(WorkloadConfig(n=1024, injections=20, seed=3))
    full = PatternSet(DEFAULT_PATTERNS)
    allowed = full.with_allowlist([p for p in DEFAULT_PATTERNS if p != KEY])
    injected = {b.anchor_end for b in wl.blocks if b.kind == "injection"}
    assert len(injected) == 20
    assert injected <= {e.position for e in detect_regex(wl.strings(), full)}
    assert not injected & {e.position for e in detect_regex(wl.strings(), allowed)}


def test_semantic_remember():
    toks = ["Remember", " this", " number", ":", " 4417"]
    ev = detect_semantic(toks, lexicon(["remember"], extra=()))
    assert [e.position for e in ev] == [1]
    assert ev[0].source is Source.SEMANTIC


def test_semantic_disjoint_lexicon():
    assert detect_semantic(["hello", " world"], lexicon(["told"], extra=())) == []


def test_semantic_union_matches_per_pattern_runs():
    toks = ["She", " told", " me", " the", " password", ":", " hunter2"]
    told = detect_semantic(toks, lexicon(["told"], extra=()))
    pw = detect_semantic(toks, lexicon([], extra=(r"\bpassword:",)))
    both = detect_semantic(toks, lexicon(["told"], extra=(r"\bpassword:",)))
    assert len(both) == 2
    assert {e.position for e in both} == {e.position for e in told} | {e.position for e in pw}


def test_pattern_file(tmp_path):
    p = tmp_path / "pats.txt"
    p.write_text("# anchors\ncode:\n\n  key:  \n", encoding="utf-8")
    ps = load_patterns(p, allowlist=["code:"])
    assert ps.patterns == ("code:", "key:")
    assert len(ps.compiled) == 1


def test_embedding_identity_and_orthogonal():
    c = np.array([[1.0, 0.0, 0.0]])
    ev = detect_embedding(np.array([[2.0, 0.0, 0.0], [0.0, 3.0, 0.0]]), c, 0.5)
    assert [e.position for e in ev] == [1]
    assert ev[0].confidence == pytest.approx(1.0)
    assert detect_embedding(np.array([[1.0, 0.0, 0.0]]), c, 1.0)[0].position == 1


def test_embedding_small_noise_cluster():
    rng = np.random.default_rng(0)
    c = rng.standard_normal(64)
    noise = rng.standard_normal(64)
    noise *= 0.1 * np.linalg.norm(c) / np.linalg.norm(noise)
    cos = cosine_matrix(c + noise, c)[0, 0]
    # a perturbation of relative norm r turns the vector by at most asin(r)
    assert cos >= math.sqrt(1 - 0.1**2) - 1e-12
    assert cos >= 0.99


def test_embedding_zero_norm_and_dim_mismatch():
    with pytest.raises(DetectionError):
        detect_embedding(np.zeros((1, 3)), np.ones((1, 3)))
    with pytest.raises(DetectionError):
        detect_embedding(np.ones((1, 3)), np.ones((1, 4)))


@given(scale=st.floats(0.01, 100))
def test_embedding_scale_invariance(scale):
    rng = np.random.default_rng(1)
    x, c = rng.standard_normal((5, 8)), rng.standard_normal((2, 8))
    a = detect_embedding(x, c, 0.1)
    x2 = x.copy()
    x2[2] *= scale
    b = detect_embedding(x2, c, 0.1)
    assert [e.position for e in a] == [e.position for e in b]
    assert [e.confidence for e in a] == pytest.approx([e.confidence for e in b])


def test_gelu_and_sigmoid_fixed_points():
    assert gelu(0.0) == 0.0
    assert sigmoid(0.0) == 0.5


def test_mlp_zero_weights():
    w = DetectorWeights(np.zeros((3, 4)), np.zeros(4))
    assert mlp_forward(np.array([1.0, -2.0, 3.0]), w) == 0.5


def test_mlp_one_dimensional_worked_example():
    g = 0.5 * 2 * (1 + math.tanh(math.sqrt(2 / math.pi) * (2 + 0.044715 * 8)))
    assert g == pytest.approx(1.9546, abs=1e-4)
    out = mlp_forward(np.array([2.0]), DetectorWeights(np.array([[1.0]]), np.array([1.0])))
    assert out == pytest.approx(1 / (1 + math.exp(-g)), abs=1e-12)
    assert out == pytest.approx(0.8760, abs=1e-4)


def test_mlp_dimension_mismatch():
    w = DetectorWeights(np.ones((3, 2)), np.ones(2))
    with pytest.raises(DetectionError):
        mlp_forward(np.ones(4), w)
    with pytest.raises(DetectionError):
        DetectorWeights(np.ones((3, 2)), np.ones(3))


@settings(max_examples=50)
@given(h=st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), seed=st.integers(0, 100))
def test_mlp_output_in_open_unit_interval(h, seed):
    rng = np.random.default_rng(seed)
    w = DetectorWeights(rng.standard_normal((4, 5)), rng.standard_normal(5))
    assert 0.0 <= mlp_forward(np.array(h), w) <= 1.0


def test_weights_file_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    w = DetectorWeights(rng.standard_normal((6, 3)), rng.standard_normal(3), 0.37)
    p = tmp_path / "det.txt"
    w.save(p)
    back = DetectorWeights.load(p)
    assert np.array_equal(back.W1, w.W1) and np.array_equal(back.W2, w.W2)
    assert back.threshold == w.threshold
    p.write_text("hidden_dim 2\n")
    with pytest.raises(ConfigError):
        DetectorWeights.load(p)


def _clusters(rng, n=60):
    pos = rng.normal([2.0, 2.0], 0.3, (n, 2))
    neg = rng.normal([-2.0, -2.0], 0.3, (n, 2))
    return [(x, True) for x in pos] + [(x, False) for x in neg]


def test_separable_clusters_score_perfectly():
    rng = np.random.default_rng(0)
    w = train_detector(_clusters(rng), TrainConfig(steps=200))
    assert f1_score(w, _clusters(rng)) == 1.0


def test_inverted_labels_flip_the_decision():
    rng = np.random.default_rng(0)
    train, test = _clusters(rng), _clusters(rng)
    w = train_detector([(x, not y) for x, y in train], TrainConfig(steps=200))
    assert f1_score(w, [(x, not y) for x, y in test]) == 1.0
    assert all(e.confidence > 0.5 for e in detect_learned([x for x, y in test if not y], w))


def test_single_class_data_is_rejected():
    with pytest.raises(TrainingError):
        train_detector([(np.ones(2), True), (np.zeros(2), True)])
    with pytest.raises(TrainingError):
        train_detector([])


@pytest.mark.slow
def test_random_labels_hold_out_near_chance():
    scores = []
    for s in range(20):
        rng = np.random.default_rng([s, 2])
        X, y = rng.standard_normal((400, 8)), rng.random(400) < 0.5
        data = list(zip(X, y))
        scores.append(f1_score(train_detector(data[:200], TrainConfig(seed=s)), data[200:]))
    assert np.mean(scores) == pytest.approx(0.5, abs=0.1)


def test_held_out_families_disjoint_from_training():
    rng = np.random.default_rng([0, 1])
    train = synthetic_detector_data(HIDDEN_MODEL, TRAIN_FAMILIES, 40, 400, rng)
    test = synthetic_detector_data(HIDDEN_MODEL, range(100, 109), 40, 400, rng)
    assert f1_score(train_detector(train), test) >= 0.9


def test_event_confidence_range():
    with pytest.raises(DetectionError):
        AnchorEvent(1, 1.2)


@given(words=st.lists(st.sampled_from([" code:", " key:", " the", " a", " is:", " x"]), max_size=40))
def test_regex_events_sorted_and_allowlist_never_adds(words):
    full = PatternSet(DEFAULT_PATTERNS)
    allowed = full.with_allowlist([DEFAULT_PATTERNS[0]])
    a = [e.position for e in detect_regex(words, full)]
    b = [e.position for e in detect_regex(words, allowed)]
    assert a == sorted(set(a))
    assert set(b) <= set(a)
