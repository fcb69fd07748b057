import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracle import oracle_forward
from tapret import probes
from tapret.backend import ToyBackend, tap_mlp
from tapret.backend.toy import toy_weights, ToyConfig
from tapret.errors import EmptySampleError, InvalidTapError, UnsupportedOptionError
from tapret.prompts import ModalityInput, build_embed_prompt
from tapret.reranker import FRAMING_PRESETS, binary_framing, get_framing

STRINGS = probes.load_probe_strings()


def hand_cos(a, b):
    return float(np.dot(a, b) / math.sqrt(np.dot(a, a) * np.dot(b, b)))


def oracle_states(toy, text):
    ids = toy.encode_pieces(build_embed_prompt(ModalityInput.text(text)).pieces).ids
    return oracle_forward(ids)


def test_shipped_data_sizes():
    assert len(STRINGS) == 20
    assert len(probes.load_synonym_pairs()) == 50


def test_alpha_zero_mlp_exactly_one(zero_mlp):
    rep = probes.sublayer_shift_profile(zero_mlp, STRINGS)
    for l in range(1, 5):
        assert rep.row(l, "mlp").mean == 1.0
        assert rep.row(l, "mlp").std == 0.0


def test_alpha_matches_oracle(toy):
    rep = probes.sublayer_shift_profile(toy, STRINGS)
    per = {(l, s): [] for l in range(1, 5) for s in ("attn", "mlp")}
    for text in STRINGS:
        streams, _ = oracle_states(toy, text)
        for l in range(1, 5):
            per[(l, "attn")].append(hand_cos(streams[(l - 1, "mlp")][-1], streams[(l, "attn")][-1]))
            per[(l, "mlp")].append(hand_cos(streams[(l, "attn")][-1], streams[(l, "mlp")][-1]))
    for (l, s), vals in per.items():
        assert abs(rep.row(l, s).mean - np.mean(vals)) <= 1e-6
        assert abs(rep.row(l, s).std - np.std(vals)) <= 1e-6
    assert rep.metadata["samples"] == 20


def test_alpha_layer_range_and_order(toy):
    rep = probes.sublayer_shift_profile(toy, STRINGS[:3], layer_range=[4, 2, 3])
    assert [(r.layer, r.sublayer) for r in rep.per_layer] == [
        (2, "attn"), (2, "mlp"), (3, "attn"), (3, "mlp"), (4, "attn"), (4, "mlp")
    ]
    with pytest.raises(InvalidTapError):
        probes.sublayer_shift_profile(toy, STRINGS[:1], layer_range=[5])


def test_empty_samples(toy):
    with pytest.raises(EmptySampleError):
        probes.sublayer_shift_profile(toy, [])
    with pytest.raises(EmptySampleError):
        probes.lexical_alignment_profile(toy, [])
    with pytest.raises(EmptySampleError):
        probes.synonym_similarity(toy, [])


def test_beta_matches_oracle(toy):
    rep = probes.lexical_alignment_profile(toy, STRINGS)
    W = toy_weights(ToyConfig())["unembed"]
    per = {}
    for text in STRINGS:
        streams, logits = oracle_states(toy, text)
        w = W[:, int(np.argmax(logits))]
        for l in range(1, 5):
            for s in ("attn", "mlp"):
                per.setdefault((l, s), []).append(hand_cos(streams[(l, s)][-1], w))
    for (l, s), vals in per.items():
        assert abs(rep.row(l, s).mean - np.mean(vals)) <= 1e-6
        assert abs(rep.row(l, s).std - np.std(vals)) <= 1e-6


def test_beta_one_when_head_column_parallel(toy):
    text = STRINGS[0]
    spec = build_embed_prompt(ModalityInput.text(text))
    h = toy.forward_with_taps(toy.encode_pieces(spec.pieces), [tap_mlp(4)])[tap_mlp(4)]
    c = 77
    W = np.zeros((32, 128))
    W[:, c] = 3.0 * h
    crafted = toy.with_weights(unembed=W)
    rep = probes.lexical_alignment_profile(crafted, [text])
    assert rep.metadata["predicted_tokens"] == [c]
    assert rep.row(4, "mlp").mean == pytest.approx(1.0, abs=1e-12)


def test_synonym_identical_pair_is_one(toy):
    rep = probes.synonym_similarity(toy, [("river", "river")])
    assert all(r.mean == 1.0 for r in rep.per_layer)


def test_synonym_matches_oracle(toy):
    pairs = probes.load_synonym_pairs()[:10]
    rep = probes.synonym_similarity(toy, pairs)
    per = {}
    for a, b in pairs:
        sa, _ = oracle_states(toy, a)
        sb, _ = oracle_states(toy, b)
        for l in range(1, 5):
            for s in ("attn", "mlp"):
                per.setdefault((l, s), []).append(hand_cos(sa[(l, s)][-1], sb[(l, s)][-1]))
    for (l, s), vals in per.items():
        assert abs(rep.row(l, s).mean - np.mean(vals)) <= 1e-6


def test_word_probabilities(toy):
    full = probes.word_probability_table(toy, "A dog runs", top_k=128)
    assert abs(sum(r.probability for r in full) - 1.0) <= 1e-6
    probs = [r.probability for r in full]
    assert probs == sorted(probs, reverse=True)
    _, logits = oracle_states(toy, "A dog runs")
    e = np.exp(logits - logits.max())
    ref = e / e.sum()
    top = probes.word_probability_table(toy, "A dog runs", top_k=5)
    assert [r.token_id for r in top] == list(np.argsort(-ref, kind="stable")[:5])
    for r in top:
        assert abs(r.probability - ref[r.token_id]) <= 1e-6


def test_word_probabilities_tie_by_id(toy):
    b = toy.with_weights(unembed=np.zeros((32, 128)))
    rows = probes.word_probability_table(b, "x", top_k=4)
    assert [r.token_id for r in rows] == [0, 1, 2, 3]


def test_word_probabilities_clip_warns(toy):
    with pytest.warns(UserWarning):
        rows = probes.word_probability_table(toy, "x", top_k=1000)
    assert len(rows) == 128


def _label_head(toy, pos_id, neg_id, gap):
    """LM head where the two label tokens share a column; lm_bias sets the logit gap."""
    W = np.array(toy.weights["unembed"])
    W[:, neg_id] = W[:, pos_id]
    bias = np.zeros(128)
    bias[pos_id] = gap
    return toy.with_weights(unembed=W, lm_bias=bias)


def test_framing_bias_zero_on_symmetric_logits(toy):
    f = get_framing("yes_no")
    b = _label_head(toy, ord("Y"), ord("N"), 0.0)
    assert probes.framing_bias(b, f) == 0.0


def test_framing_bias_ln3_gap(toy):
    f = get_framing("yes_no")
    b = _label_head(toy, ord("Y"), ord("N"), math.log(3.0))
    d = probes.framing_bias_detail(b, f)
    assert abs(d["p_first"] - 0.75) <= 1e-6
    assert abs(d["bias"] - 0.5) <= 1e-6


@pytest.mark.parametrize("name", FRAMING_PRESETS)
def test_framing_bias_label_swap_exact(toy, name):
    f = get_framing(name)
    assert probes.framing_bias(toy, f) == probes.framing_bias(toy, f.swapped())
    assert 0.0 <= probes.framing_bias(toy, f) <= 1.0


def test_framing_bias_averages_both_orders(toy):
    f = get_framing("true_false")
    (a1, a2), (b1, b2) = probes.context_free_logits(toy, f)
    gap = (a1 + b1) / 2 - (a2 + b2) / 2
    assert probes.framing_bias(toy, f) == pytest.approx(abs(2 / (1 + math.exp(-gap)) - 1), abs=1e-12)


def test_framing_multi_token_label_rejected():
    strict = ToyBackend(strict_options=True)
    with pytest.raises(UnsupportedOptionError):
        probes.framing_bias(strict, binary_framing("Yes", "No"))


def test_gradient_uniform_case(toy):
    W = toy.unembedding()
    chk = probes.gradient_identity_check(W, np.zeros(32), 5)
    assert np.allclose(chk.analytic, W.mean(axis=1) - W[:, 5], atol=1e-12)


def test_gradient_matches_finite_differences(toy):
    rng = np.random.default_rng(7)
    W = toy.unembedding()
    for _ in range(10):
        chk = probes.gradient_identity_check(W, rng.normal(size=32), int(rng.integers(128)), step=1e-3)
        assert chk.max_abs_diff <= 1e-4
        assert chk.span_residual <= 1e-6


def test_gradient_in_span_for_rank_deficient_head():
    """With |V| < d the span is a proper subspace; the gradient must still lie in it."""
    rng = np.random.default_rng(3)
    W = rng.normal(size=(16, 5))
    chk = probes.gradient_identity_check(W, rng.normal(size=16), 2)
    assert chk.span_residual <= 1e-6
    assert chk.max_abs_diff <= 1e-4
    P = W @ np.linalg.pinv(W)
    orth = rng.normal(size=16)
    orth -= P @ orth
    assert abs(chk.analytic @ orth) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_property(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(8, 12)) / 3
    chk = probes.gradient_identity_check(W, rng.normal(size=8) * 2, int(rng.integers(12)))
    assert chk.max_abs_diff <= 1e-4


@settings(max_examples=15, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=20), min_size=1, max_size=3))
def test_cosines_bounded(texts):
    rep = probes.sublayer_shift_profile(ToyBackend(), texts)
    for r in rep.per_layer:
        assert -1.0 <= r.mean <= 1.0 and r.std >= 0.0


def test_report_serialization(toy):
    rep = probes.sublayer_shift_profile(toy, STRINGS[:2])
    data = json.loads(rep.dumps())
    assert data["kind"] == "alpha" and len(data["per_layer"]) == 8
    lines = rep.to_csv().strip().split("\n")
    assert lines[0] == "kind,layer,sublayer,mean,std,n" and len(lines) == 9
    fr = probes.framing_bias_report(toy, [get_framing(n) for n in FRAMING_PRESETS])
    assert set(fr.scalars) == {"mcq", "yes_no", "true_false", "right_wrong"}
    assert fr.to_csv().startswith("kind,name,value")
