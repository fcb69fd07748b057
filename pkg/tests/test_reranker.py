import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tapret.backend import ToyBackend
from tapret.errors import UnsupportedOptionError
from tapret.prompts import ModalityInput, Segment
from tapret.reranker import (
    FRAMING_PRESETS,
    CandidateScore,
    Reranker,
    TieBreak,
    binary_framing,
    build_rerank_prompt,
    get_framing,
    option_pair_logits,
    relevance_complement,
    relevance_score,
    sort_scores,
    two_way_softmax,
)

Q = ModalityInput.text("a dog on a beach")
C = ModalityInput.text("A photo of a dog running on sand.")


def test_mcq_prompt_lines_verbatim():
    text = build_rerank_prompt(Q, C, get_framing("mcq")).rendered_text
    lines = text.split("\n")
    assert "A. Yes, the candidate fully matches the query." in lines
    assert "B. No, the candidate does not match or only partially matches." in lines
    assert "Query: a dog on a beach" in lines and "Candidate: A photo of a dog running on sand." in lines


@pytest.mark.parametrize("name", ["yes_no", "true_false", "right_wrong"])
def test_binary_labels_once_each(name):
    f = get_framing(name)
    text = build_rerank_prompt(Q, C, f).rendered_text
    pos, neg = (o.label_text for o in f.options)
    assert text.count(f"'{pos}'") == 1 and text.count(f"'{neg}'") == 1


def test_media_from_both_sides_in_prompt():
    q = ModalityInput((Segment("image", "q.jpg"), Segment("text", "what is this")))
    c = ModalityInput((Segment("image", "c.jpg"), Segment("text", "a cat")))
    spec = build_rerank_prompt(q, c, get_framing("mcq"))
    assert [p.payload for p in spec.pieces if p.kind == "image"] == ["q.jpg", "c.jpg"]


def test_unknown_framing():
    with pytest.raises(KeyError):
        get_framing("maybe_so")


def test_score_deterministic(toy):
    f = get_framing("mcq")
    assert relevance_score(toy, Q, C, f) == relevance_score(toy, Q, C, f)


def test_two_way_softmax_values():
    assert two_way_softmax(1.3, 1.3) == 0.5
    assert abs(two_way_softmax(2.0, 0.0) - 0.88079708) <= 1e-8
    assert two_way_softmax(1000.0, -1000.0) == 1.0
    assert two_way_softmax(-1000.0, 1000.0) == 0.0


@settings(max_examples=1000, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_softmax_complement(z1, z2):
    p = two_way_softmax(z1, z2)
    assert 0.0 <= p <= 1.0
    assert abs(p + two_way_softmax(z2, z1) - 1.0) <= 1e-12
    assert abs(p - 1 / (1 + math.exp(z2 - z1))) <= 1e-12


def test_relevance_complement_sums_to_one(toy):
    f = get_framing("yes_no")
    assert abs(relevance_score(toy, Q, C, f) + relevance_complement(toy, Q, C, f) - 1.0) <= 1e-12


def test_score_matches_logit_softmax(toy):
    f = get_framing("mcq")
    spec = build_rerank_prompt(Q, C, f)
    logits = toy.forward_with_taps(toy.encode_pieces(spec.pieces), []).final_logits
    za, zb = logits[ord("A")], logits[ord("B")]
    assert abs(relevance_score(toy, Q, C, f) - np.exp(za) / (np.exp(za) + np.exp(zb))) <= 1e-12


def test_singleton_rank_one(toy):
    out = Reranker(toy).rerank(Q, [("only", C)])
    assert len(out) == 1 and out[0].rank == 1 and out[0].candidate_id == "only"


def test_empty_candidates_rejected(toy):
    with pytest.raises(ValueError):
        Reranker(toy).rerank(Q, [])


def test_permutation_invariance(toy):
    cands = [(f"c{i}", ModalityInput.text(t)) for i, t in enumerate(["a cat", "a dog", "sand", "a boat", "sea"])]
    r = Reranker(toy)
    a = [(s.candidate_id, s.relevance) for s in r.rerank(Q, cands)]
    b = [(s.candidate_id, s.relevance) for s in r.rerank(Q, cands[::-1])]
    assert a == b
    assert [s.rank for s in r.rerank(Q, cands)] == [1, 2, 3, 4, 5]


def test_parallel_rerank_matches_serial(toy):
    cands = [(f"c{i}", ModalityInput.text(f"candidate {i}")) for i in range(8)]
    a = Reranker(toy).rerank(Q, cands)
    b = Reranker(toy, jobs=4).rerank(Q, cands)
    assert [s.to_json() for s in a] == [s.to_json() for s in b]


def test_tie_breaks():
    def scores():
        return [CandidateScore("b", 0.5, 0.1), CandidateScore("a", 0.5, 0.2), CandidateScore("c", 0.5, 0.2)]

    assert [s.candidate_id for s in sort_scores(scores(), TieBreak.EMBED_THEN_ID)] == ["a", "c", "b"]
    assert [s.candidate_id for s in sort_scores(scores(), TieBreak.ID)] == ["a", "b", "c"]


def test_fusion_weight():
    s = [CandidateScore("x", 0.6, -0.5), CandidateScore("y", 0.5, 0.9)]
    assert sort_scores(list(s), fusion_weight=0.0)[0].candidate_id == "x"
    assert sort_scores(list(s), fusion_weight=1.0)[0].candidate_id == "y"


class GoldBackend(ToyBackend):
    """Reads the rendered prompt and makes option A win iff the candidate is gold."""

    def __init__(self, gold_text):
        super().__init__()
        self.gold_text = gold_text

    def option_logits(self, tokens, option_ids):
        line = next(ln for ln in tokens.text.split("\n") if ln.startswith("Candidate: "))
        hit = line[len("Candidate: "):] == self.gold_text
        return [5.0, 0.0] if hit else [0.0, 5.0]


def test_gold_always_ranks_first():
    rng = np.random.default_rng(0)
    for trial in range(50):
        texts = [f"caption {trial}-{j}" for j in range(6)]
        g = int(rng.integers(6))
        cands = [(f"c{j}", ModalityInput.text(t)) for j, t in enumerate(texts)]
        order = rng.permutation(6)
        out = Reranker(GoldBackend(texts[g])).rerank(Q, [cands[i] for i in order])
        assert out[0].candidate_id == f"c{g}" and out[0].rank == 1


class FlakyBackend(ToyBackend):
    def option_logits(self, tokens, option_ids):
        if "broken" in tokens.text:
            raise RuntimeError("device lost")
        return super().option_logits(tokens, option_ids)


def test_failed_candidate_sinks():
    cands = [("bad", ModalityInput.text("broken")), ("ok1", ModalityInput.text("fine")), ("ok2", C)]
    out = Reranker(FlakyBackend()).rerank(Q, cands)
    assert out[-1].candidate_id == "bad" and out[-1].error.startswith("RuntimeError")
    assert all(s.error is None for s in out[:-1])


def test_strict_backend_propagates_unsupported_option():
    with pytest.raises(UnsupportedOptionError):
        Reranker(ToyBackend(strict_options=True), get_framing("yes_no")).rerank(Q, [("c", C)])


def test_framings_share_logit_mechanism(toy):
    """Every framing reads the same two-option slice of the final logits."""
    for name in FRAMING_PRESETS:
        f = get_framing(name)
        spec = build_rerank_prompt(Q, C, f)
        logits = toy.forward_with_taps(toy.encode_pieces(spec.pieces), []).final_logits
        a, b = f.option_ids(toy)
        assert option_pair_logits(toy, Q, C, f) == (logits[a], logits[b])


def test_swapped_framing_complements(toy):
    f = binary_framing("True", "False")
    z = option_pair_logits(toy, Q, C, f)
    assert f.swapped().option_ids(toy) == f.option_ids(toy)[::-1]
    assert two_way_softmax(*z) + two_way_softmax(*z[::-1]) == pytest.approx(1.0, abs=1e-12)
