"""Synthetic retrieval tasks and oracle components for desk-scale runs."""

from __future__ import annotations

import random
from typing import Mapping

from tapret.prompts import ModalityInput, Role, Segment
from tapret.reranker import CandidateScore, TieBreak, sort_scores
from tapret.retrieval import CorpusRecord

SUBJECTS = ["dog", "cat", "horse", "child", "chef", "pilot", "farmer", "robot", "bird", "sailor", "dancer", "student"]
ACTIONS = ["running", "sleeping", "eating", "jumping", "reading", "painting", "swimming", "singing"]
PLACES = ["in a park", "on a beach", "in a kitchen", "on a roof", "in a forest", "at a station", "in a library", "on a boat"]


def synthetic_task(n_queries: int = 12, n_distractors: int = 12, seed: int = 0, with_images: bool = True):
    """Caption-style text-to-image task.

    Each query describes one scene; its gold candidate is an image reference
    plus a caption of the same scene. Distractors are other random scenes.
    Returns ``(queries, corpus)`` as lists of ``CorpusRecord``; gold is carried
    on the corpus side via ``gold_for``.
    """
    rng = random.Random(seed)
    scenes = [(s, a, p) for s in SUBJECTS for a in ACTIONS for p in PLACES]
    rng.shuffle(scenes)
    need = n_queries + n_distractors
    if need > len(scenes):
        raise ValueError("too many records requested")
    picked = scenes[:need]
    queries, corpus = [], []
    for i, (s, a, p) in enumerate(picked):
        cid = f"c{i:04d}"
        segs = [Segment("text", f"A photo of a {s} {a} {p}.")]
        if with_images:
            segs.insert(0, Segment("image", f"images/{cid}.jpg"))
        gold_for = []
        if i < n_queries:
            qid = f"q{i:04d}"
            gold_for = [qid]
            queries.append(
                CorpusRecord(qid, ModalityInput((Segment("text", f"Find an image of a {s} {a} {p}"),), Role.QUERY))
            )
        corpus.append(CorpusRecord(cid, ModalityInput(tuple(segs), Role.TARGET), gold_for, {"scene": [s, a, p]}))
    order = list(range(len(corpus)))
    rng.shuffle(order)
    corpus = [corpus[i] for i in order]
    return queries, corpus


class OracleReranker:
    """Scores 1.0 for gold candidates and 0.0 otherwise; an upper-bound control."""

    def __init__(self, gold: Mapping[str, set], query_ids: Mapping[ModalityInput, str]):
        self.gold = gold
        self.query_ids = query_ids

    def rerank(self, query, candidates, embed_scores=None, tie_break=TieBreak.EMBED_THEN_ID, fusion_weight=0.0):
        embed_scores = embed_scores or {}
        qid = self.query_ids.get(query) or self.query_ids.get(query.with_role(Role.QUERY))
        gold = self.gold.get(qid, set())
        scored = [
            CandidateScore(cid, 1.0 if cid in gold else 0.0, embed_scores.get(cid, 0.0)) for cid, _ in candidates
        ]
        return sort_scores(scored, tie_break, fusion_weight)


def constructed_task(embedder, n_queries: int = 50, n_distractors: int = 50, pool: int = 8, seed: int = 0):
    """Synthetic task whose gold sits at a known stage-1 rank.

    Query ``i`` gets as gold the candidate ranked ``i % pool + 1`` by the
    given embedder, so every gold is inside the top-``pool`` and an oracle
    reranker reaches Precision@1 = 1.0 once M >= pool.
    """
    from tapret.retrieval import VectorIndex

    queries, corpus = synthetic_task(n_queries, n_distractors, seed, with_images=True)
    for rec in corpus:
        rec.gold_for = []
    batch = embedder.embed_batch([r.input for r in corpus], [r.id for r in corpus])
    index = VectorIndex(embedder.backend.descriptor.d_model).add(batch.ok)
    by_id = {r.id: r for r in corpus}
    for i, q in enumerate(queries):
        hits = index.search(embedder.embed(q.input).vector, pool)
        by_id[hits[i % pool][0]].gold_for.append(q.id)
    return queries, corpus
