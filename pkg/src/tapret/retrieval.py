"""Exact cosine index, two-stage search, Precision@1 and single-model RAG."""

from __future__ import annotations

import json
import threading
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from tapret.errors import CorpusError, DimensionMismatchError
from tapret.prompts import ModalityInput, Role, Segment, load_template_file, render
from tapret.reranker import CandidateScore, TieBreak, sort_scores

# -- corpus -----------------------------------------------------------------


@dataclass
class CorpusRecord:
    id: str
    input: ModalityInput
    gold_for: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"id": self.id, "segments": self.input.to_json(), "gold_for": list(self.gold_for), "meta": self.meta}


class CorpusLoad(NamedTuple):
    records: list[CorpusRecord]
    errors: list[dict]


_KINDS = {"text", "image", "video", "audio"}


def parse_record(obj, role: Role = Role.TARGET) -> CorpusRecord:
    if not isinstance(obj, dict):
        raise CorpusError("record is not a JSON object")
    rid = obj.get("id")
    if not isinstance(rid, str) or not rid:
        raise CorpusError("missing or empty 'id'")
    segs = obj.get("segments")
    if not isinstance(segs, list) or not segs:
        raise CorpusError(f"{rid}: 'segments' must be a nonempty list")
    parsed = []
    for s in segs:
        if not isinstance(s, dict) or s.get("kind") not in _KINDS or not isinstance(s.get("payload"), str):
            raise CorpusError(f"{rid}: bad segment {s!r}")
        parsed.append(Segment(s["kind"], s["payload"]))
    gold = obj.get("gold_for", [])
    if not isinstance(gold, list) or not all(isinstance(g, str) for g in gold):
        raise CorpusError(f"{rid}: 'gold_for' must be a list of strings")
    meta = obj.get("meta", {})
    if not isinstance(meta, dict):
        raise CorpusError(f"{rid}: 'meta' must be an object")
    return CorpusRecord(rid, ModalityInput(tuple(parsed), role), list(gold), meta)


def load_corpus(path: str | Path, role: Role | str = Role.TARGET) -> CorpusLoad:
    """Read a JSONL corpus. Bad lines are reported, never fatal."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    records, errors, seen = [], [], set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = parse_record(json.loads(line), Role(role))
            if rec.id in seen:
                raise CorpusError(f"duplicate id {rec.id!r}")
        except (json.JSONDecodeError, CorpusError) as exc:
            errors.append({"line": lineno, "error": str(exc)})
            continue
        seen.add(rec.id)
        records.append(rec)
    return CorpusLoad(records, errors)


def save_corpus(records: Iterable[CorpusRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def gold_map(corpus: Iterable[CorpusRecord]) -> dict[str, set[str]]:
    gold: dict[str, set[str]] = {}
    for rec in corpus:
        for qid in rec.gold_for:
            gold.setdefault(qid, set()).add(rec.id)
    return gold


# -- index ------------------------------------------------------------------


class VectorIndex:
    """Exact cosine top-k over unit vectors.

    Writes build new arrays and swap them in under a lock, so searches always
    see a consistent snapshot.
    """

    def __init__(self, d: int):
        self.d = d
        self._lock = threading.Lock()
        self._ids: list[str] = []
        self._rows: dict[str, int] = {}
        self._mat = np.zeros((0, d))
        self._id_rank = np.zeros(0, dtype=np.int64)
        self._records: dict = {}

    @property
    def count(self) -> int:
        return len(self._ids)

    def __len__(self) -> int:
        return self.count

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def records(self) -> Mapping:
        return dict(self._records)

    def add(self, records: Sequence) -> "VectorIndex":
        if not records:
            return self
        with self._lock:
            ids = list(self._ids)
            rows = dict(self._rows)
            mat = [row for row in self._mat]
            recs = dict(self._records)
            for rec in records:
                v = np.asarray(rec.vector, dtype=np.float64)
                if v.shape != (self.d,):
                    raise DimensionMismatchError(f"vector of shape {v.shape} into index of dimension {self.d}")
                v = v / np.linalg.norm(v)
                rid = str(rec.input_id)
                if rid in rows:
                    warnings.warn(f"replacing existing index entry {rid!r}", stacklevel=2)
                    mat[rows[rid]] = v
                else:
                    rows[rid] = len(ids)
                    ids.append(rid)
                    mat.append(v)
                recs[rid] = rec
            new_mat = np.array(mat).reshape(len(ids), self.d)
            order = sorted(range(len(ids)), key=ids.__getitem__)
            rank = np.empty(len(ids), dtype=np.int64)
            rank[order] = np.arange(len(ids))
            self._ids, self._rows, self._mat, self._id_rank, self._records = ids, rows, new_mat, rank, recs
        return self

    def search(self, query_vector: np.ndarray, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query_vector, dtype=np.float64)
        if q.shape != (self.d,):
            raise DimensionMismatchError(f"query of shape {q.shape} against index of dimension {self.d}")
        ids, mat, rank = self._ids, self._mat, self._id_rank  # snapshot
        if not ids:
            return []
        q = q / np.linalg.norm(q)
        scores = np.clip(mat @ q, -1.0, 1.0)
        order = np.lexsort((rank, -scores))[:k]
        return [(ids[i], float(scores[i])) for i in order]


def index_add(handle: VectorIndex, records: Sequence) -> VectorIndex:
    return handle.add(records)


def index_search(handle: VectorIndex, query_vector, k: int) -> list[tuple[str, float]]:
    return handle.search(query_vector, k)


# -- two-stage search -------------------------------------------------------


class EmbeddingScoreReranker:
    """Relevance = (cosine + 1) / 2; keeps the stage-1 order. Useful as a control."""

    def rerank(self, query, candidates, embed_scores=None, tie_break=TieBreak.EMBED_THEN_ID, fusion_weight=0.0):
        embed_scores = embed_scores or {}
        scored = [CandidateScore(cid, (embed_scores[cid] + 1.0) / 2.0, embed_scores[cid]) for cid, _ in candidates]
        return sort_scores(scored, tie_break, fusion_weight)


class TwoStageRetriever:
    def __init__(
        self,
        embedder,
        index: VectorIndex,
        corpus: Mapping[str, ModalityInput],
        reranker=None,
        tie_break: TieBreak = TieBreak.EMBED_THEN_ID,
        fusion_weight: float = 0.0,
    ):
        self.embedder = embedder
        self.index = index
        self.corpus = corpus
        self.reranker = reranker
        self.tie_break = tie_break
        self.fusion_weight = fusion_weight

    def search(self, query: ModalityInput, K: int, M: int) -> list[CandidateScore]:
        qvec = self.embedder.embed(query.with_role(Role.QUERY)).vector
        return self.search_vector(query, qvec, K, M)

    def search_vector(self, query: ModalityInput, qvec: np.ndarray, K: int, M: int) -> list[CandidateScore]:
        if not 1 <= M <= K:
            raise ValueError(f"need 1 <= M <= K, got M={M}, K={K}")
        hits = self.index.search(qvec, K)
        if not hits:
            return []
        pool, tail = hits[:M], hits[M:]
        embed_scores = dict(hits)
        if self.reranker is None:
            head = [CandidateScore(cid, 0.0, s, reranked=False) for cid, s in pool]
        else:
            head = self.reranker.rerank(
                query,
                [(cid, self.corpus[cid]) for cid, _ in pool],
                {cid: embed_scores[cid] for cid, _ in pool},
                self.tie_break,
                self.fusion_weight,
            )
        out = list(head) + [CandidateScore(cid, 0.0, s, reranked=False) for cid, s in tail]
        for rank, s in enumerate(out, start=1):
            s.rank = rank
        return out


def pipeline_search(retriever: TwoStageRetriever, query: ModalityInput, K: int, M: int) -> list[CandidateScore]:
    return retriever.search(query, K, M)


# -- evaluation -------------------------------------------------------------


@dataclass
class EvalResult:
    precision_at_1: float
    per_query: list[dict]
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def hits(self) -> int:
        return sum(1 for r in self.per_query if r["hit"])

    def recompute(self) -> float:
        return self.hits / len(self.per_query) if self.per_query else 0.0

    def to_json(self) -> dict:
        return {
            "precision_at_1": self.precision_at_1,
            "per_query": self.per_query,
            "config": self.config,
            "metadata": self.metadata,
        }


def _top1(result) -> str | None:
    if not result:
        return None
    first = result[0]
    if isinstance(first, CandidateScore):
        return min(result, key=lambda s: s.rank).candidate_id
    if isinstance(first, tuple):
        return first[0]
    return str(first)


def precision_at_1(results: Mapping[str, Sequence], gold: Mapping[str, Iterable[str]], config: dict | None = None) -> EvalResult:
    """Hit iff the top-ranked id is in the query's gold set.

    ``results`` values may be ranked ``CandidateScore`` lists, ``(id, score)``
    lists or plain id lists. Queries without gold are excluded and counted.
    """
    rows, excluded = [], []
    for qid in sorted(results):
        g = set(gold.get(qid, ()))
        if not g:
            excluded.append(qid)
            continue
        top = _top1(results[qid])
        rows.append({"query_id": qid, "top1_id": top, "hit": top in g})
    hits = sum(r["hit"] for r in rows)
    p = hits / len(rows) if rows else 0.0
    return EvalResult(p, rows, dict(config or {}), {"queries": len(rows), "excluded_no_gold": excluded})


# -- RAG --------------------------------------------------------------------


@dataclass
class RagAnswer:
    answer_text: str
    evidence: list[CandidateScore]
    prompt: str = ""
    error: str | None = None


def build_answer_prompt(question: ModalityInput, evidence: Sequence[ModalityInput], template_file: str = "rag"):
    sections = load_template_file(template_file)
    blocks = []
    for rank, ev in enumerate(evidence, start=1):
        blocks.extend(render(sections["evidence_block"] + "\n", rank=str(rank), candidate=ev.pieces()))
    return render(sections["answer"], evidence=blocks, question=question.pieces())


def rag_answer(
    retriever: TwoStageRetriever,
    question: ModalityInput,
    K: int,
    M: int,
    backend=None,
    max_new_tokens: int = 32,
) -> RagAnswer:
    """Retrieve, rerank, then answer with the top-M evidence inlined."""
    from tapret.prompts import pieces_to_text

    if retriever.index.count == 0:
        raise CorpusError("RAG needs a nonempty index")
    evidence = retriever.search(question, K, M)
    backend = backend or retriever.embedder.backend
    top = [retriever.corpus[s.candidate_id] for s in evidence[:M]]
    pieces = build_answer_prompt(question, top)
    prompt_text = pieces_to_text(pieces)
    try:
        tokens = backend.encode_pieces(pieces)
        stop = backend.tokenize("\n")
        ids = backend.generate(tokens, max_new_tokens, stop_ids=stop[:1])
        return RagAnswer(backend.decode(ids).strip(), evidence, prompt_text)
    except Exception as exc:  # noqa: BLE001 - evidence is still returned
        return RagAnswer("", evidence, prompt_text, error=f"{type(exc).__name__}: {exc}")
