"""Evaluation over a declarative ablation grid (tap x prompt x framing x M).

Forward passes are shared across cells: one pass per (prompt config, input)
captures every tap on the grid, and rerank scores are memoized per
(framing, query, candidate).
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass

from tapret.backend import Backend, parse_tap
from tapret.config import RunConfig
from tapret.embedder import EmbeddingRecord, l2_normalize
from tapret.fixtures import OracleReranker
from tapret.prompts import PROMPT_LADDER, PromptFlags, Role, build_embed_prompt
from tapret.reranker import Reranker, get_framing
from tapret.retrieval import (
    CorpusRecord,
    EmbeddingScoreReranker,
    EvalResult,
    TwoStageRetriever,
    VectorIndex,
    gold_map,
    precision_at_1,
)


def _flags_for(key: str) -> PromptFlags:
    return PROMPT_LADDER[key] if key in PROMPT_LADDER else PromptFlags.parse(key)


class MemoReranker(Reranker):
    """Reranker with a thread-safe score cache keyed by (query, candidate)."""

    def __init__(self, backend, framing, jobs=1):
        super().__init__(backend, framing, jobs)
        self._cache: dict = {}
        self._lock = threading.Lock()

    def score(self, query, candidate):
        key = (query, candidate)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        value = super().score(query, candidate)
        with self._lock:
            self._cache[key] = value
        return value


@dataclass
class Workload:
    queries: list[CorpusRecord]
    corpus: list[CorpusRecord]

    @property
    def gold(self) -> dict[str, set[str]]:
        return gold_map(self.corpus)


class GridRunner:
    def __init__(self, cfg: RunConfig, backend: Backend, workload: Workload):
        self.cfg = cfg
        self.backend = backend
        self.workload = workload
        self.gold = workload.gold
        self._emb: dict[str, dict] = {}
        self._rerankers: dict[str, object] = {}
        self._corpus_inputs = {r.id: r.input.with_role(Role.TARGET) for r in workload.corpus}

    def axes(self) -> list[tuple[str, list]]:
        base = {"tap": [self.cfg.tap], "prompt": [self.cfg.flags], "framing": [self.cfg.framing], "M": [self.cfg.M]}
        for axis in self.cfg.grid:
            base[axis] = list(self.cfg.ablation[axis])
        return [(k, base[k]) for k in ("tap", "prompt", "framing", "M")]

    def _all_taps(self):
        L = self.backend.descriptor.n_layers
        taps = {self.cfg.tap}
        if "tap" in self.cfg.grid:
            taps.update(self.cfg.ablation["tap"])
        return {spec: parse_tap(spec, L) for spec in sorted(taps)}

    def embeddings(self, prompt_key: str) -> dict:
        """tap spec -> (query records, corpus records) for one prompt config."""
        if prompt_key in self._emb:
            return self._emb[prompt_key]
        flags = _flags_for(prompt_key)
        taps = self._all_taps()
        hint = self.cfg.task_hint
        out = {spec: ([], []) for spec in taps}
        for side, records, role in ((0, self.workload.queries, Role.QUERY), (1, self.workload.corpus, Role.TARGET)):
            for rec in records:
                spec = build_embed_prompt(rec.input.with_role(role), flags, hint)
                bundle = self.backend.forward_with_taps(self.backend.encode_pieces(spec.pieces), taps.values())
                for name, tap in taps.items():
                    vec = l2_normalize(bundle[tap])
                    out[name][side].append(
                        EmbeddingRecord(vec, self.backend.id, tap, spec.prompt_hash, rec.id, bundle.predicted_token)
                    )
        self._emb[prompt_key] = out
        return out

    def reranker(self, framing_name: str):
        if framing_name not in self._rerankers:
            kind = self.cfg.reranker
            if kind == "oracle":
                qids = {r.input.with_role(Role.QUERY): r.id for r in self.workload.queries}
                self._rerankers[framing_name] = OracleReranker(self.gold, qids)
            elif kind == "embedding":
                self._rerankers[framing_name] = EmbeddingScoreReranker()
            else:
                self._rerankers[framing_name] = MemoReranker(self.backend, get_framing(framing_name), self.cfg.jobs)
        return self._rerankers[framing_name]

    def cell(self, tap: str, prompt: str, framing: str, M: int) -> EvalResult:
        K = max(self.cfg.K, M)
        qrecs, crecs = self.embeddings(prompt)[tap]
        index = VectorIndex(self.backend.descriptor.d_model).add(crecs)
        retriever = TwoStageRetriever(
            None, index, self._corpus_inputs, self.reranker(framing), fusion_weight=self.cfg.fusion_weight
        )
        results = {}
        for q, qrec in zip(self.workload.queries, qrecs):
            results[q.id] = retriever.search_vector(q.input.with_role(Role.QUERY), qrec.vector, K, M)
        snapshot = {
            "backend_id": self.backend.id,
            "tap": tap,
            "prompt": prompt,
            "flags": _flags_for(prompt).spec(),
            "framing": framing,
            "reranker": self.cfg.reranker,
            "K": K,
            "M": M,
            "fusion_weight": self.cfg.fusion_weight,
        }
        return precision_at_1(results, self.gold, snapshot)

    def run(self) -> list[EvalResult]:
        names, values = zip(*self.axes())
        return [self.cell(**dict(zip(names, combo))) for combo in itertools.product(*values)]
