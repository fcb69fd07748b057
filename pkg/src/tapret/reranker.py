"""Pointwise reranking with two-option label framings.

A pair is scored by a softmax restricted to the two option-token logits at
the final prompt position; option 1 is always the positive label.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from tapret.backend.base import Backend
from tapret.errors import UnsupportedOptionError
from tapret.prompts import ModalityInput, PromptSpec, load_template_file, pieces_to_text, render


class FramingKind(enum.Enum):
    MCQ = "mcq"
    BINARY_WORDS = "binary"


@dataclass(frozen=True)
class LabelOption:
    label_text: str
    option_token: str | None = None  # defaults to label_text

    @property
    def token_text(self) -> str:
        return self.option_token if self.option_token is not None else self.label_text


@dataclass(frozen=True)
class FramingConfig:
    name: str
    kind: FramingKind
    options: tuple[LabelOption, LabelOption]
    prompt_template: str

    def __post_init__(self):
        if len(self.options) != 2:
            raise ValueError("a framing needs exactly two options")

    def swapped(self) -> "FramingConfig":
        return FramingConfig(self.name + "~swapped", self.kind, self.options[::-1], self.prompt_template)

    def option_ids(self, backend: Backend) -> tuple[int, int]:
        a, b = (backend.option_id(o.token_text) for o in self.options)
        return a, b


def mcq_framing(task_id: str | None = None, template_file: str = "rerank") -> FramingConfig:
    sections = load_template_file(template_file)
    key = f"mcq.{task_id}" if task_id and f"mcq.{task_id}" in sections else "mcq"
    return FramingConfig("mcq", FramingKind.MCQ, (LabelOption("A"), LabelOption("B")), sections[key])


def binary_framing(positive: str, negative: str, template_file: str = "rerank") -> FramingConfig:
    sections = load_template_file(template_file)
    name = f"{positive.lower()}_{negative.lower()}"
    return FramingConfig(
        name, FramingKind.BINARY_WORDS, (LabelOption(positive), LabelOption(negative)), sections["binary"]
    )


FRAMING_PRESETS = ("mcq", "yes_no", "true_false", "right_wrong")


def get_framing(name: str) -> FramingConfig:
    if name == "mcq":
        return mcq_framing()
    pairs = {"yes_no": ("Yes", "No"), "true_false": ("True", "False"), "right_wrong": ("Right", "Wrong")}
    if name not in pairs:
        raise KeyError(f"unknown framing {name!r}; presets: {FRAMING_PRESETS}")
    return binary_framing(*pairs[name])


def build_rerank_prompt(query: ModalityInput, candidate: ModalityInput, framing: FramingConfig) -> PromptSpec:
    """Render the framing template with all segments of both sides, in order."""
    query.validate()
    candidate.validate()
    pos, neg = (o.label_text for o in framing.options)
    pieces = render(
        framing.prompt_template,
        query=query.pieces(),
        candidate=candidate.pieces(),
        positive=pos,
        negative=neg,
    )
    return PromptSpec(template_id=f"rerank:{framing.name}", rendered_text=pieces_to_text(pieces), pieces=tuple(pieces))


def two_way_softmax(z1: float, z2: float) -> float:
    """exp(z1) / (exp(z1) + exp(z2)), evaluated without overflow."""
    d = z2 - z1
    if d >= 0:
        e = math.exp(-d)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(d))


def option_pair_logits(backend: Backend, query, candidate, framing: FramingConfig) -> tuple[float, float]:
    spec = build_rerank_prompt(query, candidate, framing)
    tokens = backend.encode_pieces(spec.pieces)
    z1, z2 = backend.option_logits(tokens, framing.option_ids(backend))
    return z1, z2


def relevance_score(backend: Backend, query, candidate, framing: FramingConfig) -> float:
    z1, z2 = option_pair_logits(backend, query, candidate, framing)
    return two_way_softmax(z1, z2)


def relevance_complement(backend: Backend, query, candidate, framing: FramingConfig) -> float:
    z1, z2 = option_pair_logits(backend, query, candidate, framing)
    return two_way_softmax(z2, z1)


class TieBreak(enum.Enum):
    EMBED_THEN_ID = "embed"
    ID = "id"


@dataclass
class CandidateScore:
    candidate_id: str
    relevance: float
    embed_score: float = 0.0
    rank: int = 0
    error: str | None = None
    reranked: bool = True

    def to_json(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "relevance": self.relevance,
            "embed_score": self.embed_score,
            "rank": self.rank,
            "error": self.error,
            "reranked": self.reranked,
        }


def sort_scores(
    scores: list[CandidateScore], tie_break: TieBreak = TieBreak.EMBED_THEN_ID, fusion_weight: float = 0.0
) -> list[CandidateScore]:
    """Order by (optionally fused) relevance; failed candidates always sink."""

    def key(s: CandidateScore):
        primary = s.relevance + fusion_weight * s.embed_score
        secondary = -s.embed_score if tie_break is TieBreak.EMBED_THEN_ID else 0.0
        return (s.error is not None, -primary, secondary, s.candidate_id)

    ordered = sorted(scores, key=key)
    for rank, s in enumerate(ordered, start=1):
        s.rank = rank
    return ordered


class Reranker:
    def __init__(self, backend: Backend, framing: FramingConfig | None = None, jobs: int = 1):
        self.backend = backend
        self.framing = framing or mcq_framing()
        self.jobs = jobs

    def score(self, query: ModalityInput, candidate: ModalityInput) -> float:
        return relevance_score(self.backend, query, candidate, self.framing)

    def rerank(
        self,
        query: ModalityInput,
        candidates: Sequence[tuple[str, ModalityInput]],
        embed_scores: dict[str, float] | None = None,
        tie_break: TieBreak = TieBreak.EMBED_THEN_ID,
        fusion_weight: float = 0.0,
    ) -> list[CandidateScore]:
        if not candidates:
            raise ValueError("rerank needs at least one candidate")
        embed_scores = embed_scores or {}

        def one(item):
            cid, cand = item
            try:
                rel = self.score(query, cand)
                return CandidateScore(cid, rel, embed_scores.get(cid, 0.0))
            except UnsupportedOptionError:
                raise
            except Exception as exc:  # noqa: BLE001 - failed candidates sink
                return CandidateScore(cid, 0.0, embed_scores.get(cid, 0.0), error=f"{type(exc).__name__}: {exc}")

        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                scored = list(pool.map(one, candidates))
        else:
            scored = [one(c) for c in candidates]
        return sort_scores(scored, tie_break, fusion_weight)


def rerank(backend, query, candidates, framing=None, tie_break=TieBreak.EMBED_THEN_ID, embed_scores=None):
    return Reranker(backend, framing).rerank(query, candidates, embed_scores, tie_break)
