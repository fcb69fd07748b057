"""Sub-layer embedding extraction.

The default tap reads the residual stream right after the last attention
sub-layer, skipping the final MLP. ``tap="mlp@L"`` gives the classic
last-layer one-word-summary embedding.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tapret.backend.base import Backend, SubLayerTap, parse_tap
from tapret.errors import EmptyInputError, InvalidTapError
from tapret.prompts import ModalityInput, PromptFlags, PromptSpec, build_embed_prompt

DEFAULT_TAP = "attn@L"
BASELINE_TAP = "mlp@L"


@dataclass(frozen=True)
class EmbedConfig:
    tap: str | SubLayerTap = DEFAULT_TAP
    flags: PromptFlags = field(default_factory=PromptFlags)
    task_hint: str | None = None
    template: str = "embed"

    def resolve_tap(self, backend: Backend) -> SubLayerTap:
        if isinstance(self.tap, SubLayerTap):
            return self.tap
        return parse_tap(self.tap, backend.descriptor.n_layers)

    def snapshot(self) -> dict:
        tap = self.tap.spec() if isinstance(self.tap, SubLayerTap) else self.tap
        return {"tap": tap, "flags": self.flags.spec(), "task_hint": self.task_hint, "template": self.template}


@dataclass(frozen=True)
class EmbeddingRecord:
    vector: np.ndarray
    backend_id: str
    tap: SubLayerTap
    prompt_hash: str
    input_id: str | None = None
    predicted_token: int | None = None

    @property
    def d(self) -> int:
        return int(self.vector.shape[0])


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


class Embedder:
    def __init__(self, backend: Backend, config: EmbedConfig | None = None):
        self.backend = backend
        self.config = config or EmbedConfig()
        self.tap = self.config.resolve_tap(backend)
        if self.tap.layer > backend.descriptor.n_layers:
            raise InvalidTapError(f"tap {self.tap.spec()} beyond backend depth {backend.descriptor.n_layers}")

    def prompt(self, inp: ModalityInput) -> PromptSpec:
        c = self.config
        return build_embed_prompt(inp, c.flags, c.task_hint, c.template)

    def embed(self, inp: ModalityInput, input_id: str | None = None) -> EmbeddingRecord:
        if not inp.segments:
            raise EmptyInputError("input has no segments")
        spec = self.prompt(inp)
        tokens = self.backend.encode_pieces(spec.pieces)
        bundle = self.backend.forward_with_taps(tokens, [self.tap])
        vec = l2_normalize(bundle[self.tap])
        vec.flags.writeable = False
        return EmbeddingRecord(
            vector=vec,
            backend_id=self.backend.id,
            tap=self.tap,
            prompt_hash=spec.prompt_hash,
            input_id=input_id,
            predicted_token=bundle.predicted_token,
        )

    def embed_batch(
        self,
        inputs: Sequence[ModalityInput],
        ids: Sequence[str] | None = None,
        jobs: int = 1,
    ) -> "BatchResult":
        """Embed many inputs; failures are collected instead of raised."""
        ids = list(ids) if ids is not None else [None] * len(inputs)

        def one(i):
            try:
                return self.embed(inputs[i], ids[i]), None
            except Exception as exc:  # noqa: BLE001 - reported per item
                return None, exc

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(one, range(len(inputs))))
        else:
            results = [one(i) for i in range(len(inputs))]
        records = [r for r, _ in results]
        errors = [(i, e) for i, (_, e) in enumerate(results) if e is not None]
        return BatchResult(records, errors)


@dataclass
class BatchResult:
    records: list[EmbeddingRecord | None]
    errors: list[tuple[int, Exception]]

    @property
    def ok(self) -> list[EmbeddingRecord]:
        return [r for r in self.records if r is not None]


def embed(backend: Backend, inp: ModalityInput, config: EmbedConfig | None = None) -> EmbeddingRecord:
    return Embedder(backend, config).embed(inp)


def embed_batch(backend, inputs, config=None, jobs: int = 1) -> BatchResult:
    return Embedder(backend, config).embed_batch(inputs, jobs=jobs)
