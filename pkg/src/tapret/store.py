"""Flat-file embedding store.

Layout: one JSON header line (UTF-8, ``\\n``-terminated) followed by
``count * d`` little-endian float32 values in row-major order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tapret.backend.base import parse_tap
from tapret.errors import CorpusError

FORMAT = "tapret-embeddings/1"


@dataclass
class EmbeddingStore:
    backend_id: str
    d: int
    tap: str
    ids: list[str]
    vectors: np.ndarray  # (count, d) float32
    prompt_hashes: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, records: Sequence, config: dict | None = None, backend_id: str = "", d: int = 0, tap: str = ""):
        if records:
            backend_id = records[0].backend_id
            d = records[0].d
            tap = records[0].tap.spec()
        vectors = np.array([r.vector for r in records], dtype="<f4").reshape(len(records), d)
        return cls(
            backend_id=backend_id,
            d=d,
            tap=tap,
            ids=[str(r.input_id) for r in records],
            vectors=vectors,
            prompt_hashes=[r.prompt_hash for r in records],
            config=config or {},
        )

    def header(self) -> dict:
        return {
            "format": FORMAT,
            "backend_id": self.backend_id,
            "d": self.d,
            "count": self.count,
            "tap": self.tap,
            "ids": self.ids,
            "prompt_hashes": self.prompt_hashes,
            "config": self.config,
        }

    def save(self, path: str | Path) -> None:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":"))
        body = np.ascontiguousarray(self.vectors, dtype="<f4").tobytes()
        with open(path, "wb") as fh:
            fh.write(head.encode("utf-8") + b"\n")
            fh.write(body)

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            head = json.loads(fh.readline().decode("utf-8"))
            if head.get("format") != FORMAT:
                raise CorpusError(f"{path}: not an embedding store")
            body = fh.read()
        count, d = head["count"], head["d"]
        if len(body) != count * d * 4:
            raise CorpusError(f"{path}: expected {count * d * 4} payload bytes, found {len(body)}")
        vectors = np.frombuffer(body, dtype="<f4").reshape(count, d).copy()
        return cls(
            backend_id=head["backend_id"],
            d=d,
            tap=head["tap"],
            ids=list(head["ids"]),
            vectors=vectors,
            prompt_hashes=list(head.get("prompt_hashes", [])),
            config=head.get("config", {}),
        )

    def records(self) -> list:
        from tapret.embedder import EmbeddingRecord

        tap = parse_tap(self.tap) if self.tap and "@L" not in self.tap else None
        hashes = self.prompt_hashes or [""] * self.count
        out = []
        for i, rid in enumerate(self.ids):
            v = self.vectors[i].astype(np.float64)
            v = v / np.linalg.norm(v)
            out.append(EmbeddingRecord(v, self.backend_id, tap, hashes[i], rid))
        return out
