"""Deterministic toy decoder-only transformer.

Pre-norm blocks, multi-head causal attention, GELU MLP of width 4d,
sinusoidal positions, untied LM head, byte-level tokenizer over the
7-bit ASCII range. Small enough for brute-force oracles in the test suite.
"""

from __future__ import annotations

import hashlib
import math
from functools import lru_cache
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from tapret.backend.base import (
    LAST,
    Backend,
    BackendDescriptor,
    Piece,
    SubLayerTap,
    Sublayer,
    TokenSequence,
)

MEDIA_TOKEN = 0  # reserved placeholder for any image/video/audio segment
REPLACEMENT = ord("?")
LN_EPS = 1e-5


@dataclass(frozen=True)
class ToyConfig:
    seed: int = 1729
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    vocab_size: int = 128
    zero_mlp: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size > 256:
            raise ValueError("byte tokenizer supports at most 256 ids")


def toy_weights(cfg: ToyConfig) -> dict[str, np.ndarray]:
    """Draw every parameter from one seeded generator, in a fixed order."""
    rng = np.random.default_rng(cfg.seed)
    d, V, f = cfg.d_model, cfg.vocab_size, 4 * cfg.d_model
    w: dict[str, np.ndarray] = {"tok_emb": rng.normal(0.0, 1.0, (V, d))}
    for l in range(1, cfg.n_layers + 1):
        p = f"l{l}."
        w[p + "ln1_g"] = 1.0 + 0.1 * rng.normal(size=d)
        w[p + "ln1_b"] = 0.1 * rng.normal(size=d)
        for name in ("wq", "wk", "wv", "wo"):
            w[p + name] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        w[p + "ln2_g"] = 1.0 + 0.1 * rng.normal(size=d)
        w[p + "ln2_b"] = 0.1 * rng.normal(size=d)
        w[p + "w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, f))
        w[p + "b1"] = 0.1 * rng.normal(size=f)
        w[p + "w2"] = rng.normal(0.0, 1.0 / math.sqrt(f), (f, d))
        w[p + "b2"] = 0.1 * rng.normal(size=d)
        if cfg.zero_mlp:
            w[p + "w2"] = np.zeros((f, d))
            w[p + "b2"] = np.zeros(d)
    w["lnf_g"] = 1.0 + 0.1 * rng.normal(size=d)
    w["lnf_b"] = 0.1 * rng.normal(size=d)
    w["unembed"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, V))
    w["lm_bias"] = np.zeros(V)
    return w


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


@lru_cache(maxsize=64)
def causal_mask(T: int) -> np.ndarray:
    m = np.triu(np.full((T, T), -np.inf), k=1)
    m.flags.writeable = False
    return m


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x * x * x)))


class ToyBackend(Backend):
    """Reference backend; see ``ToyConfig`` for the knobs.

    ``weights`` replaces individual generated tensors (test fixtures craft
    LM heads this way). ``strict_options=False`` lets multi-byte option labels
    fall back to their first byte.
    """

    def __init__(
        self,
        config: ToyConfig | None = None,
        weights: Mapping[str, np.ndarray] | None = None,
        strict_options: bool = False,
    ):
        self.config = config or ToyConfig()
        w = toy_weights(self.config)
        suffix = ""
        if weights:
            unknown = set(weights) - set(w)
            if unknown:
                raise KeyError(f"unknown weight names: {sorted(unknown)}")
            h = hashlib.sha256()
            for name in sorted(weights):
                arr = np.asarray(weights[name], dtype=np.float64)
                if arr.shape != w[name].shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {w[name].shape}")
                w[name] = arr.copy()
                h.update(name.encode())
                h.update(arr.tobytes())
            suffix = f",custom={h.hexdigest()[:12]}"
        for arr in w.values():
            arr.flags.writeable = False
        self._w = w
        self.strict_options = strict_options
        c = self.config
        variant = "zero_mlp" if c.zero_mlp else "standard"
        self.descriptor = BackendDescriptor(
            id=f"toy(seed={c.seed},L={c.n_layers},d={c.d_model},h={c.n_heads},V={c.vocab_size},{variant}{suffix})",
            n_layers=c.n_layers,
            d_model=c.d_model,
            vocab_size=c.vocab_size,
        )

    @property
    def weights(self) -> Mapping[str, np.ndarray]:
        return self._w

    def with_weights(self, **overrides: np.ndarray) -> "ToyBackend":
        merged = {}
        base = toy_weights(self.config)
        for name, arr in self._w.items():
            if not np.array_equal(arr, base[name]):
                merged[name] = arr
        merged.update(overrides)
        return ToyBackend(self.config, merged, self.strict_options)

    def describe(self) -> dict:
        return {"id": "toy", **asdict(self.config)}

    # -- tokenizer --------------------------------------------------------

    def tokenize(self, text: str) -> list[int]:
        V = self.config.vocab_size
        out = []
        for b in text.encode("ascii", errors="replace"):
            out.append(b if 0 < b < V else REPLACEMENT)
        return out

    def decode(self, ids: Iterable[int]) -> str:
        chars = []
        for i in ids:
            if i == MEDIA_TOKEN:
                chars.append("<media>")
            elif i < 32 and i not in (9, 10):
                chars.append(f"<0x{i:02x}>")
            else:
                chars.append(chr(i))
        return "".join(chars)

    def encode_pieces(self, pieces: Sequence[Piece]) -> TokenSequence:
        ids: list[int] = []
        slots: list[int] = []
        text = []
        for piece in pieces:
            if piece.kind == "text":
                ids.extend(self.tokenize(piece.payload))
                text.append(piece.payload)
            else:
                slots.append(len(ids))
                ids.append(MEDIA_TOKEN)
                text.append(f"<{piece.kind}>")
        return TokenSequence(ids, text="".join(text), media_slots=tuple(slots))

    def substitute_option(self, label: str, ids: list[int]) -> int:
        if self.strict_options or not ids:
            return super().substitute_option(label, ids)
        return ids[0]

    # -- model ------------------------------------------------------------

    def unembedding(self) -> np.ndarray:
        return self._w["unembed"]

    def head_logits(self, h: np.ndarray) -> np.ndarray:
        """Final norm then LM head, for a residual-stream vector or rows."""
        w = self._w
        return layer_norm(h, w["lnf_g"], w["lnf_b"]) @ w["unembed"] + w["lm_bias"]

    def attn_branch(self, layer: int, x: np.ndarray) -> np.ndarray:
        """Attention sub-layer output (pre-residual) for a (T, d) stream."""
        w, c = self._w, self.config
        p = f"l{layer}."
        T, d = x.shape
        hd = d // c.n_heads
        a = layer_norm(x, w[p + "ln1_g"], w[p + "ln1_b"])
        # (heads, T, hd)
        q = (a @ w[p + "wq"]).reshape(T, c.n_heads, hd).transpose(1, 0, 2)
        k = (a @ w[p + "wk"]).reshape(T, c.n_heads, hd).transpose(1, 0, 2)
        v = (a @ w[p + "wv"]).reshape(T, c.n_heads, hd).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(hd)
        scores += causal_mask(T)
        scores -= scores.max(axis=-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=-1, keepdims=True)
        out = (att @ v).transpose(1, 0, 2).reshape(T, d)
        return out @ w[p + "wo"]

    def mlp_branch(self, layer: int, x: np.ndarray) -> np.ndarray:
        w = self._w
        p = f"l{layer}."
        m = layer_norm(x, w[p + "ln2_g"], w[p + "ln2_b"])
        return gelu(m @ w[p + "w1"] + w[p + "b1"]) @ w[p + "w2"] + w[p + "b2"]

    def embed_tokens(self, ids: Sequence[int]) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        return self._w["tok_emb"][ids] + sinusoidal_positions(len(ids), self.config.d_model)

    def _forward(self, ids, taps, media_slots=()):
        wanted: dict[tuple[int, Sublayer], list[SubLayerTap]] = {}
        for tap in taps:
            wanted.setdefault((tap.layer, tap.sublayer), []).append(tap)
        states: dict[SubLayerTap, np.ndarray] = {}

        def record(layer, sub, stream):
            for tap in wanted.get((layer, sub), ()):
                row = stream[-1] if tap.position == LAST else stream[tap.position]
                states[tap] = row.copy()

        h = self.embed_tokens(ids)
        record(0, Sublayer.MLP, h)
        for layer in range(1, self.config.n_layers + 1):
            h = h + self.attn_branch(layer, h)
            record(layer, Sublayer.ATTN, h)
            h = h + self.mlp_branch(layer, h)
            record(layer, Sublayer.MLP, h)
        logits = self.head_logits(h[-1])
        return states, logits
