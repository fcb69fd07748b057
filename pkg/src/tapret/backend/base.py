"""Backend-agnostic types and the abstract causal-LM interface.

Every backend exposes the residual stream after each attention and MLP
sub-layer. Taps always read the post-residual-add value, so for a pre-norm
block

    h_attn[l] = h_mlp[l-1] + Attn(LN(h_mlp[l-1]))
    h_mlp[l]  = h_attn[l]  + MLP(LN(h_attn[l]))

with ``h_mlp[0]`` being the input embedding stream.
"""

from __future__ import annotations

import abc
import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from tapret.errors import (
    EmptyInputError,
    InvalidTapError,
    InvalidTokenError,
    UnsupportedOptionError,
)


class Sublayer(enum.Enum):
    ATTN = "attn"
    MLP = "mlp"

    @property
    def order(self) -> int:
        return 0 if self is Sublayer.ATTN else 1


LAST = -1  # position sentinel: last input token


@dataclass(frozen=True, order=False)
class SubLayerTap:
    """Read point on the residual stream.

    ``layer`` counts from 1. ``layer=0`` with ``Sublayer.MLP`` is accepted as
    the embedding stream so that the first attention shift can be measured.
    ``position`` is ``LAST`` or a non-negative token index.
    """

    layer: int
    sublayer: Sublayer
    position: int = LAST

    def __post_init__(self):
        if not isinstance(self.sublayer, Sublayer):
            object.__setattr__(self, "sublayer", Sublayer(self.sublayer))
        if self.layer < 0:
            raise InvalidTapError(f"layer index must be >= 0, got {self.layer}")
        if self.layer == 0 and self.sublayer is not Sublayer.MLP:
            raise InvalidTapError("layer 0 only exists as the embedding stream (mlp)")
        if self.position < LAST:
            raise InvalidTapError(f"bad position {self.position}")

    @property
    def sort_key(self) -> tuple[int, int, int]:
        return (self.layer, self.sublayer.order, self.position)

    def spec(self) -> str:
        s = f"{self.sublayer.value}@{self.layer}"
        if self.position != LAST:
            s += f"/pos={self.position}"
        return s


def tap_attn(layer: int) -> SubLayerTap:
    return SubLayerTap(layer, Sublayer.ATTN)


def tap_mlp(layer: int) -> SubLayerTap:
    return SubLayerTap(layer, Sublayer.MLP)


def parse_tap(spec: str, n_layers: int | None = None) -> SubLayerTap:
    """Parse ``"attn@L"``, ``"mlp@L-1"``, ``"attn@3/pos=5"``.

    Relative layer forms (``L``, ``L-k``) need ``n_layers``.
    """
    text = spec.strip()
    position = LAST
    if "/" in text:
        text, _, pos_part = text.partition("/")
        key, _, value = pos_part.partition("=")
        if key.strip() != "pos":
            raise InvalidTapError(f"bad tap position in {spec!r}")
        position = LAST if value.strip() == "last" else int(value)
    kind, sep, layer_part = text.partition("@")
    if not sep:
        raise InvalidTapError(f"tap spec needs 'sublayer@layer', got {spec!r}")
    try:
        sub = Sublayer(kind.strip().lower())
    except ValueError:
        raise InvalidTapError(f"unknown sublayer {kind!r} in {spec!r}") from None
    layer_part = layer_part.strip().replace(" ", "")
    if layer_part.startswith("L"):
        if n_layers is None:
            raise InvalidTapError(f"relative tap {spec!r} needs the layer count")
        offset = layer_part[1:]
        layer = n_layers - (int(offset[1:]) if offset.startswith("-") else 0)
        if offset and not offset.startswith("-"):
            raise InvalidTapError(f"bad relative layer in {spec!r}")
    else:
        layer = int(layer_part)
    return SubLayerTap(layer, sub, position)


@dataclass(frozen=True)
class BackendDescriptor:
    id: str
    n_layers: int
    d_model: int
    vocab_size: int
    norm_style: str = "prenorm"

    def __post_init__(self):
        if self.n_layers < 2 or self.d_model < 2 or self.vocab_size < 4:
            raise ValueError(f"degenerate backend shape: {self}")


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    text: str | None = None
    media_slots: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(self, "media_slots", tuple(self.media_slots))

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class HiddenStateBundle:
    states: Mapping[SubLayerTap, np.ndarray]
    final_logits: np.ndarray
    predicted_token: int

    def __getitem__(self, tap: SubLayerTap) -> np.ndarray:
        return self.states[tap]

    def state(self, layer: int, sublayer: Sublayer | str, position: int = LAST) -> np.ndarray:
        return self.states[SubLayerTap(layer, Sublayer(sublayer), position)]


@dataclass(frozen=True)
class Piece:
    """One chunk of a rendered prompt: literal text or a media reference."""

    kind: str  # "text" | "image" | "video" | "audio"
    payload: str


def greedy_argmax(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties
    return int(np.argmax(logits))


def all_taps(n_layers: int, position: int = LAST, include_embedding: bool = True) -> list[SubLayerTap]:
    taps = [SubLayerTap(0, Sublayer.MLP, position)] if include_embedding else []
    for layer in range(1, n_layers + 1):
        taps.append(SubLayerTap(layer, Sublayer.ATTN, position))
        taps.append(SubLayerTap(layer, Sublayer.MLP, position))
    return taps


class Backend(abc.ABC):
    """Causal LM with sub-layer hidden-state capture.

    Subclasses implement tokenization and ``_forward``; everything else is
    shared. Instances must not mutate after construction so forward passes can
    run from several threads.
    """

    descriptor: BackendDescriptor

    @property
    def id(self) -> str:
        return self.descriptor.id

    # -- tokenization -----------------------------------------------------

    @abc.abstractmethod
    def tokenize(self, text: str) -> list[int]:
        ...

    @abc.abstractmethod
    def decode(self, ids: Iterable[int]) -> str:
        ...

    @abc.abstractmethod
    def encode_pieces(self, pieces: Sequence[Piece]) -> TokenSequence:
        """Tokenize a prompt, splicing media placeholders where needed."""

    def encode_text(self, text: str) -> TokenSequence:
        return self.encode_pieces([Piece("text", text)])

    # -- forward ----------------------------------------------------------

    @abc.abstractmethod
    def _forward(
        self, ids: Sequence[int], taps: Sequence[SubLayerTap], media_slots: Sequence[int] = ()
    ) -> tuple[dict[SubLayerTap, np.ndarray], np.ndarray]:
        """Return requested tap vectors and last-position logits."""

    @abc.abstractmethod
    def unembedding(self) -> np.ndarray:
        """LM head as a (d, |V|) array whose columns are the token vectors."""

    def _check_tokens(self, tokens: TokenSequence) -> None:
        if len(tokens.ids) == 0:
            raise EmptyInputError("empty token sequence")
        V = self.descriptor.vocab_size
        for i in tokens.ids:
            if not 0 <= i < V:
                raise InvalidTokenError(f"token id {i} outside vocabulary of size {V}")

    def _check_taps(self, taps: Iterable[SubLayerTap], length: int) -> list[SubLayerTap]:
        checked = []
        for tap in taps:
            if tap.layer > self.descriptor.n_layers:
                raise InvalidTapError(
                    f"tap layer {tap.layer} beyond backend depth {self.descriptor.n_layers}"
                )
            if tap.position != LAST and tap.position >= length:
                raise InvalidTapError(f"tap position {tap.position} beyond sequence length {length}")
            checked.append(tap)
        return checked

    def forward_with_taps(self, tokens: TokenSequence, taps: Iterable[SubLayerTap]) -> HiddenStateBundle:
        self._check_tokens(tokens)
        taps = self._check_taps(taps, len(tokens.ids))
        states, logits = self._forward(tokens.ids, taps, tokens.media_slots)
        for v in states.values():
            v.flags.writeable = False
        logits.flags.writeable = False
        return HiddenStateBundle(states=states, final_logits=logits, predicted_token=greedy_argmax(logits))

    def generate_greedy_token(self, tokens: TokenSequence) -> tuple[int, HiddenStateBundle]:
        bundle = self.forward_with_taps(tokens, all_taps(self.descriptor.n_layers))
        return bundle.predicted_token, bundle

    def generate(self, tokens: TokenSequence, max_new_tokens: int, stop_ids: Iterable[int] = ()) -> list[int]:
        """Greedy multi-token continuation (no KV cache; re-runs the prefix)."""
        stop = set(stop_ids)
        ids = list(tokens.ids)
        out: list[int] = []
        for _ in range(max_new_tokens):
            seq = TokenSequence(ids, media_slots=tokens.media_slots)
            bundle = self.forward_with_taps(seq, [])
            nxt = bundle.predicted_token
            if nxt in stop:
                break
            out.append(nxt)
            ids.append(nxt)
        return out

    def lm_head_column(self, token_id: int) -> np.ndarray:
        if not 0 <= int(token_id) < self.descriptor.vocab_size:
            raise InvalidTokenError(f"token id {token_id} outside vocabulary")
        col = np.array(self.unembedding()[:, int(token_id)])
        return col

    def option_id(self, label: str) -> int:
        """Single token id for an option label.

        Labels that tokenize to more than one token go through
        ``substitute_option``, which raises by default.
        """
        ids = self.tokenize(label)
        if len(ids) == 1:
            return ids[0]
        return self.substitute_option(label, ids)

    def substitute_option(self, label: str, ids: list[int]) -> int:
        raise UnsupportedOptionError(
            f"option label {label!r} is {len(ids)} tokens; supply a single-token substitute"
        )

    def option_logits(self, tokens: TokenSequence, option_token_ids: Sequence) -> list[float]:
        ids = []
        for opt in option_token_ids:
            if isinstance(opt, (list, tuple)):
                if len(opt) != 1:
                    raise UnsupportedOptionError(f"multi-token option {opt!r}")
                opt = opt[0]
            opt = int(opt)
            if not 0 <= opt < self.descriptor.vocab_size:
                raise InvalidTokenError(f"option token {opt} outside vocabulary")
            ids.append(opt)
        bundle = self.forward_with_taps(tokens, [])
        return [float(bundle.final_logits[i]) for i in ids]
