"""Causal LM backends and a string-keyed registry."""

from __future__ import annotations

from typing import Callable

from tapret.backend.base import (
    LAST,
    Backend,
    BackendDescriptor,
    HiddenStateBundle,
    Piece,
    SubLayerTap,
    Sublayer,
    TokenSequence,
    all_taps,
    parse_tap,
    tap_attn,
    tap_mlp,
)
from tapret.backend.toy import MEDIA_TOKEN, ToyBackend, ToyConfig, toy_weights

_REGISTRY: dict[str, Callable[..., Backend]] = {}


def register_backend(name: str, factory: Callable[..., Backend]) -> None:
    _REGISTRY[name] = factory


def available_backends() -> list[str]:
    return sorted(_REGISTRY)


def create_backend(name: str, **params) -> Backend:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown backend {name!r}; known: {available_backends()}") from None
    return factory(**params)


def _toy_factory(strict_options: bool = False, **params) -> Backend:
    return ToyBackend(ToyConfig(**params), strict_options=strict_options)


def _hf_factory(**params) -> Backend:
    from tapret.backend.hf import HFBackend  # optional dependency

    return HFBackend.from_pretrained(**params)


register_backend("toy", _toy_factory)
register_backend("hf", _hf_factory)

__all__ = [
    "LAST",
    "MEDIA_TOKEN",
    "Backend",
    "BackendDescriptor",
    "HiddenStateBundle",
    "Piece",
    "SubLayerTap",
    "Sublayer",
    "TokenSequence",
    "ToyBackend",
    "ToyConfig",
    "all_taps",
    "available_backends",
    "create_backend",
    "parse_tap",
    "register_backend",
    "tap_attn",
    "tap_mlp",
    "toy_weights",
]
