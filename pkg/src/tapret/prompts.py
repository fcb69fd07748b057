"""Input containers, template files and prompt rendering.

Templates are plain-text files split into ``@@ name`` sections with
``str.format``-style named placeholders. A placeholder may be bound to plain
text or to a list of ``Piece`` objects, which lets media references pass
through rendering untouched.
"""

from __future__ import annotations

import enum
import hashlib
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence, Union

from tapret.backend.base import Piece
from tapret.errors import EmptyInputError


class SegmentKind(enum.Enum):
    TEXT = "text"
    IMAGE = "image"
    VIDEO = "video"
    AUDIO = "audio"


class Role(enum.Enum):
    QUERY = "query"
    TARGET = "target"


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    payload: str

    def __post_init__(self):
        if not isinstance(self.kind, SegmentKind):
            object.__setattr__(self, "kind", SegmentKind(self.kind))


@dataclass(frozen=True)
class ModalityInput:
    segments: tuple[Segment, ...]
    role: Role = Role.QUERY

    def __post_init__(self):
        segs = tuple(s if isinstance(s, Segment) else Segment(*s) for s in self.segments)
        object.__setattr__(self, "segments", segs)
        if not isinstance(self.role, Role):
            object.__setattr__(self, "role", Role(self.role))

    @classmethod
    def text(cls, text: str, role: Role | str = Role.QUERY) -> "ModalityInput":
        return cls((Segment(SegmentKind.TEXT, text),), Role(role))

    def with_role(self, role: Role | str) -> "ModalityInput":
        return ModalityInput(self.segments, Role(role))

    def validate(self) -> None:
        if not self.segments:
            raise EmptyInputError("input has no segments")

    def pieces(self) -> list[Piece]:
        return [Piece(s.kind.value, s.payload) for s in self.segments]

    def describe(self) -> str:
        """Short noun phrase naming the modalities, e.g. ``the above image and text``."""
        kinds = []
        for s in self.segments:
            if s.kind.value not in kinds:
                kinds.append(s.kind.value)
        media = [k for k in kinds if k != "text"]
        names = media + (["text"] if "text" in kinds else [])
        if len(names) == 1:
            phrase = names[0]
        else:
            phrase = ", ".join(names[:-1]) + " and " + names[-1]
        return f"the above {phrase}"

    def to_json(self) -> list[dict]:
        return [{"kind": s.kind.value, "payload": s.payload} for s in self.segments]


# -- template files ---------------------------------------------------------

Bindable = Union[str, Sequence[Piece]]


def parse_template_text(text: str) -> dict[str, str]:
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("@@ "):
            current = line[3:].strip()
            sections[current] = []
        elif current is None:
            continue  # header comments
        else:
            sections[current].append(line)
    return {k: "\n".join(v) for k, v in sections.items()}


@lru_cache(maxsize=None)
def load_template_file(name: str) -> Mapping[str, str]:
    """Load a shipped template file (``embed``, ``rerank``, ``rag``) or a path."""
    path = Path(name)
    if path.suffix == ".txt" and path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        text = resources.files("tapret.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return parse_template_text(text)


def render(template: str, **bindings: Bindable) -> list[Piece]:
    """Fill named placeholders; adjacent text is merged into single pieces."""
    out: list[Piece] = []

    def emit_text(s: str):
        if not s:
            return
        if out and out[-1].kind == "text":
            out[-1] = Piece("text", out[-1].payload + s)
        else:
            out.append(Piece("text", s))

    for literal, field_name, spec, conv in string.Formatter().parse(template):
        emit_text(literal)
        if field_name is None:
            continue
        value = bindings[field_name]
        if isinstance(value, str):
            emit_text(value)
        else:
            for piece in value:
                if piece.kind == "text":
                    emit_text(piece.payload)
                else:
                    out.append(piece)
    return out


def pieces_to_text(pieces: Sequence[Piece]) -> str:
    return "".join(p.payload if p.kind == "text" else f"<{p.kind}>" for p in pieces)


# -- embedding prompts ------------------------------------------------------

CONSTRAINT_ORDER = ("task_align", "semantic_ground", "noise_suppress")
GENERIC_TASK_HINT = "the paired content"


@dataclass(frozen=True)
class PromptFlags:
    task_align: bool = False
    semantic_ground: bool = False
    noise_suppress: bool = False

    @classmethod
    def parse(cls, spec: str | Sequence[str] | None) -> "PromptFlags":
        """``"semantic_ground,noise_suppress"``, ``"all"``, ``"none"`` or a list."""
        if spec is None:
            return cls()
        if isinstance(spec, str):
            spec = [s.strip() for s in spec.split(",") if s.strip()]
        names = set(spec)
        if names == {"all"}:
            return cls(True, True, True)
        names.discard("none")
        unknown = names - set(CONSTRAINT_ORDER)
        if unknown:
            raise ValueError(f"unknown prompt flags: {sorted(unknown)}")
        return cls(**{n: True for n in names})

    def names(self) -> list[str]:
        return [n for n in CONSTRAINT_ORDER if getattr(self, n)]

    def spec(self) -> str:
        return ",".join(self.names()) or "none"


# Cumulative prompt ablation: (a) base, (b) +semantic ground,
# (c) +noise suppress, (d) +task align.
PROMPT_LADDER = {
    "a": PromptFlags(),
    "b": PromptFlags(semantic_ground=True),
    "c": PromptFlags(semantic_ground=True, noise_suppress=True),
    "d": PromptFlags(task_align=True, semantic_ground=True, noise_suppress=True),
}


@dataclass(frozen=True)
class PromptSpec:
    template_id: str
    rendered_text: str
    pieces: tuple[Piece, ...]
    constraint_flags: PromptFlags = field(default_factory=PromptFlags)
    task_hint: str | None = None
    hint_defaulted: bool = False

    @property
    def prompt_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.pieces:
            h.update(p.kind.encode())
            h.update(b"\x00")
            h.update(p.payload.encode("utf-8"))
            h.update(b"\x01")
        return h.hexdigest()[:16]


def build_embed_prompt(
    inp: ModalityInput,
    flags: PromptFlags | None = None,
    task_hint: str | None = None,
    template: str = "embed",
) -> PromptSpec:
    inp.validate()
    flags = flags or PromptFlags()
    sections = load_template_file(template)
    core_content, _, core_instruction = sections["core"].partition("\n")
    self_desc = inp.describe()
    hint_defaulted = flags.task_align and not task_hint
    hint = task_hint or GENERIC_TASK_HINT

    lines = []
    for name in flags.names():
        key = name
        if name == "task_align":
            key = f"task_align.{inp.role.value}"
        lines.append(sections[key].format(self_desc=self_desc, task_hint=hint))
    middle = "".join(line + "\n" for line in lines)
    tmpl = core_content + "\n" + middle.replace("{", "{{").replace("}", "}}") + core_instruction
    pieces = render(tmpl, content=inp.pieces())
    return PromptSpec(
        template_id=template,
        rendered_text=pieces_to_text(pieces),
        pieces=tuple(pieces),
        constraint_flags=flags,
        task_hint=task_hint if flags.task_align else None,
        hint_defaulted=hint_defaulted,
    )
