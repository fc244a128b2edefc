"""Multi-modal prompts: text with inline ``<img:PATH>`` image references.

Grammar::

    prompt  := (text | embed)+
    embed   := "<img:" PATH ">"
    text    := any characters; "\\<" is a literal "<", "\\\\" a literal "\\"

A bare ``<`` that does not open an embed is kept as literal text when parsing,
but serialization always escapes it so the output is canonical.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from PIL import Image

from .errors import EmptyPrompt, MalformedEmbed, MissingDescriptor, UnreadableImage

EMBED_OPEN = "<img:"
EMBED_CLOSE = ">"


@dataclass(frozen=True)
class Segment:
    kind: Literal["text", "image"]
    text: str = ""
    image_ref: str = ""

    @classmethod
    def of_text(cls, text: str) -> Segment:
        return cls("text", text=text)

    @classmethod
    def of_image(cls, image_ref: str) -> Segment:
        if not image_ref or EMBED_CLOSE in image_ref or image_ref != image_ref.strip():
            raise ValueError(f"invalid image reference {image_ref!r}")
        return cls("image", image_ref=image_ref)

    @property
    def is_image(self) -> bool:
        return self.kind == "image"


@dataclass(frozen=True)
class MultiModalPrompt:
    segments: tuple[Segment, ...]
    source_text: str = field(default="", compare=False)

    @classmethod
    def from_segments(cls, segments: Iterable[Segment], source_text: str = "") -> MultiModalPrompt:
        return cls(tuple(_merge_text(segments)), source_text)

    @property
    def image_refs(self) -> list[str]:
        return [s.image_ref for s in self.segments if s.is_image]

    def __str__(self) -> str:
        return serialize_prompt(self)


@dataclass(frozen=True)
class ResolvedTextPrompt:
    """A pure-text prompt plus the (image_ref, descriptor) pairs used to build it."""

    text: str
    substitutions: tuple[tuple[str, str], ...] = ()


def _merge_text(segments: Iterable[Segment]) -> list[Segment]:
    merged: list[Segment] = []
    for seg in segments:
        if not seg.is_image and not seg.text:
            continue
        if not seg.is_image and merged and not merged[-1].is_image:
            merged[-1] = Segment.of_text(merged[-1].text + seg.text)
        else:
            merged.append(seg)
    return merged


def parse_prompt(raw: str) -> MultiModalPrompt:
    """Split *raw* into text and image segments in authoring order.

    Raises EmptyPrompt for empty or whitespace-only input and MalformedEmbed
    for an unterminated or empty ``<img:`` embed. Image files are not touched.
    """
    if not raw or not raw.strip():
        raise EmptyPrompt("prompt is empty")

    segments: list[Segment] = []
    buf: list[str] = []
    i, n = 0, len(raw)
    while i < n:
        ch = raw[i]
        if ch == "\\" and i + 1 < n and raw[i + 1] in "<\\":
            buf.append(raw[i + 1])
            i += 2
        elif raw.startswith(EMBED_OPEN, i):
            end = raw.find(EMBED_CLOSE, i + len(EMBED_OPEN))
            if end < 0:
                raise MalformedEmbed("unterminated image embed", i)
            ref = raw[i + len(EMBED_OPEN) : end].strip()
            if not ref:
                raise MalformedEmbed("empty image reference", i)
            if buf:
                segments.append(Segment.of_text("".join(buf)))
                buf = []
            segments.append(Segment.of_image(ref))
            i = end + 1
        else:
            buf.append(ch)
            i += 1
    if buf:
        segments.append(Segment.of_text("".join(buf)))
    return MultiModalPrompt.from_segments(segments, source_text=raw)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("<", "\\<")


def serialize_prompt(p: MultiModalPrompt) -> str:
    parts = []
    for seg in p.segments:
        if seg.is_image:
            parts.append(f"{EMBED_OPEN}{seg.image_ref}{EMBED_CLOSE}")
        else:
            parts.append(_escape(seg.text))
    return "".join(parts)


def substitute(p: MultiModalPrompt, descriptors: Mapping[str, str]) -> ResolvedTextPrompt:
    """Replace every image segment in place by its descriptor string.

    Text segments are copied verbatim; no whitespace is inserted around the
    descriptors.
    """
    out: list[str] = []
    subs: list[tuple[str, str]] = []
    for seg in p.segments:
        if seg.is_image:
            if seg.image_ref not in descriptors:
                raise MissingDescriptor(seg.image_ref)
            desc = descriptors[seg.image_ref]
            out.append(desc)
            subs.append((seg.image_ref, desc))
        else:
            out.append(seg.text)
    return ResolvedTextPrompt("".join(out), tuple(subs))


def resolve_image_path(image_ref: str, base_dir: str | Path | None = None) -> Path:
    path = Path(image_ref).expanduser()
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    return path


def validate_prompt(p: MultiModalPrompt, base_dir: str | Path | None = None) -> None:
    """Check that every image reference decodes as a raster image."""
    bad = []
    for ref in p.image_refs:
        try:
            with Image.open(resolve_image_path(ref, base_dir)) as im:
                im.verify()
        except (OSError, SyntaxError, ValueError):
            bad.append(ref)
    if bad:
        raise UnreadableImage(bad)


def load_prompts(path: str | Path) -> list[MultiModalPrompt]:
    """Read a prompt file: one prompt per non-blank line, ``#`` starts a comment line."""
    prompts = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        prompts.append(parse_prompt(line))
    if not prompts:
        raise EmptyPrompt(f"no prompts in {path}")
    return prompts
