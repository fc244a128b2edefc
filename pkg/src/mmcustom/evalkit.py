"""Image- and text-alignment scores (DINO, CLIP-I, CLIP-T) and report tables."""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Literal

import numpy as np

from .errors import EmptySet, InconsistentRun, SpaceMismatch, ZeroVector

if TYPE_CHECKING:
    from .backends.contracts import EmbedderBackend

Space = Literal["dino-image", "clip-image", "clip-text"]

# CLIP image and text features live in one joint space; CLIP-T compares across them.
_SPACE_FAMILY = {"dino-image": "dino", "clip-image": "clip", "clip-text": "clip"}

AGGREGATION_NOTE = (
    "scores are mean cosine similarity over all (generated, reference) pairs within a prompt, "
    "then the mean over prompts"
)


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    space: Space

    def __post_init__(self) -> None:
        if self.space not in _SPACE_FAMILY:
            raise ValueError(f"unknown embedding space {self.space!r}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("embedding must be one-dimensional")
        if not np.all(np.isfinite(values)):
            raise ValueError("embedding has non-finite entries")
        object.__setattr__(self, "values", values)


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if _SPACE_FAMILY[a.space] != _SPACE_FAMILY[b.space]:
        raise SpaceMismatch(f"{a.space} vs {b.space}")
    if a.values.shape != b.values.shape:
        raise SpaceMismatch(f"length {a.values.size} vs {b.values.size}")
    aa = float(np.dot(a.values, a.values))
    bb = float(np.dot(b.values, b.values))
    if aa == 0.0 or bb == 0.0:
        raise ZeroVector("cosine of a zero vector is undefined")
    # sqrt(aa * bb) keeps cos(a, a) == 1.0 and cos(a, -a) == -1.0 exactly
    value = float(np.dot(a.values, b.values)) / math.sqrt(aa * bb)
    return min(1.0, max(-1.0, value))


def set_alignment_score(
    generated: Sequence,
    references: Sequence,
    embedder: EmbedderBackend,
    space: Space,
) -> float:
    """Mean cosine over every (generated, reference) pair in ``space``."""
    if not generated or not references:
        raise EmptySet("generated and reference sets must be non-empty")
    gen = [embedder.embed_image(im, space) for im in generated]
    ref = [embedder.embed_image(im, space) for im in references]
    return float(np.mean([cosine(g, r) for g in gen for r in ref]))


def text_alignment_score(generated: Sequence, pure_text_prompt: str, embedder: EmbedderBackend) -> float:
    """Mean cosine between the prompt's CLIP text feature and each generated image."""
    if not generated:
        raise EmptySet("generated set must be non-empty")
    if not pure_text_prompt:
        raise ValueError("text prompt must be non-empty")
    text = embedder.embed_text(pure_text_prompt)
    return float(np.mean([cosine(text, embedder.embed_image(im, "clip-image")) for im in generated]))


@dataclass
class PromptRun:
    """Generated images for one prompt, the images they should match, and
    the extraction-substituted text they should align with."""

    prompt_id: str
    generated: Sequence
    references: Sequence
    text: str


@dataclass
class MethodRun:
    label: str
    prompts: list[PromptRun]


@dataclass(frozen=True)
class ScoreRow:
    dino: float
    clip_i: float
    clip_t: float

    def as_dict(self) -> dict[str, float]:
        return {"dino_score": self.dino, "clip_i_score": self.clip_i, "clip_t_score": self.clip_t}


@dataclass
class EvalReport:
    rows: dict[str, ScoreRow]
    per_prompt: dict[str, dict[str, ScoreRow]]
    image_counts: dict[str, int] = field(default_factory=dict)
    prompt_counts: dict[str, int] = field(default_factory=dict)

    def to_text(self) -> str:
        width = max([len("Method"), *(len(m) for m in self.rows)])
        lines = [
            f"{'Method':<{width}} | DINO score | CLIP-I score | CLIP-T score",
            f"{'-' * width}-+------------+--------------+-------------",
        ]
        for method, row in self.rows.items():
            lines.append(f"{method:<{width}} | {row.dino:10.4f} | {row.clip_i:12.4f} | {row.clip_t:12.4f}")
        lines.append("")
        lines.append(f"note: {AGGREGATION_NOTE}")
        return "\n".join(lines)

    def to_records(self) -> list[dict]:
        records = []
        for method, prompts in self.per_prompt.items():
            for prompt_id, row in prompts.items():
                records.append({"method": method, "prompt": prompt_id, **row.as_dict()})
        for method, row in self.rows.items():
            records.append(
                {
                    "method": method,
                    "prompt": None,
                    "aggregate": True,
                    "images": self.image_counts.get(method, 0),
                    "prompts": self.prompt_counts.get(method, 0),
                    **row.as_dict(),
                }
            )
        return records

    def write(self, path: str | Path) -> Path:
        """Write the machine-readable report (JSON) and a ``.txt`` table beside it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"records": self.to_records(), "aggregation": AGGREGATION_NOTE}
        path.write_text(json.dumps(payload, indent=2))
        path.with_suffix(".txt").write_text(self.to_text() + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> EvalReport:
        payload = json.loads(Path(path).read_text())
        rows: dict[str, ScoreRow] = {}
        per_prompt: dict[str, dict[str, ScoreRow]] = {}
        images: dict[str, int] = {}
        prompts: dict[str, int] = {}
        for rec in payload["records"]:
            row = ScoreRow(rec["dino_score"], rec["clip_i_score"], rec["clip_t_score"])
            if rec.get("aggregate"):
                rows[rec["method"]] = row
                images[rec["method"]] = rec["images"]
                prompts[rec["method"]] = rec["prompts"]
            else:
                per_prompt.setdefault(rec["method"], {})[rec["prompt"]] = row
        return cls(rows, per_prompt, images, prompts)


def build_report(runs: Sequence[MethodRun], embedder: EmbedderBackend) -> EvalReport:
    """One row per method: per-prompt scores averaged over prompts.

    Every method must cover the same set of prompt ids.
    """
    if not runs:
        raise InconsistentRun("no runs to report")
    expected = None
    rows: dict[str, ScoreRow] = {}
    per_prompt: dict[str, dict[str, ScoreRow]] = {}
    image_counts: dict[str, int] = {}
    prompt_counts: dict[str, int] = {}
    for run in runs:
        ids = [p.prompt_id for p in run.prompts]
        if not ids or len(set(ids)) != len(ids):
            raise InconsistentRun(f"method {run.label!r} has empty or duplicate prompt ids")
        if expected is None:
            expected = set(ids)
        elif set(ids) != expected:
            raise InconsistentRun(f"method {run.label!r} covers a different prompt set")
        if run.label in rows:
            raise InconsistentRun(f"duplicate method label {run.label!r}")

        scores = {}
        for p in run.prompts:
            scores[p.prompt_id] = ScoreRow(
                set_alignment_score(p.generated, p.references, embedder, "dino-image"),
                set_alignment_score(p.generated, p.references, embedder, "clip-image"),
                text_alignment_score(p.generated, p.text, embedder),
            )
        per_prompt[run.label] = scores
        rows[run.label] = ScoreRow(
            float(np.mean([s.dino for s in scores.values()])),
            float(np.mean([s.clip_i for s in scores.values()])),
            float(np.mean([s.clip_t for s in scores.values()])),
        )
        image_counts[run.label] = sum(len(p.generated) for p in run.prompts)
        prompt_counts[run.label] = len(run.prompts)
    return EvalReport(rows, per_prompt, image_counts, prompt_counts)


def export_ballots(report: EvalReport, path: str | Path, method_a: str, method_b: str) -> Path:
    """Dump a pairwise-preference ballot sheet for two methods as CSV."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prompt", "method_a", "method_b", "preferred_image", "preferred_text"])
        for prompt_id in sorted(report.per_prompt.get(method_a, {})):
            writer.writerow([prompt_id, method_a, method_b, "", ""])
    return path
