"""Turn a multi-modal prompt into the pure text prompt and sample images from it."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING

import torch

from .errors import BackendUnavailable, InvalidRequest, MissingDescriptor, MMCustomError, UnknownModelHandle
from .finetune import FinetunedModelHandle
from .images import save_tensor_png, text_sha256
from .mmprompt import MultiModalPrompt, ResolvedTextPrompt, substitute
from .priorkit import ConceptSpec

if TYPE_CHECKING:
    from .backends.contracts import DiffusionBackend

DEFAULT_INFERENCE_STEPS = 200
DEFAULT_GUIDANCE = 7.5


class Mode(str, Enum):
    FULL = "full"
    EXTRACTION_DIRECTLY = "extraction-directly"
    FINETUNING_DIRECTLY = "finetuning-directly"

    @classmethod
    def parse(cls, value: str | Mode) -> Mode:
        aliases = {"extract": cls.EXTRACTION_DIRECTLY, "token": cls.FINETUNING_DIRECTLY}
        if isinstance(value, cls):
            return value
        return aliases.get(value) or cls(value)


class _Pretrained:
    def __repr__(self) -> str:
        return "PRETRAINED"


PRETRAINED = _Pretrained()


@dataclass(frozen=True)
class GenerationRequest:
    resolved_prompt: ResolvedTextPrompt
    model: FinetunedModelHandle | _Pretrained = PRETRAINED
    num_images: int = 1
    inference_steps: int | None = None
    guidance_scale: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_images < 1:
            raise InvalidRequest("num_images must be >= 1")
        if self.inference_steps is not None and self.inference_steps < 1:
            raise InvalidRequest("inference_steps must be >= 1")

    @property
    def effective_steps(self) -> int:
        return DEFAULT_INFERENCE_STEPS if self.inference_steps is None else self.inference_steps

    @property
    def effective_guidance(self) -> float:
        return DEFAULT_GUIDANCE if self.guidance_scale is None else self.guidance_scale

    @property
    def seeds(self) -> list[int]:
        return list(range(self.seed, self.seed + self.num_images))


@dataclass(frozen=True)
class GeneratedImage:
    seed: int
    image: torch.Tensor


def descriptors_for(concepts: Mapping[str, ConceptSpec], mode: Mode | str) -> dict[str, str]:
    mode = Mode.parse(mode)
    if mode is Mode.FULL:
        return {ref: c.descriptor.rendered for ref, c in concepts.items()}
    if mode is Mode.EXTRACTION_DIRECTLY:
        return {ref: c.descriptor.object_description for ref, c in concepts.items()}
    return {ref: c.descriptor.token for ref, c in concepts.items()}


def build_output_prompt(
    p_m: MultiModalPrompt,
    concepts: Mapping[str, ConceptSpec],
    mode: Mode | str = Mode.FULL,
) -> ResolvedTextPrompt:
    """Replace each image with its composite descriptor, bare description or bare token."""
    missing = [ref for ref in p_m.image_refs if ref not in concepts]
    if missing:
        raise MissingDescriptor(missing[0])
    return substitute(p_m, descriptors_for(concepts, mode))


def make_request(
    resolved: ResolvedTextPrompt,
    mode: Mode | str,
    model: FinetunedModelHandle | _Pretrained = PRETRAINED,
    **kwargs,
) -> GenerationRequest:
    """Build a request, pairing extraction-directly with the pretrained weights only."""
    mode = Mode.parse(mode)
    if mode is Mode.EXTRACTION_DIRECTLY and model is not PRETRAINED:
        raise InvalidRequest("extraction-directly samples from the pretrained model")
    if mode is not Mode.EXTRACTION_DIRECTLY and model is PRETRAINED and resolved.substitutions:
        raise InvalidRequest(f"{mode.value} needs a finetuned model handle")
    return GenerationRequest(resolved, model, **kwargs)


def sample(request: GenerationRequest, backend: DiffusionBackend) -> list[GeneratedImage]:
    """Draw ``num_images`` images with consecutive seeds starting at ``request.seed``."""
    if request.model is PRETRAINED:
        context = backend.pretrained()
    else:
        handle = request.model
        if handle.backend_id != backend.backend_id:
            raise UnknownModelHandle(f"handle belongs to {handle.backend_id}, not {backend.backend_id}")
        try:
            locator = handle.locator
        except MMCustomError as exc:
            raise UnknownModelHandle(str(exc)) from exc
        context = backend.weights(locator)

    text = request.resolved_prompt.text
    with context:
        try:
            return [
                GeneratedImage(s, backend.sample(text, request.effective_steps, request.effective_guidance, s))
                for s in request.seeds
            ]
        except MMCustomError:
            raise
        except RuntimeError as exc:
            raise BackendUnavailable(f"sampling failed: {exc}") from exc


def prompt_hash(text: str) -> str:
    return text_sha256(text)[:16]


def save_outputs(images: list[GeneratedImage], out_root: str | Path, run_id: str, prompt_text: str) -> list[Path]:
    """Write images to ``{out_root}/{run_id}/{prompt_hash}/{seed}.png``."""
    base = Path(out_root) / run_id / prompt_hash(prompt_text)
    return [save_tensor_png(g.image, base / f"{g.seed}.png") for g in images]
