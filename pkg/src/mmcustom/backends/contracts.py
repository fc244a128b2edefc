"""Structural contracts for the four external model roles."""

from __future__ import annotations

from collections.abc import Iterable, Iterator
from contextlib import AbstractContextManager
from pathlib import Path
from typing import TYPE_CHECKING, Protocol, runtime_checkable

import torch
from PIL import Image

if TYPE_CHECKING:
    from ..evalkit import EmbeddingVector, Space
    from ..priorkit import NoiseSchedule

PARAMETER_SUBSETS = ("all", "cross-attention", "token-embedding")


@runtime_checkable
class DiffusionBackend(Protocol):
    """Noise predictor with trainable parameter subsets and a seeded sampler.

    ``"all"`` names every denoiser parameter; the text-token embedding table is
    only ever trained through ``"token-embedding"``, which touches the rows of
    registered rare tokens and nothing else.
    """

    backend_id: str
    concurrency_safe: bool
    sampler_name: str

    @property
    def native_shape(self) -> tuple[int, int, int]: ...

    def schedule(self) -> NoiseSchedule: ...

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        """Map a (3, H, W) pixel tensor into the space ``predict_noise`` works in."""
        ...

    def predict_noise(self, x_t: torch.Tensor, t: int, c: str) -> torch.Tensor: ...

    def sample(self, prompt: str, steps: int, guidance: float, seed: int) -> torch.Tensor: ...

    def register_token(self, token: str) -> None: ...

    def token_embedding(self, token: str) -> torch.Tensor: ...

    def named_parameters(self, subset: str = "all") -> dict[str, torch.Tensor]: ...

    def step_optimizer(self, loss: torch.Tensor, subsets: Iterable[str], lr: float) -> None: ...

    def reset_to_pretrained(self) -> None: ...

    def pretrained(self) -> AbstractContextManager[None]: ...

    def weights(self, locator: Path | dict) -> AbstractContextManager[None]: ...

    def state_dict(self) -> dict: ...

    def load_state_dict(self, state: dict) -> None: ...


@runtime_checkable
class CaptionerBackend(Protocol):
    backend_id: str

    def caption(self, image: Image.Image) -> str: ...


@runtime_checkable
class LanguageModelBackend(Protocol):
    backend_id: str
    concurrency_safe: bool

    def complete(self, prompt: str, temperature: float, seed: int) -> str: ...


@runtime_checkable
class EmbedderBackend(Protocol):
    backend_id: str

    def dimension(self, space: Space) -> int: ...

    def embed_image(self, image, space: Space) -> EmbeddingVector: ...

    def embed_text(self, text: str) -> EmbeddingVector: ...


def iter_subset_names(subsets: Iterable[str] | str) -> Iterator[str]:
    if isinstance(subsets, str):
        subsets = [subsets]
    for name in subsets:
        if name not in PARAMETER_SUBSETS:
            raise ValueError(f"unknown parameter subset {name!r}")
        yield name
