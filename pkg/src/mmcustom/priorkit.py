"""Noising, the denoising objective, composite descriptors and the
prior-preservation loss for one or many concepts.

Every stochastic draw (timestep, noise, prior choice) comes from a numpy
``Generator`` handed in by the caller and can be recorded in a ``DrawLog``,
so any loss value can be recomputed independently from the log.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Literal

import numpy as np
import torch

from .errors import EmptyPriors, InvalidToken, TimestepOutOfRange
from .images import load_image, pil_to_tensor, save_tensor_png

if TYPE_CHECKING:
    from .backends.contracts import DiffusionBackend
    from .extraction import SemanticTriple

DEFAULT_RARE_TOKENS = ("sks", "zwx", "qlv", "bnh", "kpt")
DEFAULT_LAMBDA = 1.0

Augment = Callable[[torch.Tensor, str, np.random.Generator], tuple[torch.Tensor, str]]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep signal and noise scales, indexed 1..T."""

    alpha: tuple[float, ...]
    sigma: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.alpha) == 0 or len(self.alpha) != len(self.sigma):
            raise ValueError("alpha and sigma must be non-empty and of equal length")
        if not all(math.isfinite(v) for v in (*self.alpha, *self.sigma)):
            raise ValueError("schedule entries must be finite")
        if any(b > a for a, b in zip(self.alpha, self.alpha[1:])):
            raise ValueError("alpha must be non-increasing in t")
        if any(b < a for a, b in zip(self.sigma, self.sigma[1:])):
            raise ValueError("sigma must be non-decreasing in t")

    @property
    def total_steps(self) -> int:
        return len(self.alpha)

    def at(self, t: int) -> tuple[float, float]:
        if not 1 <= t <= self.total_steps:
            raise TimestepOutOfRange(f"t={t} outside [1, {self.total_steps}]")
        return self.alpha[t - 1], self.sigma[t - 1]


@dataclass(frozen=True)
class CompositeDescriptor:
    token: str
    object_description: str

    @property
    def rendered(self) -> str:
        return f"{self.token} {self.object_description}"


@dataclass(frozen=True)
class PriorSample:
    image: torch.Tensor
    prompt: str
    seed: int


@dataclass
class ConceptSpec:
    """One concept to customize: the given image, its extracted triple, its
    composite descriptor and the prior samples generated from the description."""

    source_image: torch.Tensor
    triple: SemanticTriple
    descriptor: CompositeDescriptor
    priors: list[PriorSample] = field(default_factory=list)
    image_ref: str = ""

    def __post_init__(self) -> None:
        if self.descriptor.object_description != self.triple.foreground:
            raise ValueError("descriptor must describe the triple's foreground")


@dataclass(frozen=True)
class Draw:
    label: str
    t: int
    eps: np.ndarray
    x: torch.Tensor
    condition: str


@dataclass
class DrawLog:
    draws: list[Draw] = field(default_factory=list)

    def record(self, draw: Draw) -> None:
        self.draws.append(draw)

    def by_label(self, prefix: str) -> list[Draw]:
        return [d for d in self.draws if d.label.startswith(prefix)]


def make_composite(token: str, p_t: str) -> CompositeDescriptor:
    if not token or any(ch.isspace() for ch in token):
        raise InvalidToken(f"token must be non-empty and whitespace-free, got {token!r}")
    if not p_t or not p_t.strip():
        raise ValueError("object description must be non-empty")
    return CompositeDescriptor(token, p_t)


def generate_priors(
    backend: DiffusionBackend,
    p_t: str,
    count: int,
    seed: int,
    *,
    steps: int = 200,
    guidance: float = 7.5,
) -> list[PriorSample]:
    """Sample ``count`` images of ``p_t`` from the pretrained weights, seeds seed..seed+count-1."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not p_t:
        raise ValueError("prior prompt must be non-empty")
    with backend.pretrained():
        return [
            PriorSample(backend.sample(p_t, steps, guidance, seed + i), p_t, seed + i)
            for i in range(count)
        ]


def save_priors(priors: Sequence[PriorSample], directory: str | Path, backend_id: str) -> Path:
    """Write a prior store: one PNG per sample plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for p in priors:
        name = f"{p.seed}.png"
        save_tensor_png(p.image, directory / name)
        files.append(name)
    manifest = {
        "prompt": priors[0].prompt if priors else "",
        "seeds": [p.seed for p in priors],
        "files": files,
        "backend_id": backend_id,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_priors(directory: str | Path, size: tuple[int, int] | None = None) -> list[PriorSample]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return [
        PriorSample(pil_to_tensor(load_image(directory / f), size), manifest["prompt"], seed)
        for f, seed in zip(manifest["files"], manifest["seeds"])
    ]


def noise_image(x, t: int, eps, sched: NoiseSchedule):
    """Forward-noise ``x`` to timestep ``t``: ``alpha_t * x + sigma_t * eps``."""
    alpha, sigma = sched.at(t)
    if tuple(eps.shape) != tuple(x.shape):
        raise ValueError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x.shape)}")
    return alpha * x + sigma * eps


def denoise_loss(
    backend: DiffusionBackend,
    x: torch.Tensor,
    c: str,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    *,
    draws: int = 1,
    log: DrawLog | None = None,
    label: str = "",
) -> torch.Tensor:
    """Monte-Carlo estimate of the noise-prediction MSE for one (image, condition) pair.

    Each draw takes ``t ~ U{1..T}`` then ``eps ~ N(0, I)`` from ``rng``; the
    result is the element-mean squared error averaged over draws.
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    total = None
    for _ in range(draws):
        t = int(rng.integers(1, sched.total_steps + 1))
        eps_np = rng.standard_normal(tuple(x.shape))
        eps = torch.from_numpy(eps_np).to(x.dtype)
        pred = backend.predict_noise(noise_image(x, t, eps, sched), t, c)
        term = torch.mean((eps - pred) ** 2)
        total = term if total is None else total + term
        if log is not None:
            log.record(Draw(label, t, eps_np, x, c))
    return total / draws if draws > 1 else total


def concept_loss(
    backend: DiffusionBackend,
    concept: ConceptSpec,
    lam: float,
    rng: np.random.Generator,
    *,
    sched: NoiseSchedule | None = None,
    draws: int = 1,
    prior_mode: Literal["all", "one"] = "all",
    instance_prompt: Literal["composite", "token"] = "composite",
    augment: Augment | None = None,
    log: DrawLog | None = None,
    label: str = "0",
) -> torch.Tensor:
    """Single-concept objective: instance term plus ``lam`` times the prior term.

    ``prior_mode="all"`` averages the prior term over every prior sample;
    ``"one"`` draws a single prior uniformly from ``rng``. The instance draw is
    always taken first. Prior terms are evaluated whenever priors exist, so the
    draws do not depend on ``lam``.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam > 0 and not concept.priors:
        raise EmptyPriors(f"concept {concept.image_ref or label!r} has no prior samples")
    sched = sched or backend.schedule()

    x = concept.source_image
    prompt = concept.descriptor.rendered if instance_prompt == "composite" else concept.descriptor.token
    if augment is not None:
        x, prompt = augment(x, prompt, rng)
    loss = denoise_loss(backend, backend.encode_image(x), prompt, sched, rng, draws=draws, log=log, label=f"instance/{label}")
    if not concept.priors:
        return loss

    p_t = concept.descriptor.object_description
    if prior_mode == "all":
        chosen = concept.priors
    elif prior_mode == "one":
        chosen = [concept.priors[int(rng.integers(len(concept.priors)))]]
    else:
        raise ValueError(f"unknown prior_mode {prior_mode!r}")
    prior_terms = [
        denoise_loss(backend, backend.encode_image(p.image), p_t, sched, rng, draws=draws, log=log, label=f"prior/{label}")
        for p in chosen
    ]
    prior = prior_terms[0]
    for term in prior_terms[1:]:
        prior = prior + term
    if len(prior_terms) > 1:
        prior = prior / len(prior_terms)
    return loss + lam * prior


def split_rng(rng: np.random.Generator | Sequence[np.random.Generator], n: int) -> list[np.random.Generator]:
    """One independent generator per concept, so concept order never shifts another concept's draws.

    A single concept uses ``rng`` itself. Otherwise child seeds are drawn from
    ``rng``'s own stream, which keeps the split reproducible from the
    generator's saved state.
    """
    if isinstance(rng, np.random.Generator):
        if n == 1:
            return [rng]
        return [np.random.default_rng(int(s)) for s in rng.integers(0, 2**63, size=n)]
    rngs = list(rng)
    if len(rngs) != n:
        raise ValueError(f"expected {n} generators, got {len(rngs)}")
    return rngs


def combined_loss(
    backend: DiffusionBackend,
    concepts: Sequence[ConceptSpec],
    lam: float,
    rng: np.random.Generator | Sequence[np.random.Generator],
    **kwargs,
) -> torch.Tensor:
    """Sum of per-concept objectives over all concepts of a prompt.

    ``rng`` is either one generator (split deterministically per concept) or a
    sequence with one generator per concept. Keyword arguments are passed to
    :func:`concept_loss`.
    """
    if not concepts:
        raise ValueError("at least one concept is required")
    sched = kwargs.pop("sched", None) or backend.schedule()
    rngs = split_rng(rng, len(concepts))
    terms = [
        concept_loss(backend, c, lam, r, sched=sched, label=str(j), **kwargs)
        for j, (c, r) in enumerate(zip(concepts, rngs))
    ]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total
