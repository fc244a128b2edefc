"""Finetuning plans and the training loop for both customization strategies.

``full-backbone`` trains every denoiser parameter and keeps the rare token's
embedding fixed. ``cross-attention`` trains only the cross-attention weights
plus the rare token's embedding row, with random-resize augmentation on the
given images.
"""

from __future__ import annotations

import csv
import json
import math
import platform
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal

import numpy as np
import torch
import torch.nn.functional as F

from .errors import BackendUnavailable, DivergedLoss, InvalidConfig, MissingPriors, MMCustomError
from .priorkit import DEFAULT_LAMBDA, ConceptSpec, combined_loss

if TYPE_CHECKING:
    from .backends.contracts import DiffusionBackend

Strategy = Literal["full-backbone", "cross-attention"]

STRATEGY_ALIASES = {
    "db": "full-backbone",
    "dreambooth": "full-backbone",
    "full-backbone": "full-backbone",
    "cd": "cross-attention",
    "custom-diffusion": "cross-attention",
    "cross-attention": "cross-attention",
}
DEFAULT_LR = {"full-backbone": 2e-6, "cross-attention": 1e-5}
DEFAULT_STEPS = {
    "full": {"full-backbone": 800, "cross-attention": 500},
    "desk": {"full-backbone": 50, "cross-attention": 50},
}
TRAINED_SUBSETS = {
    "full-backbone": ("all",),
    "cross-attention": ("cross-attention", "token-embedding"),
}
SMALL_MODIFIERS = ("very small", "far away")
LARGE_MODIFIERS = ("zoomed in", "close up")
DEFAULT_CHECKPOINT_EVERY = 100


@dataclass
class FinetuneConfig:
    strategy: str = "full-backbone"
    learning_rate: float | None = None
    max_steps: int | None = None
    lambda_: float = DEFAULT_LAMBDA
    token: str = "sks"
    augmentation: bool | None = None
    seed: int = 0
    profile: Literal["desk", "full"] = "desk"
    prior_mode: Literal["all", "one"] = "one"
    instance_prompt: Literal["composite", "token"] = "composite"
    draws: int = 1
    ratio_range: tuple[float, float] = (0.4, 1.4)
    ratio_thresholds: tuple[float, float] = (0.8, 1.2)
    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY


@dataclass
class FinetunePlan:
    strategy: Strategy
    learning_rate: float
    max_steps: int
    lambda_: float
    token: str
    augmentation: bool
    concepts: list[ConceptSpec]
    seed: int = 0
    prior_mode: Literal["all", "one"] = "one"
    instance_prompt: Literal["composite", "token"] = "composite"
    draws: int = 1
    ratio_range: tuple[float, float] = (0.4, 1.4)
    ratio_thresholds: tuple[float, float] = (0.8, 1.2)
    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY

    def __post_init__(self) -> None:
        if self.augmentation and self.strategy != "cross-attention":
            raise InvalidConfig("augmentation is only available with the cross-attention strategy")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be > 0")
        if self.max_steps < 1:
            raise InvalidConfig("max_steps must be > 0")
        if self.lambda_ < 0:
            raise InvalidConfig("lambda must be >= 0")

    @property
    def subsets(self) -> tuple[str, ...]:
        return TRAINED_SUBSETS[self.strategy]

    @property
    def tokens(self) -> list[str]:
        return [c.descriptor.token for c in self.concepts]

    def snapshot(self) -> dict[str, Any]:
        """JSON-friendly view of the plan (concepts reduced to their text fields)."""
        return {
            "strategy": self.strategy,
            "learning_rate": self.learning_rate,
            "max_steps": self.max_steps,
            "lambda": self.lambda_,
            "token": self.token,
            "augmentation": self.augmentation,
            "seed": self.seed,
            "prior_mode": self.prior_mode,
            "instance_prompt": self.instance_prompt,
            "draws": self.draws,
            "ratio_range": list(self.ratio_range),
            "ratio_thresholds": list(self.ratio_thresholds),
            "checkpoint_every": self.checkpoint_every,
            "subsets": list(self.subsets),
            "concepts": [
                {
                    "image_ref": c.image_ref,
                    "token": c.descriptor.token,
                    "object_description": c.descriptor.object_description,
                    "composite": c.descriptor.rendered,
                    "triple": c.triple.as_dict(),
                    "prior_seeds": [p.seed for p in c.priors],
                }
                for c in self.concepts
            ],
        }


@dataclass
class FinetunedModelHandle:
    backend_id: str
    checkpoint: Path | None
    plan: dict[str, Any]
    loss_trace: list[float]
    state: dict | None = field(default=None, repr=False)

    @property
    def locator(self) -> Path | dict:
        if self.state is not None:
            return self.state
        if self.checkpoint is None:
            raise MMCustomError("handle has neither a checkpoint nor in-memory weights")
        return self.checkpoint

    def to_json(self) -> dict[str, Any]:
        return {
            "backend_id": self.backend_id,
            "checkpoint": str(self.checkpoint) if self.checkpoint else None,
            "plan": self.plan,
            "loss_trace": self.loss_trace,
        }

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path

    @classmethod
    def read(cls, path: str | Path) -> FinetunedModelHandle:
        path = Path(path)
        if path.is_dir():
            path = path / "handle.json"
        data = json.loads(path.read_text())
        ckpt = Path(data["checkpoint"]) if data.get("checkpoint") else None
        return cls(data["backend_id"], ckpt, data["plan"], data["loss_trace"])


@dataclass
class FinetuneProgress:
    """Written by the training loop, safe to poll from another thread."""

    step: int = 0
    total: int = 0
    last_loss: float | None = None
    done: bool = False


def normalize_strategy(name: str) -> Strategy:
    try:
        return STRATEGY_ALIASES[name.lower()]  # type: ignore[return-value]
    except KeyError:
        raise InvalidConfig(f"unknown strategy {name!r}") from None


def plan_finetune(config: FinetuneConfig, concepts: Sequence[ConceptSpec]) -> FinetunePlan:
    """Resolve strategy defaults (learning rate, steps, augmentation) into a plan."""
    if not concepts:
        raise InvalidConfig("at least one concept is required")
    strategy = normalize_strategy(config.strategy)
    for c in concepts:
        if config.lambda_ > 0 and not c.priors:
            raise MissingPriors(f"concept {c.image_ref!r} has no prior samples")
    lr = config.learning_rate if config.learning_rate is not None else DEFAULT_LR[strategy]
    steps = config.max_steps if config.max_steps is not None else DEFAULT_STEPS[config.profile][strategy]
    augmentation = config.augmentation if config.augmentation is not None else strategy == "cross-attention"
    return FinetunePlan(
        strategy=strategy,
        learning_rate=lr,
        max_steps=steps,
        lambda_=config.lambda_,
        token=config.token,
        augmentation=augmentation,
        concepts=list(concepts),
        seed=config.seed,
        prior_mode=config.prior_mode,
        instance_prompt=config.instance_prompt,
        draws=config.draws,
        ratio_range=tuple(config.ratio_range),
        ratio_thresholds=tuple(config.ratio_thresholds),
        checkpoint_every=config.checkpoint_every,
    )


def _resize(image: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return F.interpolate(image[None], size=(height, width), mode="bilinear", align_corners=False)[0]


def cd_augment(
    image: torch.Tensor,
    prompt: str,
    rng: np.random.Generator,
    *,
    ratio: float | None = None,
    ratio_range: tuple[float, float] = (0.4, 1.4),
    thresholds: tuple[float, float] = (0.8, 1.2),
) -> tuple[torch.Tensor, str]:
    """Random-resize augmentation with a size word prepended to the prompt.

    Ratios below ``thresholds[0]`` shrink the image onto a blank canvas at a
    random offset and add "very small" or "far away"; ratios above
    ``thresholds[1]`` enlarge and centre-crop and add "zoomed in" or
    "close up". The output keeps the input resolution.
    """
    r = float(rng.uniform(*ratio_range)) if ratio is None else float(ratio)
    if r < thresholds[0]:
        prompt = f"{SMALL_MODIFIERS[int(rng.integers(2))]} {prompt}"
    elif r > thresholds[1]:
        prompt = f"{LARGE_MODIFIERS[int(rng.integers(2))]} {prompt}"

    _, h, w = image.shape
    nh, nw = max(1, round(h * r)), max(1, round(w * r))
    if (nh, nw) == (h, w):
        return image, prompt
    resized = _resize(image, nh, nw)
    if nh <= h and nw <= w:
        top, left = int(rng.integers(h - nh + 1)), int(rng.integers(w - nw + 1))
        canvas = torch.zeros_like(image)
        canvas[:, top : top + nh, left : left + nw] = resized
        return canvas, prompt
    top, left = (nh - h) // 2, (nw - w) // 2
    return resized[:, top : top + h, left : left + w].contiguous(), prompt


def environment_fingerprint() -> dict[str, str]:
    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "torch": torch.__version__,
    }


def _checkpoint_payload(backend: DiffusionBackend, step: int, trace: list[float], rng: np.random.Generator) -> dict:
    return {
        "weights": backend.state_dict(),
        "step": step,
        "trace": list(trace),
        "rng": json.dumps(rng.bit_generator.state),
    }


def write_run_manifest(directory: Path, plan: FinetunePlan, backend_id: str, trace: list[float]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"backend_id": backend_id, "plan": plan.snapshot(), "environment": environment_fingerprint()}
    (directory / "run_manifest.json").write_text(json.dumps(manifest, indent=2))
    with (directory / "loss_trace.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, value in enumerate(trace, start=1):
            writer.writerow([i, repr(value)])


def run_finetune(
    backend: DiffusionBackend,
    plan: FinetunePlan,
    *,
    checkpoint_dir: str | Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    progress: FinetuneProgress | None = None,
) -> FinetunedModelHandle:
    """Run ``plan.max_steps`` gradient steps on the combined prior-preservation loss.

    Training starts from the pretrained weights unless ``resume`` finds a
    checkpoint in ``checkpoint_dir``. ``stop_after`` ends the run early (for
    interruption tests and staged runs); the returned handle then covers the
    steps executed so far.
    """
    if plan.max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    latest = ckpt_dir / "latest.pt" if ckpt_dir is not None else None

    rng = np.random.default_rng(plan.seed)
    trace: list[float] = []
    start = 0
    backend.reset_to_pretrained()
    for token in plan.tokens:
        backend.register_token(token)
    if resume and latest is not None and latest.is_file():
        payload = torch.load(latest, weights_only=True)
        backend.load_state_dict(payload["weights"])
        trace = list(payload["trace"])
        start = int(payload["step"])
        rng.bit_generator.state = json.loads(payload["rng"])

    augment = None
    if plan.augmentation:
        augment = partial(cd_augment, ratio_range=plan.ratio_range, thresholds=plan.ratio_thresholds)

    end = plan.max_steps if stop_after is None else min(plan.max_steps, stop_after)
    if progress is not None:
        progress.total, progress.step = plan.max_steps, start
    for step in range(start, end):
        try:
            loss = combined_loss(
                backend,
                plan.concepts,
                plan.lambda_,
                rng,
                draws=plan.draws,
                prior_mode=plan.prior_mode,
                instance_prompt=plan.instance_prompt,
                augment=augment,
            )
        except MMCustomError:
            raise
        except RuntimeError as exc:
            raise BackendUnavailable(f"noise prediction failed: {exc}") from exc
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergedLoss(step + 1, trace + [value])
        backend.step_optimizer(loss, plan.subsets, plan.learning_rate)
        trace.append(value)
        if progress is not None:
            progress.step, progress.last_loss = step + 1, value
        if latest is not None and ((step + 1) % plan.checkpoint_every == 0 or step + 1 == end):
            latest.parent.mkdir(parents=True, exist_ok=True)
            torch.save(_checkpoint_payload(backend, step + 1, trace, rng), latest)

    checkpoint = None
    state = None
    if ckpt_dir is not None:
        checkpoint = ckpt_dir / "weights.pt"
        torch.save(backend.state_dict(), checkpoint)
        write_run_manifest(ckpt_dir, plan, backend.backend_id, trace)
    else:
        state = backend.state_dict()
    if progress is not None:
        progress.done = True
    handle = FinetunedModelHandle(backend.backend_id, checkpoint, plan.snapshot(), trace, state)
    if ckpt_dir is not None:
        handle.write(ckpt_dir / "handle.json")
    return handle


def token_only_plan(plan: FinetunePlan) -> FinetunePlan:
    """The same plan but conditioned on the bare token, with no prior term."""
    concepts = [replace(c, priors=[]) for c in plan.concepts]
    return replace(plan, concepts=concepts, lambda_=0.0, instance_prompt="token")
