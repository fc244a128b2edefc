"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class MMCustomError(Exception):
    """Base class for all mmcustom errors."""


# prompts
class PromptError(MMCustomError):
    pass


class EmptyPrompt(PromptError):
    pass


class MalformedEmbed(PromptError):
    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class MissingDescriptor(PromptError):
    def __init__(self, image_ref: str) -> None:
        super().__init__(f"no descriptor for image {image_ref!r}")
        self.image_ref = image_ref


class UnreadableImage(PromptError):
    def __init__(self, image_refs: list[str]) -> None:
        super().__init__("unreadable image(s): " + ", ".join(image_refs))
        self.image_refs = image_refs


# backends
class BackendUnavailable(MMCustomError):
    pass


class UndecodableImage(MMCustomError):
    pass


# extraction
class AllResponsesMalformed(MMCustomError):
    def __init__(self, responses: list[str]) -> None:
        super().__init__(f"all {len(responses)} language-model responses were malformed")
        self.responses = responses


# diffusion math
class InvalidToken(MMCustomError):
    pass


class TimestepOutOfRange(MMCustomError):
    pass


class EmptyPriors(MMCustomError):
    pass


# finetuning
class MissingPriors(MMCustomError):
    pass


class InvalidConfig(MMCustomError):
    pass


class DivergedLoss(MMCustomError):
    def __init__(self, step: int, trace: list[float]) -> None:
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.trace = trace


# generation
class UnknownModelHandle(MMCustomError):
    pass


class InvalidRequest(MMCustomError):
    pass


# evaluation
class ZeroVector(MMCustomError):
    pass


class SpaceMismatch(MMCustomError):
    pass


class EmptySet(MMCustomError):
    pass


class InconsistentRun(MMCustomError):
    pass


# orchestration
class ConfigError(MMCustomError):
    """Config validation failure carrying every offending key."""

    def __init__(self, errors: list[tuple[str, str]]) -> None:
        lines = "; ".join(f"{key}: {msg}" for key, msg in errors)
        super().__init__(f"invalid config: {lines}")
        self.errors = errors


class StageError(MMCustomError):
    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
