"""Backend contracts, deterministic stubs and configured factories."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

from ..errors import ConfigError
from .contracts import (
    PARAMETER_SUBSETS,
    CaptionerBackend,
    DiffusionBackend,
    EmbedderBackend,
    LanguageModelBackend,
)
from .remote import RemoteCaptioner, RemoteEmbedder, RemoteLLM
from .stubs import FixedCaptioner, HashingEmbedder, HeuristicLLM, ScriptedLLM, StubDiffusion

if TYPE_CHECKING:
    from ..config import BackendsConfig, BackendSpec

__all__ = [
    "PARAMETER_SUBSETS",
    "Backends",
    "CaptionerBackend",
    "DiffusionBackend",
    "EmbedderBackend",
    "FixedCaptioner",
    "HashingEmbedder",
    "HeuristicLLM",
    "LanguageModelBackend",
    "RemoteCaptioner",
    "RemoteEmbedder",
    "RemoteLLM",
    "ScriptedLLM",
    "StubDiffusion",
    "build_backends",
    "stub_backends",
]


@dataclass
class Backends:
    diffusion: DiffusionBackend
    captioner: CaptionerBackend
    llm: LanguageModelBackend
    embedder: EmbedderBackend


def stub_backends(seed: int = 0) -> Backends:
    return Backends(StubDiffusion(seed), FixedCaptioner(), HeuristicLLM(), HashingEmbedder())


def _remote_kwargs(spec: BackendSpec) -> dict:
    return {"auth_env": spec.auth_env, "timeout": spec.timeout}


def build_backends(cfg: BackendsConfig) -> Backends:
    d, c, m, e = cfg.diffusion, cfg.captioner, cfg.llm, cfg.embedder
    for role, spec in (("diffusion", d), ("captioner", c), ("llm", m), ("embedder", e)):
        if spec.kind == "diffusers" and role != "diffusion":
            raise ConfigError([(f"backend.{role}.kind", "kind 'diffusers' only applies to diffusion")])

    if d.kind == "diffusers":
        from .diffusers_backend import DiffusersDiffusion

        diffusion = DiffusersDiffusion(d.model_id or "CompVis/stable-diffusion-v1-4", **d.options)
    else:
        diffusion = StubDiffusion(**d.options)

    if c.kind == "remote":
        captioner = RemoteCaptioner(c.endpoint, c.model_id or "", **_remote_kwargs(c))
    else:
        captioner = FixedCaptioner(c.options.get("captions"), c.options.get("default"))

    if m.kind == "remote":
        llm = RemoteLLM(m.endpoint, m.model_id or "", **_remote_kwargs(m))
    elif "responses" in m.options:
        llm = ScriptedLLM(m.options["responses"], cycle=bool(m.options.get("cycle", False)))
    else:
        llm = HeuristicLLM(vary=bool(m.options.get("vary", True)))

    if e.kind == "remote":
        embedder = RemoteEmbedder(e.endpoint, e.model_id or "", dims=e.options.get("dims"), **_remote_kwargs(e))
    else:
        embedder = HashingEmbedder(salt=str(e.options.get("salt", "")))

    return Backends(diffusion, captioner, llm, embedder)
