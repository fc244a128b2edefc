"""Deterministic test doubles for every backend role.

``StubDiffusion`` is a tiny linear denoiser over 3x16x16 float64 tensors::

    eps_hat(x_t, t, c) = gain[t] * x_t + bias[t] + (to_out @ embed(c)).reshape(x_t.shape)

where ``embed(c)`` is the mean of the prompt words' rows in a token table.
The MSE objective is convex in the denoiser parameters, gradients come from
torch autograd, and ``step_optimizer`` is a plain gradient step.
"""

from __future__ import annotations

import hashlib
import math
import re
import threading
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..errors import BackendUnavailable, TimestepOutOfRange, UnknownModelHandle
from ..evalkit import EmbeddingVector, Space
from ..images import pixel_sha256, text_sha256
from ..priorkit import NoiseSchedule
from .contracts import iter_subset_names

_WORD = re.compile(r"[a-z0-9]+")
_EMBEDDING = "text_encoder.token_embedding"


def _stable_int(text: str, nbytes: int = 8) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=nbytes).digest(), "little")


def _with_token(state: dict, token: str, row: torch.Tensor) -> dict:
    params = dict(state["params"])
    table = params[_EMBEDDING]
    params[_EMBEDDING] = torch.cat([table, row.to(table.dtype)])
    return {"params": params, "tokens": {**state["tokens"], token: table.shape[0]}}


class StubDiffusion:
    backend_id = "stub-diffusion"
    concurrency_safe = False
    sampler_name = "stub-ddim"

    def __init__(
        self,
        seed: int = 0,
        *,
        channels: int = 3,
        size: int = 16,
        total_steps: int = 10,
        embed_dim: int = 16,
        vocab_buckets: int = 256,
    ) -> None:
        self.seed = seed
        self._shape = (channels, size, size)
        self._total_steps = total_steps
        self._buckets = vocab_buckets
        self.calls: Counter[str] = Counter()

        g = torch.Generator().manual_seed(seed)
        dim = channels * size * size
        f64 = torch.float64
        self._params: dict[str, torch.Tensor] = {
            "unet.conv_in.gain": 0.05 * torch.randn(total_steps, generator=g, dtype=f64),
            "unet.conv_in.bias": 0.01 * torch.randn(total_steps, *self._shape, generator=g, dtype=f64),
            "unet.attn2.to_out": 0.05 * torch.randn(dim, embed_dim, generator=g, dtype=f64),
            _EMBEDDING: torch.randn(vocab_buckets, embed_dim, generator=g, dtype=f64),
        }
        for p in self._params.values():
            p.requires_grad_(True)
        self._tokens: dict[str, int] = {}
        self._pretrained = self.state_dict()

    # -- introspection -----------------------------------------------------
    @property
    def native_shape(self) -> tuple[int, int, int]:
        return self._shape

    def schedule(self) -> NoiseSchedule:
        T = self._total_steps
        alpha = tuple(1.0 - t / T for t in range(1, T + 1))
        sigma = tuple(math.sqrt(1.0 - a * a) for a in alpha)
        return NoiseSchedule(alpha, sigma)

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def named_parameters(self, subset: str = "all") -> dict[str, torch.Tensor]:
        (subset,) = iter_subset_names(subset)
        if subset == "all":
            return {k: v for k, v in self._params.items() if k.startswith("unet.")}
        if subset == "cross-attention":
            return {k: v for k, v in self._params.items() if ".attn2." in k}
        return {_EMBEDDING: self._params[_EMBEDDING]}

    # -- text side ---------------------------------------------------------
    def _row(self, word: str) -> int:
        if word in self._tokens:
            return self._tokens[word]
        return _stable_int(word) % self._buckets

    def _encode(self, text: str) -> torch.Tensor:
        table = self._params[_EMBEDDING]
        words = _WORD.findall(text.lower())
        if not words:
            return torch.zeros(table.shape[1], dtype=table.dtype)
        return table[[self._row(w) for w in words]].mean(dim=0)

    def register_token(self, token: str) -> None:
        """Give ``token`` its own embedding row in both the live and pretrained weights."""
        token = token.lower()
        g = torch.Generator().manual_seed(_stable_int(token) % (2**63))
        row = torch.randn(1, self._params[_EMBEDDING].shape[1], generator=g, dtype=torch.float64)
        if token not in self._pretrained["tokens"]:
            self._pretrained = _with_token(self._pretrained, token, row)
        if token not in self._tokens:
            self.load_state_dict(_with_token(self.state_dict(), token, row))

    def token_embedding(self, token: str) -> torch.Tensor:
        return self._params[_EMBEDDING][self._row(token.lower())].detach().clone()

    # -- denoiser ----------------------------------------------------------
    def predict_noise(self, x_t: torch.Tensor, t: int, c: str) -> torch.Tensor:
        self.calls["predict_noise"] += 1
        if tuple(x_t.shape) != self._shape:
            raise ValueError(f"expected shape {self._shape}, got {tuple(x_t.shape)}")
        if not 1 <= t <= self._total_steps:
            raise TimestepOutOfRange(f"t={t}")
        p = self._params
        cond = (p["unet.attn2.to_out"] @ self._encode(c)).view(self._shape)
        return p["unet.conv_in.gain"][t - 1] * x_t + p["unet.conv_in.bias"][t - 1] + cond

    def sample(self, prompt: str, steps: int, guidance: float, seed: int) -> torch.Tensor:
        """Deterministic DDIM-style sampling with classifier-free guidance."""
        self.calls["sample"] += 1
        sched = self.schedule()
        T = sched.total_steps
        n = max(1, min(int(steps), T))
        timesteps = sorted({int(round(v)) for v in np.linspace(T, 1, n)}, reverse=True)
        g = torch.Generator().manual_seed(int(seed))
        x = torch.randn(self._shape, generator=g, dtype=torch.float64)
        with torch.no_grad():
            for i, t in enumerate(timesteps):
                eps_c = self.predict_noise(x, t, prompt)
                eps_u = self.predict_noise(x, t, "")
                eps = eps_u + guidance * (eps_c - eps_u)
                a, s = sched.at(t)
                x0 = ((x - s * eps) / max(a, 1e-2)).clamp(-1.0, 1.0)
                if i + 1 < len(timesteps):
                    a_next, s_next = sched.at(timesteps[i + 1])
                    x = a_next * x0 + s_next * eps
                else:
                    x = x0
        return x

    # -- training ----------------------------------------------------------
    def step_optimizer(self, loss: torch.Tensor, subsets: Iterable[str], lr: float) -> None:
        selected: dict[str, torch.Tensor] = {}
        for name in iter_subset_names(subsets):
            selected.update(self.named_parameters(name))
        if not selected:
            return
        names = list(selected)
        grads = torch.autograd.grad(loss, [selected[k] for k in names], allow_unused=True)
        with torch.no_grad():
            for name, grad in zip(names, grads):
                if grad is None:
                    continue
                if name == _EMBEDDING:
                    mask = torch.zeros(grad.shape[0], 1, dtype=grad.dtype)
                    mask[list(self._tokens.values())] = 1.0
                    grad = grad * mask
                selected[name].sub_(lr * grad)

    # -- weights -----------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "params": {k: v.detach().clone() for k, v in self._params.items()},
            "tokens": dict(self._tokens),
        }

    def load_state_dict(self, state: dict) -> None:
        self._params = {k: v.detach().clone().requires_grad_(True) for k, v in state["params"].items()}
        self._tokens = dict(state["tokens"])

    def reset_to_pretrained(self) -> None:
        self.load_state_dict(self._pretrained)

    def save_weights(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        return path

    @contextmanager
    def pretrained(self):
        saved = self.state_dict()
        self.reset_to_pretrained()
        try:
            yield
        finally:
            self.load_state_dict(saved)

    @contextmanager
    def weights(self, locator: Path | str | dict):
        if isinstance(locator, dict):
            state = locator
        else:
            path = Path(locator)
            if not path.is_file():
                raise UnknownModelHandle(f"no checkpoint at {path}")
            state = torch.load(path, weights_only=True)
        saved = self.state_dict()
        self.load_state_dict(state)
        try:
            yield
        finally:
            self.load_state_dict(saved)


_PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 220, 50),
    "orange": (245, 150, 30),
    "purple": (140, 60, 180),
    "pink": (240, 150, 190),
    "brown": (130, 80, 40),
    "white": (245, 245, 245),
    "black": (15, 15, 15),
    "gray": (128, 128, 128),
}


def dominant_color_name(image: Image.Image) -> str:
    """Nearest palette name to the mean colour of the image's central region."""
    arr = np.asarray(image.convert("RGB"), dtype=np.float64)
    h, w = arr.shape[:2]
    center = arr[h // 4 : h - h // 4 or h, w // 4 : w - w // 4 or w].reshape(-1, 3).mean(axis=0)
    return min(_PALETTE, key=lambda name: float(np.sum((np.array(_PALETTE[name]) - center) ** 2)))


class FixedCaptioner:
    """Image pixel hash -> canned caption; unknown images get a colour-based caption."""

    backend_id = "fixed-captioner"

    def __init__(self, captions: Mapping[str, str] | None = None, default: str | None = None) -> None:
        self.captions = dict(captions or {})
        self.default = default
        self.calls = 0

    def caption(self, image: Image.Image) -> str:
        self.calls += 1
        key = pixel_sha256(image)
        if key in self.captions:
            return self.captions[key]
        if self.default is not None:
            return self.default
        return f"there is a {dominant_color_name(image)} toy sitting on a wooden table"


class ScriptedLLM:
    """Replays a fixed list of responses in order, ignoring the prompt."""

    backend_id = "scripted-llm"
    concurrency_safe = True

    def __init__(self, responses: Sequence[str], *, cycle: bool = False) -> None:
        self.responses = list(responses)
        self.cycle = cycle
        self.prompts: list[str] = []
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str, temperature: float, seed: int) -> str:
        with self._lock:
            if self.calls >= len(self.responses) and not (self.cycle and self.responses):
                raise BackendUnavailable("scripted responses exhausted")
            response = self.responses[self.calls % len(self.responses)]
            self.calls += 1
            self.prompts.append(prompt)
            return response


_ACTIONS = ("sitting", "standing", "playing", "lying", "running", "walking", "flying", "swimming", "sleeping")
_RESPONSE_FORMS = (
    'the foreground is "{fg}", the background is "{bg}" and the action is "{act}".',
    'The foreground is "{fg}", the background is "{bg}", and the action is "{act}"',
    'Sure. Foreground is "{fg}.", background is "{bg}", action is "{act}".',
)


class HeuristicLLM:
    """Rule-based stand-in for the semantic-analysis model.

    Pulls the caption out of the analysis prompt and splits it into
    foreground / background / action with a few regexes. The surface form of
    the answer varies with ``seed`` so vote normalisation gets exercised.
    """

    backend_id = "heuristic-llm"
    concurrency_safe = True

    def __init__(self, vary: bool = True) -> None:
        self.vary = vary
        self.calls = 0
        self._lock = threading.Lock()

    @staticmethod
    def analyse(caption: str) -> tuple[str, str, str]:
        s = re.sub(r"\s+", " ", caption.strip().rstrip("."))
        s = re.sub(r"^(there (is|are)|this is|arafed|araffe)\s+", "", s, flags=re.I)
        action = "None"
        for verb in _ACTIONS:
            m = re.search(rf"\b(that (is|are) )?{verb}\b", s)
            if m:
                action = verb
                s = (s[: m.start()] + s[m.end() :]).strip()
                s = re.sub(r"\s+", " ", s)
                break
        background = "None"
        m = re.search(r"\s(on|in|at|near) (the |a |an )?(.+)$", s)
        if m:
            background = m.group(3).strip()
            s = s[: m.start()].strip()
        return s or caption.strip(), background, action

    def complete(self, prompt: str, temperature: float, seed: int) -> str:
        with self._lock:
            self.calls += 1
        m = re.search(r'I will give you a sentence "(.*)" here', prompt, re.S)
        if not m:
            return "I am not sure what you mean."
        fg, bg, act = self.analyse(m.group(1))
        form = _RESPONSE_FORMS[seed % len(_RESPONSE_FORMS)] if self.vary else _RESPONSE_FORMS[0]
        return form.format(fg=fg, bg=bg, act=act)


class HashingEmbedder:
    """Content hash -> seeded unit vector. Equal content gives an equal vector."""

    backend_id = "hashing-embedder"
    DIMS: dict[str, int] = {"dino-image": 384, "clip-image": 512, "clip-text": 512}

    def __init__(self, salt: str = "") -> None:
        self.salt = salt
        self.calls = 0

    def dimension(self, space: Space) -> int:
        return self.DIMS[space]

    def _vector(self, key: str, space: Space) -> EmbeddingVector:
        self.calls += 1
        seed = _stable_int(f"{self.salt}|{space}|{key}", 16)
        v = np.random.default_rng(seed).standard_normal(self.DIMS[space])
        return EmbeddingVector(v / np.linalg.norm(v), space)

    def embed_image(self, image, space: Space) -> EmbeddingVector:
        if space == "clip-text":
            raise ValueError("images embed into an image space")
        return self._vector(pixel_sha256(image), space)

    def embed_text(self, text: str) -> EmbeddingVector:
        return self._vector(text_sha256(text), "clip-text")
