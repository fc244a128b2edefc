"""Local Stable-Diffusion backend built on ``diffusers`` (optional dependency).

Works in latent space: ``encode_image`` maps [-1, 1] pixels to VAE latents and
``predict_noise`` runs the UNet on latents. Timestep ``t`` in 1..T maps to
the scheduler's 0-based index ``t - 1``.
"""

from __future__ import annotations

import math
from collections.abc import Iterable
from contextlib import contextmanager
from pathlib import Path

import torch

from ..errors import BackendUnavailable, UnknownModelHandle
from ..priorkit import NoiseSchedule
from .contracts import iter_subset_names


class DiffusersDiffusion:
    concurrency_safe = False
    sampler_name = "ddim"

    def __init__(
        self,
        model_id: str = "CompVis/stable-diffusion-v1-4",
        *,
        device: str | None = None,
        resolution: int = 512,
    ) -> None:
        try:
            from diffusers import DDIMScheduler, DDPMScheduler, StableDiffusionPipeline
        except ImportError as exc:  # pragma: no cover - depends on optional extra
            raise BackendUnavailable("install the 'diffusers' extra to use this backend") from exc

        self.model_id = model_id
        self.backend_id = f"diffusers:{model_id}"
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        self.resolution = resolution
        pipe = StableDiffusionPipeline.from_pretrained(model_id, safety_checker=None)
        pipe.scheduler = DDIMScheduler.from_config(pipe.scheduler.config)
        self.pipe = pipe.to(self.device)
        self.train_scheduler = DDPMScheduler.from_pretrained(model_id, subfolder="scheduler")
        self.pipe.vae.requires_grad_(False)
        self.pipe.text_encoder.requires_grad_(False)
        self._token_ids: dict[str, int] = {}
        self._optimizers: dict[tuple, torch.optim.Optimizer] = {}
        self._pretrained = self.state_dict()

    @property
    def native_shape(self) -> tuple[int, int, int]:
        return (3, self.resolution, self.resolution)

    def schedule(self) -> NoiseSchedule:
        ac = self.train_scheduler.alphas_cumprod.tolist()
        return NoiseSchedule(tuple(math.sqrt(a) for a in ac), tuple(math.sqrt(1.0 - a) for a in ac))

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        vae = self.pipe.vae
        with torch.no_grad():
            latent = vae.encode(x[None].to(self.device, vae.dtype)).latent_dist.mode()
        return (latent * vae.config.scaling_factor)[0]

    def _encode_text(self, text: str) -> torch.Tensor:
        tok = self.pipe.tokenizer(
            text, padding="max_length", max_length=self.pipe.tokenizer.model_max_length,
            truncation=True, return_tensors="pt",
        )
        return self.pipe.text_encoder(tok.input_ids.to(self.device))[0]

    def predict_noise(self, x_t: torch.Tensor, t: int, c: str) -> torch.Tensor:
        unet = self.pipe.unet
        timestep = torch.tensor([t - 1], device=self.device)
        out = unet(x_t[None].to(self.device, unet.dtype), timestep, encoder_hidden_states=self._encode_text(c))
        return out.sample[0].to(x_t.dtype).to(x_t.device)

    def sample(self, prompt: str, steps: int, guidance: float, seed: int) -> torch.Tensor:
        g = torch.Generator(device=self.device).manual_seed(int(seed))
        with torch.no_grad():
            out = self.pipe(
                prompt, num_inference_steps=int(steps), guidance_scale=float(guidance),
                generator=g, output_type="pt", height=self.resolution, width=self.resolution,
            )
        return (out.images[0].to(torch.float64).cpu() * 2.0 - 1.0).clamp(-1, 1)

    def register_token(self, token: str) -> None:
        tokenizer, encoder = self.pipe.tokenizer, self.pipe.text_encoder
        if tokenizer.add_tokens(token):
            encoder.resize_token_embeddings(len(tokenizer))
        self._token_ids[token] = tokenizer.convert_tokens_to_ids(token)

    def token_embedding(self, token: str) -> torch.Tensor:
        ids = self.pipe.tokenizer(token, add_special_tokens=False).input_ids
        return self.pipe.text_encoder.get_input_embeddings().weight[ids[0]].detach().cpu().clone()

    def named_parameters(self, subset: str = "all") -> dict[str, torch.Tensor]:
        (subset,) = iter_subset_names(subset)
        unet = dict(self.pipe.unet.named_parameters())
        if subset == "all":
            return {f"unet.{k}": v for k, v in unet.items()}
        if subset == "cross-attention":
            return {f"unet.{k}": v for k, v in unet.items() if "attn2.to_k" in k or "attn2.to_v" in k}
        return {"text_encoder.token_embedding": self.pipe.text_encoder.get_input_embeddings().weight}

    def step_optimizer(self, loss: torch.Tensor, subsets: Iterable[str], lr: float) -> None:
        names = tuple(sorted(iter_subset_names(subsets)))
        params = {}
        for name in names:
            params.update(self.named_parameters(name))
        for p in params.values():
            p.requires_grad_(True)
        key = (names, lr)
        if key not in self._optimizers:
            self._optimizers[key] = torch.optim.AdamW(params.values(), lr=lr)
        opt = self._optimizers[key]
        loss.backward()
        emb = params.get("text_encoder.token_embedding")
        if emb is not None and emb.grad is not None:
            keep = torch.zeros(emb.shape[0], 1, device=emb.device, dtype=emb.grad.dtype)
            keep[list(self._token_ids.values())] = 1.0
            emb.grad.mul_(keep)
        opt.step()
        opt.zero_grad(set_to_none=True)
        self.pipe.text_encoder.zero_grad(set_to_none=True)

    def state_dict(self) -> dict:
        return {
            "unet": {k: v.detach().cpu().clone() for k, v in self.pipe.unet.state_dict().items()},
            "embedding": self.pipe.text_encoder.get_input_embeddings().weight.detach().cpu().clone(),
            "tokens": dict(self._token_ids),
        }

    def load_state_dict(self, state: dict) -> None:
        for token in state.get("tokens", {}):
            self.register_token(token)
        self.pipe.unet.load_state_dict(state["unet"])
        emb = self.pipe.text_encoder.get_input_embeddings().weight
        with torch.no_grad():
            emb[: state["embedding"].shape[0]].copy_(state["embedding"].to(emb.device, emb.dtype))
        self._optimizers.clear()

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
    def weights(self, locator):
        if isinstance(locator, dict):
            state = locator
        else:
            path = Path(locator)
            if not path.is_file():
                raise UnknownModelHandle(f"no checkpoint at {path}")
            state = torch.load(path, map_location="cpu", weights_only=True)
        saved = self.state_dict()
        self.load_state_dict(state)
        try:
            yield
        finally:
            self.load_state_dict(saved)
