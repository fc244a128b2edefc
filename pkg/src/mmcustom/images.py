"""Raster helpers: file loading, PIL <-> tensor conversion, content hashing.

Tensors are channel-first float64 in [-1, 1], the layout backends consume.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import UndecodableImage


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def text_sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_image(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise UndecodableImage(f"cannot decode {path}: {exc}") from exc


def pil_to_tensor(image: Image.Image, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Convert to a (3, H, W) float64 tensor in [-1, 1], resizing to ``size=(H, W)``."""
    image = image.convert("RGB")
    if size is not None and image.size != (size[1], size[0]):
        image = image.resize((size[1], size[0]), Image.BICUBIC)
    arr = np.asarray(image, dtype=np.float64) / 127.5 - 1.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def tensor_to_uint8(x: torch.Tensor) -> np.ndarray:
    arr = x.detach().to(torch.float64).clamp(-1, 1).cpu().numpy()
    return np.round((arr.transpose(1, 2, 0) + 1.0) * 127.5).astype(np.uint8)


def tensor_to_pil(x: torch.Tensor) -> Image.Image:
    return Image.fromarray(tensor_to_uint8(x), mode="RGB")


def save_tensor_png(x: torch.Tensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensor_to_pil(x).save(path, format="PNG")
    return path


def pixel_sha256(image: Image.Image | torch.Tensor | np.ndarray) -> str:
    """Hash decoded 8-bit pixels, so a PNG round trip keeps the same hash."""
    if isinstance(image, torch.Tensor):
        arr = tensor_to_uint8(image)
    elif isinstance(image, Image.Image):
        arr = np.asarray(image.convert("RGB"), dtype=np.uint8)
    else:
        arr = np.asarray(image, dtype=np.uint8)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
