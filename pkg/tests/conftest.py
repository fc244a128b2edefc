from __future__ import annotations

import shutil
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from mmcustom.backends import Backends, stub_backends
from mmcustom.backends.stubs import StubDiffusion
from mmcustom.extraction import SemanticTriple
from mmcustom.priorkit import ConceptSpec, PriorSample, make_composite

DESK_FIXTURES = Path(__file__).resolve().parent.parent / "fixtures" / "desk"


def write_png(path: Path, color: tuple[int, int, int], size: int = 32, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    a = np.full((size, size, 3), (120, 90, 60), np.float64)
    a[size // 4 : 3 * size // 4, size // 4 : 3 * size // 4] = color
    a += rng.normal(0, 6, a.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(a, 0, 255).astype(np.uint8)).save(path)
    return path


@pytest.fixture
def image_dir(tmp_path: Path) -> Path:
    d = tmp_path / "images"
    write_png(d / "red.png", (200, 40, 40), seed=1)
    write_png(d / "blue.png", (40, 60, 200), seed=2)
    write_png(d / "green.png", (40, 180, 60), seed=3)
    return d


@pytest.fixture
def desk_corpus(tmp_path: Path) -> Path:
    """A private copy of the shipped two-image desk corpus."""
    dest = tmp_path / "corpus"
    shutil.copytree(DESK_FIXTURES, dest)
    return dest / "prompts.txt"


@pytest.fixture
def backends() -> Backends:
    return stub_backends(seed=0)


@pytest.fixture
def stub() -> StubDiffusion:
    return StubDiffusion(seed=0)


def random_image(seed: int, shape=(3, 16, 16)) -> torch.Tensor:
    return torch.from_numpy(np.random.default_rng(seed).uniform(-1, 1, shape))


def make_concept(
    token: str = "sks",
    description: str = "a red toy",
    *,
    seed: int = 0,
    n_priors: int = 3,
    ref: str = "red.png",
) -> ConceptSpec:
    priors = [PriorSample(random_image(1000 + seed * 10 + i), description, i) for i in range(n_priors)]
    return ConceptSpec(random_image(seed), SemanticTriple(description), make_composite(token, description), priors, ref)


ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
