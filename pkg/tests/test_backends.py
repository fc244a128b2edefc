"""Adapter contract checks run against the stubs, plus the HTTP adapters over a mock transport."""

import importlib.util
import json

import httpx
import numpy as np
import pytest
import torch
from PIL import Image

from mmcustom.backends import Backends, build_backends, stub_backends
from mmcustom.backends.contracts import CaptionerBackend, DiffusionBackend, EmbedderBackend, LanguageModelBackend
from mmcustom.backends.remote import RemoteCaptioner, RemoteEmbedder, RemoteLLM
from mmcustom.backends.stubs import FixedCaptioner, HashingEmbedder, HeuristicLLM, ScriptedLLM, StubDiffusion
from mmcustom.config import config_from_mapping
from mmcustom.errors import BackendUnavailable, ConfigError, TimestepOutOfRange
from mmcustom.extraction import build_analysis_prompt, parse_analysis_response
from mmcustom.images import pixel_sha256


def test_stubs_satisfy_protocols(backends: Backends):
    assert isinstance(backends.diffusion, DiffusionBackend)
    assert isinstance(backends.captioner, CaptionerBackend)
    assert isinstance(backends.llm, LanguageModelBackend)
    assert isinstance(backends.embedder, EmbedderBackend)


class TestDiffusionContract:
    def test_predict_noise_shape_and_range(self, stub):
        x = torch.zeros(stub.native_shape, dtype=torch.float64)
        assert stub.predict_noise(x, 1, "a cat").shape == stub.native_shape
        with pytest.raises(TimestepOutOfRange):
            stub.predict_noise(x, 0, "a cat")

    def test_sample_deterministic_per_seed(self, stub):
        a = stub.sample("a red toy", 10, 7.5, 1)
        assert torch.equal(a, stub.sample("a red toy", 10, 7.5, 1))
        assert not torch.equal(a, stub.sample("a red toy", 10, 7.5, 2))
        assert not torch.equal(a, stub.sample("a blue toy", 10, 7.5, 1))
        assert a.min() >= -1 and a.max() <= 1

    def test_same_seed_stubs_are_identical(self):
        a, b = StubDiffusion(seed=3), StubDiffusion(seed=3)
        assert torch.equal(a.sample("x", 5, 2.0, 0), b.sample("x", 5, 2.0, 0))

    def test_subsets_partition(self, stub):
        unet = set(stub.named_parameters("all"))
        xattn = set(stub.named_parameters("cross-attention"))
        emb = set(stub.named_parameters("token-embedding"))
        assert xattn < unet and not emb & unet
        with pytest.raises(ValueError):
            stub.named_parameters("lora")

    def test_register_token_gets_own_row(self, stub):
        stub.register_token("sks")
        stub.register_token("sks")
        assert list(stub.state_dict()["tokens"]) == ["sks"]
        before = stub.sample("sks", 5, 1.0, 0)
        with stub.pretrained():
            assert torch.equal(stub.sample("sks", 5, 1.0, 0), before)

    def test_weights_context_restores_state(self, stub, tmp_path):
        stub.register_token("sks")
        with torch.no_grad():
            stub._params["unet.conv_in.bias"].add_(1.0)
        path = stub.save_weights(tmp_path / "w.pt")
        stub.reset_to_pretrained()
        base = stub.sample("x", 5, 1.0, 0)
        with stub.weights(path):
            tuned = stub.sample("x", 5, 1.0, 0)
        assert not torch.equal(base, tuned)
        assert torch.equal(stub.sample("x", 5, 1.0, 0), base)

    def test_step_optimizer_moves_selected_subset_only(self, stub):
        x = torch.zeros(stub.native_shape, dtype=torch.float64)
        loss = stub.predict_noise(x, 3, "a cat").pow(2).mean()
        pre = stub.state_dict()["params"]
        stub.step_optimizer(loss, ["cross-attention"], 1.0)
        post = stub.state_dict()["params"]
        changed = {k for k in pre if not torch.equal(pre[k], post[k])}
        assert changed == {"unet.attn2.to_out"}


class TestCaptionerAndLLM:
    def test_fixed_captioner_lookup(self):
        im = Image.new("RGB", (8, 8), (250, 250, 250))
        cap = FixedCaptioner({pixel_sha256(im): "a white square"})
        assert cap.caption(im) == "a white square"
        assert FixedCaptioner().caption(im) == "there is a white toy sitting on a wooden table"

    def test_heuristic_llm_forms_all_parse_to_same_triple(self):
        llm = HeuristicLLM()
        prompt = build_analysis_prompt("there is a red toy sitting on a wooden table")
        parsed = {parse_analysis_response(llm.complete(prompt, 0.7, s)) for s in range(3)}
        foregrounds = {p.foreground.rstrip(".") for p in parsed}
        assert foregrounds == {"a red toy"}

    def test_scripted_llm(self):
        llm = ScriptedLLM(["a", "b"], cycle=True)
        assert [llm.complete("p", 0, i) for i in range(3)] == ["a", "b", "a"]
        assert llm.prompts == ["p", "p", "p"]


def test_hashing_embedder():
    e = HashingEmbedder()
    im = Image.new("RGB", (4, 4), (1, 2, 3))
    v = e.embed_image(im, "dino-image")
    assert v.values.shape == (384,) and np.linalg.norm(v.values) == pytest.approx(1.0)
    assert np.array_equal(v.values, e.embed_image(im.copy(), "dino-image").values)
    assert not np.array_equal(v.values, HashingEmbedder(salt="x").embed_image(im, "dino-image").values)
    assert e.embed_text("hi").values.shape == (512,)
    with pytest.raises(ValueError):
        e.embed_image(im, "clip-text")


# -- remote adapters ---------------------------------------------------------


def _transport(handler, log):
    def wrapped(request: httpx.Request) -> httpx.Response:
        log.append(request)
        return handler(request, len(log))

    return httpx.MockTransport(wrapped)


def test_remote_llm_payload_and_auth(monkeypatch):
    monkeypatch.setenv("MM_TOKEN", "secret")
    log = []
    transport = _transport(lambda r, n: httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]}), log)
    llm = RemoteLLM("https://llm.test/v1/chat", "chat-model", auth_env="MM_TOKEN", transport=transport)
    assert llm.complete("hello", 0.7, 3) == "ok"
    body = json.loads(log[0].content)
    assert body == {"model": "chat-model", "messages": [{"role": "user", "content": "hello"}],
                    "temperature": 0.7, "seed": 3}
    assert log[0].headers["Authorization"] == "Bearer secret"
    assert llm.backend_id == "remotellm:chat-model"


def test_remote_retries_then_succeeds():
    log = []

    def handler(request, n):
        if n <= 2:
            return httpx.Response(503 if n == 1 else 429)
        return httpx.Response(200, json={"caption": "a dog"})

    cap = RemoteCaptioner("https://cap.test", "blip", transport=_transport(handler, log), max_wait=0.01)
    assert cap.caption(Image.new("RGB", (4, 4))) == "a dog"
    assert len(log) == 3
    assert "image" in json.loads(log[0].content)


def test_remote_retries_exhausted():
    log = []
    cap = RemoteCaptioner("https://cap.test", "blip", transport=_transport(lambda r, n: httpx.Response(500), log),
                          max_wait=0.01)
    with pytest.raises(BackendUnavailable):
        cap.caption(Image.new("RGB", (4, 4)))
    assert len(log) == 4


def test_remote_client_errors_are_not_retried():
    log = []
    llm = RemoteLLM("https://llm.test", "m", transport=_transport(lambda r, n: httpx.Response(401), log), max_wait=0.01)
    with pytest.raises(BackendUnavailable):
        llm.complete("x", 0.0, 0)
    assert len(log) == 1


def test_remote_transport_error_is_retried():
    log = []

    def handler(request, n):
        if n == 1:
            raise httpx.ConnectError("refused", request=request)
        return httpx.Response(200, json={"choices": [{"message": {"content": "fine"}}]})

    llm = RemoteLLM("https://llm.test", "m", transport=_transport(handler, log), max_wait=0.01)
    assert llm.complete("x", 0.0, 0) == "fine"


def test_remote_bad_payload():
    log = []
    llm = RemoteLLM("https://llm.test", "m", transport=_transport(lambda r, n: httpx.Response(200, json={}), log))
    with pytest.raises(BackendUnavailable):
        llm.complete("x", 0.0, 0)


def test_remote_embedder_tracks_dimension():
    log = []

    def handler(request, n):
        size = 3 if n < 3 else 4
        return httpx.Response(200, json={"embedding": [1.0] * size})

    e = RemoteEmbedder("https://emb.test", "clip", transport=_transport(handler, log))
    assert e.embed_text("a").values.size == 3
    assert e.dimension("clip-text") == 3
    e.embed_text("b")
    with pytest.raises(BackendUnavailable):
        e.embed_text("c")
    assert json.loads(log[0].content)["space"] == "clip-text"


def test_build_backends_from_config():
    cfg = config_from_mapping({"backend": {
        "llm": {"kind": "remote", "endpoint": "https://llm.test", "model_id": "m"},
        "embedder": {"options": {"salt": "s"}},
    }})
    b = build_backends(cfg.backend)
    assert isinstance(b.llm, RemoteLLM) and isinstance(b.diffusion, StubDiffusion)
    assert b.embedder.salt == "s"
    scripted = build_backends(config_from_mapping({"backend": {"llm": {"options": {"responses": ["x"]}}}}).backend)
    assert isinstance(scripted.llm, ScriptedLLM)
    with pytest.raises(ConfigError):
        build_backends(config_from_mapping({"backend": {"captioner": {"kind": "diffusers"}}}).backend)


def test_stub_backends_factory():
    assert isinstance(stub_backends(1).diffusion, StubDiffusion)


@pytest.mark.skipif(importlib.util.find_spec("diffusers") is None, reason="diffusers not installed")
def test_diffusers_adapter_imports():
    from mmcustom.backends.diffusers_backend import DiffusersDiffusion

    assert callable(DiffusersDiffusion.predict_noise)
