"""End-to-end orchestration: extract -> priors -> finetune -> generate -> evaluate.

Every expensive stage is served from a content-addressed cache under
``<workdir>/cache``, so an unchanged rerun makes no model calls. Each run gets
``<workdir>/runs/<run_id>/`` with an append-only ``manifest.jsonl``, the
generated images, the reference images and the report.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import torch
from filelock import FileLock

from .backends import Backends, build_backends
from .config import Config
from .errors import MMCustomError, StageError
from .evalkit import EvalReport, MethodRun, PromptRun, build_report
from .extraction import ExtractionCache, SemanticTriple, VoteTally, extract_main_object
from .finetune import FinetunedModelHandle, plan_finetune, run_finetune, token_only_plan
from .generate import PRETRAINED, Mode, build_output_prompt, make_request, prompt_hash, sample
from .images import file_sha256, load_image, pil_to_tensor, save_tensor_png
from .mmprompt import MultiModalPrompt, load_prompts, resolve_image_path, serialize_prompt, validate_prompt
from .priorkit import ConceptSpec, generate_priors, load_priors, make_composite, save_priors

log = logging.getLogger(__name__)

STAGES = ("validate", "extract", "priors", "finetune", "generate", "evaluate")
CACHED_STAGES = ("extract", "priors", "finetune", "generate", "evaluate")
TEXT_ONLY = "text-to-image"


def _digest(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def _publish(tmp: Path, final: Path) -> None:
    """Move a fully written cache entry into place; a concurrent winner is kept."""
    final.parent.mkdir(parents=True, exist_ok=True)
    try:
        os.replace(tmp, final)
    except OSError:
        shutil.rmtree(tmp, ignore_errors=True)


@dataclass
class StageRecord:
    stage: str
    prompt_id: str | None
    status: str
    cache_hit: bool = False
    artifacts: list[str] = field(default_factory=list)
    detail: dict[str, Any] = field(default_factory=dict)


@dataclass
class RunManifest:
    run_id: str
    timestamp: str
    run_dir: Path
    prompt_file: str
    prompts: dict[str, str]
    config_fingerprint: str
    profile: str
    stages: list[StageRecord] = field(default_factory=list)
    status: str = "running"
    failed_stage: str | None = None
    error: str | None = None
    report: str | None = None

    def records(self, stage: str) -> list[StageRecord]:
        return [r for r in self.stages if r.stage == stage]

    def stage_status(self, stage: str) -> str:
        """``complete`` / ``skipped`` / ``failed`` / ``missing``, summarised over prompts."""
        statuses = {r.status for r in self.records(stage)}
        if not statuses:
            return "missing"
        if "failed" in statuses:
            return "failed"
        if "complete" in statuses:
            return "complete"
        return "skipped"

    @property
    def fully_cached(self) -> bool:
        done = [r for r in self.stages if r.stage in CACHED_STAGES and r.status == "complete"]
        return bool(done) and all(r.cache_hit for r in done)

    @property
    def triples(self) -> dict[str, dict[str, dict]]:
        return {r.prompt_id: r.detail.get("triples", {}) for r in self.records("extract") if r.status == "complete"}

    @property
    def outputs(self) -> list[str]:
        return [a for r in self.records("generate") for a in r.artifacts]

    @property
    def artifacts(self) -> list[str]:
        paths = [a for r in self.stages for a in r.artifacts]
        if self.report:
            paths.append(self.report)
        return paths

    @classmethod
    def load(cls, run_dir: str | Path) -> RunManifest:
        run_dir = Path(run_dir)
        manifest = None
        for line in (run_dir / "manifest.jsonl").read_text().splitlines():
            event = json.loads(line)
            kind = event.pop("event")
            if kind == "start":
                manifest = cls(run_dir=run_dir, **event)
            elif kind == "stage":
                manifest.stages.append(StageRecord(**event))
            elif kind == "end":
                manifest.status = event["status"]
                manifest.failed_stage = event.get("failed_stage")
                manifest.error = event.get("error")
                manifest.report = event.get("report")
        if manifest is None:
            raise MMCustomError(f"{run_dir} has no start event")
        return manifest


class ManifestWriter:
    """Append-only JSONL manifest; refuses to reference artifacts that do not exist."""

    def __init__(self, manifest: RunManifest) -> None:
        self.manifest = manifest
        self.path = manifest.run_dir / "manifest.jsonl"

    def _append(self, event: dict) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, default=str) + "\n")

    def start(self) -> None:
        m = self.manifest
        self._append(
            {
                "event": "start",
                "run_id": m.run_id,
                "timestamp": m.timestamp,
                "prompt_file": m.prompt_file,
                "prompts": m.prompts,
                "config_fingerprint": m.config_fingerprint,
                "profile": m.profile,
            }
        )

    def stage(self, record: StageRecord) -> None:
        missing = [a for a in record.artifacts if not Path(a).exists()]
        if missing:
            raise MMCustomError(f"manifest would reference missing artifacts: {missing}")
        self.manifest.stages.append(record)
        self._append({"event": "stage", **asdict(record)})

    def end(self, status: str, *, failed_stage: str | None = None, error: str | None = None) -> None:
        m = self.manifest
        if m.report and not Path(m.report).exists():
            raise MMCustomError(f"report {m.report} missing at manifest write")
        m.status, m.failed_stage, m.error = status, failed_stage, error
        self._append(
            {"event": "end", "status": status, "failed_stage": failed_stage, "error": error, "report": m.report}
        )


@dataclass
class PromptState:
    prompt: MultiModalPrompt
    prompt_id: str
    base_dir: Path
    concepts: dict[str, ConceptSpec] = field(default_factory=dict)
    source_paths: dict[str, Path] = field(default_factory=dict)
    prior_stores: dict[str, Path] = field(default_factory=dict)
    handles: dict[str, FinetunedModelHandle] = field(default_factory=dict)
    handle_keys: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, list[Path]] = field(default_factory=dict)
    output_keys: dict[str, str] = field(default_factory=dict)

    @property
    def has_images(self) -> bool:
        return bool(self.prompt.image_refs)

    @property
    def serialized(self) -> str:
        return serialize_prompt(self.prompt)


class Pipeline:
    def __init__(self, config: Config, workdir: str | Path, backends: Backends | None = None) -> None:
        self.config = config
        self.workdir = Path(workdir)
        self.cache_dir = self.workdir / "cache"
        self.backends = backends or build_backends(config.backend)
        self.extraction_cache = (
            ExtractionCache(self.cache_dir / "extraction.jsonl") if config.extraction.cache else None
        )

    # -- individual stages -------------------------------------------------
    def extract(self, image_ref: str, base_dir: Path | None = None) -> tuple[SemanticTriple, VoteTally, bool]:
        c = self.config.extraction
        hits = self.extraction_cache.hits if self.extraction_cache else 0
        triple, tally = extract_main_object(
            image_ref,
            c.k,
            self.backends.captioner,
            self.backends.llm,
            temperature=c.temperature,
            seed=c.seed,
            max_workers=c.max_workers,
            cache=self.extraction_cache,
            base_dir=base_dir,
        )
        hit = self.extraction_cache is not None and self.extraction_cache.hits > hits
        return triple, tally, hit

    def priors(self, p_t: str) -> tuple[Path, bool]:
        """Return the prior store directory for ``p_t``, generating it if absent."""
        d = self.backends.diffusion
        p = self.config.priors
        key = _digest(["priors", d.backend_id, p_t, p.count, p.seed, p.steps, p.guidance])
        store = self.cache_dir / "priors" / key
        if (store / "manifest.json").is_file():
            return store, True
        samples = generate_priors(d, p_t, p.count, p.seed, steps=p.steps, guidance=p.guidance)
        tmp = store.with_name(f"{key}.tmp-{uuid.uuid4().hex}")
        save_priors(samples, tmp, d.backend_id)
        _publish(tmp, store)
        return store, False

    def finetune(self, concepts: list[ConceptSpec], mode: Mode, inputs: dict[str, Any],
                 overrides: dict | None = None) -> tuple[FinetunedModelHandle, bool, str]:
        """Finetune (or load from cache). ``inputs`` identifies the source images and prior stores."""
        d = self.backends.diffusion
        plan = plan_finetune(self.config.finetune_config(**(overrides or {})), concepts)
        if mode is Mode.FINETUNING_DIRECTLY:
            plan = token_only_plan(plan)
        key = _digest(["finetune", d.backend_id, plan.snapshot(), inputs])
        final = self.cache_dir / "finetune" / key
        if (final / "handle.json").is_file() and (final / "weights.pt").is_file():
            return FinetunedModelHandle.read(final), True, key
        tmp = final.with_name(f"{key}.tmp-{uuid.uuid4().hex}")
        handle = run_finetune(d, plan, checkpoint_dir=tmp)
        _publish(tmp, final)
        handle.checkpoint = final / "weights.pt"
        handle.write(final / "handle.json")
        return handle, False, key

    def generate(self, state: PromptState, mode: Mode | None) -> tuple[list[Path], bool, dict]:
        d = self.backends.diffusion
        g = self.config.generate
        if mode is None:
            resolved = build_output_prompt(state.prompt, {}, Mode.FULL)
            model, model_key = PRETRAINED, "pretrained"
        else:
            resolved = build_output_prompt(state.prompt, state.concepts, mode)
            if mode is Mode.EXTRACTION_DIRECTLY:
                model, model_key = PRETRAINED, "pretrained"
            else:
                model, model_key = state.handles[mode.value], state.handle_keys[mode.value]
        request = make_request(
            resolved, mode or Mode.EXTRACTION_DIRECTLY, model,
            num_images=g.num_images, inference_steps=g.steps, guidance_scale=g.guidance, seed=g.seed,
        )
        key = _digest(["generate", d.backend_id, model_key, resolved.text, request.effective_steps,
                       request.effective_guidance, request.seeds])
        final = self.cache_dir / "generate" / key
        detail = {"text": resolved.text, "seeds": request.seeds, "steps": request.effective_steps,
                  "guidance": request.effective_guidance, "sampler": d.sampler_name, "cache_key": key}
        if (final / "manifest.json").is_file():
            names = json.loads((final / "manifest.json").read_text())["files"]
            return [final / n for n in names], True, detail
        images = sample(request, d)
        tmp = final.with_name(f"{key}.tmp-{uuid.uuid4().hex}")
        names = [save_tensor_png(im.image, tmp / f"{im.seed}.png").name for im in images]
        (tmp / "manifest.json").write_text(json.dumps({"files": names, **detail}, indent=2))
        _publish(tmp, final)
        return [final / n for n in names], False, detail

    # -- orchestration -----------------------------------------------------
    def _concepts(self, state: PromptState, writer: ManifestWriter) -> None:
        refs = list(dict.fromkeys(state.prompt.image_refs))
        tokens = self.config.finetune.tokens
        if len(refs) > len(tokens):
            raise MMCustomError(f"prompt has {len(refs)} images but only {len(tokens)} rare tokens configured")
        triples: dict[str, SemanticTriple] = {}
        responses: dict[str, list[str]] = {}
        captions: dict[str, str] = {}
        hits = []
        for ref in refs:
            triple, tally, hit = self.extract(ref, state.base_dir)
            triples[ref], responses[ref] = triple, tally.responses
            captions[ref] = tally.caption.text if tally.caption else ""
            hits.append(hit)
        cache_file = [str(self.extraction_cache.path)] if self.extraction_cache else []
        writer.stage(StageRecord(
            "extract", state.prompt_id, "complete", cache_hit=all(hits), artifacts=cache_file,
            detail={"triples": {r: t.as_dict() for r, t in triples.items()}, "captions": captions,
                    "responses": responses},
        ))

        d = self.backends.diffusion
        size = d.native_shape[1:]
        stores, hits = {}, []
        for j, ref in enumerate(refs):
            store, hit = self.priors(triples[ref].foreground)
            stores[ref] = state.prior_stores[ref] = store
            hits.append(hit)
            path = resolve_image_path(ref, state.base_dir)
            state.source_paths[ref] = path
            state.concepts[ref] = ConceptSpec(
                source_image=pil_to_tensor(load_image(path), size),
                triple=triples[ref],
                descriptor=make_composite(tokens[j], triples[ref].foreground),
                priors=load_priors(store, size),
                image_ref=ref,
            )
        writer.stage(StageRecord(
            "priors", state.prompt_id, "complete", cache_hit=all(hits),
            artifacts=[str(s / "manifest.json") for s in stores.values()],
            detail={"stores": {r: str(s) for r, s in stores.items()},
                    "seeds": {r: [p.seed for p in c.priors] for r, c in state.concepts.items()}},
        ))

    def _finetune(self, state: PromptState, methods: list[Mode], writer: ManifestWriter) -> None:
        concepts = [state.concepts[r] for r in state.concepts]
        inputs = {"sources": {r: file_sha256(p) for r, p in state.source_paths.items()},
                  "priors": {r: s.name for r, s in state.prior_stores.items()}}
        hits, artifacts, plans = [], [], {}
        for mode in methods:
            if mode is Mode.EXTRACTION_DIRECTLY:
                continue
            handle, hit, key = self.finetune(concepts, mode, inputs)
            state.handles[mode.value], state.handle_keys[mode.value] = handle, key
            hits.append(hit)
            artifacts.append(str(handle.checkpoint))
            plans[mode.value] = {"plan": handle.plan, "final_loss": handle.loss_trace[-1]}
        if not hits:
            writer.stage(StageRecord("finetune", state.prompt_id, "skipped", detail={"reason": "no finetuned method"}))
            return
        writer.stage(StageRecord("finetune", state.prompt_id, "complete", cache_hit=all(hits),
                                 artifacts=artifacts, detail={"plans": plans}))

    def _generate(self, state: PromptState, methods: list[Mode], run_dir: Path, writer: ManifestWriter) -> None:
        hits, artifacts, details = [], [], {}
        labels: list[tuple[str, Mode | None]] = [(m.value, m) for m in methods] if state.has_images else [(TEXT_ONLY, None)]
        eval_text = None
        if state.has_images:
            eval_text = build_output_prompt(state.prompt, state.concepts, Mode.EXTRACTION_DIRECTLY).text
        for label, mode in labels:
            paths, hit, detail = self.generate(state, mode)
            out_dir = run_dir / "outputs" / label / state.prompt_id
            out_dir.mkdir(parents=True, exist_ok=True)
            copied = []
            for p in paths:
                shutil.copyfile(p, out_dir / p.name)
                copied.append(out_dir / p.name)
            (out_dir / "prompt.json").write_text(json.dumps(
                {"prompt": state.serialized, "resolved": detail["text"], "eval_text": eval_text}, indent=2))
            state.outputs[label], state.output_keys[label] = copied, detail["cache_key"]
            hits.append(hit)
            artifacts.extend(str(p) for p in copied)
            artifacts.append(str(out_dir / "prompt.json"))
            details[label] = detail
        writer.stage(StageRecord("generate", state.prompt_id, "complete", cache_hit=all(hits),
                                 artifacts=artifacts, detail=details))

    def _evaluate(self, states: list[PromptState], methods: list[Mode], run_dir: Path,
                  writer: ManifestWriter) -> EvalReport | None:
        scored = [s for s in states if s.has_images]
        if not scored or not methods:
            writer.stage(StageRecord("evaluate", None, "skipped", detail={"reason": "no prompts with images"}))
            return None
        refs: dict[str, list[Path]] = {}
        for s in scored:
            ref_dir = run_dir / "refs" / s.prompt_id
            ref_dir.mkdir(parents=True, exist_ok=True)
            refs[s.prompt_id] = []
            for i, (ref, path) in enumerate(s.source_paths.items()):
                dest = ref_dir / f"{i}_{path.name}"
                shutil.copyfile(path, dest)
                refs[s.prompt_id].append(dest)

        texts = {s.prompt_id: build_output_prompt(s.prompt, s.concepts, Mode.EXTRACTION_DIRECTLY).text for s in scored}
        embedder = self.backends.embedder
        key = _digest(["evaluate", embedder.backend_id,
                       {m.value: {s.prompt_id: s.output_keys[m.value] for s in scored} for m in methods},
                       {pid: [file_sha256(p) for p in ps] for pid, ps in refs.items()}, texts])
        cached = self.cache_dir / "eval" / f"{key}.json"
        hit = cached.is_file()
        if hit:
            report = EvalReport.read(cached)
        else:
            runs = [
                MethodRun(m.value, [
                    PromptRun(s.prompt_id, [load_image(p) for p in s.outputs[m.value]],
                              [load_image(p) for p in refs[s.prompt_id]], texts[s.prompt_id])
                    for s in scored
                ])
                for m in methods
            ]
            report = build_report(runs, embedder)
            report.write(cached)
        report_path = report.write(run_dir / "report.json")
        writer.manifest.report = str(report_path)
        writer.stage(StageRecord("evaluate", None, "complete", cache_hit=hit,
                                 artifacts=[str(report_path), str(report_path.with_suffix(".txt"))]
                                 + [str(p) for ps in refs.values() for p in ps],
                                 detail={"rows": {k: v.as_dict() for k, v in report.rows.items()}}))
        return report

    def run(self, prompt_file: str | Path, methods: list[str] | None = None,
            run_id: str | None = None) -> RunManifest:
        prompt_file = Path(prompt_file)
        prompts = load_prompts(prompt_file)
        modes = [Mode.parse(m) for m in (methods or self.config.generate.methods)]
        states: dict[str, PromptState] = {}
        for p in prompts:
            pid = prompt_hash(serialize_prompt(p))
            states.setdefault(pid, PromptState(p, pid, prompt_file.parent))

        now = datetime.now(timezone.utc)
        run_id = run_id or f"{now.strftime('%Y%m%dT%H%M%SZ')}-{uuid.uuid4().hex[:6]}"
        run_dir = self.workdir / "runs" / run_id
        run_dir.mkdir(parents=True, exist_ok=False)
        manifest = RunManifest(run_id, now.isoformat(), run_dir, str(prompt_file),
                               {pid: s.serialized for pid, s in states.items()},
                               self.config.fingerprint(), self.config.profile)
        writer = ManifestWriter(manifest)
        with FileLock(str(run_dir / ".lock"), timeout=0):
            writer.start()
            stage = "validate"
            try:
                for s in states.values():
                    stage = "validate"
                    validate_prompt(s.prompt, s.base_dir)
                    writer.stage(StageRecord("validate", s.prompt_id, "complete",
                                             detail={"images": len(s.prompt.image_refs)}))
                    if not s.has_images:
                        for skipped in ("extract", "priors", "finetune"):
                            writer.stage(StageRecord(skipped, s.prompt_id, "skipped",
                                                     detail={"reason": "prompt has no images"}))
                    else:
                        stage = "extract"
                        self._concepts(s, writer)
                        stage = "finetune"
                        self._finetune(s, modes, writer)
                    stage = "generate"
                    self._generate(s, modes, run_dir, writer)
                stage = "evaluate"
                self._evaluate(list(states.values()), modes, run_dir, writer)
            except Exception as exc:
                log.error("stage %s failed: %s", stage, exc)
                writer.stage(StageRecord(stage, None, "failed", detail={"error": f"{type(exc).__name__}: {exc}"}))
                writer.end("failed", failed_stage=stage, error=str(exc))
                raise StageError(stage, exc) from exc
            writer.end("complete")
        return manifest


def pipeline(prompt_file: str | Path, config: Config, workdir: str | Path = "mmcustom-work",
             backends: Backends | None = None, methods: list[str] | None = None) -> RunManifest:
    return Pipeline(config, workdir, backends).run(prompt_file, methods)


def concepts_from_snapshot(plan: dict) -> dict[str, ConceptSpec]:
    """Rebuild text-only concept specs (no images) from a handle's plan snapshot."""
    out = {}
    for c in plan["concepts"]:
        triple = SemanticTriple.from_dict(c["triple"])
        out[c["image_ref"]] = ConceptSpec(torch.zeros(0), triple, make_composite(c["token"], triple.foreground),
                                          image_ref=c["image_ref"])
    return out
