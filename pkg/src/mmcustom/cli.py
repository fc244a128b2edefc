"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 backend failure, 4 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .backends import build_backends
from .config import Config, validate_config
from .errors import (
    BackendUnavailable,
    ConfigError,
    InvalidConfig,
    InvalidRequest,
    MMCustomError,
    PromptError,
    StageError,
    UndecodableImage,
    UnknownModelHandle,
)
from .evalkit import MethodRun, PromptRun, build_report
from .finetune import FinetunedModelHandle
from .generate import PRETRAINED, Mode, build_output_prompt, make_request, prompt_hash, sample
from .images import load_image, save_tensor_png
from .mmprompt import load_prompts, serialize_prompt, validate_prompt
from .pipeline import Pipeline, PromptState, concepts_from_snapshot
from .priorkit import ConceptSpec, make_composite

EXIT_OK, EXIT_VALIDATION, EXIT_BACKEND, EXIT_STAGE = 0, 2, 3, 4

log = logging.getLogger("mmcustom")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file")
    common.add_argument("--profile", choices=["desk", "full"], help="override the config profile")
    common.add_argument("--workdir", type=Path, default=Path("mmcustom-work"), help="cache and run root")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mmcustom", description="Multi-modal prompt customization pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common], help="extract the main object of an image")
    p.add_argument("image", type=Path)
    p.add_argument("--k", type=int, help="number of language-model inquiries")
    p.add_argument("--no-cache", action="store_true")

    p = sub.add_parser("priors", parents=[common], help="generate prior samples for each prompt image")
    p.add_argument("--prompt", type=Path, required=True)

    p = sub.add_parser("finetune", parents=[common], help="finetune on the images of each prompt")
    p.add_argument("--prompt", type=Path, required=True)
    p.add_argument("--strategy", choices=["db", "cd"])
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="directory to copy the model handle into")

    p = sub.add_parser("generate", parents=[common], help="sample images for each prompt")
    p.add_argument("--prompt", type=Path, required=True)
    p.add_argument("--model", required=True, help="model handle (dir or handle.json) or 'pretrained'")
    p.add_argument("--mode", choices=["full", "extract", "token"], default="full")
    p.add_argument("-n", "--num-images", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--run-id", help="output subdirectory name (defaults to the method name)")

    p = sub.add_parser("evaluate", parents=[common], help="score generated images against references")
    p.add_argument("--run", type=Path, required=True, help="RUN/<method>/<prompt_hash>/*.png")
    p.add_argument("--refs", type=Path, required=True, help="REFS/<prompt_hash>/*.png")
    p.add_argument("--report", type=Path, required=True)

    for name, helptext in (("pipeline", "run every stage"), ("ablate", "run all three methods and compare")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--prompt", type=Path, required=True)
    return parser


def _load_config(args: argparse.Namespace, **finetune_overrides) -> Config:
    overrides = {"finetune": finetune_overrides} if finetune_overrides else None
    return validate_config(args.config, profile=args.profile, overrides=overrides)


def _prompt_states(pipe: Pipeline, prompt_file: Path) -> list[PromptState]:
    states: dict[str, PromptState] = {}
    for p in load_prompts(prompt_file):
        validate_prompt(p, prompt_file.parent)
        pid = prompt_hash(serialize_prompt(p))
        states.setdefault(pid, PromptState(p, pid, prompt_file.parent))
    return list(states.values())


class _NullWriter:
    """Stands in for the run manifest when a single stage runs outside a pipeline."""

    def stage(self, record) -> None:
        log.info("%s %s %s cache_hit=%s", record.stage, record.prompt_id, record.status, record.cache_hit)


def cmd_extract(args: argparse.Namespace) -> int:
    config = _load_config(args)
    if args.k is not None:
        config.extraction.k = args.k
    if args.no_cache:
        config.extraction.cache = False
    pipe = Pipeline(config, args.workdir)
    triple, _, _ = pipe.extract(str(args.image.resolve()))
    print(f"foreground: {triple.foreground}")
    print(f"background: {triple.background or 'None'}")
    print(f"action: {triple.action or 'None'}")
    return EXIT_OK


def cmd_priors(args: argparse.Namespace) -> int:
    pipe = Pipeline(_load_config(args), args.workdir)
    for state in _prompt_states(pipe, args.prompt):
        if state.has_images:
            pipe._concepts(state, _NullWriter())
            for ref, store in state.prior_stores.items():
                print(f"{ref}\t{state.concepts[ref].triple.foreground}\t{store}")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    config = _load_config(args, strategy=args.strategy, steps=args.steps, seed=args.seed, **{"lambda": args.lambda_})
    pipe = Pipeline(config, args.workdir)
    for state in _prompt_states(pipe, args.prompt):
        if not state.has_images:
            log.warning("prompt %s has no images; nothing to finetune", state.prompt_id)
            continue
        pipe._concepts(state, _NullWriter())
        pipe._finetune(state, [Mode.FULL], _NullWriter())
        handle = state.handles[Mode.FULL.value]
        if args.out is not None:
            dest = args.out / state.prompt_id
            dest.mkdir(parents=True, exist_ok=True)
            handle.write(dest / "handle.json")
        print(f"{state.prompt_id}\t{handle.checkpoint.parent}\tfinal_loss={handle.loss_trace[-1]:.6g}")
    return EXIT_OK


def _concepts_for_generation(pipe: Pipeline, state: PromptState, handle: FinetunedModelHandle | None
                             ) -> dict[str, ConceptSpec]:
    if handle is not None:
        concepts = concepts_from_snapshot(handle.plan)
        if all(ref in concepts for ref in state.prompt.image_refs):
            return concepts
    concepts = {}
    tokens = pipe.config.finetune.tokens
    for j, ref in enumerate(dict.fromkeys(state.prompt.image_refs)):
        triple, _, _ = pipe.extract(ref, state.base_dir)
        concepts[ref] = ConceptSpec(torch.zeros(0), triple, make_composite(tokens[j % len(tokens)], triple.foreground),
                                    image_ref=ref)
    return concepts


def cmd_generate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    pipe = Pipeline(config, args.workdir)
    mode = Mode.parse(args.mode)
    handle = None if args.model == "pretrained" else FinetunedModelHandle.read(args.model)
    g = config.generate
    out_root = args.out or args.workdir / "generated"
    run_id = args.run_id or mode.value
    for state in _prompt_states(pipe, args.prompt):
        concepts = _concepts_for_generation(pipe, state, handle)
        resolved = build_output_prompt(state.prompt, concepts, mode)
        request = make_request(
            resolved, mode, PRETRAINED if handle is None else handle,
            num_images=args.num_images or g.num_images,
            inference_steps=args.steps or g.steps,
            guidance_scale=g.guidance if args.guidance is None else args.guidance,
            seed=g.seed if args.seed is None else args.seed,
        )
        out_dir = out_root / run_id / state.prompt_id
        for image in sample(request, pipe.backends.diffusion):
            print(save_tensor_png(image.image, out_dir / f"{image.seed}.png"))
        eval_text = build_output_prompt(state.prompt, concepts, Mode.EXTRACTION_DIRECTLY).text
        (out_dir / "prompt.json").write_text(json.dumps(
            {"prompt": state.serialized, "resolved": resolved.text, "eval_text": eval_text}, indent=2))
    return EXIT_OK


def _pngs(directory: Path) -> list[Path]:
    return sorted(directory.glob("*.png"), key=lambda p: (len(p.stem), p.stem))


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    backends = build_backends(config.backend)
    runs = []
    for method_dir in sorted(d for d in args.run.iterdir() if d.is_dir()):
        prompts = []
        for prompt_dir in sorted(d for d in method_dir.iterdir() if d.is_dir()):
            meta_path = prompt_dir / "prompt.json"
            meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
            text = meta.get("eval_text") or meta.get("resolved")
            ref_dir = args.refs / prompt_dir.name
            if not text or not ref_dir.is_dir():
                log.warning("skipping %s: no reference images or prompt text", prompt_dir)
                continue
            prompts.append(PromptRun(
                prompt_dir.name,
                [load_image(p) for p in _pngs(prompt_dir)],
                [load_image(p) for p in _pngs(ref_dir)],
                text,
            ))
        if prompts:
            runs.append(MethodRun(method_dir.name, prompts))
    report = build_report(runs, backends.embedder)
    path = report.write(args.report)
    print(report.to_text())
    print(f"report written to {path}")
    return EXIT_OK


def _cmd_pipeline(args: argparse.Namespace, methods: list[str] | None) -> int:
    pipe = Pipeline(_load_config(args), args.workdir)
    manifest = pipe.run(args.prompt, methods)
    for record in manifest.stages:
        tag = " (cached)" if record.cache_hit else ""
        print(f"{record.stage:<9} {record.prompt_id or '-':<16} {record.status}{tag}")
    if manifest.report:
        print()
        print(Path(manifest.report).with_suffix(".txt").read_text())
    print(f"run directory: {manifest.run_dir}")
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    return _cmd_pipeline(args, None)


def cmd_ablate(args: argparse.Namespace) -> int:
    return _cmd_pipeline(args, [m.value for m in Mode])


COMMANDS = {
    "extract": cmd_extract,
    "priors": cmd_priors,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
    "ablate": cmd_ablate,
}

_VALIDATION = (ConfigError, PromptError, InvalidConfig, InvalidRequest, UndecodableImage, UnknownModelHandle,
               FileNotFoundError)


def exit_code_for(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, BackendUnavailable):
        return EXIT_BACKEND
    if isinstance(cause, _VALIDATION) and (not isinstance(exc, StageError) or exc.stage == "validate"):
        return EXIT_VALIDATION
    if isinstance(exc, StageError):
        return EXIT_STAGE
    if isinstance(exc, MMCustomError):
        return EXIT_STAGE
    raise exc


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (MMCustomError, FileNotFoundError) as exc:
        code = exit_code_for(exc)
        if isinstance(exc, ConfigError):
            for key, msg in exc.errors:
                print(f"config error: {key}: {msg}", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
