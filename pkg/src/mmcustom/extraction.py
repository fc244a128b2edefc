"""Main-object extraction: caption an image, ask a language model to split the
caption into foreground / background / action several times, and keep the
most frequent well-formed answer.
"""

from __future__ import annotations

import json
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

from filelock import FileLock

from .errors import AllResponsesMalformed, BackendUnavailable, MMCustomError
from .images import file_sha256, load_image
from .mmprompt import resolve_image_path

if TYPE_CHECKING:
    from .backends.contracts import CaptionerBackend, LanguageModelBackend

DEFAULT_K = 5
DEFAULT_TEMPERATURE = 0.7

TEMPLATE_SLOT = "xxx"
ANALYSIS_TEMPLATE = "\n\n".join(
    [
        "I will give you some examples.",
        'Given a sentence "arafed dog sitting on the beach with its tongue out", the foreground is '
        '"arafed dog with its tongue out", the background is "beach" and the action is "sitting".',
        'Given a sentence "there is a cat and a dog that are playing together", the foreground is '
        '"a cat and a dog", the background is "None" and the action is "playing".',
        'Given a sentence "there are two cats that are playing with each other", the foreground is '
        '"two cats", the background is "None" and the action is "playing with each other".',
        'Given a sentence "there is a cat on the bench", the foreground is "a cat", the background '
        'is "bench" and the action is "None".',
        'Given a sentence "there is a white sandy beach with cat", the foreground is '
        '"a white sandy beach with cat", the background is "None" and the action is "None".',
        f'Now imitate these, I will give you a sentence "{TEMPLATE_SLOT}" here, and you need to give '
        "me the foreground, background and action.",
    ]
)
_SLOT_AT = ANALYSIS_TEMPLATE.index(f'"{TEMPLATE_SLOT}"') + 1

_FIELD = re.compile(
    r"\b(foreground|background|action)\b(?:\s+is\s*|\s*[:=]\s*)[\"“”]([^\"“”]*)[\"“”]",
    re.IGNORECASE,
)
_TRAILING_PUNCT = re.compile(r"[\s.,;:!?]+$")


@dataclass(frozen=True)
class Caption:
    text: str
    image_ref: str
    backend_id: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("caption text must be non-empty")


@dataclass(frozen=True)
class SemanticTriple:
    foreground: str
    background: str | None = None
    action: str | None = None

    def __post_init__(self) -> None:
        if not self.foreground:
            raise ValueError("foreground must be non-empty")

    def canonical(self) -> str:
        return (
            f'the foreground is "{self.foreground}", the background is "{self.background or "None"}" '
            f'and the action is "{self.action or "None"}".'
        )

    def as_dict(self) -> dict:
        return {"foreground": self.foreground, "background": self.background, "action": self.action}

    @classmethod
    def from_dict(cls, data: dict) -> SemanticTriple:
        return cls(data["foreground"], data.get("background"), data.get("action"))


@dataclass(frozen=True)
class Malformed:
    raw: str
    reason: str


TripleKey = tuple[str, "str | None", "str | None"]


@dataclass
class VoteTally:
    responses: list[str]
    parsed: list[SemanticTriple]
    winner: SemanticTriple
    counts: dict[TripleKey, int]
    caption: Caption | None = None
    arrival: list[int] = field(default_factory=list)

    def winner_count(self) -> int:
        return self.counts[normalize_triple(self.winner)]


def caption_image(image_ref: str, captioner: CaptionerBackend, base_dir: str | Path | None = None) -> Caption:
    image = load_image(resolve_image_path(image_ref, base_dir))
    try:
        text = captioner.caption(image)
    except MMCustomError:
        raise
    except Exception as exc:
        raise BackendUnavailable(f"captioner {captioner.backend_id} failed: {exc}") from exc
    text = (text or "").strip()
    if not text:
        raise BackendUnavailable(f"captioner {captioner.backend_id} returned an empty caption")
    return Caption(text, image_ref, captioner.backend_id)


def build_analysis_prompt(caption: Caption | str) -> str:
    text = caption.text if isinstance(caption, Caption) else caption
    if not text or not text.strip():
        raise ValueError("caption must be non-empty")
    return ANALYSIS_TEMPLATE[:_SLOT_AT] + text + ANALYSIS_TEMPLATE[_SLOT_AT + len(TEMPLATE_SLOT) :]


def _field_value(value: str) -> str | None:
    value = value.strip()
    if not value or value.casefold() == "none":
        return None
    return value


def parse_analysis_response(raw: str) -> SemanticTriple | Malformed:
    """Pull the quoted foreground/background/action values out of free-form text.

    Field order, case and surrounding prose do not matter; the first occurrence
    of each field wins. A missing or "None" foreground makes the response
    Malformed.
    """
    found: dict[str, str] = {}
    for m in _FIELD.finditer(raw or ""):
        found.setdefault(m.group(1).lower(), m.group(2))
    if "foreground" not in found:
        return Malformed(raw, "no foreground field")
    foreground = _field_value(found["foreground"])
    if foreground is None:
        return Malformed(raw, "empty foreground")
    return SemanticTriple(
        foreground,
        _field_value(found.get("background", "None")),
        _field_value(found.get("action", "None")),
    )


def _norm(value: str | None) -> str | None:
    if value is None:
        return None
    return _TRAILING_PUNCT.sub("", " ".join(value.casefold().split()))


def normalize_triple(triple: SemanticTriple) -> TripleKey:
    return (_norm(triple.foreground), _norm(triple.background), _norm(triple.action))


def tally_votes(responses: list[str]) -> VoteTally:
    """Majority vote over responses given in arrival order.

    Ties go to the triple whose first occurrence arrived earliest; the winner
    keeps the surface form of that first occurrence.
    """
    parsed: list[SemanticTriple] = []
    counts: dict[TripleKey, int] = {}
    first: dict[TripleKey, SemanticTriple] = {}
    for raw in responses:
        result = parse_analysis_response(raw)
        if isinstance(result, Malformed):
            continue
        parsed.append(result)
        key = normalize_triple(result)
        counts[key] = counts.get(key, 0) + 1
        first.setdefault(key, result)
    if not parsed:
        raise AllResponsesMalformed(list(responses))
    # dicts keep insertion order, and max() returns the first maximal key
    best = max(counts, key=counts.__getitem__)
    return VoteTally(list(responses), parsed, first[best], counts)


def _inquire(
    llm: LanguageModelBackend,
    prompt: str,
    k: int,
    temperature: float,
    seed: int,
    max_workers: int,
) -> tuple[list[str], list[int]]:
    """Issue k identical queries; return responses in arrival order plus their inquiry indices."""
    arrived: list[tuple[int, str]] = []
    lock = threading.Lock()

    def ask(i: int) -> None:
        try:
            response = llm.complete(prompt, temperature, seed + i)
        except MMCustomError:
            raise
        except Exception as exc:
            raise BackendUnavailable(f"language model {llm.backend_id} failed: {exc}") from exc
        with lock:
            arrived.append((i, response))

    if max_workers > 1 and getattr(llm, "concurrency_safe", False):
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for fut in [pool.submit(ask, i) for i in range(k)]:
                fut.result()
    else:
        for i in range(k):
            ask(i)
    return [r for _, r in arrived], [i for i, _ in arrived]


class ExtractionCache:
    """Line-delimited JSON store of extraction results.

    Keyed by (image content hash, backend id, k); the last record for a key wins.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = FileLock(str(self.path) + ".lock")
        self.hits = 0

    @staticmethod
    def key(image_hash: str, backend_id: str, k: int) -> str:
        return f"{image_hash}|{backend_id}|{k}"

    def get(self, image_hash: str, backend_id: str, k: int) -> dict | None:
        if not self.path.exists():
            return None
        wanted = self.key(image_hash, backend_id, k)
        record = None
        with self._lock:
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                if self.key(rec["image_hash"], rec["backend_id"], rec["k"]) == wanted:
                    record = rec
        if record is not None:
            self.hits += 1
        return record

    def put(self, record: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _tally_from_record(rec: dict, image_ref: str) -> tuple[SemanticTriple, VoteTally]:
    tally = tally_votes(rec["responses"])
    tally.caption = Caption(rec["caption"], image_ref, rec["captioner_id"])
    tally.arrival = rec.get("arrival", list(range(len(rec["responses"]))))
    return SemanticTriple.from_dict(rec["winner"]), tally


def extract_main_object(
    image_ref: str,
    k: int,
    captioner: CaptionerBackend,
    llm: LanguageModelBackend,
    *,
    temperature: float = DEFAULT_TEMPERATURE,
    seed: int = 0,
    max_workers: int = 1,
    cache: ExtractionCache | None = None,
    base_dir: str | Path | None = None,
) -> tuple[SemanticTriple, VoteTally]:
    """Caption ``image_ref`` then run the k-inquiry majority vote over its analysis."""
    if k < 1:
        raise ValueError("k must be >= 1")
    path = resolve_image_path(image_ref, base_dir)
    backend_id = f"{captioner.backend_id}+{llm.backend_id}"
    image_hash = file_sha256(path) if cache is not None and path.is_file() else None
    if image_hash is not None:
        rec = cache.get(image_hash, backend_id, k)
        if rec is not None:
            return _tally_from_record(rec, image_ref)

    caption = caption_image(image_ref, captioner, base_dir)
    responses, arrival = _inquire(llm, build_analysis_prompt(caption), k, temperature, seed, max_workers)
    tally = tally_votes(responses)
    tally.caption = caption
    tally.arrival = arrival
    if image_hash is not None:
        cache.put(
            {
                "image_hash": image_hash,
                "backend_id": backend_id,
                "captioner_id": captioner.backend_id,
                "k": k,
                "caption": caption.text,
                "responses": responses,
                "arrival": arrival,
                "winner": tally.winner.as_dict(),
            }
        )
    return tally.winner, tally
