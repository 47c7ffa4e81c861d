"""Completion backends, prompt construction, and code extraction.

A backend is anything with ``complete(GenRequest) -> list[Completion]``.
Two ship here: a remote HTTP chat endpoint and a deterministic scripted
backend for hermetic tests. Every call funnels through
``sample_completions`` so batching and audit logging behave the same way
regardless of backend.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import re
import string
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Callable

import requests

from .program import ProgramText
from .verifier import ConfigError, VerificationReport

if TYPE_CHECKING:
    from .datapool import ExemplarPool

logger = logging.getLogger(__name__)

DEFAULT_EXEMPLAR_CAP = 8
DEFAULT_BATCH = 32
CODE_BLOCK_RE = re.compile(r"```[A-Za-z0-9_+\-]*[ \t]*\n(.*?)```", re.DOTALL)


class BackendError(Exception):
    """Remote backend unreachable after retries; retryable at campaign level."""


@dataclass(frozen=True)
class Message:
    role: str  # system | user | assistant
    content: str


@dataclass(frozen=True)
class GenRequest:
    messages: tuple[Message, ...]
    n: int = 1
    temperature: float = 0.7
    top_p: float = 1.0
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")

    def prompt_hash(self) -> str:
        return hashlib.sha256(canonical_request_json(self).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Completion:
    text: str
    truncated: bool = False


def canonical_request_json(req: GenRequest) -> str:
    payload = {
        "messages": [{"role": m.role, "content": m.content} for m in req.messages],
        "n": req.n,
        "temperature": req.temperature,
        "top_p": req.top_p,
        "max_tokens": req.max_tokens,
    }
    return json.dumps(payload, sort_keys=True, ensure_ascii=False)


def request_from_json(text: str) -> GenRequest:
    data = json.loads(text)
    return GenRequest(
        messages=tuple(Message(m["role"], m["content"]) for m in data["messages"]),
        n=data["n"],
        temperature=data["temperature"],
        top_p=data["top_p"],
        max_tokens=data["max_tokens"],
    )


@dataclass
class BackendConfig:
    url: str = ""
    model: str = ""
    api_key_env: str = ""
    batch: int = DEFAULT_BATCH
    retries: int = 3
    backoff_s: float = 1.0
    request_timeout_s: float = 300.0


class AuditLog:
    """Append-only line-delimited record of every backend call.

    Each record carries the full request so that any historical GenRequest
    can be reconstructed byte-identically from the log.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._records: list[dict] = []
        self.total_calls = 0
        self.total_responses = 0

    def append(self, req: GenRequest, completions: list[Completion], error: str | None = None) -> None:
        record = {
            "ts": time.time(),
            "prompt_hash": req.prompt_hash(),
            "request": canonical_request_json(req),
            "responses": [c.text for c in completions],
            "truncated": [c.truncated for c in completions],
        }
        if error:
            record["error"] = error
        line = json.dumps(record, sort_keys=True, ensure_ascii=False)
        with self._lock:
            self._records.append(record)
            self.total_calls += 1
            self.total_responses += len(completions)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")

    def records(self) -> list[dict]:
        with self._lock:
            return list(self._records)

    @staticmethod
    def load(path: str | Path) -> list[dict]:
        out = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    out.append(json.loads(line))
        return out

    @staticmethod
    def replay_request(record: dict) -> GenRequest:
        return request_from_json(record["request"])


class HttpBackend:
    """OpenAI-style chat completion endpoint with bounded retries."""

    def __init__(self, config: BackendConfig):
        if not config.url:
            raise ConfigError("backend.url is not configured")
        self.config = config

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, req: GenRequest) -> list[Completion]:
        payload = {
            "model": self.config.model,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "n": req.n,
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
        }
        last_err: Exception | None = None
        for attempt in range(self.config.retries):
            try:
                resp = requests.post(
                    self.config.url,
                    json=payload,
                    headers=self._headers(),
                    timeout=self.config.request_timeout_s,
                )
                if resp.status_code == 200:
                    return self._parse(resp.json())
                last_err = BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                if resp.status_code not in (429, 500, 502, 503, 504):
                    break
            except requests.RequestException as exc:
                last_err = exc
            time.sleep(self.config.backoff_s * (2**attempt))
        raise BackendError(f"backend unreachable after {self.config.retries} attempts: {last_err}")

    @staticmethod
    def _parse(data: dict) -> list[Completion]:
        out = []
        for choice in data.get("choices", []):
            text = choice.get("message", {}).get("content")
            if text is None:
                text = choice.get("text", "")
            truncated = choice.get("finish_reason") == "length"
            if truncated:
                logger.warning("completion truncated at max_tokens")
            out.append(Completion(text, truncated))
        return out


class ScriptedBackend:
    """Deterministic mock backend for hermetic tests.

    Responses can be keyed exactly by (prompt hash, call index) or supplied
    as a canned sequence consumed one call at a time; an optional fallback
    callable handles anything unscripted.
    """

    def __init__(
        self,
        canned: list[list[str]] | None = None,
        fallback: Callable[[GenRequest, int], list[str]] | None = None,
    ):
        self.canned = list(canned or [])
        self.fallback = fallback
        self.keyed: dict[tuple[str, int], list[str]] = {}
        self._hash_counts: dict[str, int] = {}
        self.calls = 0
        self.requests: list[GenRequest] = []
        self._lock = threading.Lock()

    def script(self, prompt_hash: str, call_index: int, responses: list[str]) -> None:
        self.keyed[(prompt_hash, call_index)] = list(responses)

    def complete(self, req: GenRequest) -> list[Completion]:
        with self._lock:
            self.calls += 1
            call_no = self.calls
            self.requests.append(req)
            h = req.prompt_hash()
            idx = self._hash_counts.get(h, 0)
            self._hash_counts[h] = idx + 1
            if (h, idx) in self.keyed:
                texts = self.keyed[(h, idx)]
            elif self.canned:
                texts = self.canned.pop(0)
            elif self.fallback is not None:
                texts = self.fallback(req, call_no - 1)
            else:
                texts = []
        return [Completion(t) for t in texts[: req.n]]


def sample_completions(
    backend,
    req: GenRequest,
    batch: int = DEFAULT_BATCH,
    audit: AuditLog | None = None,
) -> list[str]:
    """Draw up to req.n completions in sequential waves of at most `batch`."""
    texts: list[str] = []
    remaining = req.n
    while remaining > 0:
        wave = min(batch, remaining)
        wave_req = replace(req, n=wave)
        try:
            completions = backend.complete(wave_req)
        except BackendError as exc:
            if audit:
                audit.append(wave_req, [], error=str(exc))
            raise
        if audit:
            audit.append(wave_req, completions)
        texts.extend(c.text for c in completions)
        remaining -= wave
    return texts


# ---------------------------------------------------------------------------
# Exemplars


class PoolKind(str, Enum):
    TRANSLATION = "translation"
    ERRORFIX = "errorfix"
    EXPLOIT = "exploit"


@dataclass(frozen=True)
class ExemplarRef:
    pool_kind: PoolKind
    record_id: str
    payload: dict


def _load_seed_payloads() -> dict[str, list[dict]]:
    data = resources.files("veriloop").joinpath("data/seed_exemplars.json").read_text("utf-8")
    return json.loads(data)


_SEED_CACHE: dict[str, list[dict]] | None = None


def seed_exemplars(kind: PoolKind) -> list[ExemplarRef]:
    """Hand-written bootstrap exemplars, used when a pool is empty."""
    global _SEED_CACHE
    if _SEED_CACHE is None:
        _SEED_CACHE = _load_seed_payloads()
    payloads = _SEED_CACHE.get(kind.value, [])
    return [
        ExemplarRef(kind, f"seed-{kind.value}-{i}", dict(p)) for i, p in enumerate(payloads)
    ]


def sample_exemplars(
    pool: "ExemplarPool | None",
    kind: PoolKind,
    seed: int | str,
    cap: int = DEFAULT_EXEMPLAR_CAP,
    exclude_task: str | None = None,
) -> list[ExemplarRef]:
    """Pick ceil(|pool|/2) distinct records uniformly, capped, deterministic.

    Records contamination-flagged for `exclude_task` are masked out first.
    An empty (or fully masked) pool falls back to the hand-written seeds.
    """
    records = list(pool.records) if pool is not None else []
    if exclude_task is not None:
        records = [r for r in records if exclude_task not in r.contamination_flags]
    if not records:
        return seed_exemplars(kind)
    count = min(cap, math.ceil(len(records) / 2))
    rng = random.Random(f"exemplars:{seed}")
    chosen = rng.sample(records, count)
    return [ExemplarRef(kind, r.record_id, dict(r.payload)) for r in chosen]


# ---------------------------------------------------------------------------
# Prompt construction


class PromptKind(str, Enum):
    EXPLORATION = "exploration"
    REFINEMENT = "refinement"
    EXPLOIT = "exploit"
    COMPARISON = "comparison"
    CODEGEN = "codegen"
    CONTAMINATION = "contamination"


_SECTION_RE = re.compile(r"^<<<(system|user|exemplar)>>>$", re.MULTILINE)


class TemplateSet:
    """Prompt templates, one external text file per prompt kind.

    Files contain ``<<<system>>>`` / ``<<<exemplar>>>`` / ``<<<user>>>``
    sections; a file without markers is all user text.
    """

    def __init__(self, directory: str | Path | None = None):
        self._sections: dict[PromptKind, dict[str, str]] = {}
        for kind in PromptKind:
            if directory is not None:
                text = (Path(directory) / f"{kind.value}.txt").read_text("utf-8")
            else:
                text = (
                    resources.files("veriloop")
                    .joinpath(f"templates/{kind.value}.txt")
                    .read_text("utf-8")
                )
            self._sections[kind] = self._split(text)

    @staticmethod
    def _split(text: str) -> dict[str, str]:
        sections: dict[str, str] = {}
        matches = list(_SECTION_RE.finditer(text))
        if not matches:
            return {"user": text.strip("\n")}
        for i, m in enumerate(matches):
            end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
            sections[m.group(1)] = text[m.end() : end].strip("\n")
        return sections

    def section(self, kind: PromptKind, name: str) -> str | None:
        return self._sections[kind].get(name)


_DEFAULT_TEMPLATES: TemplateSet | None = None


def default_templates() -> TemplateSet:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = TemplateSet()
    return _DEFAULT_TEMPLATES


def _substitute(template_text: str, **values: str) -> str:
    try:
        return string.Template(template_text).substitute(**values)
    except KeyError as exc:
        raise ConfigError(f"prompt template is missing variable {exc}") from exc


def fence(text: str, lang: str = "rust") -> str:
    return f"```{lang}\n{text}\n```"


def render_report_errors(report: VerificationReport) -> str:
    """Error-message block handed to the refinement prompt."""
    lines = []
    for diag in report.messages:
        loc = f" (line {diag.line})" if diag.line is not None and not diag.message.startswith("line ") else ""
        lines.append(f"{diag.severity.value.lower()}: {diag.message}{loc}")
    lines.append(
        f"verification results:: {report.n_ver} verified, {report.n_unver} errors"
    )
    return "\n".join(lines)


def build_prompt(
    kind: PromptKind,
    subject,
    exemplars: list[ExemplarRef] | None = None,
    templates: TemplateSet | None = None,
) -> GenRequest:
    """Render the prompt for `kind` with few-shot exemplars.

    Exploration and codegen exemplars become alternating user/assistant
    turns; refinement and exploit templates embed their examples inside the
    prompt text, matching their published formats. Deterministic in all
    arguments.
    """
    tpl = templates or default_templates()
    exemplars = exemplars or []
    user_tpl = tpl.section(kind, "user")
    if user_tpl is None:
        raise ConfigError(f"template for {kind.value} has no user section")
    messages: list[Message] = []

    if kind in (PromptKind.EXPLORATION, PromptKind.CODEGEN):
        program = _expect_program(subject, kind)
        for ex in exemplars:
            shown = ex.payload.get("target_spec") or ex.payload.get("source") or ex.payload.get("target", "")
            if kind is PromptKind.CODEGEN:
                shown = ex.payload.get("target_spec") or ex.payload.get("target") or shown
            messages.append(Message("user", _substitute(user_tpl, program=shown)))
            messages.append(Message("assistant", fence(ex.payload.get("target", ""))))
        messages.append(Message("user", _substitute(user_tpl, program=program.body)))

    elif kind is PromptKind.REFINEMENT:
        if not (isinstance(subject, tuple) and len(subject) == 2):
            raise ValueError("refinement prompt needs (program, report)")
        program, report = subject
        block_tpl = tpl.section(kind, "exemplar") or ""
        blocks = [
            _substitute(
                block_tpl,
                index=str(i + 1),
                incorrect_code=ex.payload.get("program", ""),
                error_message=ex.payload.get("errors", ""),
                corrected_code=ex.payload.get("corrected", ""),
            )
            for i, ex in enumerate(exemplars)
        ]
        system_tpl = tpl.section(kind, "system") or "${examples}"
        messages.append(Message("system", _substitute(system_tpl, examples="\n\n".join(blocks))))
        messages.append(
            Message(
                "user",
                _substitute(user_tpl, program=program.body, error_message=render_report_errors(report)),
            )
        )

    elif kind is PromptKind.EXPLOIT:
        program = _expect_program(subject, kind)
        block_tpl = tpl.section(kind, "exemplar") or ""
        blocks = [
            _substitute(block_tpl, spec=ex.payload.get("spec", ""), exploit=ex.payload.get("exploit", ""))
            for ex in exemplars
        ]
        messages.append(
            Message("user", _substitute(user_tpl, examples="\n\n".join(blocks), program=program.body))
        )

    elif kind is PromptKind.COMPARISON:
        if not (isinstance(subject, tuple) and len(subject) == 2):
            raise ValueError("comparison prompt needs (source, candidate)")
        source, candidate = subject
        messages.append(
            Message("user", _substitute(user_tpl, rust_code=candidate.body, dafny_code=source.body))
        )

    elif kind is PromptKind.CONTAMINATION:
        if not (isinstance(subject, tuple) and len(subject) == 2):
            raise ValueError("contamination prompt needs (database, task program)")
        database, task_program = subject
        db_text = database.body if isinstance(database, ProgramText) else str(database)
        messages.append(
            Message("user", _substitute(user_tpl, database=db_text, program=task_program.body))
        )

    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(f"unknown prompt kind {kind}")

    return GenRequest(messages=tuple(messages))


def _expect_program(subject, kind: PromptKind) -> ProgramText:
    if isinstance(subject, ProgramText):
        return subject
    raise ValueError(f"{kind.value} prompt needs a single program subject")


def extract_code(completion: str) -> str | None:
    """Last fenced code block of a completion, fence markers stripped."""
    matches = CODE_BLOCK_RE.findall(completion)
    if not matches:
        return None
    return matches[-1].strip("\n")
