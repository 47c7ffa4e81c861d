"""Program text values: role spans, normalization, and spec fingerprints.

Programs flow through the whole engine as plain text plus an optional map
of role spans (spec / implementation / proof). Everything downstream that
needs to compare "did the spec change" or "is this the same program" goes
through the helpers here so the notion of equality is defined in one place.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

ROLE_SPEC = "spec"
ROLE_IMPLEMENTATION = "implementation"
ROLE_PROOF = "proof"
ROLES = (ROLE_SPEC, ROLE_IMPLEMENTATION, ROLE_PROOF)

# Leading lines in this form mark an inline spec header (used by the toy
# corpus format); everything else relies on requires/ensures clause scanning.
SPEC_HEADER_RE = re.compile(r"^;;\s*spec:")

CLAUSE_KEYWORDS = ("requires", "ensures", "decreases", "recommends", "invariant")


@dataclass(frozen=True)
class Span:
    """Half-open [start, end) character range into a program body."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid span ({self.start}, {self.end})")

    def overlaps(self, other: "Span") -> bool:
        return self.start < other.end and other.start < self.end


@dataclass
class ProgramText:
    """A source or candidate program with optional role-tagged spans."""

    source_id: str
    body: str
    parts: dict[str, Span] | None = None

    def __post_init__(self) -> None:
        if self.parts:
            spans = []
            for role, span in self.parts.items():
                if role not in ROLES:
                    raise ValueError(f"unknown program role {role!r}")
                if span.end > len(self.body):
                    raise ValueError(f"{role} span exceeds body length")
                spans.append(span)
            spans.sort(key=lambda s: s.start)
            for a, b in zip(spans, spans[1:]):
                if a.overlaps(b):
                    raise ValueError("program role spans overlap")

    def part(self, role: str) -> str | None:
        if not self.parts or role not in self.parts:
            return None
        span = self.parts[role]
        return self.body[span.start : span.end]


@dataclass(frozen=True)
class SpecClauses:
    requires: tuple[str, ...] = ()
    ensures: tuple[str, ...] = ()
    header: tuple[str, ...] = ()


def normalize_body(text: str) -> str:
    """Canonical form used for dedup: trailing whitespace stripped per line."""
    return "\n".join(line.rstrip() for line in text.splitlines())


def body_hash(text: str) -> str:
    return hashlib.sha256(normalize_body(text).encode("utf-8")).hexdigest()


def strip_comments(text: str) -> str:
    """Remove // line comments and /* */ blocks.

    Not string-literal aware; good enough for marker scanning where a rare
    false hit inside a string constant errs on the safe (rejecting) side.
    """
    text = re.sub(r"/\*.*?\*/", " ", text, flags=re.DOTALL)
    return re.sub(r"//[^\n]*", "", text)


def _clause_block(lines: list[str], start: int) -> tuple[list[str], int]:
    """Collect a requires/ensures block starting at lines[start]."""
    head = lines[start].strip()
    keyword = head.split()[0] if head else ""
    collected = []
    inline = head[len(keyword) :].strip()
    if inline:
        collected.append(inline)
    i = start + 1
    while i < len(lines):
        stripped = lines[i].strip()
        if not stripped:
            break
        first = stripped.split()[0].rstrip(":")
        if first in CLAUSE_KEYWORDS or stripped.startswith("{") or stripped.endswith("{"):
            break
        if re.match(r"^(pub\s+)?(spec\s+|proof\s+|exec\s+)?fn\b", stripped):
            break
        collected.append(stripped)
        i += 1
    return collected, i


def spec_clauses(body: str) -> SpecClauses:
    """Extract requires/ensures clause text and any inline spec header lines."""
    stripped = strip_comments(body)
    lines = stripped.splitlines()
    requires: list[str] = []
    ensures: list[str] = []
    header = [ln.strip() for ln in body.splitlines() if SPEC_HEADER_RE.match(ln.strip())]
    i = 0
    while i < len(lines):
        word = lines[i].strip().split()[0] if lines[i].strip() else ""
        if word == "requires":
            block, i = _clause_block(lines, i)
            requires.extend(block)
            continue
        if word == "ensures":
            block, i = _clause_block(lines, i)
            ensures.extend(block)
            continue
        i += 1
    return SpecClauses(tuple(requires), tuple(ensures), tuple(header))


def _fingerprint(parts: tuple[str, ...]) -> str:
    joined = "\n".join(re.sub(r"\s+", " ", p).strip().rstrip(",") for p in parts)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def ensures_fingerprint(program: ProgramText | str) -> str:
    body = program if isinstance(program, str) else program.body
    clauses = spec_clauses(body)
    return _fingerprint(clauses.header + clauses.ensures)


def requires_fingerprint(program: ProgramText | str) -> str:
    body = program if isinstance(program, str) else program.body
    clauses = spec_clauses(body)
    return _fingerprint(clauses.requires)


def implementation_fingerprint(program: ProgramText | str) -> str:
    """Fingerprint of the implementation, ignoring spec and proof-only lines.

    Prefers an explicit implementation span; otherwise keeps lines that are
    neither clause lines nor proof annotations (invariant/assert/proof/decreases).
    """
    if isinstance(program, ProgramText):
        span_text = program.part(ROLE_IMPLEMENTATION)
        if span_text is not None:
            return _fingerprint(tuple(span_text.splitlines()))
        body = program.body
    else:
        body = program
    stripped = strip_comments(body)
    kept: list[str] = []
    in_clause = False
    for line in stripped.splitlines():
        s = line.strip()
        if not s:
            in_clause = False
            continue
        if SPEC_HEADER_RE.match(s):
            continue
        word = s.split()[0].rstrip(":")
        if word in ("requires", "ensures", "recommends"):
            in_clause = True
            continue
        if word in ("invariant", "decreases", "assert", "proof", "assume"):
            in_clause = word in ("invariant", "decreases")
            continue
        if in_clause and not (s.startswith("{") or s.endswith("{") or re.match(r"^(pub\s+)?fn\b", s)):
            continue
        in_clause = False
        kept.append(s)
    return _fingerprint(tuple(kept))


def extract_spec(program: ProgramText) -> ProgramText | None:
    """Spec-only view of a program: the incomplete program an exploit completes.

    Uses the explicit spec span when present; otherwise keeps everything up to
    the opening brace that follows the last ensures clause. Returns None when
    no specification is recognizable.
    """
    span_text = program.part(ROLE_SPEC)
    if span_text is not None and span_text.strip():
        return ProgramText(source_id=f"{program.source_id}/spec", body=span_text)
    clauses = spec_clauses(program.body)
    if clauses.header:
        return ProgramText(source_id=f"{program.source_id}/spec", body="\n".join(clauses.header))
    if not clauses.ensures and not clauses.requires:
        return None
    lines = program.body.splitlines()
    last_clause = -1
    for i, line in enumerate(lines):
        word = line.strip().split()[0] if line.strip() else ""
        if word in ("requires", "ensures"):
            last_clause = i
    cut = len(lines)
    for i in range(last_clause + 1, len(lines)):
        if "{" in lines[i]:
            cut = i + 1
            break
    spec_body = "\n".join(lines[:cut])
    if not spec_body.strip():
        return None
    return ProgramText(source_id=f"{program.source_id}/spec", body=spec_body)
