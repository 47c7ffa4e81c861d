"""Drive an external verification toolchain and turn its output into data.

Verification failure is never an exception here: every run produces a
``VerificationReport`` whose verdict distinguishes verified, failed,
syntax-broken, timed-out, and tool-broken candidates, plus a scalar score
used to rank refinement candidates.
"""

from __future__ import annotations

import logging
import re
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .program import ProgramText

logger = logging.getLogger(__name__)

# Shipped default matches a "N verified, M errors" summary line; toolchain
# output formats drift across versions, so the pattern is configuration.
DEFAULT_SUMMARY_PATTERN = r"verification results::\s*(?P<verified>\d+)\s+verified,\s*(?P<errors>\d+)\s+errors"
# Alternate for toolchains that print "verified: N errors: M" instead.
VERUS_STYLE_SUMMARY_PATTERN = r"verification results::\s*verified:\s*(?P<verified>\d+)\s+errors:\s*(?P<errors>\d+)"

_DIAG_RE = re.compile(r"^(error|warning|note)(?:\[[^\]]*\])?\s*:\s*(.*)$")
_LOCATION_RE = re.compile(r"^\s*-->\s*(?:[^:\s]+):(\d+):(\d+)")
# rustc-style trailer lines summarize, they are not additional failures
_ABORT_RE = re.compile(r"^aborting due to \d+ previous error")


class Verdict(str, Enum):
    VERIFIED = "Verified"
    FAILED = "Failed"
    SYNTAX_ERROR = "SyntaxError"
    TIMEOUT = "Timeout"
    TOOL_ERROR = "ToolError"


class Severity(str, Enum):
    ERROR = "Error"
    WARNING = "Warning"
    NOTE = "Note"


class ConfigError(Exception):
    """Fatal configuration problem (unset binary, bad template, ...)."""


@dataclass(frozen=True)
class Diagnostic:
    severity: Severity
    message: str
    line: int | None = None
    column: int | None = None
    span_text: str | None = None


@dataclass(frozen=True)
class ScoreParams:
    """Error/warning penalties for the verifier-derived node score."""

    alpha: float = 0.1
    beta: float = 0.03
    floor: float = -1.0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("score penalties must be non-negative")


@dataclass(frozen=True)
class VerificationReport:
    verdict: Verdict
    n_ver: int = 0
    n_unver: int = 0
    n_err: int = 0
    n_warn: int = 0
    messages: tuple[Diagnostic, ...] = ()
    raw: str = ""
    elapsed: float = 0.0

    def errors(self) -> tuple[Diagnostic, ...]:
        return tuple(m for m in self.messages if m.severity is Severity.ERROR)


@dataclass
class VerifierConfig:
    """Launch configuration for the external toolchain."""

    bin: str | None = None
    args: list[str] = field(default_factory=list)
    timeout_s: float = 120.0
    summary_pattern: str = DEFAULT_SUMMARY_PATTERN
    file_name: str = "candidate.rs"
    max_procs: int = 4


def parse_diagnostics(
    raw: str, exit_code: int, summary_pattern: str = DEFAULT_SUMMARY_PATTERN
) -> VerificationReport:
    """Deterministically convert raw toolchain output into a report.

    No summary line at all means the tool misbehaved (ToolError). A summary
    of zero verified and zero errors means the run never reached verification
    (SyntaxError, e.g. a parse failure). Otherwise verified/error counts come
    from the summary, with individual error diagnostics refining n_err.
    """
    diagnostics = _scan_diagnostics(raw)
    n_err_blocks = sum(1 for d in diagnostics if d.severity is Severity.ERROR)
    n_warn = sum(1 for d in diagnostics if d.severity is Severity.WARNING)

    match = re.search(summary_pattern, raw)
    if match is None:
        return VerificationReport(
            verdict=Verdict.TOOL_ERROR,
            n_err=n_err_blocks,
            n_warn=n_warn,
            messages=diagnostics,
            raw=raw,
        )

    n_ver = int(match.group("verified"))
    summary_errors = int(match.group("errors"))
    if n_ver == 0 and summary_errors == 0:
        return VerificationReport(
            verdict=Verdict.SYNTAX_ERROR,
            n_err=n_err_blocks,
            n_warn=n_warn,
            messages=diagnostics,
            raw=raw,
        )

    n_err = n_err_blocks if n_err_blocks > 0 else summary_errors
    n_unver = summary_errors
    verdict = Verdict.VERIFIED if n_err == 0 and n_unver == 0 else Verdict.FAILED
    return VerificationReport(
        verdict=verdict,
        n_ver=n_ver,
        n_unver=n_unver,
        n_err=n_err,
        n_warn=n_warn,
        messages=diagnostics,
        raw=raw,
    )


def _scan_diagnostics(raw: str) -> tuple[Diagnostic, ...]:
    out: list[Diagnostic] = []
    lines = raw.splitlines()
    for i, line in enumerate(lines):
        m = _DIAG_RE.match(line.strip())
        if not m:
            continue
        kind, message = m.group(1), m.group(2).strip()
        if _ABORT_RE.match(message):
            continue
        severity = {
            "error": Severity.ERROR,
            "warning": Severity.WARNING,
            "note": Severity.NOTE,
        }[kind]
        line_no = col_no = None
        span_text = None
        for follow in lines[i + 1 : i + 6]:
            loc = _LOCATION_RE.match(follow)
            if loc:
                line_no, col_no = int(loc.group(1)), int(loc.group(2))
                continue
            inner = re.match(r"^\s*\d+\s*\|\s?(.*)$", follow)
            if inner and line_no is not None:
                span_text = inner.group(1)
                break
        # toy diagnostics carry the location inline as "line N: ..."
        if line_no is None:
            inline = re.match(r"^line (\d+):", message)
            if inline:
                line_no = int(inline.group(1))
        out.append(Diagnostic(severity, message, line_no, col_no, span_text))
    return tuple(out)


def compute_score(report: VerificationReport, params: ScoreParams = ScoreParams()) -> float:
    """(n_ver - alpha*n_err - beta*n_warn) / (n_ver + n_unver), unclamped.

    Degenerate reports (denominator zero, possible for SyntaxError/ToolError)
    get the floor score so they stay expandable but always rank worst.
    """
    denom = report.n_ver + report.n_unver
    if denom == 0:
        return params.floor
    return (report.n_ver - params.alpha * report.n_err - params.beta * report.n_warn) / denom


def check_syntactic(report: VerificationReport) -> bool:
    """True iff the toolchain produced structured verification results."""
    return report.verdict in (Verdict.VERIFIED, Verdict.FAILED)


class ToolchainVerifier:
    """Runs the configured verifier binary in a fresh workspace per candidate.

    Thread-safe: a semaphore bounds simultaneous subprocesses, and each run
    writes its candidate into its own temporary directory.
    """

    def __init__(self, config: VerifierConfig):
        self.config = config
        self._sem = threading.Semaphore(max(1, config.max_procs))
        self.calls = 0
        self._lock = threading.Lock()

    def run(self, program: ProgramText) -> VerificationReport:
        if not program.body:
            raise ValueError("refusing to verify an empty program body")
        if not self.config.bin:
            raise ConfigError("verifier.bin is not configured")
        with self._lock:
            self.calls += 1
        start = time.monotonic()
        with self._sem, tempfile.TemporaryDirectory(prefix="veriloop-") as workdir:
            target = Path(workdir) / self.config.file_name
            target.write_text(program.body, encoding="utf-8")
            cmd = [self.config.bin, *self.config.args, str(target)]
            try:
                proc = subprocess.run(
                    cmd,
                    cwd=workdir,
                    capture_output=True,
                    text=True,
                    timeout=self.config.timeout_s,
                )
            except subprocess.TimeoutExpired as exc:
                raw = _decode(exc.stdout) + _decode(exc.stderr)
                partial = parse_diagnostics(raw, exit_code=-1, summary_pattern=self.config.summary_pattern)
                return VerificationReport(
                    verdict=Verdict.TIMEOUT,
                    n_ver=partial.n_ver,
                    n_unver=partial.n_unver,
                    n_err=partial.n_err,
                    n_warn=partial.n_warn,
                    messages=partial.messages,
                    raw=raw,
                    elapsed=time.monotonic() - start,
                )
            except OSError as exc:
                logger.error("could not launch verifier %s: %s", self.config.bin, exc)
                return VerificationReport(
                    verdict=Verdict.TOOL_ERROR,
                    raw=f"launch failure: {exc}",
                    elapsed=time.monotonic() - start,
                )
        report = parse_diagnostics(
            proc.stdout + proc.stderr, proc.returncode, self.config.summary_pattern
        )
        return VerificationReport(
            verdict=report.verdict,
            n_ver=report.n_ver,
            n_unver=report.n_unver,
            n_err=report.n_err,
            n_warn=report.n_warn,
            messages=report.messages,
            raw=report.raw,
            elapsed=time.monotonic() - start,
        )


def _decode(data: bytes | str | None) -> str:
    if data is None:
        return ""
    if isinstance(data, bytes):
        return data.decode("utf-8", errors="replace")
    return data


def run_verifier(program: ProgramText, config: VerifierConfig) -> VerificationReport:
    """One-shot convenience wrapper around ToolchainVerifier."""
    return ToolchainVerifier(config).run(program)
