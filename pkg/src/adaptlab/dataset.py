"""Instruction-corpus preparation: ingest, normalize, dedup, template, split."""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .rng import SplitMix64

FENCE = "```"
CODE_SCORE_THRESHOLD = 0.3

# Lines that look like Python: assignment, def/class/import/control-flow
# headers, calls, returns, or anything indented.
_CODE_LINE = re.compile(
    r"""^(\s+\S                                   # indented line
        |[A-Za-z_][\w.\[\]]*\s*(=|\+=|-=|\*=|/=)\s*\S  # assignment
        |(def|class|import|from|return|for|while|if|elif|else|try|except|with|print)\b
        |[A-Za-z_][\w.]*\(.*\)\s*$                # bare call
        )""",
    re.VERBOSE,
)


class RecordError(ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class InstructionRecord:
    instruction: str
    response: str
    system: str | None = None
    lang: str | None = None
    source: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.instruction, str) or not self.instruction.strip():
            raise RecordError("instruction must be a non-empty string")
        if not isinstance(self.response, str) or not self.response.strip():
            raise RecordError("response must be a non-empty string")

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class DedupStats:
    input: int
    kept: int
    removed: int

    @property
    def removal_rate(self) -> float:
        return self.removed / self.input if self.input else 0.0

    def to_json(self) -> dict:
        return {"input": self.input, "kept": self.kept, "removed": self.removed, "removal_rate": self.removal_rate}


@dataclass
class IngestResult:
    records: list[InstructionRecord]
    skipped: int = 0


_FIELDS = ("instruction", "response", "system", "lang", "source")


def record_from_json(obj: dict, line: int | None = None) -> InstructionRecord:
    if not isinstance(obj, dict):
        raise RecordError("expected a JSON object", line)
    for key in ("instruction", "response"):
        if key not in obj:
            raise RecordError(f"missing field {key!r}", line)
    kwargs = {k: obj[k] for k in _FIELDS if k in obj and obj[k] is not None}
    kwargs.setdefault("source", "")
    try:
        return InstructionRecord(**kwargs)
    except RecordError as e:
        raise RecordError(str(e), line) from None


def ingest(path: str | Path, strict: bool = True) -> IngestResult:
    """Read JSON-lines records; blank lines are ignored, unknown fields dropped."""
    out = IngestResult([])
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise RecordError(f"invalid JSON ({e.msg})", lineno) from None
                out.records.append(record_from_json(obj, lineno))
            except RecordError:
                if strict:
                    raise
                out.skipped += 1
    return out


def write_jsonl(records: Iterable[InstructionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def _collapse(m: re.Match) -> str:
    return "\n" if "\n" in m.group(0) else " "


def normalize_text(text: str) -> str:
    """NFC, trim, and collapse whitespace runs outside ``` fenced blocks.

    A run containing a line break collapses to a single newline, any other
    run to a single space, so line structure survives normalization.
    """
    text = unicodedata.normalize("NFC", text)
    parts = text.split(FENCE)
    # even-indexed parts are outside fences; an unmatched trailing fence
    # leaves its tail verbatim too
    for i in range(0, len(parts), 2):
        if i == len(parts) - 1 and len(parts) % 2 == 0:
            break
        parts[i] = re.sub(r"\s+", _collapse, parts[i])
    return FENCE.join(parts).strip()


def normalize(record: InstructionRecord) -> InstructionRecord:
    return replace(
        record,
        instruction=normalize_text(record.instruction),
        response=normalize_text(record.response),
        system=normalize_text(record.system) if record.system is not None else None,
    )


def dedup_key(record: InstructionRecord) -> str:
    payload = normalize_text(record.instruction) + "\x1f" + normalize_text(record.response)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def dedup(records: Sequence[InstructionRecord]) -> tuple[list[InstructionRecord], DedupStats]:
    seen: set[str] = set()
    kept = []
    for r in records:
        key = dedup_key(r)
        if key not in seen:
            seen.add(key)
            kept.append(r)
    return kept, DedupStats(len(records), len(kept), len(records) - len(kept))


ZEPHYR = "zephyr"
ALT = "alt"
TEMPLATES = (ZEPHYR, ALT)


def format_chat(record: InstructionRecord, template: str = ZEPHYR) -> str:
    if template == ZEPHYR:
        return (
            f"<|system|>\n{record.system or ''}</s>\n"
            f"<|user|>\n{record.instruction}</s>\n"
            f"<|assistant|>\n{record.response}</s>"
        )
    if template == ALT:
        return f"### Instruction:\n{record.instruction}\n### Response:\n{record.response}"
    raise ValueError(f"unknown template {template!r}; expected one of {TEMPLATES}")


def _take(text: str, marker: str, pos: int) -> int:
    if not text.startswith(marker, pos):
        raise ParseError(f"missing marker {marker!r}")
    return pos + len(marker)


def parse_chat(text: str, template: str = ZEPHYR) -> InstructionRecord:
    """Inverse of :func:`format_chat` on its image."""
    if template == ZEPHYR:
        pos = _take(text, "<|system|>\n", 0)
        end = text.find("</s>\n<|user|>\n", pos)
        if end < 0:
            raise ParseError("missing marker '<|user|>'")
        system = text[pos:end]
        pos = end + len("</s>\n<|user|>\n")
        end = text.rfind("</s>\n<|assistant|>\n", pos)
        if end < 0:
            raise ParseError("missing marker '<|assistant|>'")
        instruction = text[pos:end]
        pos = end + len("</s>\n<|assistant|>\n")
        if not text.endswith("</s>") or len(text) - 4 < pos:
            raise ParseError("missing marker '</s>'")
        response = text[pos:-4]
    elif template == ALT:
        pos = _take(text, "### Instruction:\n", 0)
        end = text.rfind("\n### Response:\n", pos)
        if end < 0:
            raise ParseError("missing marker '### Response:'")
        instruction = text[pos:end]
        response = text[end + len("\n### Response:\n") :]
        system = ""
    else:
        raise ValueError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    try:
        return InstructionRecord(instruction, response, system or None)
    except RecordError as e:
        raise ParseError(str(e)) from None


def split(
    records: Sequence[InstructionRecord], test_fraction: float, seed: int = 0
) -> tuple[list[InstructionRecord], list[InstructionRecord]]:
    """Seeded shuffle, then the first ``round(n * test_fraction)`` go to test."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    n = len(records)
    if n < 2:
        raise ValueError("need at least 2 records to split")
    n_test = min(max(round(n * test_fraction), 1), n - 1)
    order = SplitMix64(seed).permutation(n)
    test = [records[i] for i in sorted(order[:n_test])]
    train = [records[i] for i in sorted(order[n_test:])]
    return train, test


def code_score(text: str) -> float:
    """Fraction of non-blank lines matching the code-line pattern."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return 0.0
    return sum(1 for ln in lines if _CODE_LINE.match(ln)) / len(lines)


def is_code(record: InstructionRecord, threshold: float = CODE_SCORE_THRESHOLD) -> bool:
    return FENCE in record.response or code_score(record.response) >= threshold


def filter_code(records: Iterable[InstructionRecord], threshold: float = CODE_SCORE_THRESHOLD) -> list[InstructionRecord]:
    return [r for r in records if is_code(r, threshold)]
