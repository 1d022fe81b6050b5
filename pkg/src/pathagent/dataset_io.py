"""Benchmark manifests, report pairing and the text-only shortcut filter."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .backend import Backend, CompletionRequest, ChatMessage
from .errors import (
    BackendError,
    BadAnswerIndex,
    DuplicateRecordId,
    ParseError,
    SchemaViolation,
)
from .nav_dsl import OPTION_LETTERS, extract_answer

log = logging.getLogger(__name__)

# TCGA project codes used as VQA subsets, in the benchmark's column order.
SUBSETS = ("BRCA", "LUAD", "LUSC", "KIRP", "KIRC", "KICH", "ESCA", "THCA", "BLCA", "TGCT")


@dataclass(frozen=True)
class VqaRecord:
    record_id: str
    question: str
    options: tuple[str, ...]
    answer_index: int
    subset: str
    region_ref: str | tuple[str, int] | None = None

    def options_text(self) -> str:
        return "\n".join(f"{OPTION_LETTERS[i]}. {opt}" for i, opt in enumerate(self.options))

    def to_json(self) -> dict:
        ref: Any = self.region_ref
        if isinstance(ref, tuple):
            ref = {"slide_id": ref[0], "region_id": ref[1]}
        return {
            "record_id": self.record_id,
            "question": self.question,
            "options": list(self.options),
            "answer_index": self.answer_index,
            "subset": self.subset,
            "region_ref": ref,
        }


def record_from_obj(obj: Any, line: int | None = None) -> VqaRecord:
    def bad(msg: str, path: str) -> SchemaViolation:
        return SchemaViolation(msg, path, line)

    if not isinstance(obj, dict):
        raise bad("expected an object", "$")
    for key, typ in (("record_id", str), ("question", str), ("subset", str)):
        if not isinstance(obj.get(key), typ):
            raise bad("expected a string", f"$.{key}")
    options = obj.get("options")
    if not isinstance(options, list) or not all(isinstance(o, str) for o in options):
        raise bad("expected a list of strings", "$.options")
    if not 2 <= len(options) <= 8:
        raise bad(f"need 2-8 options, got {len(options)}", "$.options")
    if len(set(options)) != len(options):
        raise bad("options must be pairwise distinct", "$.options")
    idx = obj.get("answer_index")
    if isinstance(idx, bool) or not isinstance(idx, int):
        raise bad("expected an integer", "$.answer_index")
    if not 0 <= idx < len(options):
        raise BadAnswerIndex(f"answer_index {idx} outside [0, {len(options)})", "$.answer_index", line)
    ref = obj.get("region_ref")
    if isinstance(ref, dict):
        ref = (str(ref["slide_id"]), int(ref["region_id"]))
    elif ref is not None and not isinstance(ref, str):
        raise bad("expected a path or {slide_id, region_id}", "$.region_ref")
    return VqaRecord(obj["record_id"], obj["question"], tuple(options), idx, obj["subset"], ref)


def load_vqa_manifest(path: str | Path) -> list[VqaRecord]:
    """Validated records from a JSONL manifest; errors carry 1-based line numbers."""
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"invalid JSON: {exc.msg}", "$", lineno) from exc
            rec = record_from_obj(obj, lineno)
            if rec.record_id in seen:
                raise DuplicateRecordId(f"duplicate record id {rec.record_id!r}", "$.record_id", lineno)
            seen.add(rec.record_id)
            records.append(rec)
    return records


def dump_jsonl_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n"


def write_vqa_manifest(path: str | Path, records: Sequence[VqaRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(dump_jsonl_line(r.to_json()))


# --------------------------------------------------------------------------
# shortcut filter


@dataclass
class FilterResult:
    kept: list[VqaRecord] = field(default_factory=list)
    dropped: list[VqaRecord] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)


def _guess(backend: Backend, record: VqaRecord, prompts) -> tuple[int | None, str | None]:
    text = prompts.render("text_only_guess", question=record.question, options=record.options_text())
    req = CompletionRequest((ChatMessage.user(text),), temperature=0.0)
    conv = f"shortcut/{record.record_id}/{backend.profile.name}"
    try:
        reply = backend.complete(req, conversation_id=conv, stage="text_only_guess")
    except BackendError as exc:
        return None, f"{type(exc).__name__}: {exc}"
    try:
        return extract_answer(reply, len(record.options), list(record.options)), None
    except ParseError:
        return None, None


def shortcut_filter(records: Sequence[VqaRecord], text_backends: Sequence[Backend], prompts,
                    workers: int = 1) -> FilterResult:
    """Drop records that both text-only backends answer correctly.

    A backend failure keeps the record (fail-open) and is logged. An answer
    that cannot be parsed counts as wrong.
    """
    if len(text_backends) != 2:
        raise ValueError("shortcut_filter needs exactly two text backends")
    a, b = text_backends
    if a.profile.name == b.profile.name:
        raise ValueError("the two text backends must have distinct profiles")

    def judge(rec: VqaRecord) -> dict:
        answers, errors = [], []
        for be in (a, b):
            ans, err = _guess(be, rec, prompts)
            answers.append(ans)
            errors.append(err)
        failed = any(e is not None for e in errors)
        if failed:
            log.warning("shortcut filter: backend failure on %s, keeping record", rec.record_id)
        drop = not failed and all(x == rec.answer_index for x in answers)
        return {
            "record_id": rec.record_id,
            "answer_index": rec.answer_index,
            "answers": {a.profile.name: answers[0], b.profile.name: answers[1]},
            "errors": {a.profile.name: errors[0], b.profile.name: errors[1]},
            "dropped": drop,
        }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            verdicts = list(pool.map(judge, records))
    else:
        verdicts = [judge(r) for r in records]
    out = FilterResult()
    for rec, v in zip(records, verdicts):
        (out.dropped if v["dropped"] else out.kept).append(rec)
        out.log.append(v)
    return out


def write_filter_outputs(directory: str | Path, result: FilterResult) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_vqa_manifest(directory / "kept.jsonl", result.kept)
    write_vqa_manifest(directory / "dropped.jsonl", result.dropped)
    with open(directory / "filter_log.jsonl", "w", encoding="utf-8") as fh:
        for entry in result.log:
            fh.write(dump_jsonl_line(entry))


# --------------------------------------------------------------------------
# report pairing


@dataclass(frozen=True)
class ReportPair:
    slide_id: str
    report_text: str
    region_extracts: dict[int, str] = field(default_factory=dict)


@dataclass
class Pairing:
    pairs: list[ReportPair]
    unmatched: list[str]


def pair_reports(slide_ids: Sequence[str], reports_dir: str | Path) -> Pairing:
    """Match ``<slide_id>.txt`` reports to slides.

    An optional ``<slide_id>.regions.json`` maps region ids to extracted text.
    """
    reports_dir = Path(reports_dir)
    pairs, unmatched = [], []
    for sid in dict.fromkeys(slide_ids):
        path = reports_dir / f"{sid}.txt"
        if not path.is_file():
            unmatched.append(sid)
            continue
        extracts = {}
        side = reports_dir / f"{sid}.regions.json"
        if side.is_file():
            extracts = {int(k): str(v) for k, v in json.loads(side.read_text()).items()}
        pairs.append(ReportPair(sid, path.read_text(encoding="utf-8"), extracts))
    return Pairing(pairs, unmatched)
