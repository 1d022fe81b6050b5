"""Structured outputs the backend emits at each agent stage, and their parsers.

Every parser accepts arbitrary text and either returns a value or raises a
:class:`~pathagent.errors.ParseError` subclass. JSON is located tolerantly:
fenced code blocks first, then any balanced ``{...}`` object in the prose.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterator

from .errors import (
    DuplicateRegionId,
    InconsistentAction,
    InvalidViewport,
    NoJsonFound,
    SchemaViolation,
    Unparseable,
)
from .slide_model import Viewport

ACTIONS = ("overview", "move", "zoom_in", "zoom_out")
OPTION_LETTERS = "ABCDEFGH"
AUTO_OVERVIEW_RATIONALE = "auto-inserted overview"

_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\r?\n(.*?)```", re.DOTALL)
_MAG = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*[xX×]?\s*$")


# --------------------------------------------------------------------------
# JSON location


def _as_text(text: str | bytes) -> str:
    if isinstance(text, bytes):
        return text.decode("utf-8", errors="replace")
    return text


def iter_json_objects(text: str | bytes) -> Iterator[dict]:
    """Yield every JSON object found in ``text``: fenced blocks first, then bare braces."""
    text = _as_text(text)
    for fence in _FENCE.finditer(text):
        yield from _scan(fence.group(2))
    yield from _scan(text)


def _scan(text: str) -> Iterator[dict]:
    decoder = json.JSONDecoder()
    pos = 0
    while True:
        i = text.find("{", pos)
        if i < 0:
            return
        try:
            obj, end = decoder.raw_decode(text, i)
        except (ValueError, RecursionError):
            pos = i + 1
            continue
        if isinstance(obj, dict):
            yield obj
        pos = end


def find_json_object(text: str | bytes, required_key: str) -> dict:
    """First JSON object carrying ``required_key``."""
    first = None
    for obj in iter_json_objects(text):
        if required_key in obj:
            return obj
        if first is None:
            first = obj
    if first is None:
        raise NoJsonFound("no JSON object in text")
    raise SchemaViolation(f"missing required key {required_key!r}", "$")


def _number(value: Any, path: str) -> float:
    if isinstance(value, bool):
        raise SchemaViolation("expected a number", path)
    if isinstance(value, (int, float)):
        try:
            out = float(value)
        except OverflowError:
            raise SchemaViolation("number out of range", path) from None
    elif isinstance(value, str):
        m = _MAG.match(value)
        if not m:
            raise SchemaViolation(f"not a number: {value[:40]!r}", path)
        out = float(m.group(1))
    else:
        raise SchemaViolation("expected a number", path)
    if not math.isfinite(out):
        raise SchemaViolation("number must be finite", path)
    return out


def _int(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaViolation("expected an integer", path)
    return value


def _str(value: Any, path: str) -> str:
    if not isinstance(value, str):
        raise SchemaViolation("expected a string", path)
    return value


def _list(value: Any, path: str) -> list:
    if not isinstance(value, list):
        raise SchemaViolation("expected an array", path)
    return value


# --------------------------------------------------------------------------
# region selection


@dataclass(frozen=True)
class RegionGroup:
    name: str
    region_ids: tuple[int, ...]
    needs_high_mag: bool


@dataclass(frozen=True)
class RegionSelection:
    groups: tuple[RegionGroup, ...]
    priority: tuple[int, ...]

    def all_ids(self) -> set[int]:
        return {rid for g in self.groups for rid in g.region_ids}

    def group_of(self, region_id: int) -> RegionGroup | None:
        for g in self.groups:
            if region_id in g.region_ids:
                return g
        return None

    def to_json(self) -> dict:
        return {
            "groups": [
                {"name": g.name, "region_ids": list(g.region_ids), "needs_high_mag": g.needs_high_mag}
                for g in self.groups
            ],
            "priority": list(self.priority),
        }


def region_selection_from_obj(obj: dict) -> RegionSelection:
    groups = []
    seen: set[int] = set()
    for gi, g in enumerate(_list(obj.get("groups"), "$.groups")):
        path = f"$.groups[{gi}]"
        if not isinstance(g, dict):
            raise SchemaViolation("expected an object", path)
        name = _str(g.get("name"), path + ".name")
        ids = []
        for ri, rid in enumerate(_list(g.get("region_ids"), path + ".region_ids")):
            rid = _int(rid, f"{path}.region_ids[{ri}]")
            if rid in seen:
                raise DuplicateRegionId(f"region id {rid} appears more than once")
            seen.add(rid)
            ids.append(rid)
        flag = g.get("needs_high_mag", False)
        if not isinstance(flag, bool):
            raise SchemaViolation("expected a boolean", path + ".needs_high_mag")
        groups.append(RegionGroup(name, tuple(ids), flag))
    priority = [_int(p, f"$.priority[{i}]") for i, p in enumerate(_list(obj.get("priority", []), "$.priority"))]
    if len(set(priority)) != len(priority):
        raise DuplicateRegionId("priority list repeats a region id")
    stray = [p for p in priority if p not in seen]
    if stray:
        raise SchemaViolation(f"priority ids {stray} belong to no group", "$.priority")
    return RegionSelection(tuple(groups), tuple(priority))


def parse_region_selection(text: str | bytes) -> RegionSelection:
    return region_selection_from_obj(find_json_object(text, "groups"))


# --------------------------------------------------------------------------
# navigation plans


@dataclass(frozen=True)
class NavStep:
    action: str
    viewport: Viewport
    rationale: str = ""

    @property
    def center(self) -> tuple[float, float]:
        return self.viewport.center

    @property
    def magnification(self) -> float:
        return self.viewport.magnification


@dataclass(frozen=True)
class NavPlan:
    steps: tuple[NavStep, ...]
    auto_overview: bool = field(default=False, compare=False)
    truncated: bool = field(default=False, compare=False)

    def __len__(self) -> int:
        return len(self.steps)

    def rounded(self) -> "NavPlan":
        return NavPlan(tuple(_round_step(s) for s in self.steps), self.auto_overview, self.truncated)


def _round_step(s: NavStep) -> NavStep:
    v = s.viewport
    return NavStep(s.action, Viewport(round(v.cx, 3), round(v.cy, 3), round(v.magnification, 2)), s.rationale)


def validate_steps(steps: list[NavStep]) -> None:
    if not steps:
        raise SchemaViolation("plan has no steps", "$.steps")
    prev: NavStep | None = None
    for i, s in enumerate(steps):
        v = s.viewport
        if not (0 <= v.cx <= 1 and 0 <= v.cy <= 1):
            raise InvalidViewport(f"step {i}: center ({v.cx}, {v.cy}) outside [0, 1]")
        if v.magnification < 1:
            raise InvalidViewport(f"step {i}: magnification {v.magnification} < 1")
        m = v.magnification
        if s.action == "overview":
            if m != 1:
                raise InconsistentAction(f"step {i}: overview must be at 1x, got {m}")
        elif prev is None:
            pass
        elif s.action == "zoom_in" and not m > prev.magnification:
            raise InconsistentAction(f"step {i}: zoom_in from {prev.magnification} to {m}")
        elif s.action == "zoom_out" and not m < prev.magnification:
            raise InconsistentAction(f"step {i}: zoom_out from {prev.magnification} to {m}")
        elif s.action == "move":
            if m != prev.magnification:
                raise InconsistentAction(f"step {i}: move changes magnification")
            if v.center == prev.viewport.center:
                raise InconsistentAction(f"step {i}: move keeps the same center")
        prev = s
    if steps[0].action != "overview":
        raise InconsistentAction("first step must be an overview")


def _step_from_obj(obj: Any, i: int) -> NavStep:
    path = f"$.steps[{i}]"
    if not isinstance(obj, dict):
        raise SchemaViolation("expected an object", path)
    action = _str(obj.get("action"), path + ".action").strip().lower().replace("-", "_").replace(" ", "_")
    if action not in ACTIONS:
        raise SchemaViolation(f"unknown action {action[:20]!r}", path + ".action")
    center = _list(obj.get("center"), path + ".center")
    if len(center) != 2:
        raise SchemaViolation("center must have two coordinates", path + ".center")
    cx = _number(center[0], path + ".center[0]")
    cy = _number(center[1], path + ".center[1]")
    m = _number(obj.get("magnification"), path + ".magnification")
    rationale = obj.get("rationale", "")
    rationale = "" if rationale is None else _str(rationale, path + ".rationale")
    return NavStep(action, Viewport(cx, cy, m), rationale)


def nav_plan_from_obj(obj: dict) -> NavPlan:
    steps = [_step_from_obj(s, i) for i, s in enumerate(_list(obj.get("steps"), "$.steps"))]
    if not steps:
        raise SchemaViolation("plan has no steps", "$.steps")
    auto = False
    if steps[0].action != "overview":
        steps.insert(0, NavStep("overview", Viewport(0.5, 0.5, 1.0), AUTO_OVERVIEW_RATIONALE))
        auto = True
    validate_steps(steps)
    return NavPlan(tuple(steps), auto_overview=auto)


def parse_nav_plan(text: str | bytes) -> NavPlan:
    """Parse ``{"steps": [{"action", "center", "magnification", "rationale"}]}`` from text.

    A plan that does not open with an overview gets a synthetic 1x overview at
    the region centre and ``auto_overview=True``.
    """
    return nav_plan_from_obj(find_json_object(text, "steps"))


def truncate_plan(plan: NavPlan, max_steps: int) -> NavPlan:
    if len(plan.steps) <= max_steps:
        return plan
    return NavPlan(plan.steps[:max_steps], plan.auto_overview, truncated=True)


def nav_plan_to_obj(plan: NavPlan) -> dict:
    steps = []
    for s in plan.steps:
        v = s.viewport
        steps.append({
            "action": s.action,
            "center": [round(v.cx, 3), round(v.cy, 3)],
            "magnification": round(v.magnification, 2),
            "rationale": s.rationale,
        })
    return {"steps": steps}


def serialize_nav_plan(plan: NavPlan) -> str:
    """Canonical JSON: centres to 3 decimals, magnifications to 2, fixed key order."""
    return json.dumps(nav_plan_to_obj(plan), ensure_ascii=False)


# --------------------------------------------------------------------------
# reasoning results


@dataclass(frozen=True)
class ReasoningResult:
    step_notes: tuple[str, ...]
    conclusion: str
    answer_index: int | None = None
    structured: bool = True

    def to_json(self) -> dict:
        return {
            "step_notes": list(self.step_notes),
            "conclusion": self.conclusion,
            "answer_index": self.answer_index,
        }


def parse_reasoning_result(text: str | bytes, n_views: int | None = None,
                           n_options: int | None = None) -> ReasoningResult:
    """Parse ``{"step_notes": [...], "conclusion": str, "answer_index": int|null}``.

    Text without any JSON object becomes an unstructured result whose
    conclusion is the whole text.
    """
    text = _as_text(text)
    try:
        obj = find_json_object(text, "conclusion")
    except NoJsonFound:
        body = text.strip()
        if not body:
            raise
        return ReasoningResult((), body, None, structured=False)
    notes = tuple(_str(n, f"$.step_notes[{i}]") for i, n in enumerate(_list(obj.get("step_notes", []), "$.step_notes")))
    conclusion = _str(obj.get("conclusion"), "$.conclusion")
    idx = obj.get("answer_index")
    if idx is not None:
        idx = _int(idx, "$.answer_index")
        if n_options is not None and not 0 <= idx < n_options:
            raise SchemaViolation(f"answer_index {idx} outside [0, {n_options})", "$.answer_index")
    if n_views is not None and len(notes) != n_views:
        raise SchemaViolation(f"expected {n_views} step notes, got {len(notes)}", "$.step_notes")
    return ReasoningResult(notes, conclusion, idx)


# --------------------------------------------------------------------------
# multiple-choice answers


def _strip_fences(text: str) -> str:
    return "\n".join(line for line in text.splitlines() if not line.strip().startswith("```"))


def extract_answer(text: str | bytes, n_options: int, options: list[str] | None = None) -> int:
    """0-based option index from free text.

    Tried in order: the last ``Answer: <letter>``; the last line holding only an
    option letter; exactly one option's full text inside the final paragraph
    (only when ``options`` is given).
    """
    if not 2 <= n_options <= len(OPTION_LETTERS):
        raise ValueError(f"n_options must lie in [2, 8], got {n_options}")
    text = _strip_fences(_as_text(text))
    letters = OPTION_LETTERS[:n_options]

    hits = [m.group(1).upper() for m in re.finditer(
        r"(?i:answer)[*_]*\s*[:：][\s*_]*\(?([A-Ha-h])\)?(?![A-Za-z])", text)]
    hits = [h for h in hits if h in letters]
    if hits:
        return letters.index(hits[-1])

    for line in reversed(text.splitlines()):
        m = re.fullmatch(r"[*_\s]*\(?([A-H])[\).:]?[*_\s]*", line)
        if m and line.strip() and m.group(1) in letters:
            return letters.index(m.group(1))

    if options:
        paragraphs = [p for p in re.split(r"\n\s*\n", text) if p.strip()]
        final = paragraphs[-1].lower() if paragraphs else ""
        found = [i for i, opt in enumerate(options[:n_options]) if opt.strip() and opt.strip().lower() in final]
        if len(found) == 1:
            return found[0]
        if len(found) > 1:
            raise Unparseable(f"final paragraph names {len(found)} options")
    raise Unparseable("no answer pattern found")


def option_letter(index: int) -> str:
    return OPTION_LETTERS[index]
