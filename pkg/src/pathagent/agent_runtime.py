"""The three-stage diagnostic loop: global screening, navigation planning, and
multi-view reasoning, plus two-stage WSI classification.

Each region runs in its own conversation. Every backend call made on behalf of
a region is appended to that region's transcript, so regions can run in
parallel and the merged transcript is still deterministic.
"""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .backend import (
    GENERATION_TEMPERATURE,
    Backend,
    ChatMessage,
    CompletionRequest,
    ImagePart,
    TextPart,
    transcript_entry,
    write_transcript,
)
from .dataset_io import VqaRecord
from .errors import (
    AnswerMissing,
    LabelMismatch,
    PathAgentError,
    PromptError,
    SchemaViolation,
    StageError,
    UnknownRegionId,
    Unparseable,
)
from .nav_dsl import (
    NavPlan,
    RegionSelection,
    ReasoningResult,
    extract_answer,
    nav_plan_to_obj,
    parse_nav_plan,
    parse_reasoning_result,
    parse_region_selection,
    truncate_plan,
)
from .region_tiler import (
    DEFAULT_MIN_TISSUE,
    DEFAULT_OVERLAP,
    extract_region,
    filter_regions,
    iter_boxes,
    plan_regions,
)
from .slide_model import (
    DEFAULT_OUT_RES,
    REGION_SIZE,
    THUMBNAIL_FACTOR,
    RegionImage,
    SlidePyramid,
    ViewImage,
    Viewport,
    annotate_boxes,
    annotate_grid,
    crop_viewport,
    make_thumbnail,
    write_png,
)

log = logging.getLogger(__name__)

# --------------------------------------------------------------------------
# prompts

STAGES = (
    "global_screening",
    "navigation_planning",
    "navigation_planning_vqa",
    "reasoning",
    "reasoning_vqa",
    "wsi_classification",
    "text_only_guess",
    "continuation",
)

REQUIRED_PLACEHOLDERS = {
    "global_screening": {"region_count", "region_ids"},
    "navigation_planning": {"max_steps"},
    "navigation_planning_vqa": {"question", "options", "max_steps"},
    "reasoning": {"step_count"},
    "reasoning_vqa": {"question", "options", "step_count"},
    "wsi_classification": {"labels", "descriptions"},
    "text_only_guess": {"question", "options"},
    "continuation": {"batch_index", "batch_count"},
}

_PLACEHOLDER = re.compile(r"\{\{\s*([a-z_]+)\s*\}\}")


@dataclass(frozen=True)
class StagePrompts:
    templates: Mapping[str, str]

    def __post_init__(self):
        for stage, needed in REQUIRED_PLACEHOLDERS.items():
            if stage not in self.templates:
                raise PromptError(f"prompt pack lacks stage {stage!r}")
            missing = needed - placeholders(self.templates[stage])
            if missing:
                raise PromptError(f"{stage} template lacks placeholders {sorted(missing)}")

    def render(self, stage: str, **values) -> str:
        template = self.templates[stage]
        wanted = placeholders(template)
        absent = wanted - values.keys()
        if absent:
            raise PromptError(f"{stage}: no value for {sorted(absent)}")
        return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), template)


def placeholders(template: str) -> set[str]:
    return set(_PLACEHOLDER.findall(template))


def load_prompts(directory: str | Path | None = None) -> StagePrompts:
    """Prompt pack from ``<stage>.txt`` files; the bundled pack when ``directory`` is None.

    A user directory may override a subset of stages; the rest fall back to
    the bundled templates.
    """
    bundled = resources.files("pathagent") / "prompts"
    templates = {s: (bundled / f"{s}.txt").read_text(encoding="utf-8") for s in STAGES}
    if directory is not None:
        for path in Path(directory).glob("*.txt"):
            templates[path.stem] = path.read_text(encoding="utf-8")
    return StagePrompts(templates)


# --------------------------------------------------------------------------
# configuration and reports


@dataclass(frozen=True)
class AgentConfig:
    out_res: int = DEFAULT_OUT_RES
    region_size: int = REGION_SIZE
    overlap: float = DEFAULT_OVERLAP
    min_tissue: float = DEFAULT_MIN_TISSUE
    thumbnail_factor: int = THUMBNAIL_FACTOR
    max_steps: int = 12
    max_magnification: float | None = None  # None: min(region side) / out_res
    temperature: float = 0.0
    seed: int | None = None
    max_tokens: int = 4096
    workers: int = 1
    skip_low_mag: bool = False


class Transcript:
    """Ordered backend calls of one conversation scope."""

    def __init__(self):
        self.entries: list[dict] = []

    def call(self, backend: Backend, request: CompletionRequest, conversation_id: str, stage: str) -> str:
        seq = len(self.entries)
        try:
            reply = backend.complete(request, conversation_id=conversation_id, stage=stage)
        except Exception as exc:
            self.entries.append(transcript_entry(conversation_id, stage, seq, request, None,
                                                 f"{type(exc).__name__}: {exc}"))
            raise
        self.entries.append(transcript_entry(conversation_id, stage, seq, request, reply))
        return reply


@dataclass
class RegionReport:
    region_id: int
    plan: NavPlan | None = None
    views: list[dict] = field(default_factory=list)
    reasoning: ReasoningResult | None = None
    timings: dict[str, float] = field(default_factory=dict)
    transcript: list[dict] = field(default_factory=list)
    error: str | None = None
    attempt: int = 0
    view_images: list[ViewImage] = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict:
        return {
            "region_id": self.region_id,
            "attempt": self.attempt,
            "plan": nav_plan_to_obj(self.plan) if self.plan else None,
            "plan_flags": {
                "auto_overview": self.plan.auto_overview,
                "truncated": self.plan.truncated,
            } if self.plan else None,
            "views": self.views,
            "reasoning": self.reasoning.to_json() if self.reasoning else None,
            "error": self.error,
        }


@dataclass
class WsiReport:
    slide_id: str
    selection: RegionSelection | None
    region_reports: list[RegionReport]
    predicted_label: str | None = None
    warnings: list[str] = field(default_factory=list)
    transcript: list[dict] = field(default_factory=list)

    @property
    def failures(self) -> dict[int, str]:
        return {r.region_id: r.error for r in self.region_reports if r.error}

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "selection": self.selection.to_json() if self.selection else None,
            "regions": [r.to_json() for r in self.region_reports],
            "failures": {str(k): v for k, v in self.failures.items()},
            "predicted_label": self.predicted_label,
            "warnings": self.warnings,
        }


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _request(config: AgentConfig, *messages: ChatMessage, temperature: float | None = None) -> CompletionRequest:
    return CompletionRequest(
        tuple(messages),
        temperature=config.temperature if temperature is None else temperature,
        max_tokens=config.max_tokens,
        seed=config.seed,
    )


# --------------------------------------------------------------------------
# stage 1: global screening


def screening_overlay(thumbnail: np.ndarray, plan) -> np.ndarray:
    scale = thumbnail.shape[1] / plan.width_px
    boxes = list(iter_boxes(plan, scale))
    return annotate_boxes(thumbnail, boxes, [str(s.region_id) for s in plan.specs])


def run_global_screening(thumbnail: np.ndarray, plan, backend: Backend, prompts: StagePrompts, *,
                         config: AgentConfig = AgentConfig(), transcript: Transcript | None = None,
                         known_ids: Sequence[int] | None = None) -> RegionSelection:
    """Ask the backend to group and prioritise the outlined regions of a thumbnail.

    ``known_ids`` (default: the plan's ids) bounds which ids the reply may use.
    """
    transcript = transcript if transcript is not None else Transcript()
    overlay = screening_overlay(thumbnail, plan)
    ids = plan.ids()
    text = prompts.render("global_screening", region_count=len(ids),
                          region_ids=", ".join(str(i) for i in ids))
    req = _request(config, ChatMessage.user(text, overlay))
    reply = transcript.call(backend, req, f"{plan.slide_id}/screening", "global_screening")
    selection = parse_region_selection(reply)
    allowed = set(known_ids if known_ids is not None else ids)
    unknown = sorted(selection.all_ids() - allowed)
    if unknown:
        raise UnknownRegionId(f"selection references unknown region ids {unknown}")
    return selection


# --------------------------------------------------------------------------
# stage 2: navigation planning


def run_navigation_planning(region: RegionImage, backend: Backend, prompts: StagePrompts,
                            question: VqaRecord | None = None, *, config: AgentConfig = AgentConfig(),
                            transcript: Transcript | None = None,
                            conversation_id: str | None = None) -> NavPlan:
    transcript = transcript if transcript is not None else Transcript()
    overview = annotate_grid(crop_viewport(region, Viewport(0.5, 0.5, 1.0), config.out_res).pixels)
    if question is None:
        text = prompts.render("navigation_planning", max_steps=config.max_steps)
        stage = "navigation_planning"
    else:
        text = prompts.render("navigation_planning_vqa", question=question.question,
                              options=question.options_text(), max_steps=config.max_steps)
        stage = "navigation_planning_vqa"
    conv = conversation_id or f"{region.slide_id}/region_{region.region_id}"
    reply = transcript.call(backend, _request(config, ChatMessage.user(text, overview)), conv, stage)
    return truncate_plan(parse_nav_plan(reply), config.max_steps)


# --------------------------------------------------------------------------
# execution


def magnification_cap(region: RegionImage, out_res: int = DEFAULT_OUT_RES) -> float:
    """Highest magnification whose crop is still at least ``out_res`` pixels a side."""
    w, h = region.size
    return max(1.0, min(w, h) / out_res)


def execute_plan(region: RegionImage, plan: NavPlan, out_res: int = DEFAULT_OUT_RES,
                 max_magnification: float | None = None) -> list[ViewImage]:
    """One view per plan step, in order.

    Magnifications above the cap are lowered to it, below 1 raised to 1, and
    out-of-range centres slid inward; each adjustment is flagged on the view.
    """
    cap = magnification_cap(region, out_res) if max_magnification is None else max_magnification
    views = []
    for k, step in enumerate(plan.steps):
        v = step.viewport
        m = min(max(v.magnification, 1.0), cap)
        capped = m != v.magnification
        cx = min(max(v.cx, 0.0), 1.0)
        cy = min(max(v.cy, 0.0), 1.0)
        view = crop_viewport(region, Viewport(cx, cy, m), out_res)
        clamped = view.clamped or (cx, cy) != (v.cx, v.cy)
        if capped:
            log.info("step %d: magnification %.3g capped at %.3g", k, v.magnification, m)
        views.append(replace(view, requested=v, clamped=clamped, capped=capped, step_index=k))
    return views


# --------------------------------------------------------------------------
# stage 3: reasoning


def _step_caption(k: int, n: int, plan: NavPlan) -> str:
    s = plan.steps[k]
    return (f"Step {k + 1}/{n}: action={s.action}, center=({s.viewport.cx:.3f}, {s.viewport.cy:.3f}), "
            f"magnification={s.viewport.magnification:.2f}x. Rationale: {s.rationale}")


def _batches(n: int, size: int) -> list[range]:
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


def run_reasoning(views: Sequence[ViewImage], plan: NavPlan, backend: Backend, prompts: StagePrompts,
                  question: VqaRecord | None = None, *, config: AgentConfig = AgentConfig(),
                  transcript: Transcript | None = None,
                  conversation_id: str = "default") -> ReasoningResult:
    """Send the views with their step metadata and parse the reasoning.

    When the views exceed the backend's image limit they go out in batches
    within one conversation; earlier images are replaced by placeholders in
    later requests so every request respects the limit.
    """
    if not views:
        raise ValueError("run_reasoning needs at least one view")
    transcript = transcript if transcript is not None else Transcript()
    n = len(views)
    if question is None:
        header = prompts.render("reasoning", step_count=n)
        stage = "reasoning"
    else:
        header = prompts.render("reasoning_vqa", question=question.question,
                                options=question.options_text(), step_count=n)
        stage = "reasoning_vqa"

    def parts(idx: range, with_images: bool) -> list:
        out = []
        for k in idx:
            out.append(TextPart(_step_caption(k, n, plan)))
            out.append(ImagePart(views[k].pixels) if with_images else TextPart(f"[image of step {k + 1} sent earlier]"))
        return out

    batches = _batches(n, backend.profile.max_images_per_request)
    history: list[ChatMessage] = []
    reply = ""
    for b, idx in enumerate(batches):
        lead = [TextPart(header)] if b == 0 else []
        if b < len(batches) - 1:
            lead.append(TextPart(prompts.render("continuation", batch_index=b + 1, batch_count=len(batches))))
        msg = ChatMessage("user", tuple(lead + parts(idx, True)))
        req = _request(config, *history, msg)
        reply = transcript.call(backend, req, conversation_id, stage)
        history.append(ChatMessage("user", tuple(lead + parts(idx, False))))
        history.append(ChatMessage.assistant(reply))

    n_options = len(question.options) if question is not None else None
    result = parse_reasoning_result(reply, n_views=None, n_options=n_options)
    if result.structured and len(result.step_notes) != n:
        raise SchemaViolation(f"expected {n} step notes, got {len(result.step_notes)}", "$.step_notes")
    if question is not None and result.answer_index is None:
        try:
            idx = extract_answer(result.conclusion, len(question.options), list(question.options))
        except Unparseable as exc:
            raise AnswerMissing(f"no answer in reasoning: {exc}", transcript=reply) from exc
        result = replace(result, answer_index=idx)
    return result


# --------------------------------------------------------------------------
# composition


def region_conversation(region: RegionImage, record: VqaRecord | None, attempt: int) -> str:
    base = (f"vqa/{record.record_id}" if record is not None
            else f"{region.slide_id}/region_{region.region_id}")
    return base if attempt == 0 else f"{base}/attempt_{attempt}"


def run_region(region: RegionImage, backend: Backend, prompts: StagePrompts,
               mode: VqaRecord | None = None, *, config: AgentConfig = AgentConfig(),
               attempt: int = 0, out_dir: str | Path | None = None) -> RegionReport:
    """Plan, execute and reason over one region. ``mode`` is None for description, a record for VQA.

    Stage failures are raised as :class:`StageError`; the partial report is
    available as ``exc.report``.
    """
    transcript = Transcript()
    report = RegionReport(region.region_id, attempt=attempt, transcript=transcript.entries)
    conv = region_conversation(region, mode, attempt)
    stage = "navigation_planning"
    try:
        t0 = time.perf_counter()
        report.plan = run_navigation_planning(region, backend, prompts, mode, config=config,
                                              transcript=transcript, conversation_id=conv)
        t1 = time.perf_counter()
        stage = "execution"
        report.view_images = execute_plan(region, report.plan, config.out_res, config.max_magnification)
        report.views = [v.record() for v in report.view_images]
        t2 = time.perf_counter()
        stage = "reasoning"
        report.reasoning = run_reasoning(report.view_images, report.plan, backend, prompts, mode,
                                         config=config, transcript=transcript, conversation_id=conv)
        t3 = time.perf_counter()
        report.timings = {"planning_s": t1 - t0, "execution_s": t2 - t1, "reasoning_s": t3 - t2}
    except Exception as exc:
        report.error = f"[{stage}] {type(exc).__name__}: {exc}"
        if out_dir is not None:
            persist_region(report, out_dir)
        raise StageError(stage, exc, report) from exc
    if out_dir is not None:
        persist_region(report, out_dir)
    return report


def persist_region(report: RegionReport, out_dir: str | Path) -> Path:
    d = Path(out_dir) / f"region_{report.region_id}"
    d.mkdir(parents=True, exist_ok=True)
    if report.plan is not None:
        (d / "plan.json").write_text(canonical_json(nav_plan_to_obj(report.plan)))
    for k, view in enumerate(report.view_images):
        write_png(d / "views" / f"step_{k}.png", view.pixels)
    if report.reasoning is not None:
        (d / "reasoning.json").write_text(canonical_json(report.reasoning.to_json()))
    write_transcript(d / "transcript.jsonl", report.transcript)
    return d


def run_region_attempts(region: RegionImage, backend: Backend, prompts: StagePrompts,
                        record: VqaRecord, n: int = 8, *, config: AgentConfig = AgentConfig(),
                        temperature: float = GENERATION_TEMPERATURE) -> list[RegionReport]:
    """Run ``n`` independent VQA attempts for pass@k; failed attempts are kept with their error."""
    cfg = replace(config, temperature=temperature)
    reports = []
    for a in range(n):
        try:
            reports.append(run_region(region, backend, prompts, record, config=cfg, attempt=a))
        except StageError as exc:
            reports.append(exc.report)
    return reports


def _run_one(pyramid: SlidePyramid, plan, rid: int, backend, prompts, config, region_dir) -> RegionReport:
    try:
        region = extract_region(pyramid, plan.get(rid))
        return run_region(region, backend, prompts, None, config=config, out_dir=region_dir)
    except StageError as exc:
        log.warning("region %d failed: %s", rid, exc)
        return exc.report
    except PathAgentError as exc:
        log.warning("region %d failed: %s", rid, exc)
        return RegionReport(rid, error=f"[extraction] {type(exc).__name__}: {exc}")


def run_wsi(pyramid: SlidePyramid, backend: Backend, prompts: StagePrompts, *,
            config: AgentConfig = AgentConfig(), out_dir: str | Path | None = None) -> WsiReport:
    """Tile, filter, screen, then describe every prioritised region.

    Per-region failures are recorded and the run continues. With ``out_dir``
    the run is written under ``out_dir/<slide_id>/``.
    """
    slide_dir = Path(out_dir) / pyramid.slide_id if out_dir is not None else None
    full = plan_regions(pyramid.width_px, pyramid.height_px, config.region_size, config.overlap,
                        slide_id=pyramid.slide_id)
    plan = filter_regions(full, pyramid, config.min_tissue, workers=config.workers)
    if not plan.specs:
        report = WsiReport(pyramid.slide_id, None, [], warnings=["no region passed the tissue filter"])
        log.warning("%s: no region passed the tissue filter", pyramid.slide_id)
        if slide_dir is not None:
            write_wsi(report, slide_dir)
        return report

    screening = Transcript()
    thumb = make_thumbnail(pyramid, config.thumbnail_factor)
    try:
        selection = run_global_screening(thumb, plan, backend, prompts, config=config,
                                         transcript=screening, known_ids=full.ids())
    except Exception as exc:
        if slide_dir is not None:
            slide_dir.mkdir(parents=True, exist_ok=True)
            write_transcript(slide_dir / "transcript.jsonl", screening.entries)
        raise StageError("global_screening", exc) from exc

    retained = set(plan.ids())
    targets = []
    for rid in selection.priority:
        if rid not in retained:
            continue
        group = selection.group_of(rid)
        if config.skip_low_mag and group is not None and not group.needs_high_mag:
            continue
        targets.append(rid)

    def work(rid: int) -> RegionReport:
        return _run_one(pyramid, plan, rid, backend, prompts, config, slide_dir)

    if config.workers > 1 and len(targets) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            region_reports = list(pool.map(work, targets))
    else:
        region_reports = [work(rid) for rid in targets]

    transcript = list(screening.entries)
    for r in region_reports:
        transcript.extend(r.transcript)
    report = WsiReport(pyramid.slide_id, selection, region_reports, transcript=transcript)
    if slide_dir is not None:
        write_wsi(report, slide_dir)
    return report


def write_wsi(report: WsiReport, slide_dir: str | Path) -> None:
    slide_dir = Path(slide_dir)
    slide_dir.mkdir(parents=True, exist_ok=True)
    if report.selection is not None:
        (slide_dir / "selection.json").write_text(canonical_json(report.selection.to_json()))
    (slide_dir / "report.json").write_text(canonical_json(report.to_json()))
    write_transcript(slide_dir / "transcript.jsonl", report.transcript)
    timings = {str(r.region_id): r.timings for r in report.region_reports}
    (slide_dir / "timings.json").write_text(canonical_json(timings))


# --------------------------------------------------------------------------
# two-stage WSI classification


def _norm(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().strip(" \t\n\"'`*.").lower())


def match_label(text: str, labels: Sequence[str]) -> str:
    """The single label equal to, or else contained in, ``text`` (case-insensitive)."""
    reply = _norm(text)
    exact = [lab for lab in labels if _norm(lab) == reply]
    if len(exact) == 1:
        return exact[0]
    found = [lab for lab in labels if _norm(lab) and _norm(lab) in reply]
    if len(found) != 1:
        raise LabelMismatch(f"reply matches {len(found)} labels: {text[:200]!r}")
    return found[0]


def classify_wsi(report: WsiReport, labels: Sequence[str], backend: Backend, prompts: StagePrompts, *,
                 config: AgentConfig = AgentConfig(), transcript: Transcript | None = None) -> str:
    if not labels:
        raise ValueError("labels must be nonempty")
    regions = [r for r in report.region_reports if r.reasoning is not None]
    if not regions:
        raise PathAgentError(f"{report.slide_id}: no region conclusions to classify")
    descriptions = "\n\n".join(f"Region {r.region_id}: {r.reasoning.conclusion}" for r in regions)
    text = prompts.render("wsi_classification", descriptions=descriptions,
                          labels="\n".join(f"- {lab}" for lab in labels))
    transcript = transcript if transcript is not None else Transcript()
    reply = transcript.call(backend, _request(config, ChatMessage.user(text)),
                            f"{report.slide_id}/classification", "wsi_classification")
    return match_label(reply, labels)


def report_from_json(data: dict) -> WsiReport:
    """Rebuild enough of a :class:`WsiReport` from ``report.json`` to classify it."""
    from .nav_dsl import nav_plan_from_obj, region_selection_from_obj

    regions = []
    for r in data.get("regions", []):
        reasoning = None
        if r.get("reasoning"):
            rr = r["reasoning"]
            reasoning = ReasoningResult(tuple(rr.get("step_notes", ())), rr["conclusion"], rr.get("answer_index"))
        plan = nav_plan_from_obj(r["plan"]) if r.get("plan") else None
        regions.append(RegionReport(r["region_id"], plan=plan, views=r.get("views", []),
                                    reasoning=reasoning, error=r.get("error")))
    sel = region_selection_from_obj(data["selection"]) if data.get("selection") else None
    return WsiReport(data["slide_id"], sel, regions, data.get("predicted_label"), data.get("warnings", []))
