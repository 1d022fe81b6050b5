from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pathagent.backend import always, on_stage  # noqa: E402

HE_PINK = (200, 120, 180)
WHITE = (245, 245, 245)
QUAD_COLORS = ((220, 30, 30), (30, 200, 30), (30, 30, 220), (200, 200, 30))  # TL, TR, BL, BR


def smooth_region(seed: int, n: int = 1024, width: int | None = None) -> np.ndarray:
    """Low-frequency random RGB field; smooth enough that resampling paths agree."""
    rng = np.random.default_rng(seed)
    w = n if width is None else width
    y, x = np.arange(n) / n, np.arange(w) / n
    out = np.empty((n, w, 3))
    for c in range(3):
        f = np.full((n, w), 128.0)
        for _ in range(4):
            fx, fy = rng.uniform(0.5, 3, 2)
            px, py = rng.uniform(0, 2 * np.pi, 2)
            f += rng.uniform(10, 30) * np.outer(np.cos(2 * np.pi * fy * y + py), np.cos(2 * np.pi * fx * x + px))
        out[..., c] = f
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def quad_region(n: int = 1024) -> np.ndarray:
    img = np.empty((n, n, 3), dtype=np.uint8)
    h = n // 2
    img[:h, :h], img[:h, h:], img[h:, :h], img[h:, h:] = QUAD_COLORS
    return img


def noise(shape, seed=0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, size=(*shape, 3), dtype=np.uint8)


def solid(h, w, color) -> np.ndarray:
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = color
    return img


def plan_text(steps) -> str:
    return json.dumps({"steps": [
        {"action": a, "center": list(c), "magnification": m, "rationale": f"look {i}"}
        for i, (a, c, m) in enumerate(steps)
    ]})


def reasoning_text(n_notes: int, conclusion: str = "tumour present", answer_index=None) -> str:
    obj = {"step_notes": [f"note {i}" for i in range(n_notes)], "conclusion": conclusion}
    if answer_index is not None:
        obj["answer_index"] = answer_index
    return "```json\n" + json.dumps(obj) + "\n```"


THREE_STEPS = [("overview", (0.5, 0.5), 1), ("zoom_in", (0.3, 0.4), 2.5), ("move", (0.7, 0.4), 2.5)]


def two_region_slide(slide_id: str = "slide1"):
    """1997x1024 H&E-coloured slide that tiles into exactly two 1024-px regions."""
    from pathagent.slide_model import pyramid_from_array

    base = smooth_region(7, 1024, width=1997)
    base = (0.5 * base + 0.5 * np.array(HE_PINK)).astype(np.uint8)
    return pyramid_from_array(base, slide_id, downsamples=(1, 4))


def golden_script(slide_id: str = "slide1", fail_region: int | None = None):
    from pathagent.errors import BackendTimeout

    sel = {"groups": [{"name": "tumour core", "region_ids": [1, 0], "needs_high_mag": True}],
           "priority": [1, 0]}
    script = {f"{slide_id}/screening": [(on_stage("global_screening"), json.dumps(sel))]}
    for rid in (0, 1):
        plan = plan_text(THREE_STEPS)
        entries = [(on_stage("navigation_planning"), plan)]
        if rid == fail_region:
            entries.append((on_stage("reasoning"), BackendTimeout("scripted timeout")))
        else:
            entries.append((on_stage("reasoning"), reasoning_text(3, f"region {rid}: invasive carcinoma")))
        script[f"{slide_id}/region_{rid}"] = entries
    return script


@pytest.fixture
def prompts():
    from pathagent.agent_runtime import load_prompts

    return load_prompts()


@pytest.fixture
def small_config():
    from pathagent.agent_runtime import AgentConfig

    return AgentConfig(out_res=256, region_size=1024, thumbnail_factor=8)


# --------------------------------------------------------------------------
# acceptance reporting: one line per criterion, shown even without -s

ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
