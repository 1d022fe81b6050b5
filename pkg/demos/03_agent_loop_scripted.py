"""The screening -> planning -> reasoning loop against a scripted backend.

Nothing here calls a real model: each conversation replays canned replies, so
the run is deterministic and the transcripts can be diffed.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from pathagent import agent_runtime as rt
from pathagent.backend import ScriptedBackend, on_stage
from pathagent.slide_model import pyramid_from_array

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/agent")

rng = np.random.default_rng(1)
base = (np.array([200, 120, 180]) + rng.normal(0, 12, (1024, 1997, 3))).clip(0, 255).astype(np.uint8)
pyramid = pyramid_from_array(base, "demo", downsamples=(1, 4))

selection = {"groups": [{"name": "carcinoma", "region_ids": [1, 0], "needs_high_mag": True}], "priority": [1, 0]}
plan = {"steps": [
    {"action": "overview", "center": [0.5, 0.5], "magnification": 1, "rationale": "architecture"},
    {"action": "zoom_in", "center": [0.3, 0.6], "magnification": 2.5, "rationale": "gland crowding"},
    {"action": "move", "center": [0.7, 0.4], "magnification": 2.5, "rationale": "compare margin"},
]}
reasoning = {"step_notes": ["solid sheets", "irregular glands", "infiltrative edge"],
             "conclusion": "Invasive ductal carcinoma, grade 2."}

script = {"demo/screening": [(on_stage("global_screening"), json.dumps(selection))],
          "demo/classification": [(on_stage("wsi_classification"), "Invasive ductal carcinoma")]}
for rid in (0, 1):
    script[f"demo/region_{rid}"] = [(on_stage("navigation_planning"), "Here is my plan:\n" + json.dumps(plan)),
                                    (on_stage("reasoning"), "```json\n" + json.dumps(reasoning) + "\n```")]
backend = ScriptedBackend(script)

config = rt.AgentConfig(out_res=256, region_size=1024, thumbnail_factor=8, workers=2)
prompts = rt.load_prompts()
report = rt.run_wsi(pyramid, backend, prompts, config=config, out_dir=out)

for r in report.region_reports:
    print(f"region {r.region_id}: {len(r.views)} views -> {r.reasoning.conclusion}")
    for v in r.views:
        print(f"   step {v['step']}: rect {v['provenance']} capped={v['capped']} clamped={v['clamped']}")

label = rt.classify_wsi(report, ["Invasive ductal carcinoma", "Invasive lobular carcinoma"], backend, prompts)
print("slide label:", label)

stages = [json.loads(line)["stage"] for line in (out / "demo" / "transcript.jsonl").read_text().splitlines()]
print("transcript stages:", stages)
