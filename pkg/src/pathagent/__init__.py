"""Agent runtime and evaluation harness for multi-scale pathology slide navigation."""

from .slide_model import (
    RegionImage,
    SlidePyramid,
    ViewImage,
    Viewport,
    annotate_grid,
    crop_viewport,
    load_pyramid,
    make_thumbnail,
    multiscale_grid,
    viewport_window,
)
from .region_tiler import RegionSpec, TilingPlan, extract_region, filter_regions, plan_regions, tissue_fraction
from .nav_dsl import (
    NavPlan,
    NavStep,
    ReasoningResult,
    RegionSelection,
    extract_answer,
    parse_nav_plan,
    parse_region_selection,
    serialize_nav_plan,
)
from .backend import BackendProfile, ChatMessage, CompletionRequest, HttpBackend, ScriptedBackend
from .agent_runtime import (
    AgentConfig,
    classify_wsi,
    execute_plan,
    load_prompts,
    run_global_screening,
    run_navigation_planning,
    run_reasoning,
    run_region,
    run_wsi,
)
from .eval_harness import aggregate_pass_at_k, balanced_accuracy, pass_at_k, score_vqa
from .dataset_io import VqaRecord, load_vqa_manifest, pair_reports, shortcut_filter

__version__ = "0.1.0"
