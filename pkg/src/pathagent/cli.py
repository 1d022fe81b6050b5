"""``pathagent`` command line.

Settings resolve as flags > ``--config`` file (JSON or TOML) > defaults, and the
resolved settings are written to ``<out>/config.resolved.json`` on every run.
Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Sequence

try:  # Python 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover
    import tomli as _toml

from . import agent_runtime as rt
from . import dataset_io, eval_harness, region_tiler, slide_model
from .backend import (
    EVAL_TEMPERATURE,
    GENERATION_TEMPERATURE,
    BackendProfile,
    HttpBackend,
    ScriptedBackend,
    load_profile,
)
from .errors import PathAgentError
from .nav_dsl import parse_nav_plan

log = logging.getLogger("pathagent")


@dataclass(frozen=True)
class RunConfig:
    backend: str | None = None  # profile JSON/TOML
    script: str | None = None  # scripted backend JSON, used instead of a live profile
    prompts: str | None = None
    out_res: int = slide_model.DEFAULT_OUT_RES
    region_size: int = slide_model.REGION_SIZE
    overlap: float = region_tiler.DEFAULT_OVERLAP
    min_tissue: float = region_tiler.DEFAULT_MIN_TISSUE
    s_min: float = region_tiler.SATURATION_MIN
    v_max: float = region_tiler.VALUE_MAX
    thumbnail_factor: int = slide_model.THUMBNAIL_FACTOR
    max_steps: int = 12
    max_magnification: float | None = None
    attempts: int = 8
    eval_temperature: float = EVAL_TEMPERATURE
    generation_temperature: float = GENERATION_TEMPERATURE
    workers: int = 1
    out: str = "."
    seed: int | None = None
    skip_low_mag: bool = False

    def validate(self) -> None:
        checks = [
            (self.out_res >= 1, "out_res must be >= 1"),
            (self.region_size >= 1, "region_size must be >= 1"),
            (0 <= self.overlap < 1, "overlap must lie in [0, 1)"),
            (0 <= self.min_tissue <= 1, "min_tissue must lie in [0, 1]"),
            (self.thumbnail_factor >= 1, "thumbnail_factor must be >= 1"),
            (self.max_steps >= 1, "max_steps must be >= 1"),
            (self.max_magnification is None or self.max_magnification >= 1, "max_magnification must be >= 1"),
            (self.attempts >= 1, "attempts must be >= 1"),
            (0 <= self.eval_temperature <= 2, "eval_temperature must lie in [0, 2]"),
            (0 <= self.generation_temperature <= 2, "generation_temperature must lie in [0, 2]"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise UsageError(msg)

    def agent(self) -> rt.AgentConfig:
        return rt.AgentConfig(
            out_res=self.out_res, region_size=self.region_size, overlap=self.overlap,
            min_tissue=self.min_tissue, thumbnail_factor=self.thumbnail_factor,
            max_steps=self.max_steps, max_magnification=self.max_magnification,
            temperature=self.eval_temperature, seed=self.seed, workers=self.workers,
            skip_low_mag=self.skip_low_mag,
        )


CONFIG_KEYS = {f.name for f in fields(RunConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(message)


def _read_config_file(path: str) -> dict[str, Any]:
    p = Path(path)
    if p.suffix == ".toml":
        data = _toml.loads(p.read_text())
    else:
        data = json.loads(p.read_text())
    data = data.get("config", data)
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    layer: dict[str, Any] = {}
    if getattr(args, "rerun", False):
        saved = Path(getattr(args, "out", ".")) / "config.resolved.json"
        if not saved.exists():
            raise UsageError(f"--rerun needs {saved}")
        layer.update(_read_config_file(str(saved)))
    if getattr(args, "config", None):
        layer.update(_read_config_file(args.config))
    for key in CONFIG_KEYS:
        if key in vars(args):
            layer[key] = vars(args)[key]
    cfg = replace(RunConfig(), **layer)
    cfg.validate()
    return cfg


def _write_resolved(cfg: RunConfig, command: str, extra: dict[str, Any]) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": asdict(cfg), "inputs": extra}
    path = out / "config.resolved.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


class _JsonLines(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"level": record.levelname, "logger": record.name, "msg": record.getMessage()})


def _attach_log(out: str) -> logging.Handler:
    Path(out).mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(Path(out) / "log.jsonl", mode="w", encoding="utf-8")
    handler.setFormatter(_JsonLines())
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def make_backend(cfg: RunConfig, script: str | None = None, profile: str | None = None):
    script = script if script is not None else cfg.script
    profile = profile if profile is not None else cfg.backend
    if script:
        prof = load_profile(profile) if profile else BackendProfile(name=Path(script).stem,
                                                                    max_images_per_request=64)
        return ScriptedBackend.from_file(script, prof)
    if profile:
        return HttpBackend(load_profile(profile), seed=cfg.seed)
    raise UsageError("a backend is required: pass --backend PROFILE or --script SCRIPT")


# --------------------------------------------------------------------------
# commands


def cmd_tile(args, cfg: RunConfig) -> int:
    pyr = slide_model.load_pyramid(args.slide)
    plan = region_tiler.plan_regions(pyr.width_px, pyr.height_px, cfg.region_size, cfg.overlap,
                                     slide_id=pyr.slide_id)
    kept = region_tiler.filter_regions(plan, pyr, cfg.min_tissue, cfg.s_min, cfg.v_max, workers=cfg.workers)
    slide_dir = Path(cfg.out) / pyr.slide_id
    slide_dir.mkdir(parents=True, exist_ok=True)
    for spec in kept.specs:
        region = region_tiler.extract_region(pyr, spec)
        slide_model.save_region(region, slide_dir / f"region_{spec.region_id}.png")
    region_tiler.write_region_manifest(slide_dir / "regions.jsonl", kept)
    print(f"{len(kept.specs)} of {len(plan.specs)} regions kept -> {slide_dir}")
    return 0


def cmd_thumbnail(args, cfg: RunConfig) -> int:
    pyr = slide_model.load_pyramid(args.slide)
    thumb = slide_model.make_thumbnail(pyr, cfg.thumbnail_factor)
    path = Path(cfg.out) / f"{pyr.slide_id}_thumbnail.png"
    slide_model.write_png(path, thumb)
    print(path)
    return 0


def cmd_grid(args, cfg: RunConfig) -> int:
    image = slide_model.read_raster(args.image)
    path = Path(cfg.out) / f"{Path(args.image).stem}_grid.png"
    slide_model.write_png(path, slide_model.annotate_grid(image, args.interval))
    print(path)
    return 0


def cmd_crop(args, cfg: RunConfig) -> int:
    region = slide_model.load_region(args.region)
    plan = parse_nav_plan(Path(args.plan).read_text())
    views = rt.execute_plan(region, plan, cfg.out_res, cfg.max_magnification)
    out = Path(cfg.out)
    for v in views:
        slide_model.write_png(out / "views" / f"step_{v.step_index}.png", v.pixels)
    (out / "views.json").write_text(rt.canonical_json([v.record() for v in views]))
    print(f"{len(views)} views -> {out / 'views'}")
    return 0


def _find_record(manifest: str, record_id: str) -> dataset_io.VqaRecord:
    for r in dataset_io.load_vqa_manifest(manifest):
        if r.record_id == record_id:
            return r
    raise PathAgentError(f"record {record_id!r} not in {manifest}")


def cmd_run_region(args, cfg: RunConfig) -> int:
    region = slide_model.load_region(args.region)
    backend = make_backend(cfg)
    prompts = rt.load_prompts(cfg.prompts)
    record = _find_record(args.vqa, args.record) if args.vqa else None
    out = Path(cfg.out)
    if record is not None and args.pass_at_k:
        reports = rt.run_region_attempts(region, backend, prompts, record, cfg.attempts,
                                         config=cfg.agent(), temperature=cfg.generation_temperature)
        preds = []
        for r in reports:
            rt.persist_region(r, out / f"attempt_{r.attempt}")
            if r.reasoning is not None and r.reasoning.answer_index is not None:
                preds.append(eval_harness.VqaPrediction(record.record_id, r.attempt, r.reasoning.answer_index))
            else:
                preds.append(eval_harness.VqaPrediction(record.record_id, r.attempt, error=r.error or "no answer"))
        eval_harness.write_predictions(out / "predictions.jsonl", preds)
        c = sum(p.answer_index == record.answer_index for p in preds)
        print(f"{c}/{len(preds)} attempts correct")
        return 0
    report = rt.run_region(region, backend, prompts, record, config=cfg.agent(), out_dir=out)
    print(report.reasoning.conclusion)
    if record is not None:
        eval_harness.write_predictions(out / "predictions.jsonl", [
            eval_harness.VqaPrediction(record.record_id, 0, report.reasoning.answer_index)])
    return 0


def cmd_run_wsi(args, cfg: RunConfig) -> int:
    pyr = slide_model.load_pyramid(args.slide)
    backend = make_backend(cfg)
    report = rt.run_wsi(pyr, backend, rt.load_prompts(cfg.prompts), config=cfg.agent(), out_dir=cfg.out)
    print(f"{len(report.region_reports)} regions described, {len(report.failures)} failed "
          f"-> {Path(cfg.out) / pyr.slide_id}")
    return 0


def _labels(args) -> list[str]:
    if args.labels_file:
        return [ln.strip() for ln in Path(args.labels_file).read_text().splitlines() if ln.strip()]
    return [s.strip() for s in args.labels.split(",") if s.strip()]


def cmd_classify_wsi(args, cfg: RunConfig) -> int:
    report = rt.report_from_json(json.loads(Path(args.report).read_text()))
    labels = _labels(args)
    if not labels:
        raise UsageError("pass --labels or --labels-file")
    label = rt.classify_wsi(report, labels, make_backend(cfg), rt.load_prompts(cfg.prompts), config=cfg.agent())
    (Path(cfg.out) / "classification.json").write_text(
        rt.canonical_json({"slide_id": report.slide_id, "label": label, "labels": labels}))
    print(label)
    return 0


def _eval(manifest: str, predictions: str, ks: Sequence[int]) -> eval_harness.EvalReport:
    gold = dataset_io.load_vqa_manifest(manifest)
    preds = eval_harness.load_predictions(predictions)
    first = [p for p in preds if p.attempt_index == 0]
    rep = eval_harness.score_vqa(first, gold)
    if ks:
        attempted = {p.record_id for p in preds}
        rep.pass_at_k = eval_harness.aggregate_pass_at_k(
            preds, [g for g in gold if g.record_id in attempted], ks)
    return rep


def _ks(text: str | None) -> list[int]:
    return [int(k) for k in text.split(",")] if text else []


def cmd_eval_vqa(args, cfg: RunConfig) -> int:
    rep = _eval(args.manifest, args.predictions, _ks(args.ks))
    out = Path(cfg.out)
    (out / "eval_report.json").write_text(rt.canonical_json(rep.to_json()))
    table = eval_harness.render_table(rep, dataset_io.SUBSETS)
    (out / "table.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_pass_at_k(args, cfg: RunConfig) -> int:
    print(f"{eval_harness.pass_at_k(args.n, args.c, args.k):.6f}")
    return 0


def cmd_filter_shortcuts(args, cfg: RunConfig) -> int:
    records = dataset_io.load_vqa_manifest(args.manifest)
    backends = [
        make_backend(cfg, script=args.script_a, profile=args.backend_a),
        make_backend(cfg, script=args.script_b, profile=args.backend_b),
    ]
    result = dataset_io.shortcut_filter(records, backends, rt.load_prompts(cfg.prompts), workers=cfg.workers)
    dataset_io.write_filter_outputs(cfg.out, result)
    print(f"kept {len(result.kept)}, dropped {len(result.dropped)}")
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    if args.eval:
        rep = eval_harness.report_from_json(json.loads(Path(args.eval).read_text()))
    elif args.manifest and args.predictions:
        rep = _eval(args.manifest, args.predictions, _ks(args.ks))
    else:
        raise UsageError("pass --eval REPORT or --manifest and --predictions")
    table = eval_harness.render_table(rep, dataset_io.SUBSETS)
    (Path(cfg.out) / "table.txt").write_text(table)
    print(table, end="")
    return 0


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON or TOML file of RunConfig keys")
    p.add_argument("--out", default=S, help="output directory (default: .)")
    p.add_argument("--workers", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--rerun", action="store_true", help="reuse <out>/config.resolved.json")


def _backend_opts(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--backend", default=S, help="backend profile (JSON/TOML)")
    p.add_argument("--script", default=S, help="scripted-backend JSON instead of a live backend")
    p.add_argument("--prompts", default=S, help="prompt pack directory")
    p.add_argument("--eval-temperature", type=float, default=S)
    p.add_argument("--generation-temperature", type=float, default=S)


def _tiling_opts(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--region-size", type=int, default=S)
    p.add_argument("--overlap", type=float, default=S)
    p.add_argument("--min-tissue", type=float, default=S)
    p.add_argument("--s-min", type=float, default=S, help="tissue saturation threshold")
    p.add_argument("--v-max", type=float, default=S, help="tissue value threshold")


def _view_opts(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--out-res", type=int, default=S)
    p.add_argument("--max-steps", type=int, default=S)
    p.add_argument("--max-magnification", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pathagent", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tile", help="plan, filter and extract huge regions")
    p.add_argument("--slide", required=True, help="slide.json manifest")
    _tiling_opts(p)
    _common(p)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("thumbnail", help="downscaled slide overview")
    p.add_argument("--slide", required=True)
    p.add_argument("--thumbnail-factor", "--factor", dest="thumbnail_factor", type=int, default=argparse.SUPPRESS)
    _common(p)
    p.set_defaults(func=cmd_thumbnail)

    p = sub.add_parser("grid", help="draw a relative-coordinate grid on an image")
    p.add_argument("--image", required=True)
    p.add_argument("--interval", type=float, default=0.1)
    _common(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("crop", help="execute a navigation plan file against a region")
    p.add_argument("--region", required=True)
    p.add_argument("--plan", required=True)
    _view_opts(p)
    _common(p)
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("run-region", help="plan, view and reason over one region")
    p.add_argument("--region", required=True)
    p.add_argument("--vqa", help="VQA manifest; with --record runs in VQA mode")
    p.add_argument("--record")
    p.add_argument("--pass-at-k", action="store_true", help="run --attempts attempts at generation temperature")
    p.add_argument("--attempts", type=int, default=argparse.SUPPRESS)
    _backend_opts(p)
    _view_opts(p)
    _common(p)
    p.set_defaults(func=cmd_run_region)

    p = sub.add_parser("run-wsi", help="full screening -> planning -> reasoning run over a slide")
    p.add_argument("--slide", required=True)
    p.add_argument("--skip-low-mag", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--thumbnail-factor", type=int, default=argparse.SUPPRESS)
    _backend_opts(p)
    _tiling_opts(p)
    _view_opts(p)
    _common(p)
    p.set_defaults(func=cmd_run_wsi)

    p = sub.add_parser("classify-wsi", help="classify a run-wsi report into one label")
    p.add_argument("--report", required=True)
    p.add_argument("--labels", default="", help="comma-separated labels")
    p.add_argument("--labels-file")
    _backend_opts(p)
    _common(p)
    p.set_defaults(func=cmd_classify_wsi)

    p = sub.add_parser("eval-vqa", help="score predictions against a VQA manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--ks", help="comma-separated k values for pass@k")
    _common(p)
    p.set_defaults(func=cmd_eval_vqa)

    p = sub.add_parser("pass-at-k", help="unbiased pass@k for one (n, c, k)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    _common(p)
    p.set_defaults(func=cmd_pass_at_k)

    p = sub.add_parser("filter-shortcuts", help="drop VQA items two text-only backends both solve")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backend-a")
    p.add_argument("--backend-b")
    p.add_argument("--script-a")
    p.add_argument("--script-b")
    p.add_argument("--prompts", default=argparse.SUPPRESS)
    _common(p)
    p.set_defaults(func=cmd_filter_shortcuts)

    p = sub.add_parser("report", help="render the per-subset accuracy table")
    p.add_argument("--eval", help="eval_report.json from eval-vqa")
    p.add_argument("--manifest")
    p.add_argument("--predictions")
    p.add_argument("--ks")
    _common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    handler = _attach_log(cfg.out)
    try:
        inputs = {k: v for k, v in vars(args).items() if k not in CONFIG_KEYS and k not in ("func", "config", "rerun")}
        _write_resolved(cfg, args.command, inputs)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (PathAgentError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        log.removeHandler(handler)
        handler.close()


if __name__ == "__main__":
    sys.exit(main())
