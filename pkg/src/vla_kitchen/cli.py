"""Command-line entry point: single requests, program execution, evaluation campaigns and calibration checks."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from vla_kitchen import campaigns
from vla_kitchen.action_lang import ValidationError, parse_program, validate_against_scene
from vla_kitchen.errors import VlaKitchenError
from vla_kitchen.geometry import (
    CameraModel,
    PixelPoint,
    apply_lens_distortion,
    load_calibration,
    pixel_to_world,
    table_point,
    world_to_pixel,
)
from vla_kitchen.kitchen_sim import ProgramExecutionError, execute_program, summarize
from vla_kitchen.llm_gateway import GatewayError, LlmClient
from vla_kitchen.orchestrator import Outcome, Pipeline, load_config
from vla_kitchen.perception import ErrorInjection, SimDetector, VlmDetector
from vla_kitchen.recipe_rag import load_recipes
from vla_kitchen.scene import load_scene

EXIT_OK = 0
EXIT_GEOMETRY_RESIDUAL = 1
EXIT_USAGE = 2
EXIT_CODES = {
    Outcome.COMPLETED: EXIT_OK,
    Outcome.REFUSED: 3,
    Outcome.PLAN_PARSE_FAILED: 4,
    Outcome.CODE_PARSE_FAILED: 5,
    Outcome.EXECUTION_FAILED: 6,
    Outcome.GOAL_NOT_MET: 7,
    Outcome.BACKEND_FAILED: 8,
}
RESIDUAL_LIMIT = 1e-6

EPILOG = "exit codes:\n  0 Completed\n  1 geometry residual too large\n  2 usage or load error\n" + "".join(
    f"  {code} {o.value}\n" for o, code in EXIT_CODES.items() if code
)


class UsageError(Exception):
    pass


# -- run -----------------------------------------------------------------------


def cmd_run(args: argparse.Namespace, out: TextIO) -> int:
    scene = load_scene(args.scene)
    pipeline = Pipeline(load_config(args.config, args.backend))
    trace = pipeline.handle(args.request, scene, seed=args.seed)
    path = Path(args.trace) if args.trace else Path(args.out_dir) / "trace.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(trace.to_jsonl(), encoding="utf-8")
    assert trace.outcome is not None
    last = trace.entries[-1]
    detail = {k: v for k, v in last.items() if k not in ("stage", "outcome", "final_state")}
    print(f"outcome: {trace.outcome.value}", file=out)
    if detail:
        print(f"detail: {json.dumps(detail, sort_keys=True, default=str)}", file=out)
    print(f"trace: {path}", file=out)
    return EXIT_CODES[trace.outcome]


# -- sim-exec ------------------------------------------------------------------


def cmd_sim_exec(args: argparse.Namespace, out: TextIO) -> int:
    try:
        source = Path(args.program).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read program: {exc}") from None
    scene = load_scene(args.scene)
    try:
        program = parse_program(source)
    except ValidationError as exc:
        print(f"{args.program}:{exc}", file=out)
        return EXIT_CODES[Outcome.CODE_PARSE_FAILED]
    problems = validate_against_scene(program, scene.world.names())
    if problems:
        for p in problems:
            print(f"{args.program}:{p}", file=out)
        return EXIT_CODES[Outcome.CODE_PARSE_FAILED]
    trace_path = Path(args.out_dir) / "sim_trace.jsonl"
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        final, trace = execute_program(scene.world, program)
    except ProgramExecutionError as exc:
        trace_path.write_text(exc.trace.to_jsonl(), encoding="utf-8")
        line = program.spans[exc.call_index].line
        print(
            f"{args.program}:line {line}: call #{exc.call_index + 1} ({program.calls[exc.call_index]}) failed: "
            f"{exc.error.code.value}: {exc.error}",
            file=out,
        )
        print(json.dumps(summarize(exc.state), indent=2, sort_keys=True), file=out)
        return EXIT_CODES[Outcome.EXECUTION_FAILED]
    trace_path.write_text(trace.to_jsonl(), encoding="utf-8")
    print(f"executed {len(program)} calls, {len(trace)} events", file=out)
    print(json.dumps(summarize(final), indent=2, sort_keys=True), file=out)
    print(f"trace: {trace_path}", file=out)
    return EXIT_OK


# -- geom-check ----------------------------------------------------------------


def round_trip_residual(m: CameraModel, grid: int = 21, half_fov: float = 0.5) -> tuple[float, int]:
    """Largest world-space error of pixel_to_world(distort(world_to_pixel(w))) over a grid of table points.

    Points are laid out on a regular ``grid`` x ``grid`` lattice of normalized
    image coordinates in ``[-half_fov, half_fov]`` and lifted onto the table.
    """
    worst = 0.0
    count = 0
    for yn in np.linspace(-half_fov, half_fov, grid):
        for xn in np.linspace(-half_fov, half_fov, grid):
            w = table_point(m, PixelPoint(*m.intrinsics.project(float(xn), float(yn))))
            p_u, _ = world_to_pixel(m, w)
            back = pixel_to_world(m, apply_lens_distortion(m, p_u))
            worst = max(worst, float(np.max(np.abs(np.subtract(tuple(back), tuple(w))))))
            count += 1
    return worst, count


def cmd_geom_check(args: argparse.Namespace, out: TextIO) -> int:
    m = load_calibration(args.calibration)
    residual, count = round_trip_residual(m, args.grid, args.half_fov)
    ok = residual < RESIDUAL_LIMIT
    print(f"points: {count}", file=out)
    print(f"max residual: {residual:.3e} m", file=out)
    print(f"limit: {RESIDUAL_LIMIT:.0e} m -> {'OK' if ok else 'FAIL'}", file=out)
    return EXIT_OK if ok else EXIT_GEOMETRY_RESIDUAL


# -- campaigns -----------------------------------------------------------------


def _pct(x: float) -> str:
    return f"{100 * x:6.2f}%"


def cmd_eval_codegen(args: argparse.Namespace, out: TextIO) -> int:
    config = load_config(args.config, args.backend)
    if args.no_execute:
        config = dataclasses.replace(config, execute=False)
    pipeline = Pipeline(config)
    if args.requests:
        cases = campaigns.load_requests(args.requests)
    else:
        cases = campaigns.generate_requests(list(pipeline.store.recipes), args.n, args.seed)
    report = campaigns.run_codegen_campaign(pipeline, cases, seed=args.seed, workers=args.workers)
    where = report.save(Path(args.out_dir) / "eval-codegen")
    agg = report.aggregates
    for note in report.notes:
        print(f"# {note}", file=out)
    print(f"{'recipe':<20} {'ok':>5} {'cases':>6} {'rate':>8}", file=out)
    for name, b in agg["by_recipe"].items():
        print(f"{name:<20} {b['successes']:>5} {b['cases']:>6} {_pct(b['success_rate']):>8}", file=out)
    print(f"{'total':<20} {agg['successes']:>5} {agg['cases']:>6} {_pct(agg['success_rate']):>8}", file=out)
    print(f"outcomes: {json.dumps(agg['outcomes'])}", file=out)
    print(f"report: {where / 'report.json'}", file=out)
    return EXIT_OK


def cmd_eval_vision(args: argparse.Namespace, out: TextIO) -> int:
    config = load_config(args.config, args.backend)
    recipes = {r.name: r for r in load_recipes(config.recipes)}
    if args.manifest:
        cases = campaigns.load_manifest(args.manifest)
    else:
        chosen = [recipes[n] for n in args.recipe] if args.recipe else list(recipes.values())
        cases = campaigns.generate_vision_cases(chosen, args.scenes, args.seed, args.complete_fraction)
    unknown = sorted({c.recipe for c in cases} - set(recipes))
    if unknown:
        raise UsageError(f"manifest names unknown recipes: {unknown}")
    if config.detector == "vlm":
        detector = VlmDetector(LlmClient(config.vlm or config.llm))
        setting = {"detector": "vlm"}
    else:
        inj = ErrorInjection(
            config.injection.miss_rate if args.miss_rate is None else args.miss_rate,
            config.injection.mislabel_rate if args.mislabel_rate is None else args.mislabel_rate,
        )
        detector = SimDetector(inj)
        setting = {"detector": "sim", "miss_rate": inj.miss_rate, "mislabel_rate": inj.mislabel_rate}
    report = campaigns.run_vision_campaign(detector, cases, recipes, seed=args.seed, config=setting)
    where = report.save(Path(args.out_dir) / "eval-vision")
    for note in report.notes:
        print(f"# {note}", file=out)
    print(f"{'group':<10} {'scenes':>7} {'list_acc':>9} {'caption_acc':>12}", file=out)
    for group in ("complete", "missing", "all"):
        g = report.aggregates[group]
        print(f"{group:<10} {g['scenes']:>7} {_pct(g['list_accuracy']):>9} {_pct(g['caption_accuracy']):>12}", file=out)
    errors = sum(1 for r in report.rows if r.get("error"))
    if errors:
        print(f"rows with backend errors: {errors}", file=out)
    print(f"report: {where / 'report.json'}", file=out)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _rate(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"rate must lie in [0, 1], got {text}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vla-kitchen", description=__doc__, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument("--config", help="pipeline config YAML (default: bundled mock config)")
    parser.add_argument("--seed", type=int, default=0, help="base seed for sessions and campaigns")
    parser.add_argument("--out-dir", default="vla_out", help="directory for traces and reports")
    parser.add_argument("--backend", choices=("mock", "remote"), help="override the config's backend choice")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="handle one request against a scene")
    p.add_argument("request")
    p.add_argument("--scene", required=True, help="scene YAML")
    p.add_argument("--trace", help="trace path (default: OUT_DIR/trace.jsonl)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sim-exec", help="execute a program file in the simulator")
    p.add_argument("program")
    p.add_argument("--scene", required=True, help="scene YAML")
    p.set_defaults(func=cmd_sim_exec)

    p = sub.add_parser("geom-check", help="round-trip check of a calibration file")
    p.add_argument("calibration")
    p.add_argument("--grid", type=_positive, default=21, help="grid points per axis")
    p.add_argument("--half-fov", type=float, default=0.5, help="grid half-extent in normalized image units")
    p.set_defaults(func=cmd_geom_check)

    p = sub.add_parser("eval-codegen", help="code-generation success over phrased requests")
    p.add_argument("--n", type=int, default=99, help="number of requests (split evenly, remainder to the first recipe)")
    p.add_argument("--requests", help="YAML list of {request, recipe} instead of generated phrasings")
    p.add_argument("--no-execute", action="store_true", help="stop after parsing and validation")
    p.add_argument("--workers", type=_positive, default=1, help="sessions run in parallel")
    p.set_defaults(func=cmd_eval_codegen)

    p = sub.add_parser("eval-vision", help="ingredient-list and caption accuracy over scenes")
    p.add_argument("--manifest", help="YAML list of {recipe, complete, scene}; generated when omitted")
    p.add_argument("--scenes", type=_positive, default=100, help="generated scene count")
    p.add_argument("--complete-fraction", type=_rate, default=0.5, help="share of generated scenes with every ingredient")
    p.add_argument("--recipe", action="append", help="restrict generated scenes to this recipe (repeatable)")
    p.add_argument("--miss-rate", type=_rate, help="override the config's simulated miss rate")
    p.add_argument("--mislabel-rate", type=_rate, help="override the config's simulated mislabel rate")
    p.set_defaults(func=cmd_eval_vision)
    return parser


def main(argv: Sequence[str] | None = None, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out)
    except GatewayError as exc:
        print(f"vla-kitchen {args.command}: backend error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CODES[Outcome.BACKEND_FAILED]
    except (UsageError, VlaKitchenError, OSError, KeyError, ValueError) as exc:
        print(f"vla-kitchen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
