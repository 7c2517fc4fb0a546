"""Acceptance criteria.  Each test prints one PASS/FAIL line to the terminal, then asserts."""
import copy
import io
import json
import time

import numpy as np
import pytest

from camera_factory import random_model, random_table_point
from scene_factory import PEPPER_PROGRAM, enumerate_small_worlds
from vla_kitchen import kitchen_sim as ks
from vla_kitchen.action_lang import ActionProgram, ValidationError, parse_program, serialize_program
from vla_kitchen.api import SIGNATURES, ApiCall, ApiFunction, ManipulatorId, OBJECT
from vla_kitchen.assets import asset_path
from vla_kitchen.campaigns import fixture_scene_for, generate_vision_cases, run_vision_campaign
from vla_kitchen.cli import main
from vla_kitchen.geometry import DistortionCoefficients, PixelPoint, apply_lens_distortion, pixel_to_world, undistort_pixel, world_to_pixel
from vla_kitchen.kitchen_sim import ActionError, make_world
from vla_kitchen.llm_gateway import BackendConfig, LlmClient, MockScenario
from vla_kitchen.orchestrator import Outcome, Pipeline, load_config
from vla_kitchen.perception import ErrorInjection, SimDetector
from vla_kitchen.recipe_rag import fixture_recipes, index, retrieve
from vla_kitchen.scene import load_scene

RECIPES = fixture_recipes()


@pytest.fixture
def verdict(capsys):
    def emit(criterion: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        assert ok, detail

    return emit


def test_c1_geometry_round_trip(verdict):
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        m = random_model(rng, "normalized")
        w = random_table_point(rng, m)
        p_u, _ = world_to_pixel(m, w)
        back = pixel_to_world(m, apply_lens_distortion(m, p_u))
        worst = max(worst, float(np.max(np.abs(np.subtract(tuple(back), tuple(w))))))
    elapsed = time.perf_counter() - start
    verdict("1 geometry round trip", worst < 1e-6 and elapsed < 5.0,
            f"1000 models, max error {worst:.2e} m (< 1e-6), {elapsed:.2f} s (< 5 s)")


def test_c2_undistortion_golden_values(verdict):
    cases = [
        (DistortionCoefficients(), (0.2, -0.3), (0.2, -0.3)),
        (DistortionCoefficients(k1=0.1), (0.2, 0.0), (0.2008, 0.0)),
        (DistortionCoefficients(p1=0.01), (0.1, 0.1), (0.1002, 0.1004)),
    ]
    errors = [max(abs(a - b) for a, b in zip(undistort_pixel(d, PixelPoint(*p)), want)) for d, p, want in cases]
    verdict("2 undistortion golden values", max(errors) <= 1e-12, f"errors {[f'{e:.1e}' for e in errors]} (<= 1e-12)")


def test_c3_pepper_program(verdict):
    scene = load_scene(asset_path("scenes", "pepper.yaml"))
    program = parse_program(PEPPER_PROGRAM)
    first = None
    differing = 0
    problems = []
    for _ in range(100):
        final, trace = ks.execute_program(scene.world, program)
        pepper = final.obj("pepper")
        if pepper.state is not ks.ObjectState.CUT or pepper.location != ks.Location.bowl():
            problems.append(f"pepper ended {pepper.location}/{pepper.state.value}")
        counts = [len(trace.for_call(i)) for i in range(len(program))]
        if counts != [2, 1, 2, 1, 2, 1, 1]:
            problems.append(f"events per call {counts}")
        run = (final, trace.to_jsonl())
        if first is None:
            first = run
        elif run != first:
            differing += 1
    ok = not problems and differing == 0
    verdict("3 pepper program", ok,
            f"100 repeats, {differing} differ from the first run, problems: {sorted(set(problems)) or 'none'}")


def _outcome(fn):
    try:
        return "ok", fn()
    except ActionError as exc:
        return "error", exc.code


def test_c4_composition_law(verdict):
    worlds = list(enumerate_small_worlds(3))
    names = ["pepper", "tomato", "oil", "bowl", "cutting_board", "ghost"]
    checked = discrepancies = 0
    for w in worlds:
        for arm in ManipulatorId:
            for name in names:
                combined = _outcome(lambda: ks.cut_and_put_in(w, arm, name))
                composed = _outcome(lambda: ks.put(ks.cut(w, arm, name), arm, name))
                checked += 1
                discrepancies += combined != composed
    verdict("4 composition law", discrepancies == 0,
            f"{len(worlds)} worlds, {checked} cases, {discrepancies} discrepancies")


def test_c5_codegen_campaign(verdict, tmp_path):
    start = time.perf_counter()
    code = main(["--out-dir", str(tmp_path), "eval-codegen", "--n", "99"], io.StringIO())
    elapsed = time.perf_counter() - start
    head = json.loads((tmp_path / "eval-codegen" / "report.json").read_text())
    agg = head["aggregates"]
    thirds = all(b["cases"] == 33 for b in agg["by_recipe"].values())
    ok = code == 0 and agg["cases"] == 99 and thirds and agg["success_rate"] == 1.0 and elapsed < 60
    verdict("5 code-generation campaign", ok,
            f"{agg['successes']}/{agg['cases']} succeeded, thirds={thirds}, {elapsed:.2f} s (< 60 s)")


def test_c6_vision_metrics(verdict):
    by_name = {r.name: r for r in RECIPES}
    zero = run_vision_campaign(SimDetector(), generate_vision_cases(RECIPES, 100, seed=1), by_name, seed=1).aggregates
    a = all(zero[g][m] == 1.0 for g in ("complete", "missing") for m in ("list_accuracy", "caption_accuracy"))

    veg = generate_vision_cases([by_name["Vegetable Salad"]], 10000, seed=2, complete_fraction=1.0)
    miss = run_vision_campaign(SimDetector(ErrorInjection(0.2, 0.0)), veg, by_name, seed=2).aggregates["complete"]
    b = abs(miss["list_accuracy"] - 0.512) <= 0.02

    mixed = generate_vision_cases(RECIPES, 600, seed=3)
    lab = run_vision_campaign(SimDetector(ErrorInjection(0.0, 0.5)), mixed, by_name, seed=3).aggregates
    c = lab["missing"]["caption_accuracy"] < lab["complete"]["caption_accuracy"]

    verdict("6 vision metrics", a and b and c,
            f"(a) zero injection perfect={a}; (b) list_accuracy {miss['list_accuracy']:.4f} vs 0.512 +- 0.02 "
            f"over {miss['scenes']} scenes; (c) caption accuracy missing {lab['missing']['caption_accuracy']:.4f} "
            f"< complete {lab['complete']['caption_accuracy']:.4f}")


def test_c7_refusal_gate(verdict):
    pipeline = Pipeline(load_config())
    problems = []
    sessions = 0
    for recipe in RECIPES:
        full = fixture_scene_for(recipe.name)
        for missing in recipe.ingredients:
            objs = [o for o in full.world.objects.values() if not o.is_fixture and o.name != missing]
            scene = full.with_world(make_world(objs))
            before = copy.deepcopy(scene.world)
            trace = pipeline.handle(recipe.request, scene, seed=sessions)
            sessions += 1
            if trace.outcome is not Outcome.REFUSED:
                problems.append(f"{recipe.name} without {missing}: {trace.outcome}")
            if trace.final_state != before or scene.world != before:
                problems.append(f"{recipe.name} without {missing}: world changed")
            if trace.llm_calls("planner") or trace.llm_calls("codegen"):
                problems.append(f"{recipe.name} without {missing}: planner or codegen called")
    verdict("7 refusal gate", not problems, f"{sessions} sessions, problems: {problems or 'none'}")


# -- parser fuzz ---------------------------------------------------------------

_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789_"
_NOISE = list("abcdefgilmnoprstuw_'\"(),:#=\\ \n\t") + ["def", "if", "lambda", "\x00", "é", "'''", "```"]


def _random_program(rng: np.random.Generator) -> ActionProgram:
    calls = []
    functions = list(ApiFunction)
    for _ in range(int(rng.integers(1, 12))):
        fn = functions[int(rng.integers(len(functions)))]
        params = SIGNATURES[fn]
        arm = list(ManipulatorId)[int(rng.integers(2))] if params else None
        obj = None
        if OBJECT in params:
            length = int(rng.integers(0, 12))
            obj = _ALPHABET[int(rng.integers(26))] + "".join(_ALPHABET[int(i)] for i in rng.integers(len(_ALPHABET), size=length))
        calls.append(ApiCall(fn, arm, obj))
    return ActionProgram(tuple(calls))


def _mutate(text: str, rng: np.random.Generator) -> str:
    for _ in range(int(rng.integers(1, 4))):
        op = int(rng.integers(5))
        i = int(rng.integers(len(text) + 1))
        if op == 0 and text:
            text = text[:i] + text[i + 1:]
        elif op == 1:
            text = text[:i] + _NOISE[int(rng.integers(len(_NOISE)))] + text[i:]
        elif op == 2:
            text = text[:i]
        elif op == 3:
            lines = text.split("\n")
            j = int(rng.integers(len(lines)))
            lines.insert(j, lines[j])
            text = "\n".join(lines)
        else:
            j = int(rng.integers(len(text) + 1))
            text = text[:min(i, j)] + text[max(i, j):] if rng.random() < 0.5 else text + text[min(i, j):max(i, j)]
    return text


def test_c8_parser_robustness(verdict):
    rng = np.random.default_rng(8)
    crashes: list[str] = []
    slowest = 0.0
    round_trip_failures = 0
    total = 100_000

    def attempt(data) -> None:
        nonlocal slowest
        t = time.perf_counter()
        try:
            parse_program(data)
        except ValidationError:
            pass
        except Exception as exc:  # any other exception is a crash
            crashes.append(f"{type(exc).__name__}: {data!r:.60}")
        slowest = max(slowest, time.perf_counter() - t)

    for _ in range(total // 2):
        attempt(rng.bytes(int(rng.integers(0, 400))))
    for _ in range(total // 2):
        program = _random_program(rng)
        text = serialize_program(program)
        if parse_program(text) != program:
            round_trip_failures += 1
        attempt(_mutate(text, rng))
    ok = not crashes and slowest < 0.1 and round_trip_failures == 0
    verdict("8 parser robustness", ok,
            f"{total} inputs, {len(crashes)} crashes, slowest {1000 * slowest:.2f} ms (< 100 ms), "
            f"{round_trip_failures} round-trip failures over {total // 2} generated programs")


def test_c9_retrieval(verdict):
    results = {}
    for _ in range(2):
        store = index(LlmClient(BackendConfig("mock", scenario=MockScenario(()))), RECIPES)
        for r in RECIPES:
            top = retrieve(store, r.request, k=len(RECIPES))
            results.setdefault(r.name, set()).add(tuple((x.recipe.name, x.score) for x in top))
    ranks = {name: next(iter(v))[0][0] for name, v in results.items()}
    stable = all(len(v) == 1 for v in results.values())
    ok = all(ranks[n] == n for n in ranks) and stable
    verdict("9 retrieval", ok, f"rank-1 per canonical request {ranks}, deterministic={stable}")
