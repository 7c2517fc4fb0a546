"""Evaluation campaigns: code generation over many phrased requests, and vision scoring over scene batches."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml

from vla_kitchen.assets import asset_path
from vla_kitchen.errors import ParseError, VlaKitchenError
from vla_kitchen.geometry import CameraModel, WorldPoint, load_calibration
from vla_kitchen.kitchen_sim import Location, ObjectKind, SimObject, make_world, sim_list_objects
from vla_kitchen.llm_gateway import GatewayError
from vla_kitchen.orchestrator import Outcome, Pipeline
from vla_kitchen.perception import Detector, ResponseParseError, SceneScore, VisionMetrics, score_scene
from vla_kitchen.recipe_rag import Preparation, Recipe
from vla_kitchen.scene import Scene, load_scene, scene_from_dict, scene_to_dict

FAILURE_STAGE = {
    Outcome.COMPLETED: None,
    Outcome.REFUSED: "availability",
    Outcome.PLAN_PARSE_FAILED: "plan",
    Outcome.CODE_PARSE_FAILED: "codegen",
    Outcome.EXECUTION_FAILED: "execution",
    Outcome.GOAL_NOT_MET: "goal",
    Outcome.BACKEND_FAILED: "backend",
}

# -- request phrasings ---------------------------------------------------------

OPENERS = ("", "Hi! ", "Hello robot, ", "Good morning. ", "Hey, ", "Excuse me, ")
BODIES = (
    "please make me a {dish}.",
    "could you prepare a {dish} for me?",
    "I would like a {dish}, please.",
    "can you make a {dish} for lunch?",
    "make a {dish}.",
    "I'm hungry, could you put together a {dish}?",
    "would you fix me a {dish} tonight?",
    "prepare a fresh {dish}, please.",
    "let's have a {dish} today.",
    "I feel like eating a {dish}.",
    "it would be great to get a {dish} now.",
)
CLOSERS = ("", " Thanks!", " Thank you.", " I'm in a hurry.")


def phrasing_pool(dish: str) -> list[str]:
    """Every phrasing for one dish; each contains the dish name verbatim."""
    out = []
    for opener in OPENERS:
        for body in BODIES:
            text = body.format(dish=dish)
            if not opener:
                text = text[0].upper() + text[1:]
            for closer in CLOSERS:
                out.append(opener + text + closer)
    return out


def dish_name(recipe: Recipe) -> str:
    return recipe.name.lower()


@dataclass(frozen=True)
class CodegenCase:
    index: int
    request: str
    recipe: str


def split_counts(n: int, k: int) -> list[int]:
    """``n`` cases over ``k`` groups: equal shares, the remainder to the first group."""
    if n < 0:
        raise ValueError("n must be >= 0")
    base = [n // k] * k
    base[0] += n - sum(base)
    return base


def generate_requests(recipes: Sequence[Recipe], n: int = 99, seed: int = 0) -> list[CodegenCase]:
    """Unique phrased requests, one-third per recipe (remainder to the first recipe)."""
    rng = np.random.default_rng(seed)
    cases = []
    for recipe, count in zip(recipes, split_counts(n, len(recipes))):
        pool = phrasing_pool(dish_name(recipe))
        if count > len(pool):
            raise ValueError(f"only {len(pool)} distinct phrasings for {recipe.name}, {count} requested")
        picks = rng.choice(len(pool), size=count, replace=False)
        cases.extend((pool[int(i)], recipe.name) for i in picks)
    return [CodegenCase(i, text, name) for i, (text, name) in enumerate(cases)]


def load_requests(path: str | Path) -> list[CodegenCase]:
    """An external request file: YAML list of ``{request, recipe}`` entries."""
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise ParseError("request file must be a list", str(path))
    out = []
    for i, item in enumerate(doc):
        if not isinstance(item, Mapping) or "request" not in item or "recipe" not in item:
            raise ParseError(f"entry {i}: needs 'request' and 'recipe'", str(path))
        out.append(CodegenCase(i, str(item["request"]), str(item["recipe"])))
    return out


# -- reports -------------------------------------------------------------------


class ReportMismatch(VlaKitchenError):
    pass


@dataclass
class EvalReport:
    campaign: str
    rows: list[dict[str, Any]]
    aggregates: dict[str, Any]
    config: dict[str, Any] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        head = {"campaign": self.campaign, "notes": self.notes, "config": self.config, "aggregates": self.aggregates}
        (out / "report.json").write_text(json.dumps(head, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "rows.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows), encoding="utf-8"
        )
        return out

    @classmethod
    def load(cls, out_dir: str | Path) -> "EvalReport":
        out = Path(out_dir)
        head = json.loads((out / "report.json").read_text(encoding="utf-8"))
        rows = [json.loads(line) for line in (out / "rows.jsonl").read_text(encoding="utf-8").splitlines() if line]
        report = cls(head["campaign"], rows, head["aggregates"], head.get("config", {}), head.get("notes", []))
        again = AGGREGATORS[report.campaign](rows)
        if again != report.aggregates:
            raise ReportMismatch(f"stored aggregates differ from the rows: {report.aggregates} != {again}")
        return report

    def summary(self) -> str:
        return json.dumps(self.aggregates, indent=2, sort_keys=True)


def codegen_aggregates(rows: Sequence[Mapping[str, Any]]) -> dict[str, Any]:
    def block(rs):
        n = len(rs)
        ok = sum(1 for r in rs if r["success"])
        return {"cases": n, "successes": ok, "success_rate": ok / n if n else 0.0}

    out = block(rows)
    out["by_recipe"] = {name: block([r for r in rows if r["recipe"] == name]) for name in sorted({r["recipe"] for r in rows})}
    outcomes: dict[str, int] = {}
    for r in rows:
        outcomes[r["outcome"]] = outcomes.get(r["outcome"], 0) + 1
    out["outcomes"] = dict(sorted(outcomes.items()))
    return out


def vision_aggregates(rows: Sequence[Mapping[str, Any]]) -> dict[str, Any]:
    def block(rs):
        m = VisionMetrics.aggregate(SceneScore(r["list_correct"], r["captions"]) for r in rs)
        return m.to_dict()

    return {
        "all": block(rows),
        "complete": block([r for r in rows if r["complete"]]),
        "missing": block([r for r in rows if not r["complete"]]),
    }


AGGREGATORS: dict[str, Callable[[Sequence[Mapping[str, Any]]], dict[str, Any]]] = {
    "eval-codegen": codegen_aggregates,
    "eval-vision": vision_aggregates,
}


# -- code generation campaign --------------------------------------------------

RECIPE_SCENES = {
    "Vegetable Salad": "vegetable_salad.yaml",
    "Russian Salad": "russian_salad.yaml",
    "Fruit Salad": "fruit_salad.yaml",
}


def fixture_scene_for(recipe_name: str) -> Scene:
    try:
        return load_scene(asset_path("scenes", RECIPE_SCENES[recipe_name]))
    except KeyError:
        raise KeyError(f"no fixture scene for recipe {recipe_name!r}") from None


def run_codegen_campaign(
    pipeline: Pipeline,
    cases: Sequence[CodegenCase],
    seed: int = 0,
    scene_for: Callable[[str], Scene] = fixture_scene_for,
    workers: int = 1,
) -> EvalReport:
    scenes = {name: scene_for(name) for name in sorted({c.recipe for c in cases})}

    def one(case: CodegenCase) -> dict[str, Any]:
        t = pipeline.handle(case.request, scenes[case.recipe], seed=seed + case.index)
        retrieved = t.recipe.name if t.recipe else None
        outcome = t.outcome or Outcome.BACKEND_FAILED
        return {
            "case": case.index,
            "request": case.request,
            "recipe": case.recipe,
            "retrieved": retrieved,
            "outcome": outcome.value,
            "failed_stage": FAILURE_STAGE[outcome] if retrieved == case.recipe else "retrieval",
            "success": outcome is Outcome.COMPLETED and retrieved == case.recipe,
        }

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, cases))
    else:
        rows = [one(c) for c in cases]
    notes = [
        "success means the session completed: plan parsed, code parsed and validated against the scene"
        + (", executed in the simulator and the recipe goal met" if pipeline.config.execute else " (execution disabled)"),
        "cases are split evenly across recipes; any remainder goes to the first recipe",
    ]
    config = {"n": len(cases), "seed": seed, "backend": pipeline.config.llm.kind, "execute": pipeline.config.execute}
    return EvalReport("eval-codegen", rows, codegen_aggregates(rows), config, notes)


# -- vision campaign -----------------------------------------------------------

# ingredient-area spots, all in view of the kitchen camera
LAYOUT = ((-0.30, 0.12), (-0.20, 0.12), (-0.10, 0.12), (-0.30, -0.05), (-0.20, -0.05), (-0.10, -0.05), (-0.30, -0.18))


@dataclass(frozen=True)
class VisionCase:
    index: int
    scene: Scene
    recipe: str
    complete: bool


def _scene_objects(recipe: Recipe, names: Sequence[str], spots: Sequence[tuple[float, float]]) -> list[SimObject]:
    objs = []
    for name, (x, y) in zip(names, spots):
        pos = Location.area(WorldPoint(x, y, 0.0))
        if name in recipe.prepare and recipe.preparation(name) is Preparation.POUR:
            objs.append(SimObject(name, ObjectKind.CONTAINER, pos, contents=name))
        else:
            objs.append(SimObject(name, ObjectKind.INGREDIENT, pos))
    return objs


def generate_vision_cases(
    recipes: Sequence[Recipe],
    n: int = 100,
    seed: int = 0,
    complete_fraction: float = 0.5,
    camera: CameraModel | None = None,
) -> list[VisionCase]:
    """Synthetic scenes: the first ``round(n * complete_fraction)`` hold every ingredient, the rest lack one.

    Recipes are assigned round-robin; object positions are drawn from a fixed layout.
    """
    if not 0.0 <= complete_fraction <= 1.0:
        raise ValueError("complete_fraction must lie in [0, 1]")
    camera = camera or load_calibration(asset_path("calibration", "kitchen.yaml"))
    rng = np.random.default_rng(seed)
    n_complete = round(n * complete_fraction)
    cases = []
    for i in range(n):
        recipe = recipes[i % len(recipes)]
        complete = i < n_complete
        names = list(recipe.ingredients)
        if not complete:
            names.pop(int(rng.integers(len(names))))
        spots = [LAYOUT[int(j)] for j in rng.permutation(len(LAYOUT))[: len(names)]]
        world = make_world(_scene_objects(recipe, names, spots))
        tag = "ok" if complete else "missing"
        cases.append(VisionCase(i, Scene(f"v{i:05d}-{tag}", world, camera), recipe.name, complete))
    return cases


def save_manifest(cases: Sequence[VisionCase], path: str | Path, calibration: str) -> None:
    doc = [
        {"recipe": c.recipe, "complete": c.complete, "scene": scene_to_dict(c.scene, calibration)} for c in cases
    ]
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")


def load_manifest(path: str | Path) -> list[VisionCase]:
    """Scene batch: YAML list of ``{recipe, complete, scene}``; ``scene`` is a path or an inline scene document."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ParseError(f"cannot read manifest: {exc}", str(path)) from None
    if not isinstance(doc, list):
        raise ParseError("manifest must be a list", str(path))
    cases = []
    for i, item in enumerate(doc):
        if not isinstance(item, Mapping) or not {"recipe", "complete", "scene"} <= set(item):
            raise ParseError(f"entry {i}: needs 'recipe', 'complete' and 'scene'", str(path))
        raw = item["scene"]
        if isinstance(raw, Mapping):
            scene = scene_from_dict(raw, path.parent, str(path))
        else:
            p = Path(raw)
            scene = load_scene(p if p.is_absolute() else path.parent / p)
        cases.append(VisionCase(i, scene, str(item["recipe"]), bool(item["complete"])))
    return cases


def run_vision_campaign(
    detector: Detector,
    cases: Sequence[VisionCase],
    recipes: Mapping[str, Recipe],
    seed: int = 0,
    config: Mapping[str, Any] | None = None,
) -> EvalReport:
    rows = []
    for case in cases:
        recipe = recipes[case.recipe]
        truth = sim_list_objects(case.scene.world)
        row: dict[str, Any] = {
            "case": case.index,
            "scene": case.scene.id,
            "recipe": case.recipe,
            "complete": case.complete,
            "ground_truth": truth,
        }
        try:
            dets = detector.detect(case.scene, recipe.ingredients, seed=seed + case.index)
        except (GatewayError, ResponseParseError) as exc:
            row.update(detected=None, error=f"{type(exc).__name__}: {exc}", list_correct=False,
                       captions={r: False for r in sorted(recipe.ingredients)})
        else:
            s = score_scene(truth, recipe.ingredients, dets)
            row.update(detected=[d.name for d in dets], list_correct=s.list_correct, captions=dict(s.captions))
        rows.append(row)
    notes = [
        "list_accuracy: fraction of scenes whose detected name set equals the ground truth",
        "caption_accuracy: fraction of (scene, recipe ingredient) pairs detected exactly once when present "
        "and not at all when absent",
    ]
    return EvalReport("eval-vision", rows, vision_aggregates(rows), dict(config or {}, seed=seed, scenes=len(cases)), notes)
