"""End-to-end request handling: retrieve, perceive, gate, plan, generate, parse, execute, check.

Every session produces a :class:`SessionTrace`.  Failures at any stage end
the session with a recorded outcome; nothing escapes ``handle_request``
except programming errors.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from string import Template
from typing import Any, Mapping

import yaml

from vla_kitchen.action_lang import (
    ActionProgram,
    PlanDocument,
    ValidationError,
    parse_plan,
    parse_program,
    serialize_program,
    validate_against_scene,
)
from vla_kitchen.api import DESCRIPTIONS, SIGNATURES, ApiFunction
from vla_kitchen.assets import asset_path
from vla_kitchen.errors import ParseError, VlaKitchenError
from vla_kitchen.kitchen_sim import (
    ExecutionTrace,
    ObjectKind,
    Place,
    ProgramExecutionError,
    WorldState,
    execute_program,
    summarize,
)
from vla_kitchen.llm_gateway import BackendConfig, ChatMessage, ChatRequest, GatewayError, LlmClient, Role, Transcript
from vla_kitchen.perception import (
    AvailabilityReport,
    Detector,
    ErrorInjection,
    ResponseParseError,
    SimDetector,
    VlmDetector,
    check_availability,
    detect_objects,
    ground_detections,
)
from vla_kitchen.recipe_rag import EmptyStore, Preparation, Recipe, RecipeStore, index, load_recipes, retrieve
from vla_kitchen.scene import Scene

class Outcome(str, Enum):
    COMPLETED = "Completed"
    REFUSED = "Refused"
    PLAN_PARSE_FAILED = "PlanParseFailed"
    CODE_PARSE_FAILED = "CodeParseFailed"
    EXECUTION_FAILED = "ExecutionFailed"
    GOAL_NOT_MET = "GoalNotMet"
    BACKEND_FAILED = "BackendFailed"


# -- prompts -------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    version: str
    system: Template
    user: Template
    extras: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "PromptTemplate":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ParseError(f"cannot load template: {exc}", str(path)) from None
        if not isinstance(doc, Mapping) or not {"version", "system", "user"} <= set(doc):
            raise ParseError("template needs 'version', 'system' and 'user'", str(path))
        extras = {k: str(v) for k, v in doc.items() if k not in ("version", "system", "user")}
        return cls(str(doc["version"]), Template(doc["system"]), Template(doc["user"]), extras)


@dataclass(frozen=True)
class RenderedPrompt:
    version: str
    system: str
    user: str

    @property
    def text(self) -> str:
        return f"{self.system}\n{self.user}"

    def request(self) -> ChatRequest:
        return ChatRequest((ChatMessage(Role.SYSTEM, self.system), ChatMessage(Role.USER, self.user)))

    def to_dict(self) -> dict:
        return {"version": self.version, "system": self.system, "user": self.user}


def api_documentation() -> str:
    lines = []
    for fn in ApiFunction:
        lines.append(f"- {fn.value}({', '.join(SIGNATURES[fn])}): {DESCRIPTIONS[fn]}")
    return "\n".join(lines)


def render_planner_prompt(
    template: PromptTemplate, recipe: Recipe, objects: list[str], request: str = ""
) -> RenderedPrompt:
    if not objects:
        raise ValueError("the planner needs at least one available object")
    fields = {
        "request": request.strip() or f"Please make me a {recipe.name.lower()}.",
        "task": recipe.name,
        "objects": ", ".join(sorted(objects)),
        "ingredients": ", ".join(recipe.ingredients),
        "steps": "\n".join(f"- {s}" for s in recipe.steps),
    }
    return RenderedPrompt(template.version, template.system.substitute(fields), template.user.substitute(fields))


def render_codegen_prompt(template: PromptTemplate, plan: PlanDocument) -> RenderedPrompt:
    fields = {
        "api_docs": api_documentation(),
        "example_plan": template.extras.get("example_plan", "").strip("\n"),
        "example_code": template.extras.get("example_code", "").strip("\n"),
        "plan": plan.text(),
    }
    return RenderedPrompt(template.version, template.system.substitute(fields), template.user.substitute(fields))


_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)(?:```|\Z)", re.DOTALL)


def extract_code(reply: str) -> str:
    """The first fenced code block of a reply, or the whole reply if there is none."""
    m = _FENCE_RE.search(reply)
    return m.group(1) if m else reply


# -- goals ---------------------------------------------------------------------


@dataclass(frozen=True)
class GoalSpec:
    required: Mapping[str, Preparation]
    mixed: bool

    @classmethod
    def from_recipe(cls, recipe: Recipe) -> "GoalSpec":
        return cls(dict(recipe.prepare), recipe.toss)


@dataclass(frozen=True)
class GoalResult:
    ok: bool
    problems: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


def goal_check(w: WorldState, goal: GoalSpec) -> GoalResult:
    """Does the bowl hold every required ingredient, prepared as required?"""
    problems = []
    for token, prep in goal.required.items():
        if prep is Preparation.POUR:
            if token not in w.bowl_contents:
                problems.append(f"{token}: not poured into the bowl")
            continue
        o = w.objects.get(token)
        if o is None or o.kind is ObjectKind.FIXTURE:
            problems.append(f"{token}: not in the scene")
        elif o.location.place is not Place.BOWL:
            problems.append(f"{token}: at {o.location}, not in the bowl")
        elif prep is Preparation.CUT and not o.cut:
            problems.append(f"{token}: in the bowl but not cut")
        elif prep is Preparation.WHOLE and o.cut:
            problems.append(f"{token}: should be whole but was cut")
    if goal.mixed and not w.bowl_mixed:
        problems.append("bowl: not mixed")
    return GoalResult(not problems, tuple(problems))


# -- traces --------------------------------------------------------------------


class TraceError(VlaKitchenError):
    pass


class SessionTrace:
    """Append-only record of one request."""

    def __init__(self, request: str, scene: Scene, seed: int = 0) -> None:
        self.request = request
        self.scene_id = scene.id
        self.seed = seed
        self.initial_state: WorldState = scene.world
        self.final_state: WorldState = scene.world
        self.transcript = Transcript()
        self.recipe: Recipe | None = None
        self.availability: AvailabilityReport | None = None
        self.plan: PlanDocument | None = None
        self.program: ActionProgram | None = None
        self.execution: ExecutionTrace | None = None
        self.goal: GoalResult | None = None
        self._entries: list[dict[str, Any]] = []
        self._synced = 0
        self._outcome: Outcome | None = None
        self.detail: dict[str, Any] = {}
        self.add("request", {"text": request, "scene": scene.id, "seed": seed, "initial_state": summarize(scene.world)})

    @property
    def entries(self) -> tuple[dict[str, Any], ...]:
        return tuple(self._entries)

    @property
    def stages(self) -> list[str]:
        return [e["stage"] for e in self._entries]

    def add(self, stage: str, data: Mapping[str, Any]) -> None:
        if self._outcome is not None:
            raise TraceError(f"cannot add {stage!r}: the session already ended")
        self._sync()
        self._entries.append({"stage": stage, **data})

    def _sync(self) -> None:
        entries = self.transcript.entries
        for e in entries[self._synced :]:
            self._entries.append({"stage": "llm", **e.to_dict()})
        self._synced = len(entries)

    @property
    def outcome(self) -> Outcome | None:
        return self._outcome

    def finish(self, outcome: Outcome, final_state: WorldState | None = None, **detail: Any) -> None:
        if self._outcome is not None:
            raise TraceError(f"outcome already set to {self._outcome.value}")
        if final_state is not None:
            self.final_state = final_state
        self._sync()
        self.detail = detail
        self._entries.append(
            {"stage": "outcome", "outcome": outcome.value, **detail, "final_state": summarize(self.final_state)}
        )
        self._outcome = outcome

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, default=_json_default) + "\n" for e in self._entries)

    def llm_calls(self, purpose: str | None = None) -> int:
        return self.transcript.count(purpose=purpose) if purpose else sum(
            1 for e in self.transcript.entries if e.kind != "embed"
        )


def _json_default(o: Any) -> Any:
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if isinstance(o, Enum):
        return o.value
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# -- configuration and pipeline ------------------------------------------------


@dataclass(frozen=True)
class OrchestratorConfig:
    llm: BackendConfig
    detector: str = "sim"  # sim | vlm
    injection: ErrorInjection = field(default_factory=ErrorInjection)
    vlm: BackendConfig | None = None
    recipes: Path = field(default_factory=lambda: asset_path("recipes", "salads.yaml"))
    planner_template: Path = field(default_factory=lambda: asset_path("templates", "planner.yaml"))
    codegen_template: Path = field(default_factory=lambda: asset_path("templates", "codegen.yaml"))
    plan_retries: int = 0
    execute: bool = True

    def __post_init__(self) -> None:
        if self.detector not in ("sim", "vlm"):
            raise ValueError("detector must be 'sim' or 'vlm'")
        if self.plan_retries < 0:
            raise ValueError("plan_retries must be >= 0")


_CONFIG_KEYS = {"backend", "backends", "vision", "recipes", "templates", "plan_retries", "execute"}


def load_config(path: str | Path | None = None, backend: str | None = None, doc: Mapping[str, Any] | None = None) -> OrchestratorConfig:
    """Read a pipeline config.  ``backend`` overrides the file's ``backend`` choice."""
    if doc is None:
        path = Path(path) if path is not None else asset_path("config", "mock.yaml")
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ParseError(f"cannot read config: {exc}", str(path)) from None
        except yaml.YAMLError as exc:
            raise ParseError(f"invalid YAML: {exc}", str(path)) from None
        base = Path(path).parent
    else:
        base = Path.cwd()
    source = str(path) if path else None
    if not isinstance(doc, Mapping):
        raise ParseError("config must be a mapping", source)
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ParseError(f"unknown config keys: {sorted(unknown)}", source)

    def rel(p: Any) -> Path:
        p = Path(str(p))
        return p if p.is_absolute() else base / p

    choice = backend or doc.get("backend", "mock")
    backends = doc.get("backends") or {}
    if choice not in backends:
        raise ParseError(f"backend {choice!r} is not configured (have: {sorted(backends)})", source)
    llm = BackendConfig.from_dict(backends[choice], base, source)

    vision = dict(doc.get("vision") or {})
    extra = set(vision) - {"detector", "miss_rate", "mislabel_rate", "seed", "vlm"}
    if extra:
        raise ParseError(f"unknown vision keys: {sorted(extra)}", source)
    try:
        injection = ErrorInjection(
            float(vision.get("miss_rate", 0.0)), float(vision.get("mislabel_rate", 0.0)), int(vision.get("seed", 0))
        )
        vlm = BackendConfig.from_dict(vision["vlm"], base, source) if vision.get("vlm") else None
        templates = doc.get("templates") or {}
        kw: dict[str, Any] = {}
        if "recipes" in doc:
            kw["recipes"] = rel(doc["recipes"])
        if "planner" in templates:
            kw["planner_template"] = rel(templates["planner"])
        if "codegen" in templates:
            kw["codegen_template"] = rel(templates["codegen"])
        return OrchestratorConfig(
            llm=llm,
            detector=str(vision.get("detector", "sim")),
            injection=injection,
            vlm=vlm,
            plan_retries=int(doc.get("plan_retries", 0)),
            execute=bool(doc.get("execute", True)),
            **kw,
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), source) from None


class Pipeline:
    """Long-lived components shared by sessions: clients, recipe index, templates."""

    def __init__(self, config: OrchestratorConfig, *, llm: LlmClient | None = None, vlm: LlmClient | None = None) -> None:
        self.config = config
        self.llm = llm or LlmClient(config.llm)
        self.detector: Detector
        if config.detector == "vlm":
            self.detector = VlmDetector(vlm or LlmClient(config.vlm or config.llm))
        else:
            self.detector = SimDetector(config.injection)
        self.planner_template = PromptTemplate.load(config.planner_template)
        self.codegen_template = PromptTemplate.load(config.codegen_template)
        self.store: RecipeStore = index(self.llm, load_recipes(config.recipes))

    def handle(self, request: str, scene: Scene, seed: int = 0) -> SessionTrace:
        return handle_request(self, request, scene, seed)


def handle_request(pipeline: Pipeline, request: str, scene: Scene, seed: int = 0) -> SessionTrace:
    trace = SessionTrace(request, scene, seed)
    try:
        _run(pipeline, trace, request, scene, seed)
    except (GatewayError, EmptyStore, ResponseParseError) as exc:
        trace.finish(Outcome.BACKEND_FAILED, error=f"{type(exc).__name__}: {exc}")
    return trace


def _run(p: Pipeline, trace: SessionTrace, request: str, scene: Scene, seed: int) -> None:
    tx = trace.transcript

    # retrieve
    (hit,) = retrieve(p.store, request, k=1, transcript=tx)
    recipe = trace.recipe = hit.recipe
    trace.add("retrieval", {"recipe": recipe.name, "score": hit.score})

    # perceive
    dets = detect_objects(p.detector, scene, recipe.ingredients, seed=seed, transcript=tx)
    grounded = ground_detections(dets, scene.camera)
    trace.add(
        "perception",
        {
            "detections": [
                {"name": d.name, "bbox": list(d.bbox), "world": list(d.world_position) if d.world_position else None}
                for d in grounded
            ]
        },
    )

    # gate
    report = trace.availability = check_availability(recipe.ingredients, dets)
    trace.add("availability", report.to_dict())
    if not report.available:
        trace.finish(Outcome.REFUSED, missing=sorted(report.missing))
        return
    objects = sorted({d.name for d in dets})

    # plan
    prompt = render_planner_prompt(p.planner_template, recipe, objects, request)
    trace.add("prompt", {"purpose": "planner", **prompt.to_dict()})
    plan = None
    for attempt in range(p.config.plan_retries + 1):
        reply = p.llm.chat(prompt.request(), purpose="planner", transcript=tx)
        try:
            plan = parse_plan(reply.content)
            break
        except ValidationError as exc:
            trace.add("plan_error", {"attempt": attempt + 1, **exc.to_dict()})
    if plan is None:
        trace.finish(Outcome.PLAN_PARSE_FAILED)
        return
    trace.plan = plan
    trace.add("plan", {"steps": list(plan.steps)})

    # generate code
    prompt = render_codegen_prompt(p.codegen_template, plan)
    trace.add("prompt", {"purpose": "codegen", **prompt.to_dict()})
    reply = p.llm.chat(prompt.request(), purpose="codegen", transcript=tx)
    try:
        program = parse_program(extract_code(reply.content))
    except ValidationError as exc:
        trace.finish(Outcome.CODE_PARSE_FAILED, **exc.to_dict())
        return
    trace.program = program
    trace.add("program", {"code": serialize_program(program)})
    problems = validate_against_scene(program, objects)
    if problems:
        trace.finish(Outcome.CODE_PARSE_FAILED, errors=[e.to_dict() for e in problems])
        return

    if not p.config.execute:
        trace.finish(Outcome.COMPLETED, executed=False)
        return

    # execute
    try:
        final, execution = execute_program(scene.world, program)
    except ProgramExecutionError as exc:
        trace.execution = exc.trace
        trace.add("execution", {"events": [e.to_dict() for e in exc.trace.events]})
        trace.finish(
            Outcome.EXECUTION_FAILED,
            final_state=exc.state,
            call_index=exc.call_index,
            code=exc.error.code.value,
            error=exc.error.message,
        )
        return
    trace.execution = execution
    trace.add("execution", {"events": [e.to_dict() for e in execution.events]})

    # goal
    result = trace.goal = goal_check(final, GoalSpec.from_recipe(recipe))
    trace.add("goal", {"ok": result.ok, "problems": list(result.problems)})
    trace.finish(Outcome.COMPLETED if result.ok else Outcome.GOAL_NOT_MET, final_state=final, executed=True)
