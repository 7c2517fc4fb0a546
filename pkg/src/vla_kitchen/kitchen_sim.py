"""Deterministic two-arm kitchen simulator.

Every operation is a pure state transformer: it takes a :class:`WorldState`
and returns a new one, or raises :class:`ActionError` leaving the input
untouched.  Positions are abstract TCP targets; there is no physics.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

from vla_kitchen.api import (
    BOWL,
    CUTTING_BOARD,
    FIXTURES,
    PERCEPTION_FUNCTIONS,
    TOKEN_RE,
    ApiCall,
    ApiFunction,
    ManipulatorId,
    canonical_name,
)
from vla_kitchen.errors import VlaKitchenError
from vla_kitchen.geometry import CameraModel, PixelPoint, WorldPoint, project_raw

if TYPE_CHECKING:
    from vla_kitchen.action_lang import ActionProgram

GRIPPER = ManipulatorId.GRIPPER
TOOL = ManipulatorId.TOOL

APPROACH_HEIGHT = 0.10  # meters above the target for the first move phase

# bounding-box extents (width, height) in pixels per object kind
BOX_EXTENT = {"ingredient": (60.0, 60.0), "container": (80.0, 120.0)}

DEFAULT_FIXTURES = {
    CUTTING_BOARD: WorldPoint(0.0, 0.30, 0.0),
    BOWL: WorldPoint(0.20, 0.30, 0.0),
}
DEFAULT_HOMES = {
    GRIPPER: WorldPoint(-0.35, 0.0, 0.30),
    TOOL: WorldPoint(0.35, 0.0, 0.30),
}


class ObjectKind(str, Enum):
    INGREDIENT = "ingredient"
    CONTAINER = "container"
    FIXTURE = "fixture"


class ObjectState(str, Enum):
    WHOLE = "whole"
    CUT = "cut"
    MIXED = "mixed"
    EMPTIED = "emptied"


class Place(str, Enum):
    INGREDIENT_AREA = "ingredient_area"
    CUTTING_BOARD = "cutting_board"
    BOWL = "bowl"
    HELD = "held"
    FIXED = "fixed"  # fixtures only


@dataclass(frozen=True)
class Location:
    place: Place
    position: WorldPoint | None = None
    arm: ManipulatorId | None = None

    @classmethod
    def area(cls, position: WorldPoint) -> Location:
        return cls(Place.INGREDIENT_AREA, position=position)

    @classmethod
    def board(cls) -> Location:
        return cls(Place.CUTTING_BOARD)

    @classmethod
    def bowl(cls) -> Location:
        return cls(Place.BOWL)

    @classmethod
    def held(cls, arm: ManipulatorId) -> Location:
        return cls(Place.HELD, arm=arm)

    @classmethod
    def fixed(cls, position: WorldPoint) -> Location:
        return cls(Place.FIXED, position=position)

    def __str__(self) -> str:
        if self.place is Place.HELD:
            return f"held:{self.arm.value}"  # type: ignore[union-attr]
        return self.place.value


@dataclass(frozen=True)
class SimObject:
    name: str
    kind: ObjectKind
    location: Location
    state: ObjectState = ObjectState.WHOLE
    contents: str | None = None  # what pouring a container adds to the bowl
    cut: bool = False  # survives mixing, which overwrites ``state``

    @property
    def is_fixture(self) -> bool:
        return self.kind is ObjectKind.FIXTURE


@dataclass(frozen=True)
class ArmState:
    id: ManipulatorId
    tcp_position: WorldPoint
    gripper_open: bool | None = None  # None for the tool arm
    held_object: str | None = None
    at_target: str | None = None


@dataclass(frozen=True)
class WorldState:
    objects: Mapping[str, SimObject]
    arms: Mapping[ManipulatorId, ArmState]
    bowl_contents: tuple[str, ...] = ()
    bowl_mixed: bool = False
    history: tuple[ApiCall, ...] = ()

    def obj(self, name: str) -> SimObject:
        return self.objects[name]

    def in_bowl(self) -> list[SimObject]:
        return [o for o in self.objects.values() if o.location.place is Place.BOWL]

    def on_board(self) -> list[SimObject]:
        return [o for o in self.objects.values() if o.location.place is Place.CUTTING_BOARD]

    def names(self) -> list[str]:
        return sorted(self.objects)


class ActionErrorCode(str, Enum):
    UNKNOWN_OBJECT = "UnknownObject"
    WRONG_ARM = "WrongArm"
    GRIPPER_BUSY = "GripperBusy"
    GRIPPER_EMPTY = "GripperEmpty"
    NOT_AT_TARGET = "NotAtTarget"
    NOT_ON_BOARD = "NotOnBoard"
    BOARD_OCCUPIED = "BoardOccupied"
    ALREADY_CUT = "AlreadyCut"
    NOT_POURABLE = "NotPourable"
    EMPTY_BOWL = "EmptyBowl"
    FIXTURE_IMMOVABLE = "FixtureImmovable"


class ActionError(VlaKitchenError):
    def __init__(self, code: ActionErrorCode, message: str, call: ApiCall | None = None) -> None:
        self.code = code
        self.message = message
        self.call = call
        super().__init__(f"{code.value}: {message}" + (f" [{call}]" if call else ""))


# -- construction --------------------------------------------------------------


def make_world(
    objects: Iterable[SimObject],
    fixtures: Mapping[str, WorldPoint] | None = None,
    homes: Mapping[ManipulatorId, WorldPoint] | None = None,
) -> WorldState:
    """Assemble a scene; held objects set their arm's grip state."""
    fixtures = dict(DEFAULT_FIXTURES if fixtures is None else fixtures)
    homes = dict(DEFAULT_HOMES if homes is None else homes)
    missing = FIXTURES - set(fixtures)
    if missing:
        raise ValueError(f"scene lacks fixture(s): {', '.join(sorted(missing))}")
    table: dict[str, SimObject] = {
        name: SimObject(name, ObjectKind.FIXTURE, Location.fixed(pos)) for name, pos in sorted(fixtures.items())
    }
    held: dict[ManipulatorId, str] = {}
    for o in objects:
        if o.name in table:
            raise ValueError(f"duplicate object name {o.name!r}")
        if not TOKEN_RE.match(o.name):
            raise ValueError(f"object name {o.name!r} is not a lowercase token")
        if o.is_fixture or o.location.place is Place.FIXED:
            raise ValueError(f"{o.name!r}: only cutting_board and bowl are fixtures")
        if o.location.place is Place.HELD:
            if o.location.arm is TOOL:
                raise ValueError(f"{o.name!r}: the tool arm cannot hold objects")
            if GRIPPER in held:
                raise ValueError("the gripper can hold at most one object")
            held[GRIPPER] = o.name
        table[o.name] = o
    arms = {
        GRIPPER: ArmState(GRIPPER, homes[GRIPPER], gripper_open=GRIPPER not in held, held_object=held.get(GRIPPER)),
        TOOL: ArmState(TOOL, homes[TOOL]),
    }
    w = WorldState(objects=table, arms=arms)
    try:
        check_invariants(w)
    except AssertionError as exc:
        raise ValueError(str(exc)) from None
    return w


def check_invariants(w: WorldState) -> None:
    """Raise ``AssertionError`` naming every violated state invariant."""
    problems = []
    board = w.on_board()
    if len(board) > 1:
        problems.append(f"{len(board)} objects on the cutting board")
    for name, o in w.objects.items():
        if name != o.name:
            problems.append(f"key {name!r} holds object {o.name!r}")
        if o.is_fixture and o.location.place is not Place.FIXED:
            problems.append(f"fixture {name!r} moved")
        if o.location.place is Place.HELD:
            arm = w.arms[o.location.arm]  # type: ignore[index]
            if arm.held_object != name:
                problems.append(f"{name!r} is held by {arm.id.value} which holds {arm.held_object!r}")
    for arm in w.arms.values():
        if arm.held_object is not None:
            o = w.objects.get(arm.held_object)
            if o is None or o.location != Location.held(arm.id):
                problems.append(f"{arm.id.value} claims to hold {arm.held_object!r}")
            if arm.gripper_open:
                problems.append(f"{arm.id.value} holds an object with an open gripper")
    if w.arms[TOOL].held_object is not None:
        problems.append("tool arm holds an object")
    if problems:
        raise AssertionError("; ".join(problems))


def position_of(w: WorldState, name: str) -> WorldPoint:
    o = w.objects[name]
    place = o.location.place
    if place in (Place.INGREDIENT_AREA, Place.FIXED):
        return o.location.position  # type: ignore[return-value]
    if place is Place.CUTTING_BOARD:
        return w.objects[CUTTING_BOARD].location.position  # type: ignore[return-value]
    if place is Place.BOWL:
        return w.objects[BOWL].location.position  # type: ignore[return-value]
    return w.arms[o.location.arm].tcp_position  # type: ignore[index]


# -- helpers -------------------------------------------------------------------


def _arm(value: ManipulatorId | str, call: ApiCall | None) -> ManipulatorId:
    try:
        return ManipulatorId(value)
    except ValueError:
        raise ActionError(ActionErrorCode.WRONG_ARM, f"unknown manipulator {value!r}", call) from None


def _lookup(w: WorldState, name: str, call: ApiCall | None) -> SimObject:
    o = w.objects.get(canonical_name(name))
    if o is None:
        raise ActionError(ActionErrorCode.UNKNOWN_OBJECT, f"no object named {name!r} in the scene", call)
    return o


def _call(fn: ApiFunction, arm: ManipulatorId | str, name: str | None = None) -> ApiCall | None:
    try:
        return ApiCall(fn, ManipulatorId(arm), name)
    except (ValueError, TypeError):
        return None


def _with(w: WorldState, call: ApiCall | None, *, objects: dict[str, SimObject] | None = None,
          arms: dict[ManipulatorId, ArmState] | None = None, **changes: Any) -> WorldState:
    new_objects = w.objects if objects is None else {**w.objects, **objects}
    new_arms = w.arms if arms is None else {**w.arms, **arms}
    history = w.history + ((call,) if call is not None else ())
    return replace(w, objects=new_objects, arms=new_arms, history=history, **changes)


def _board_taken_by_other(w: WorldState, name: str) -> str | None:
    for o in w.on_board():
        if o.name != name:
            return o.name
    return None


# -- the motion API ------------------------------------------------------------


def open_gripper(w: WorldState, arm: ManipulatorId | str) -> WorldState:
    call = _call(ApiFunction.OPEN_GRIPPER, arm)
    a = _arm(arm, call)
    if a is not GRIPPER:
        raise ActionError(ActionErrorCode.WRONG_ARM, "the tool arm has no gripper", call)
    state = w.arms[GRIPPER]
    if state.held_object is None:
        if state.gripper_open:
            return w
        return _with(w, call, arms={GRIPPER: replace(state, gripper_open=True)})

    held = w.objects[state.held_object]
    changes: dict[str, Any] = {}
    if state.at_target == CUTTING_BOARD:
        other = _board_taken_by_other(w, held.name)
        if other is not None:
            raise ActionError(ActionErrorCode.BOARD_OCCUPIED, f"{other!r} already lies on the cutting board", call)
        where = Location.board()
    elif state.at_target == BOWL:
        where = Location.bowl()
        changes["bowl_mixed"] = False
    else:
        where = Location.area(state.tcp_position)
    return _with(
        w,
        call,
        objects={held.name: replace(held, location=where)},
        arms={GRIPPER: replace(state, gripper_open=True, held_object=None)},
        **changes,
    )


def _move_target(w: WorldState, arm: ManipulatorId | str, object_name: str) -> tuple[ApiCall | None, ManipulatorId, SimObject]:
    call = _call(ApiFunction.MOVE_TO_OBJECT, arm, object_name)
    a = _arm(arm, call)
    target = _lookup(w, object_name, call)
    return call, a, target


def move_to_object(w: WorldState, arm: ManipulatorId | str, object_name: str) -> WorldState:
    call, a, target = _move_target(w, arm, object_name)
    pos = position_of(w, target.name)
    return _with(w, call, arms={a: replace(w.arms[a], tcp_position=pos, at_target=target.name)})


def _approach(w: WorldState, arm: ManipulatorId | str, object_name: str) -> WorldState:
    """Intermediate pose of ``move_to_object``: hovering above the target."""
    _, a, target = _move_target(w, arm, object_name)
    pos = position_of(w, target.name)
    hover = WorldPoint(pos.x, pos.y, pos.z + APPROACH_HEIGHT)
    return replace(w, arms={**w.arms, a: replace(w.arms[a], tcp_position=hover)})


def grasp(w: WorldState, arm: ManipulatorId | str, object_name: str) -> WorldState:
    call = _call(ApiFunction.GRASP, arm, object_name)
    a = _arm(arm, call)
    if a is not GRIPPER:
        raise ActionError(ActionErrorCode.WRONG_ARM, "only the gripper arm can grasp", call)
    o = _lookup(w, object_name, call)
    if o.is_fixture:
        raise ActionError(ActionErrorCode.FIXTURE_IMMOVABLE, f"{o.name!r} is a fixture", call)
    state = w.arms[GRIPPER]
    if state.held_object is not None or not state.gripper_open:
        raise ActionError(ActionErrorCode.GRIPPER_BUSY, f"gripper already holds {state.held_object!r}", call)
    if state.at_target != o.name:
        raise ActionError(ActionErrorCode.NOT_AT_TARGET, f"gripper is at {state.at_target!r}, not {o.name!r}", call)
    return _with(
        w,
        call,
        objects={o.name: replace(o, location=Location.held(GRIPPER))},
        arms={GRIPPER: replace(state, gripper_open=False, held_object=o.name)},
    )


def _check_cut(w: WorldState, a: ManipulatorId, object_name: str, call: ApiCall | None) -> SimObject:
    if a is not TOOL:
        raise ActionError(ActionErrorCode.WRONG_ARM, "only the tool arm carries the knife", call)
    o = _lookup(w, object_name, call)
    if o.location.place is not Place.CUTTING_BOARD:
        raise ActionError(ActionErrorCode.NOT_ON_BOARD, f"{o.name!r} is not on the cutting board", call)
    if o.cut:
        raise ActionError(ActionErrorCode.ALREADY_CUT, f"{o.name!r} is already cut", call)
    return o


def cut(w: WorldState, arm: ManipulatorId | str, object_name: str) -> WorldState:
    call = _call(ApiFunction.CUT, arm, object_name)
    o = _check_cut(w, _arm(arm, call), object_name, call)
    return _with(w, call, objects={o.name: replace(o, state=ObjectState.CUT, cut=True)})


def put(w: WorldState, arm: ManipulatorId | str, object_name: str) -> WorldState:
    call = _call(ApiFunction.PUT, arm, object_name)
    a = _arm(arm, call)
    o = _lookup(w, object_name, call)
    arms = None
    if o.location == Location.held(a):
        arms = {a: replace(w.arms[a], gripper_open=True, held_object=None)}
    elif not (a is TOOL and o.location.place is Place.CUTTING_BOARD):
        raise ActionError(
            ActionErrorCode.NOT_AT_TARGET,
            f"{o.name!r} is neither held by the {a.value} arm nor on the board for the tool arm",
            call,
        )
    return _with(w, call, objects={o.name: replace(o, location=Location.bowl())}, arms=arms, bowl_mixed=False)


def pour(w: WorldState, arm: ManipulatorId | str, object_name: str) -> WorldState:
    call = _call(ApiFunction.POUR, arm, object_name)
    a = _arm(arm, call)
    if a is not GRIPPER:
        raise ActionError(ActionErrorCode.WRONG_ARM, "only the gripper arm can pour", call)
    o = _lookup(w, object_name, call)
    if w.arms[GRIPPER].held_object != o.name:
        raise ActionError(ActionErrorCode.GRIPPER_EMPTY, f"gripper does not hold {o.name!r}", call)
    if o.kind is not ObjectKind.CONTAINER or not o.contents:
        raise ActionError(ActionErrorCode.NOT_POURABLE, f"{o.name!r} is not a pourable container", call)
    if o.state is ObjectState.EMPTIED:
        raise ActionError(ActionErrorCode.NOT_POURABLE, f"{o.name!r} is already empty", call)
    return _with(
        w,
        call,
        objects={o.name: replace(o, state=ObjectState.EMPTIED)},
        bowl_contents=w.bowl_contents + (o.contents,),
        bowl_mixed=False,
    )


def toss(w: WorldState, arm: ManipulatorId | str, object_name: str) -> WorldState:
    call = _call(ApiFunction.TOSS, arm, object_name)
    a = _arm(arm, call)
    if canonical_name(object_name) != BOWL:
        raise ActionError(ActionErrorCode.UNKNOWN_OBJECT, f"toss mixes the bowl, got {object_name!r}", call)
    if a is GRIPPER and w.arms[GRIPPER].held_object is not None:
        raise ActionError(
            ActionErrorCode.GRIPPER_BUSY, f"gripper holds {w.arms[GRIPPER].held_object!r}; cannot toss", call
        )
    contents = w.in_bowl()
    if not contents and not w.bowl_contents:
        raise ActionError(ActionErrorCode.EMPTY_BOWL, "nothing in the bowl to toss", call)
    mixed = {o.name: replace(o, state=ObjectState.MIXED) for o in contents}
    return _with(w, call, objects=mixed, bowl_mixed=True)


def cut_and_put_in(w: WorldState, arm: ManipulatorId | str, object_name: str) -> WorldState:
    """Cut the object on the board and sweep it into the bowl.

    Recorded in the history as a ``cut`` followed by a ``put``.
    """
    call = _call(ApiFunction.CUT_AND_PUT_IN, arm, object_name)
    a = _arm(arm, call)
    o = _check_cut(w, a, object_name, call)
    done = replace(o, state=ObjectState.CUT, cut=True, location=Location.bowl())
    history = w.history + (ApiCall(ApiFunction.CUT, a, o.name), ApiCall(ApiFunction.PUT, a, o.name))
    return replace(w, objects={**w.objects, o.name: done}, bowl_mixed=False, history=history)


# -- ground-truth perception ---------------------------------------------------


def sim_list_objects(w: WorldState) -> list[str]:
    """Names of non-fixture objects lying in the ingredient area (what the camera sees)."""
    return sorted(
        o.name for o in w.objects.values() if not o.is_fixture and o.location.place is Place.INGREDIENT_AREA
    )


def box_around(center: PixelPoint, kind: ObjectKind) -> tuple[float, float, float, float]:
    bw, bh = BOX_EXTENT.get(kind.value, BOX_EXTENT["ingredient"])
    return (center.x - bw / 2, center.y - bh / 2, center.x + bw / 2, center.y + bh / 2)


def sim_bounding_boxes(
    w: WorldState, names: Sequence[str], m: CameraModel
) -> dict[str, tuple[float, float, float, float]]:
    """Boxes centered on where a raw camera images each visible object."""
    visible = set(sim_list_objects(w))
    boxes = {}
    for name in names:
        if name not in visible:
            raise ActionError(ActionErrorCode.UNKNOWN_OBJECT, f"{name!r} is not visible on the table")
        o = w.objects[name]
        boxes[name] = box_around(project_raw(m, o.location.position), o.kind)  # type: ignore[arg-type]
    return boxes


# -- program execution ---------------------------------------------------------

_OPERATIONS = {
    ApiFunction.GRASP: grasp,
    ApiFunction.CUT: cut,
    ApiFunction.PUT: put,
    ApiFunction.POUR: pour,
    ApiFunction.TOSS: toss,
    ApiFunction.CUT_AND_PUT_IN: cut_and_put_in,
}


def apply_call(w: WorldState, call: ApiCall) -> WorldState:
    """Apply one API call; perception calls leave the world unchanged."""
    return call_phases(w, call)[-1][1]


def call_phases(w: WorldState, call: ApiCall) -> list[tuple[str, WorldState]]:
    """The (phase name, state after phase) steps one call goes through."""
    fn = call.function
    if fn in PERCEPTION_FUNCTIONS:
        return [("noop", w)]
    if fn is ApiFunction.OPEN_GRIPPER:
        return [("release", open_gripper(w, call.manipulator))]  # type: ignore[arg-type]
    if fn is ApiFunction.MOVE_TO_OBJECT:
        above = _approach(w, call.manipulator, call.object)  # type: ignore[arg-type]
        final = move_to_object(w, call.manipulator, call.object)  # type: ignore[arg-type]
        return [("approach", above), ("descend", final)]
    return [(fn.value, _OPERATIONS[fn](w, call.manipulator, call.object))]  # type: ignore[arg-type]


def summarize(w: WorldState) -> dict[str, Any]:
    """Compact JSON-friendly snapshot used in trace events."""
    arms = {}
    for a in (GRIPPER, TOOL):
        s = w.arms[a]
        entry: dict[str, Any] = {"tcp": [round(v, 9) for v in s.tcp_position], "at": s.at_target}
        if a is GRIPPER:
            entry["open"] = s.gripper_open
            entry["held"] = s.held_object
        arms[a.value] = entry
    objects = {
        o.name: f"{o.location}/{o.state.value}" for o in sorted(w.objects.values(), key=lambda o: o.name) if not o.is_fixture
    }
    return {"arms": arms, "objects": objects, "bowl": {"contents": list(w.bowl_contents), "mixed": w.bowl_mixed}}


@dataclass(frozen=True)
class TraceEvent:
    call_index: int
    call: str
    phase: str
    pre: dict[str, Any]
    post: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"call_index": self.call_index, "call": self.call, "phase": self.phase, "pre": self.pre, "post": self.post}


@dataclass
class ExecutionTrace:
    events: list[TraceEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)

    def for_call(self, index: int) -> list[TraceEvent]:
        return [e for e in self.events if e.call_index == index]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.events)


class ProgramExecutionError(VlaKitchenError):
    """Execution stopped at ``call_index``; ``state``/``trace`` cover the calls before it."""

    def __init__(self, call_index: int, error: ActionError, state: WorldState, trace: ExecutionTrace) -> None:
        self.call_index = call_index
        self.error = error
        self.state = state
        self.trace = trace
        super().__init__(f"call #{call_index + 1} failed: {error}")


def execute_program(w: WorldState, program: ActionProgram | Sequence[ApiCall]) -> tuple[WorldState, ExecutionTrace]:
    calls = getattr(program, "calls", program)
    trace = ExecutionTrace()
    state = w
    for index, call in enumerate(calls):
        try:
            phases = call_phases(state, call)
        except ActionError as exc:
            if exc.call is None:
                exc.call = call
            raise ProgramExecutionError(index, exc, state, trace) from exc
        pre = state
        for phase, post in phases:
            trace.events.append(TraceEvent(index, str(call), phase, summarize(pre), summarize(post)))
            pre = post
        state = phases[-1][1]
    return state, trace
