"""The motion/perception API vocabulary shared by the parser and the simulator."""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum


class ManipulatorId(str, Enum):
    """The two arms. The gripper arm also carries the camera; the tool arm carries the knife."""

    GRIPPER = "gripper"
    TOOL = "tool"


class ApiFunction(str, Enum):
    OPEN_GRIPPER = "open_gripper"
    MOVE_TO_OBJECT = "move_to_object"
    GRASP = "grasp"
    CUT = "cut"
    POUR = "pour"
    PUT = "put"
    TOSS = "toss"
    CUT_AND_PUT_IN = "cut_and_put_in"
    GET_LIST_OF_OBJECTS = "get_list_of_objects"
    GET_BOUNDING_BOXES = "get_bounding_boxes"


MANIPULATOR = "manipulator_type"
OBJECT = "object_name"

# positional parameter kinds per function
SIGNATURES: dict[ApiFunction, tuple[str, ...]] = {
    ApiFunction.OPEN_GRIPPER: (MANIPULATOR,),
    ApiFunction.MOVE_TO_OBJECT: (MANIPULATOR, OBJECT),
    ApiFunction.GRASP: (MANIPULATOR, OBJECT),
    ApiFunction.CUT: (MANIPULATOR, OBJECT),
    ApiFunction.POUR: (MANIPULATOR, OBJECT),
    ApiFunction.PUT: (MANIPULATOR, OBJECT),
    ApiFunction.TOSS: (MANIPULATOR, OBJECT),
    ApiFunction.CUT_AND_PUT_IN: (MANIPULATOR, OBJECT),
    ApiFunction.GET_LIST_OF_OBJECTS: (),
    ApiFunction.GET_BOUNDING_BOXES: (),
}

PERCEPTION_FUNCTIONS = frozenset({ApiFunction.GET_LIST_OF_OBJECTS, ApiFunction.GET_BOUNDING_BOXES})

DESCRIPTIONS: dict[ApiFunction, str] = {
    ApiFunction.OPEN_GRIPPER: "Completely opens the gripper; a held object is released where the arm is.",
    ApiFunction.MOVE_TO_OBJECT: "Moves the manipulator to the position of the named object or fixture.",
    ApiFunction.GRASP: "Grasps the object the gripper arm has moved to.",
    ApiFunction.CUT: "Cuts the object lying on the cutting board (tool arm only).",
    ApiFunction.POUR: "Pours the contents of the held container into the bowl (gripper arm only).",
    ApiFunction.PUT: "Places the object in the bowl: the held object, or (tool arm) the one on the board.",
    ApiFunction.TOSS: "Mixes everything in the bowl; the object name must be 'bowl'.",
    ApiFunction.CUT_AND_PUT_IN: "Cuts the object on the board and puts it in the bowl (tool arm only).",
    ApiFunction.GET_LIST_OF_OBJECTS: "Returns the names of all objects visible on the table.",
    ApiFunction.GET_BOUNDING_BOXES: "Returns bounding boxes of the visible objects.",
}

CUTTING_BOARD = "cutting_board"
BOWL = "bowl"
FIXTURES = frozenset({CUTTING_BOARD, BOWL})
ALIASES = {"plate": BOWL}

TOKEN_RE = re.compile(r"[a-z][a-z0-9_]*\Z")


def canonical_name(name: str) -> str:
    """Resolve aliases (``plate`` names the bowl)."""
    return ALIASES.get(name, name)


@dataclass(frozen=True)
class ApiCall:
    function: ApiFunction
    manipulator: ManipulatorId | None = None
    object: str | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.function, ApiFunction):
            raise TypeError(f"function must be an ApiFunction, got {self.function!r}")
        params = SIGNATURES[self.function]
        if (MANIPULATOR in params) != (self.manipulator is not None):
            raise ValueError(f"{self.function.value}: manipulator argument mismatch")
        if (OBJECT in params) != (self.object is not None):
            raise ValueError(f"{self.function.value}: object argument mismatch")
        if self.manipulator is not None and not isinstance(self.manipulator, ManipulatorId):
            raise TypeError(f"manipulator must be a ManipulatorId, got {self.manipulator!r}")
        if self.object is not None and not TOKEN_RE.match(self.object):
            raise ValueError(f"object name {self.object!r} is not a lowercase token")

    def args(self) -> tuple[str, ...]:
        out = []
        if self.manipulator is not None:
            out.append(self.manipulator.value)
        if self.object is not None:
            out.append(self.object)
        return tuple(out)

    def __str__(self) -> str:
        return f"{self.function.value}({', '.join(repr_arg(a) for a in self.args())})"


def repr_arg(value: str) -> str:
    return f"'{value}'"
