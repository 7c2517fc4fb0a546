"""Parsing and validation of model-generated plans and call sequences.

Nothing here evaluates input text.  Programs are recognised by a small
line-oriented grammar::

    program  := [header] call+
    header   := 'def' NAME '(' ... ')' ':'
    call     := NAME '(' [STRING {',' STRING}] ')'

Blank lines, ``#`` comments, indentation and Markdown code fences are
ignored.  Anything that looks like control flow, assignment or an import is
rejected rather than interpreted.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, NamedTuple

from vla_kitchen.api import (
    ALIASES,
    FIXTURES,
    MANIPULATOR,
    OBJECT,
    SIGNATURES,
    TOKEN_RE,
    ApiCall,
    ApiFunction,
    ManipulatorId,
)
from vla_kitchen.errors import VlaKitchenError

PLAN_START = "[start of plan]"
PLAN_END = "[end of plan]"

_UNSUPPORTED_KEYWORDS = frozenset({
    "for", "while", "if", "elif", "else", "try", "except", "finally", "with", "import", "from",
    "return", "lambda", "class", "async", "await", "yield", "global", "nonlocal", "del", "pass",
    "break", "continue", "raise", "assert", "match", "case", "print_function",
})
_FUNCTIONS = {f.value: f for f in ApiFunction}
_NAME_START = re.compile(r"[A-Za-z_]")
_NAME_REST = re.compile(r"[A-Za-z0-9_]*")


class ValidationCode(str, Enum):
    MISSING_TAGS = "MissingTags"
    DUPLICATE_TAGS = "DuplicateTags"
    UNKNOWN_FUNCTION = "UnknownFunction"
    BAD_ARITY = "BadArity"
    BAD_ARGUMENT_TYPE = "BadArgumentType"
    UNSUPPORTED_CONSTRUCT = "UnsupportedConstruct"
    UNKNOWN_OBJECT_NAME = "UnknownObjectName"
    SYNTAX_ERROR = "SyntaxError"


@dataclass(frozen=True)
class SourceSpan:
    line: int
    column: int

    def __str__(self) -> str:
        return f"{self.line}:{self.column}"


class ValidationError(VlaKitchenError):
    def __init__(self, code: ValidationCode, message: str, line: int = 1, column: int = 1) -> None:
        self.code = code
        self.message = message
        self.location = SourceSpan(line, column)
        super().__init__(f"line {line}, column {column}: {code.value}: {message}")

    def to_dict(self) -> dict:
        return {"code": self.code.value, "line": self.location.line, "column": self.location.column, "message": self.message}


@dataclass(frozen=True)
class PlanDocument:
    steps: tuple[str, ...]
    raw: str = field(default="", compare=False, repr=False)

    def text(self) -> str:
        return "\n".join([PLAN_START, *self.steps, PLAN_END])


@dataclass(frozen=True)
class ActionProgram:
    calls: tuple[ApiCall, ...]
    spans: tuple[SourceSpan, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "calls", tuple(self.calls))
        if not self.calls:
            raise ValueError("an action program needs at least one call")
        if not self.spans:
            object.__setattr__(self, "spans", tuple(SourceSpan(i + 1, 1) for i in range(len(self.calls))))
        elif len(self.spans) != len(self.calls):
            raise ValueError("one source span per call")

    def __len__(self) -> int:
        return len(self.calls)

    def __iter__(self):
        return iter(self.calls)

    def object_names(self) -> set[str]:
        return {c.object for c in self.calls if c.object is not None}


# -- plans ---------------------------------------------------------------------


def _line_col(text: str, offset: int) -> tuple[int, int]:
    line = text.count("\n", 0, offset) + 1
    return line, offset - (text.rfind("\n", 0, offset) + 1) + 1


def _find_all(haystack: str, needle: str) -> list[int]:
    found, start = [], 0
    while (i := haystack.find(needle, start)) != -1:
        found.append(i)
        start = i + len(needle)
    return found


def parse_plan(text: str) -> PlanDocument:
    """Extract the step lines framed by the plan tags (tags matched case-insensitively)."""
    folded = text.lower()
    starts, ends = _find_all(folded, PLAN_START), _find_all(folded, PLAN_END)
    for tag, hits in ((PLAN_START, starts), (PLAN_END, ends)):
        if len(hits) > 1:
            raise ValidationError(ValidationCode.DUPLICATE_TAGS, f"{tag!r} appears {len(hits)} times", *_line_col(text, hits[1]))
    if not starts or not ends:
        missing = " and ".join(t for t, h in ((PLAN_START, starts), (PLAN_END, ends)) if not h)
        raise ValidationError(ValidationCode.MISSING_TAGS, f"missing {missing}")
    if ends[0] < starts[0]:
        raise ValidationError(ValidationCode.MISSING_TAGS, f"{PLAN_END!r} precedes {PLAN_START!r}", *_line_col(text, ends[0]))
    body = text[starts[0] + len(PLAN_START) : ends[0]]
    steps = tuple(s.strip() for s in body.splitlines() if s.strip())
    if not steps:
        raise ValidationError(ValidationCode.SYNTAX_ERROR, "plan has no steps", *_line_col(text, starts[0]))
    return PlanDocument(steps, text)


# -- programs ------------------------------------------------------------------


class _Token(NamedTuple):
    kind: str  # NAME, STRING, OP
    value: str
    column: int


def _tokenize(line: str, lineno: int) -> list[_Token]:
    tokens: list[_Token] = []
    i, n = 0, len(line)
    while i < n:
        ch = line[i]
        if ch in " \t\r\f\v":
            i += 1
        elif ch == "#":
            break
        elif ch in "'\"":
            end = line.find(ch, i + 1)
            if end == -1:
                raise ValidationError(ValidationCode.SYNTAX_ERROR, "unterminated string", lineno, i + 1)
            tokens.append(_Token("STRING", line[i + 1 : end], i + 1))
            i = end + 1
        elif _NAME_START.match(ch):
            m = _NAME_REST.match(line, i + 1)
            end = m.end() if m else i + 1
            tokens.append(_Token("NAME", line[i:end], i + 1))
            i = end
        else:
            tokens.append(_Token("OP", ch, i + 1))
            i += 1
    return tokens


def _normalize_object(raw: str) -> str:
    return re.sub(r"[\s\-]+", "_", raw.strip().lower())


def _parse_call(tokens: list[_Token], lineno: int) -> ApiCall:
    head = tokens[0]
    if head.kind != "NAME":
        raise ValidationError(ValidationCode.SYNTAX_ERROR, f"expected a function call, found {head.value!r}", lineno, head.column)
    if len(tokens) < 2 or tokens[1] != ("OP", "(", tokens[1].column):
        where = tokens[1] if len(tokens) > 1 else head
        raise ValidationError(ValidationCode.SYNTAX_ERROR, f"expected '(' after {head.value!r}", lineno, where.column)

    args: list[_Token] = []
    i = 2
    expect_arg = True
    closed = False
    while i < len(tokens):
        tok = tokens[i]
        if tok.kind == "OP" and tok.value == ")":
            if expect_arg and args:
                raise ValidationError(ValidationCode.SYNTAX_ERROR, "trailing comma", lineno, tok.column)
            closed = True
            i += 1
            break
        if expect_arg:
            if tok.kind != "STRING":
                if tok.kind == "NAME" and i + 1 < len(tokens) and tokens[i + 1].value == "=":
                    msg = f"keyword argument {tok.value!r} not supported; pass quoted strings positionally"
                else:
                    msg = f"arguments must be quoted strings, found {tok.value!r}"
                raise ValidationError(ValidationCode.SYNTAX_ERROR, msg, lineno, tok.column)
            args.append(tok)
            expect_arg = False
        else:
            if tok.kind != "OP" or tok.value != ",":
                raise ValidationError(ValidationCode.SYNTAX_ERROR, f"expected ',' or ')', found {tok.value!r}", lineno, tok.column)
            expect_arg = True
        i += 1
    if not closed:
        raise ValidationError(ValidationCode.SYNTAX_ERROR, "missing ')'", lineno, tokens[-1].column)
    if i < len(tokens):
        raise ValidationError(ValidationCode.SYNTAX_ERROR, f"unexpected {tokens[i].value!r} after call", lineno, tokens[i].column)

    fn = _FUNCTIONS.get(head.value)
    if fn is None:
        raise ValidationError(ValidationCode.UNKNOWN_FUNCTION, f"{head.value!r} is not an available API function", lineno, head.column)
    params = SIGNATURES[fn]
    if len(args) != len(params):
        raise ValidationError(
            ValidationCode.BAD_ARITY, f"{fn.value} takes {len(params)} argument(s), got {len(args)}", lineno, head.column
        )
    manipulator: ManipulatorId | None = None
    obj: str | None = None
    for param, tok in zip(params, args):
        if param == MANIPULATOR:
            try:
                manipulator = ManipulatorId(tok.value.strip().lower())
            except ValueError:
                raise ValidationError(
                    ValidationCode.BAD_ARGUMENT_TYPE,
                    f"manipulator must be 'gripper' or 'tool', got {tok.value!r}",
                    lineno,
                    tok.column,
                ) from None
        elif param == OBJECT:
            obj = _normalize_object(tok.value)
            if not TOKEN_RE.match(obj):
                raise ValidationError(
                    ValidationCode.BAD_ARGUMENT_TYPE, f"object name {tok.value!r} is not a valid token", lineno, tok.column
                )
    return ApiCall(fn, manipulator, obj)


def parse_program(source: str | bytes) -> ActionProgram:
    """Parse generated code into an :class:`ActionProgram` (never executes it)."""
    if isinstance(source, (bytes, bytearray)):
        source = bytes(source).decode("utf-8", errors="replace")
    calls: list[ApiCall] = []
    spans: list[SourceSpan] = []
    header_seen = False
    for lineno, line in enumerate(source.splitlines(), start=1):
        if line.lstrip().startswith("```"):
            continue
        tokens = _tokenize(line, lineno)
        if not tokens:
            continue
        head = tokens[0]
        if head == ("NAME", "def", head.column):
            if header_seen or calls:
                raise ValidationError(
                    ValidationCode.UNSUPPORTED_CONSTRUCT, "only one leading function header is allowed", lineno, head.column
                )
            if tokens[-1].value != ":" or len(tokens) < 2 or tokens[1].kind != "NAME":
                raise ValidationError(ValidationCode.SYNTAX_ERROR, "malformed function header", lineno, head.column)
            header_seen = True
            continue
        if head.kind == "NAME" and head.value in _UNSUPPORTED_KEYWORDS:
            raise ValidationError(
                ValidationCode.UNSUPPORTED_CONSTRUCT, f"{head.value!r} is not allowed; emit straight-line calls only", lineno, head.column
            )
        depth = 0
        for tok in tokens:
            if tok.kind != "OP":
                continue
            if tok.value in "([{":
                depth += 1
            elif tok.value in ")]}":
                depth -= 1
            elif tok.value == "=" and depth == 0:
                raise ValidationError(ValidationCode.UNSUPPORTED_CONSTRUCT, "assignments are not allowed", lineno, tok.column)
        if tokens[-1].value == ":" and tokens[-1].kind == "OP":
            raise ValidationError(ValidationCode.UNSUPPORTED_CONSTRUCT, "block statements are not allowed", lineno, tokens[-1].column)
        calls.append(_parse_call(tokens, lineno))
        spans.append(SourceSpan(lineno, head.column))
    if not calls:
        raise ValidationError(ValidationCode.SYNTAX_ERROR, "no API calls found")
    return ActionProgram(tuple(calls), tuple(spans))


def serialize_program(p: ActionProgram) -> str:
    return "\n".join(str(c) for c in p.calls)


def validate_against_scene(p: ActionProgram, known_objects: Iterable[str]) -> list[ValidationError]:
    """Static check: every object argument names a known object or a fixture."""
    allowed = set(known_objects) | FIXTURES | set(ALIASES)
    report = []
    for call, span in zip(p.calls, p.spans):
        if call.object is not None and call.object not in allowed:
            report.append(
                ValidationError(
                    ValidationCode.UNKNOWN_OBJECT_NAME,
                    f"{call.object!r} is not among the detected objects",
                    span.line,
                    span.column,
                )
            )
    return report
