"""Object detection, grounding, ingredient availability and vision metrics.

Detections come from either the simulator's ground truth (optionally with
seeded error injection) or a remote vision-language model whose text reply is
parsed into name and box pairs.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from string import Template
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from vla_kitchen.errors import VlaKitchenError
from vla_kitchen.geometry import CameraModel, PixelPoint, WorldPoint, pixel_to_world
from vla_kitchen.kitchen_sim import sim_bounding_boxes, sim_list_objects
from vla_kitchen.llm_gateway import ChatMessage, ChatRequest, LlmClient, Role, Transcript
from vla_kitchen.scene import Scene

BBox = tuple[float, float, float, float]


class ResponseParseError(VlaKitchenError, ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def normalize_token(name: str) -> str:
    """Case-fold, join words with underscores and strip one trailing 's'."""
    tok = re.sub(r"[\s\-]+", "_", name.strip().casefold())
    if len(tok) > 1 and tok.endswith("s"):
        tok = tok[:-1]
    return tok


@dataclass(frozen=True)
class DetectedObject:
    name: str
    bbox: BBox
    world_position: WorldPoint | None = None

    def __post_init__(self) -> None:
        box = tuple(float(v) for v in self.bbox)
        if len(box) != 4 or not all(math.isfinite(v) for v in box):
            raise ValueError(f"bounding box must be four finite numbers, got {self.bbox!r}")
        x0, y0, x1, y1 = box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bounding box {box}")
        if not self.name:
            raise ValueError("detection needs a caption")
        object.__setattr__(self, "bbox", box)

    @property
    def center(self) -> PixelPoint:
        x0, y0, x1, y1 = self.bbox
        return PixelPoint((x0 + x1) / 2, (y0 + y1) / 2)


@dataclass(frozen=True)
class ErrorInjection:
    miss_rate: float = 0.0
    mislabel_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("miss_rate", "mislabel_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def active(self) -> bool:
        return self.miss_rate > 0 or self.mislabel_rate > 0


@dataclass(frozen=True)
class AvailabilityReport:
    required: frozenset[str]
    present: frozenset[str]
    missing: frozenset[str]

    @property
    def available(self) -> bool:
        return not self.missing

    def to_dict(self) -> dict:
        return {
            "required": sorted(self.required),
            "present": sorted(self.present),
            "missing": sorted(self.missing),
            "available": self.available,
        }


# -- detection -----------------------------------------------------------------


def detect_sim(
    scene: Scene, required: Iterable[str] = (), injection: ErrorInjection | None = None, seed: int | None = None
) -> list[DetectedObject]:
    """Ground-truth detections with optional injected errors.

    Random draws happen in a fixed order so the result is a pure function of
    the inputs: one draw per visible object (sorted by name) decides drops,
    then for each truly absent required ingredient (sorted) one draw decides
    whether it is hallucinated and, if so, one more picks the victim
    detection whose caption it takes.
    """
    names = sim_list_objects(scene.world)
    boxes = sim_bounding_boxes(scene.world, names, scene.camera)
    inj = injection or ErrorInjection()
    rng = np.random.default_rng(inj.seed if seed is None else seed)

    kept = [n for n in names if rng.random() >= inj.miss_rate]
    dets = [DetectedObject(n, boxes[n]) for n in kept]

    if inj.mislabel_rate > 0:
        truth = {normalize_token(n) for n in names}
        absent = sorted({r for r in required if normalize_token(r) not in truth})
        free = list(range(len(dets)))
        for ingredient in absent:
            if not free:
                break
            if rng.random() < inj.mislabel_rate:
                victim = free.pop(int(rng.integers(len(free))))
                dets[victim] = replace(dets[victim], name=ingredient)
    return dets


GROUNDING_PROMPT = Template(
    "List every food item and container visible on the table.\n"
    "Reply with one line per object in exactly this form:\n"
    "name: x_min, y_min, x_max, y_max\n"
    "where the numbers are pixel coordinates of its bounding box.\n"
    "Use a single lowercase word per name (underscores instead of spaces).\n"
    "If nothing is visible, reply with: none\n"
    "${hint}"
)

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_LINE_RE = re.compile(
    rf"^\s*(?:[-*]\s*|\d+[.)]\s*)?(?P<name>[A-Za-z][\w \-]*?)\s*:\s*[\[(]?\s*(?P<a>{_NUM})\s*,\s*(?P<b>{_NUM})\s*,\s*"
    rf"(?P<c>{_NUM})\s*,\s*(?P<d>{_NUM})\s*[\])]?\s*\.?\s*$"
)
_QWEN_RE = re.compile(
    rf"<ref>\s*(?P<name>[^<]+?)\s*</ref>\s*<box>\s*\(\s*(?P<a>{_NUM})\s*,\s*(?P<b>{_NUM})\s*\)\s*,?\s*"
    rf"\(\s*(?P<c>{_NUM})\s*,\s*(?P<d>{_NUM})\s*\)\s*</box>"
)
_NONE_RE = re.compile(r"^\s*(none|nothing|no objects?)\.?\s*$", re.IGNORECASE)


def _caption(raw: str) -> str:
    return re.sub(r"[\s\-]+", "_", raw.strip().lower())


def parse_detections(text: str, qwen_scale: tuple[float, float] | None = None) -> list[DetectedObject]:
    """Parse a grounding reply.

    Accepts ``name: x0, y0, x1, y1`` lines (optionally bulleted or bracketed)
    and ``<ref>name</ref><box>(x0,y0),(x1,y1)</box>`` spans.  Box spans use
    a 0..1000 grid; pass ``qwen_scale=(width, height)`` to convert them to
    pixels.  Blank lines and lines ending in ``:`` are treated as chatter.
    """
    dets: list[DetectedObject] = []
    spans = list(_QWEN_RE.finditer(text))
    if spans:
        sx, sy = (qwen_scale[0] / 1000, qwen_scale[1] / 1000) if qwen_scale else (1.0, 1.0)
        for m in spans:
            box = (float(m["a"]) * sx, float(m["b"]) * sy, float(m["c"]) * sx, float(m["d"]) * sy)
            dets.append(_make(m["name"], box, text.count("\n", 0, m.start()) + 1))
        return dets
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip().strip("`")
        if not stripped or stripped.endswith(":") or _NONE_RE.match(stripped):
            continue
        m = _LINE_RE.match(stripped)
        if m is None:
            raise ResponseParseError(f"expected 'name: x_min, y_min, x_max, y_max', got {stripped[:80]!r}", lineno)
        box = (float(m["a"]), float(m["b"]), float(m["c"]), float(m["d"]))
        dets.append(_make(m["name"], box, lineno))
    return dets


def _make(name: str, box: BBox, lineno: int) -> DetectedObject:
    try:
        return DetectedObject(_caption(name), box)
    except ValueError as exc:
        raise ResponseParseError(str(exc), lineno) from None


def format_detections(dets: Sequence[DetectedObject]) -> str:
    """Render detections in the reply format :func:`parse_detections` reads."""
    if not dets:
        return "none"
    return "\n".join(f"{d.name}: {d.bbox[0]:.2f}, {d.bbox[1]:.2f}, {d.bbox[2]:.2f}, {d.bbox[3]:.2f}" for d in dets)


class Detector(Protocol):
    def detect(
        self, scene: Scene, required: Iterable[str] = (), *, seed: int | None = None, transcript: Transcript | None = None
    ) -> list[DetectedObject]: ...


@dataclass(frozen=True)
class SimDetector:
    injection: ErrorInjection = field(default_factory=ErrorInjection)

    def detect(self, scene, required=(), *, seed=None, transcript=None):
        return detect_sim(scene, required, self.injection, seed)


@dataclass(frozen=True)
class VlmDetector:
    client: LlmClient
    hint: str = ""
    qwen_scale: tuple[float, float] | None = None

    def detect(self, scene, required=(), *, seed=None, transcript=None):
        prompt = GROUNDING_PROMPT.substitute(hint=self.hint)
        req = ChatRequest((ChatMessage(Role.USER, prompt, image=scene.image_ref),), seed=seed if seed is not None else 0)
        reply = self.client.chat_with_image(req, purpose="vision", transcript=transcript)
        return parse_detections(reply.content, self.qwen_scale)


def detect_objects(
    backend: Detector, scene: Scene, required: Iterable[str] = (), *, seed: int | None = None,
    transcript: Transcript | None = None,
) -> list[DetectedObject]:
    return backend.detect(scene, required, seed=seed, transcript=transcript)


# -- grounding and availability ------------------------------------------------


def ground_detections(dets: Sequence[DetectedObject], m: CameraModel) -> list[DetectedObject]:
    """Attach the table-plane world position of each box center."""
    return [replace(d, world_position=pixel_to_world(m, d.center)) for d in dets]


def check_availability(required: Iterable[str], dets: Iterable[DetectedObject | str]) -> AvailabilityReport:
    """Which required ingredients were detected (case-folded, trailing 's' ignored)."""
    required = frozenset(required)
    by_token = {normalize_token(r): r for r in required}
    present = set()
    for d in dets:
        name = d if isinstance(d, str) else d.name
        present.add(by_token.get(normalize_token(name), name))
    return AvailabilityReport(required, frozenset(present), frozenset(required - present))


# -- metrics -------------------------------------------------------------------


@dataclass(frozen=True)
class SceneScore:
    list_correct: bool
    captions: Mapping[str, bool]


def score_scene(ground_truth: Iterable[str], required: Iterable[str], dets: Sequence[DetectedObject]) -> SceneScore:
    """Per-scene contributions to the two vision metrics.

    The list is correct when the detected caption set equals the ground-truth
    name set.  A required ingredient's caption is correct when it is detected
    exactly once if present, and not at all if absent.
    """
    truth = {normalize_token(n) for n in ground_truth}
    detected = [normalize_token(d.name) for d in dets]
    list_correct = len(detected) == len(set(detected)) and set(detected) == truth
    captions = {}
    for r in sorted(set(required)):
        tok = normalize_token(r)
        hits = detected.count(tok)
        captions[r] = hits == 1 if tok in truth else hits == 0
    return SceneScore(list_correct, captions)


@dataclass(frozen=True)
class VisionMetrics:
    scenes: int
    list_correct: int
    captions: int
    captions_correct: int

    @property
    def list_accuracy(self) -> float:
        return self.list_correct / self.scenes if self.scenes else 1.0

    @property
    def caption_accuracy(self) -> float:
        return self.captions_correct / self.captions if self.captions else 1.0

    @classmethod
    def aggregate(cls, scores: Iterable[SceneScore]) -> "VisionMetrics":
        n = lc = c = cc = 0
        for s in scores:
            n += 1
            lc += s.list_correct
            c += len(s.captions)
            cc += sum(s.captions.values())
        return cls(n, lc, c, cc)

    def to_dict(self) -> dict:
        return {
            "scenes": self.scenes,
            "list_accuracy": self.list_accuracy,
            "caption_accuracy": self.caption_accuracy,
            "captions": self.captions,
        }
