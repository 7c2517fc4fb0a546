"""Scene documents: a kitchen layout plus the camera that observes it.

Example::

    id: veg-ok
    calibration: ../calibration/kitchen.yaml
    objects:
      - {name: cucumber, at: [-0.25, 0.05]}
      - {name: peas, kind: container, at: [-0.15, -0.10]}
      - {name: tomato, place: board}
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from vla_kitchen.api import TOKEN_RE, ManipulatorId
from vla_kitchen.errors import ParseError
from vla_kitchen.geometry import CameraModel, GeometryError, WorldPoint, calibration_from_dict, load_calibration, world_to_camera
from vla_kitchen.kitchen_sim import (
    Location,
    ObjectKind,
    ObjectState,
    Place,
    SimObject,
    WorldState,
    make_world,
)
from vla_kitchen.llm_gateway import SCENE_REF_PREFIX

PLANE_TOL = 1e-9
_SCENE_KEYS = {"id", "calibration", "image", "objects", "fixtures", "homes"}
_OBJECT_KEYS = {"name", "kind", "at", "place", "contents", "state"}


@dataclass(frozen=True)
class Scene:
    id: str
    world: WorldState
    camera: CameraModel
    image: str | None = None

    @property
    def image_ref(self) -> str:
        return self.image or f"{SCENE_REF_PREFIX}{self.id}"

    def with_world(self, world: WorldState) -> "Scene":
        return Scene(self.id, world, self.camera, self.image)


def _point(raw: Any, what: str, source: str | None) -> WorldPoint:
    if not isinstance(raw, (list, tuple)) or len(raw) not in (2, 3):
        raise ParseError(f"{what}: expected [x, y] or [x, y, z]", source)
    try:
        vals = [float(v) for v in raw]
    except (TypeError, ValueError):
        raise ParseError(f"{what}: coordinates must be numbers", source) from None
    return WorldPoint(*vals, *([0.0] if len(vals) == 2 else []))


def _location(doc: Mapping[str, Any], source: str | None) -> Location:
    place = str(doc.get("place", "area"))
    if place in ("area", Place.INGREDIENT_AREA.value):
        if "at" not in doc:
            raise ParseError(f"object {doc['name']!r}: 'at' is required in the ingredient area", source)
        return Location.area(_point(doc["at"], f"object {doc['name']!r}", source))
    if place in ("board", Place.CUTTING_BOARD.value):
        return Location.board()
    if place == Place.BOWL.value:
        return Location.bowl()
    if place.startswith("held:"):
        try:
            return Location.held(ManipulatorId(place.split(":", 1)[1]))
        except ValueError:
            pass
    raise ParseError(f"object {doc['name']!r}: unknown place {place!r}", source)


def _object(doc: Any, source: str | None) -> SimObject:
    if not isinstance(doc, Mapping) or "name" not in doc:
        raise ParseError("each object needs a 'name'", source)
    extra = set(doc) - _OBJECT_KEYS
    if extra:
        raise ParseError(f"object {doc['name']!r}: unknown keys {sorted(extra)}", source)
    name = str(doc["name"])
    if not TOKEN_RE.match(name):
        raise ParseError(f"object name {name!r} is not a lowercase token", source)
    try:
        kind = ObjectKind(doc.get("kind", "ingredient"))
        state = ObjectState(doc.get("state", "whole"))
    except ValueError as exc:
        raise ParseError(f"object {name!r}: {exc}", source) from None
    if kind is ObjectKind.FIXTURE:
        raise ParseError(f"object {name!r}: fixtures are declared under 'fixtures'", source)
    contents = doc.get("contents", name if kind is ObjectKind.CONTAINER else None)
    return SimObject(name, kind, _location(doc, source), state, contents, cut=state is ObjectState.CUT)


def scene_from_dict(doc: Any, base_dir: Path | None = None, source: str | None = None) -> Scene:
    if not isinstance(doc, Mapping):
        raise ParseError("scene must be a mapping", source)
    extra = set(doc) - _SCENE_KEYS
    if extra:
        raise ParseError(f"unknown scene keys: {sorted(extra)}", source)
    for key in ("id", "calibration", "objects"):
        if key not in doc:
            raise ParseError(f"scene is missing {key!r}", source)
    cal = doc["calibration"]
    if isinstance(cal, Mapping):
        camera = calibration_from_dict(cal, source)
    else:
        path = Path(cal)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        camera = load_calibration(path)
    if not isinstance(doc["objects"], list):
        raise ParseError("'objects' must be a list", source)
    objects = [_object(o, source) for o in doc["objects"]]
    fixtures = {k: _point(v, f"fixture {k!r}", source) for k, v in (doc.get("fixtures") or {}).items()}
    try:
        homes = {ManipulatorId(k): _point(v, f"home {k!r}", source) for k, v in (doc.get("homes") or {}).items()}
        world = make_world(objects, fixtures=fixtures or None, homes=homes or None)
    except ValueError as exc:
        raise ParseError(str(exc), source) from None
    for o in objects:
        if o.location.place is Place.INGREDIENT_AREA:
            _check_on_table(camera, o, source)
    image = doc.get("image")
    if image is not None and base_dir is not None and not Path(image).is_absolute():
        image = str(base_dir / image)
    return Scene(str(doc["id"]), world, camera, image)


def _check_on_table(camera: CameraModel, o: SimObject, source: str | None) -> None:
    pos = o.location.position
    assert pos is not None
    if abs(pos.z) > PLANE_TOL:
        raise ParseError(f"object {o.name!r} must lie on the table plane z = 0", source)
    try:
        depth = world_to_camera(camera.extrinsics, pos).z
    except GeometryError as exc:
        raise ParseError(f"object {o.name!r}: {exc}", source) from None
    if abs(depth - camera.table_z_camera) > 1e-6:
        raise ParseError(
            f"object {o.name!r} sits at camera depth {depth:.6g}, but the calibration's table plane is at "
            f"{camera.table_z_camera:.6g}",
            source,
        )


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"cannot read scene: {exc}", str(path)) from None
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML: {exc}", str(path)) from None
    return scene_from_dict(doc, path.parent, str(path))


def scene_to_dict(scene: Scene, calibration: str | Mapping[str, Any]) -> dict[str, Any]:
    """Serialise the movable objects of a scene (fixtures and homes use defaults)."""
    objects = []
    for o in sorted(scene.world.objects.values(), key=lambda o: o.name):
        if o.kind is ObjectKind.FIXTURE:
            continue
        entry: dict[str, Any] = {"name": o.name}
        if o.kind is not ObjectKind.INGREDIENT:
            entry["kind"] = o.kind.value
        if o.contents not in (None, o.name):
            entry["contents"] = o.contents
        if o.state is not ObjectState.WHOLE:
            entry["state"] = o.state.value
        place = o.location.place
        if place is Place.INGREDIENT_AREA:
            entry["at"] = [o.location.position.x, o.location.position.y]
        elif place is Place.HELD:
            entry["place"] = f"held:{o.location.arm.value}"
        else:
            entry["place"] = {Place.CUTTING_BOARD: "board", Place.BOWL: "bowl"}[place]
        objects.append(entry)
    doc: dict[str, Any] = {"id": scene.id, "calibration": calibration, "objects": objects}
    if scene.image:
        doc["image"] = scene.image
    return doc
