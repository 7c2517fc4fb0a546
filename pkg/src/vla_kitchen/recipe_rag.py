"""Recipe documents and a minimal vector store for request-to-recipe retrieval."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml

from vla_kitchen.api import TOKEN_RE
from vla_kitchen.errors import ParseError, VlaKitchenError
from vla_kitchen.llm_gateway import LlmClient, Transcript

_RECIPE_KEYS = {"name", "ingredients", "steps", "prepare", "toss", "request"}


class Preparation(str, Enum):
    CUT = "cut"
    WHOLE = "whole"
    POUR = "pour"


class DuplicateName(VlaKitchenError, ValueError):
    pass


class EmptyStore(VlaKitchenError, LookupError):
    pass


@dataclass(frozen=True)
class Recipe:
    name: str
    ingredients: tuple[str, ...]
    steps: tuple[str, ...]
    prepare: Mapping[str, Preparation] = field(default_factory=dict)
    toss: bool = True
    request: str | None = None  # canonical phrasing of a request for this dish

    def __post_init__(self) -> None:
        object.__setattr__(self, "ingredients", tuple(self.ingredients))
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.name.strip():
            raise ValueError("recipe name is empty")
        if not self.ingredients:
            raise ValueError(f"{self.name}: ingredients must be nonempty")
        if not self.steps:
            raise ValueError(f"{self.name}: steps must be nonempty")
        if len(set(self.ingredients)) != len(self.ingredients):
            raise ValueError(f"{self.name}: duplicate ingredient")
        for tok in self.ingredients:
            if not TOKEN_RE.match(tok):
                raise ValueError(f"{self.name}: ingredient {tok!r} is not a lowercase token")
        prep = {k: Preparation(v) for k, v in dict(self.prepare).items()}
        stray = set(prep) - set(self.ingredients)
        if stray:
            raise ValueError(f"{self.name}: preparation given for non-ingredients {sorted(stray)}")
        object.__setattr__(self, "prepare", {i: prep.get(i, Preparation.CUT) for i in self.ingredients})

    def preparation(self, ingredient: str) -> Preparation:
        return self.prepare[ingredient]


def indexed_text(r: Recipe) -> str:
    """The exact text that gets embedded for a recipe."""
    return "\n".join([r.name, " ".join(r.ingredients), *r.steps])


def recipe_from_dict(doc: Mapping[str, Any], source: str | None = None) -> Recipe:
    if not isinstance(doc, Mapping):
        raise ParseError("recipe must be a mapping", source)
    unknown = set(doc) - _RECIPE_KEYS
    if unknown:
        raise ParseError(f"unknown recipe keys: {sorted(unknown)}", source)
    for key in ("name", "ingredients", "steps"):
        if key not in doc:
            raise ParseError(f"recipe is missing {key!r}", source)
    ingredients, steps = doc["ingredients"], doc["steps"]
    if not isinstance(ingredients, list) or not isinstance(steps, list):
        raise ParseError("ingredients and steps must be lists", source)
    try:
        return Recipe(
            name=str(doc["name"]).strip(),
            ingredients=tuple(str(i).strip().lower() for i in ingredients),
            steps=tuple(str(s).strip() for s in steps),
            prepare=doc.get("prepare") or {},
            toss=bool(doc.get("toss", True)),
            request=doc.get("request"),
        )
    except ValueError as exc:
        raise ParseError(str(exc), source) from None


def load_recipes(source: str | Path | Sequence[Mapping[str, Any]] | Mapping[str, Any]) -> list[Recipe]:
    """Load recipes from a YAML file, or from already-parsed documents."""
    label = None
    if isinstance(source, (str, Path)):
        label = str(source)
        try:
            doc = yaml.safe_load(Path(source).read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ParseError(f"invalid YAML: {exc}", label) from None
    else:
        doc = source
    if isinstance(doc, Mapping):
        doc = doc.get("recipes")
    if not isinstance(doc, list):
        raise ParseError("expected a list of recipes", label)
    recipes = [recipe_from_dict(d, label) for d in doc]
    seen: set[str] = set()
    for r in recipes:
        key = r.name.casefold()
        if key in seen:
            raise DuplicateName(f"duplicate recipe name {r.name!r}")
        seen.add(key)
    return recipes


def fixture_recipes() -> list[Recipe]:
    from vla_kitchen.assets import asset_path

    return load_recipes(asset_path("recipes", "salads.yaml"))


@dataclass(frozen=True)
class RetrievalResult:
    recipe: Recipe
    score: float


@dataclass(frozen=True)
class RecipeStore:
    """Immutable once built; safe to query from several threads."""

    client: LlmClient
    recipes: tuple[Recipe, ...] = ()
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __len__(self) -> int:
        return len(self.recipes)

    def by_name(self, name: str) -> Recipe:
        for r in self.recipes:
            if r.name.casefold() == name.casefold():
                return r
        raise KeyError(name)


def index(client: LlmClient, recipes: Iterable[Recipe], *, transcript: Transcript | None = None) -> RecipeStore:
    recipes = tuple(recipes)
    names = [r.name.casefold() for r in recipes]
    if len(set(names)) != len(names):
        raise DuplicateName("recipe names must be unique in a store")
    if not recipes:
        return RecipeStore(client)
    vecs = client.embed([indexed_text(r) for r in recipes], purpose="index", transcript=transcript)
    return RecipeStore(client, recipes, np.vstack(vecs))


def retrieve(store: RecipeStore, query: str, k: int = 1, *, transcript: Transcript | None = None) -> list[RetrievalResult]:
    """Top-``k`` recipes by cosine similarity; equal scores are ordered by name."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not store.recipes:
        raise EmptyStore("the recipe store is empty")
    q = store.client.embed([query], purpose="retrieve", transcript=transcript)[0]
    scores = np.clip(store.vectors @ q, -1.0, 1.0)
    ranked = sorted(zip(store.recipes, scores.tolist()), key=lambda rs: (-rs[1], rs[0].name))
    return [RetrievalResult(r, s) for r, s in ranked[:k]]
