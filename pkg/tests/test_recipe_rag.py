import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vla_kitchen.errors import ParseError
from vla_kitchen.llm_gateway import BackendConfig, LlmClient, MockScenario, Transcript
from vla_kitchen.recipe_rag import (
    DuplicateName,
    EmptyStore,
    Preparation,
    Recipe,
    fixture_recipes,
    index,
    indexed_text,
    load_recipes,
    retrieve,
)


@pytest.fixture(scope="module")
def client():
    return LlmClient(BackendConfig("mock", scenario=MockScenario(())))


@pytest.fixture(scope="module")
def store(client):
    return index(client, fixture_recipes())


class TestLoad:
    def test_fixture_corpus(self):
        recipes = fixture_recipes()
        assert [r.name for r in recipes] == ["Vegetable Salad", "Russian Salad", "Fruit Salad"]
        assert all(r.request for r in recipes)

    def test_empty_ingredients(self):
        with pytest.raises(ParseError, match="ingredients"):
            load_recipes([{"name": "Air", "ingredients": [], "steps": ["breathe"]}])

    def test_missing_steps(self):
        with pytest.raises(ParseError, match="steps"):
            load_recipes([{"name": "Air", "ingredients": ["x"]}])

    def test_duplicate_name(self):
        doc = {"name": "Fruit Salad", "ingredients": ["apple"], "steps": ["cut"]}
        with pytest.raises(DuplicateName):
            load_recipes([doc, dict(doc)])

    def test_unknown_key(self):
        with pytest.raises(ParseError, match="unknown"):
            load_recipes([{"name": "x", "ingredients": ["a"], "steps": ["s"], "calories": 3}])

    def test_bad_token(self):
        with pytest.raises(ParseError, match="token"):
            load_recipes([{"name": "x", "ingredients": ["red pepper"], "steps": ["s"]}])

    def test_preparation_defaults_to_cut(self):
        r = Recipe("x", ("a", "b"), ("s",), {"b": "pour"})
        assert r.preparation("a") is Preparation.CUT
        assert r.preparation("b") is Preparation.POUR

    def test_preparation_for_stranger_rejected(self):
        with pytest.raises(ValueError):
            Recipe("x", ("a",), ("s",), {"z": "cut"})

    def test_ingredients_lowercased_from_yaml(self, tmp_path):
        p = tmp_path / "r.yaml"
        p.write_text("recipes:\n  - name: T\n    ingredients: [Tomato]\n    steps: [cut it]\n")
        assert load_recipes(p)[0].ingredients == ("tomato",)

    def test_bad_yaml(self, tmp_path):
        p = tmp_path / "r.yaml"
        p.write_text("recipes: [\n")
        with pytest.raises(ParseError):
            load_recipes(p)


class TestIndex:
    def test_vectors_unit_norm(self, store):
        assert store.vectors.shape[0] == 3
        np.testing.assert_allclose(np.linalg.norm(store.vectors, axis=1), 1.0, atol=1e-12)

    def test_reindex_identical(self, client, store):
        again = index(client, fixture_recipes())
        assert np.array_equal(again.vectors, store.vectors)

    def test_empty_corpus(self, client):
        s = index(client, [])
        assert len(s) == 0
        with pytest.raises(EmptyStore):
            retrieve(s, "fruit salad")

    def test_transcript_records_embeddings(self, client):
        t = Transcript()
        s = index(client, fixture_recipes(), transcript=t)
        retrieve(s, "fruit salad", transcript=t)
        assert [e.purpose for e in t.entries] == ["index", "retrieve"]


class TestRetrieve:
    def test_fruit_salad_top1(self, store):
        (hit,) = retrieve(store, "please make me a fruit salad", k=1)
        assert hit.recipe.name == "Fruit Salad"

    @pytest.mark.parametrize("name", ["Vegetable Salad", "Russian Salad", "Fruit Salad"])
    def test_self_retrieval(self, store, name):
        r = store.by_name(name)
        (hit,) = retrieve(store, indexed_text(r))
        assert hit.recipe is r
        assert hit.score == pytest.approx(1.0, abs=1e-9)

    def test_k_larger_than_corpus(self, store):
        hits = retrieve(store, "salad", k=10)
        assert len(hits) == 3
        assert [h.score for h in hits] == sorted((h.score for h in hits), reverse=True)

    def test_exact_tie(self, client):
        twins = [Recipe("B", ("x",), ("y",)), Recipe("A", ("x",), ("y",))]
        s = index(client, twins)
        s = type(s)(client, s.recipes, np.vstack([s.vectors[0], s.vectors[0]]))
        assert [h.recipe.name for h in retrieve(s, "x y", k=2)] == ["A", "B"]

    def test_k_must_be_positive(self, store):
        with pytest.raises(ValueError):
            retrieve(store, "salad", k=0)

    @given(st.text(max_size=60))
    def test_scores_bounded_and_sorted(self, store, text):
        hits = retrieve(store, text, k=3)
        scores = [h.score for h in hits]
        assert all(-1.0 <= s <= 1.0 for s in scores)
        assert scores == sorted(scores, reverse=True)
        assert retrieve(store, text, k=3) == hits
