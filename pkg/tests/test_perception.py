import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vla_kitchen.geometry import CameraModel
from vla_kitchen.llm_gateway import BackendConfig, LlmClient, MissingImage, MockRule, MockScenario, Transcript
from vla_kitchen.perception import (
    DetectedObject,
    ErrorInjection,
    ResponseParseError,
    SimDetector,
    VisionMetrics,
    VlmDetector,
    check_availability,
    detect_objects,
    detect_sim,
    format_detections,
    ground_detections,
    normalize_token,
    parse_detections,
    score_scene,
)
from scene_factory import kitchen_scene

VEG = ["cucumber", "pepper", "tomato"]


class TestDetectedObject:
    @pytest.mark.parametrize("box", [(0, 0, 0, 5), (5, 0, 1, 5), (0, 3, 4, 3), (0, 0, float("nan"), 1)])
    def test_rejects_bad_boxes(self, box):
        with pytest.raises(ValueError):
            DetectedObject("pepper", box)

    def test_center(self):
        c = DetectedObject("pepper", (0, 2, 4, 10)).center
        assert (c.x, c.y) == (2.0, 6.0)


class TestErrorInjection:
    @pytest.mark.parametrize("kw", [{"miss_rate": -0.1}, {"miss_rate": 1.5}, {"mislabel_rate": 2}])
    def test_rates_bounded(self, kw):
        with pytest.raises(ValueError):
            ErrorInjection(**kw)


class TestDetectSim:
    def test_perfect(self):
        dets = detect_sim(kitchen_scene(["pepper", "tomato"]))
        assert [d.name for d in dets] == ["pepper", "tomato"]

    def test_miss_all(self):
        assert detect_sim(kitchen_scene(VEG), injection=ErrorInjection(miss_rate=1.0)) == []

    def test_seeded_drops_match_documented_draw_order(self):
        names = ["apple", "banana", "grapes", "yogurt"]
        scene = kitchen_scene(names)
        for seed in range(20):
            draws = np.random.default_rng(seed).random(4)
            expected = [n for n, u in zip(sorted(names), draws) if u >= 0.5]
            got = detect_sim(scene, injection=ErrorInjection(miss_rate=0.5), seed=seed)
            assert [d.name for d in got] == expected
            assert detect_sim(scene, injection=ErrorInjection(miss_rate=0.5), seed=seed) == got

    def test_mislabel_takes_a_present_objects_box(self):
        scene = kitchen_scene(["cucumber", "tomato"])
        clean = detect_sim(scene)
        dets = detect_sim(scene, VEG, ErrorInjection(mislabel_rate=1.0), seed=3)
        assert sorted(d.name for d in dets).count("pepper") == 1
        assert {d.bbox for d in dets} == {d.bbox for d in clean}

    def test_mislabel_only_targets_truly_absent_ingredients(self):
        scene = kitchen_scene(VEG)
        assert detect_sim(scene, VEG, ErrorInjection(mislabel_rate=1.0)) == detect_sim(scene)

    def test_fixtures_and_bowl_contents_invisible(self):
        from dataclasses import replace

        from vla_kitchen.kitchen_sim import Location

        scene = kitchen_scene(["pepper", "tomato"])
        w = scene.world
        w = replace(w, objects={**w.objects, "tomato": replace(w.objects["tomato"], location=Location.bowl())})
        assert [d.name for d in detect_sim(scene.with_world(w))] == ["pepper"]

    def test_protocol_dispatch(self):
        scene = kitchen_scene(["pepper"])
        assert detect_objects(SimDetector(), scene) == detect_sim(scene)


class TestGrounding:
    def test_identity_camera(self):
        det = DetectedObject("x", (0.2, -0.3, 0.4, -0.1))
        (g,) = ground_detections([det], CameraModel.identity(1.0))
        assert tuple(g.world_position) == pytest.approx((0.3, -0.2, 1.0), abs=1e-15)

    def test_sim_boxes_ground_to_true_positions(self):
        scene = kitchen_scene(["apple", "banana", "grapes", "yogurt", "pepper", "tomato", "carrot"])
        for d in ground_detections(detect_sim(scene), scene.camera):
            truth = scene.world.obj(d.name).location.position
            assert np.max(np.abs(np.subtract(tuple(d.world_position), tuple(truth)))) < 1e-6


class TestParseDetections:
    def test_plain_lines_with_chatter(self):
        text = "Here is what I see:\n\n- Pepper: 10, 20, 30, 40\n2. red onion: [1.5, 2, 3e1, 4]\n"
        dets = parse_detections(text)
        assert [(d.name, d.bbox) for d in dets] == [("pepper", (10, 20, 30, 40)), ("red_onion", (1.5, 2, 30, 4))]

    def test_none(self):
        assert parse_detections("none") == []
        assert parse_detections("") == []

    def test_qwen_boxes(self):
        text = "<ref>tomato</ref><box>(100,200),(300,400)</box> and <ref>pepper</ref><box>(0,0),(10,10)</box>"
        dets = parse_detections(text, qwen_scale=(1280, 720))
        assert dets[0].name == "tomato"
        assert dets[0].bbox == pytest.approx((128.0, 144.0, 384.0, 288.0))
        assert len(dets) == 2

    @pytest.mark.parametrize("text", ["pepper at 10 20", "pepper: 1, 2, 3", "pepper: 5, 5, 1, 1", "I see a pepper."])
    def test_malformed(self, text):
        with pytest.raises(ResponseParseError):
            parse_detections(text)

    def test_format_round_trip(self):
        dets = detect_sim(kitchen_scene(VEG))
        again = parse_detections(format_detections(dets))
        assert [d.name for d in again] == [d.name for d in dets]
        for a, b in zip(again, dets):
            assert a.bbox == pytest.approx(b.bbox, abs=0.01)


class TestVlmDetector:
    def test_mock_keyed_on_scene(self):
        scen = MockScenario((MockRule("tomato: 1, 2, 3, 4\npepper: 5, 6, 7, 8", image="veg-ok"),), default="none")
        client = LlmClient(BackendConfig("mock", scenario=scen))
        t = Transcript()
        dets = VlmDetector(client).detect(kitchen_scene(VEG, scene_id="veg-ok"), transcript=t)
        assert [d.name for d in dets] == ["tomato", "pepper"]
        assert t.entries[0].kind == "chat_image" and t.entries[0].purpose == "vision"

    def test_unresolvable_image(self, tmp_path):
        from dataclasses import replace

        client = LlmClient(BackendConfig("mock", scenario=MockScenario(())))
        scene = replace(kitchen_scene(VEG), image=str(tmp_path / "missing.jpg"))
        with pytest.raises(MissingImage):
            VlmDetector(client).detect(scene)


class TestAvailability:
    def test_missing(self):
        r = check_availability({"cucumber", "tomato", "pepper"}, ["cucumber", "tomato"])
        assert r.missing == {"pepper"} and not r.available

    def test_superset(self):
        r = check_availability({"grape"}, [DetectedObject("Grapes", (0, 0, 1, 1)), DetectedObject("x", (0, 0, 1, 1))])
        assert r.available and r.missing == frozenset()
        assert "grape" in r.present

    @given(st.sets(st.sampled_from(VEG + ["apple", "banana"])), st.sets(st.sampled_from(VEG + ["apple", "banana"])))
    def test_soundness(self, required, detected):
        r = check_availability(required, detected)
        assert r.missing == r.required - r.present
        assert r.available == (not r.missing)
        if r.available:
            assert required <= detected


def det(name):
    return DetectedObject(name, (0, 0, 1, 1))


class TestScoreScene:
    def test_perfect(self):
        s = score_scene(VEG, VEG, [det(n) for n in VEG])
        assert s.list_correct and all(s.captions.values())

    def test_one_dropped(self):
        s = score_scene(VEG, VEG, [det("cucumber"), det("tomato")])
        assert not s.list_correct
        assert s.captions == {"cucumber": True, "pepper": False, "tomato": True}

    def test_absent_and_undetected_is_correct(self):
        s = score_scene(["cucumber", "tomato"], VEG, [det("cucumber"), det("tomato")])
        assert s.list_correct and s.captions["pepper"]

    def test_hallucinated_caption(self):
        s = score_scene(["cucumber", "tomato"], VEG, [det("cucumber"), det("pepper")])
        assert not s.list_correct
        assert s.captions == {"cucumber": True, "pepper": False, "tomato": False}

    def test_duplicate_caption(self):
        s = score_scene(VEG, VEG, [det("cucumber"), det("pepper"), det("tomato"), det("tomato")])
        assert not s.list_correct and not s.captions["tomato"]

    def test_plural_tolerance(self):
        assert score_scene(["grapes"], ["grapes"], [det("Grape")]).list_correct


class TestMetrics:
    def test_aggregate(self):
        m = VisionMetrics.aggregate(
            [score_scene(VEG, VEG, [det(n) for n in VEG]), score_scene(VEG, VEG, [det("cucumber")])]
        )
        assert m.list_accuracy == 0.5
        assert m.caption_accuracy == pytest.approx(4 / 6)

    def test_zero_injection_is_perfect(self):
        scores = []
        for i in range(50):
            scene = kitchen_scene(VEG[: 1 + i % 3])
            scores.append(score_scene(VEG[: 1 + i % 3], VEG, detect_sim(scene, VEG, ErrorInjection(), seed=i)))
        m = VisionMetrics.aggregate(scores)
        assert m.list_accuracy == 1.0 and m.caption_accuracy == 1.0

    def test_binomial_list_accuracy(self):
        scene = kitchen_scene(VEG)
        inj = ErrorInjection(miss_rate=0.2)
        m = VisionMetrics.aggregate(score_scene(VEG, VEG, detect_sim(scene, VEG, inj, seed=i)) for i in range(1000))
        assert abs(m.list_accuracy - 0.8**3) <= 0.05

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_metrics_bounded(self, seed):
        inj = ErrorInjection(0.3, 0.5)
        scene = kitchen_scene(VEG[:2])
        m = VisionMetrics.aggregate(score_scene(VEG[:2], VEG, detect_sim(scene, VEG, inj, seed=seed + i)) for i in range(20))
        assert 0 <= m.list_accuracy <= 1 and 0 <= m.caption_accuracy <= 1


def test_normalize_token():
    assert normalize_token("Tomatoes") == "tomatoe"
    assert normalize_token("Red Onion") == "red_onion"
    assert normalize_token("peas") == normalize_token("pea")
