import base64
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vla_kitchen.errors import ParseError
from vla_kitchen.llm_gateway import (
    EMBED_DIM,
    BackendConfig,
    ChatMessage,
    ChatRequest,
    ConnectionFailed,
    GatewayTimeout,
    HttpError,
    LlmClient,
    MalformedResponse,
    MissingImage,
    MockRule,
    MockScenario,
    Role,
    Transcript,
    _bucket,
    _tokens,
    cosine,
    hashed_embedding,
    load_scenario,
)

SCENARIO = MockScenario(
    (
        MockRule("PLAN: fruit", contains="fruit salad"),
        MockRule("DETECT: veg", image="veg-ok"),
        MockRule("REGEX", pattern=r"^task:\s*russian"),
    ),
    default="I cannot help with that.",
)


def mock_client(**kw) -> LlmClient:
    return LlmClient(BackendConfig("mock", scenario=SCENARIO), **kw)


def remote_client(handler, retries=2, **kw) -> LlmClient:
    cfg = BackendConfig("remote", base_url="http://llm.test/v1", model="m", retries=retries, backoff=0.01, **kw)
    return LlmClient(cfg, transport=httpx.MockTransport(handler), sleep=lambda s: None)


def ok_chat(text="hello"):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]})


class TestRequests:
    def test_empty_request_rejected(self):
        with pytest.raises(ValueError):
            ChatRequest(())

    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError):
            ChatRequest.simple("hi", temperature=-0.1)

    def test_defaults_are_reproducible(self):
        r = ChatRequest.simple("hi")
        assert r.temperature == 0.0 and r.seed == 0

    def test_role_coercion(self):
        assert ChatMessage("user", "x").role is Role.USER
        with pytest.raises(ValueError):
            ChatMessage("robot", "x")


class TestConfig:
    def test_remote_requires_url(self):
        with pytest.raises(ValueError):
            BackendConfig("remote")

    def test_mock_requires_scenario(self):
        with pytest.raises(ValueError):
            BackendConfig("mock")

    def test_from_dict_resolves_relative_scenario(self, tmp_path):
        (tmp_path / "s.yaml").write_text("rules:\n  - contains: hi\n    response: hello\ndefault: no\n")
        cfg = BackendConfig.from_dict({"kind": "mock", "scenario": "s.yaml"}, base_dir=tmp_path)
        assert cfg.scenario.respond("hi there") == "hello"

    def test_from_dict_merges_scenario_list(self, tmp_path):
        (tmp_path / "a.yaml").write_text("rules:\n  - contains: a\n    response: A\n")
        (tmp_path / "b.yaml").write_text("rules:\n  - contains: b\n    response: B\ndefault: D\n")
        cfg = BackendConfig.from_dict({"kind": "mock", "scenario": ["a.yaml", "b.yaml"]}, base_dir=tmp_path)
        assert [cfg.scenario.respond(t) for t in ("a", "b", "c")] == ["A", "B", "D"]

    def test_from_dict_unknown_key(self):
        with pytest.raises(ParseError):
            BackendConfig.from_dict({"kind": "mock", "colour": "red"})


class TestMockScenario:
    def test_rule_hit(self):
        resp = mock_client().chat(ChatRequest.simple("Could you make a Fruit Salad?"))
        assert resp.content == "PLAN: fruit"

    def test_default(self):
        assert mock_client().chat(ChatRequest.simple("build a rocket")).content == "I cannot help with that."

    def test_first_match_wins(self):
        s = MockScenario((MockRule("one", contains="x"), MockRule("two", contains="x")))
        assert s.respond("x") == "one"

    def test_pattern_matcher(self):
        assert mock_client().chat(ChatRequest.simple("Task: Russian Salad")).content == "REGEX"

    def test_matches_only_last_user_message(self):
        req = ChatRequest(
            (ChatMessage(Role.USER, "fruit salad"), ChatMessage(Role.ASSISTANT, "ok"), ChatMessage(Role.USER, "thanks"))
        )
        assert mock_client().chat(req).content == "I cannot help with that."

    def test_image_key(self):
        resp = mock_client().chat_with_image(ChatRequest.simple("what is here?", image="scene:veg-ok"))
        assert resp.content == "DETECT: veg"

    def test_missing_attachment(self):
        with pytest.raises(MissingImage):
            mock_client().chat_with_image(ChatRequest.simple("what is here?"))

    def test_unresolvable_file(self, tmp_path):
        with pytest.raises(MissingImage):
            mock_client().chat_with_image(ChatRequest.simple("?", image=str(tmp_path / "nope.png")))

    def test_file_attachment_keyed_by_stem(self, tmp_path):
        img = tmp_path / "veg-ok.png"
        img.write_bytes(b"\x89PNG")
        assert mock_client().chat_with_image(ChatRequest.simple("?", image=str(img))).content == "DETECT: veg"

    def test_rule_requires_matcher(self):
        with pytest.raises(ValueError):
            MockRule("x")

    def test_load_scenario_errors(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("rules:\n  - contains: x\n")
        with pytest.raises(ParseError, match="response"):
            load_scenario(p)
        p.write_text("rules: [\n")
        with pytest.raises(ParseError):
            load_scenario(p)

    @given(st.text(max_size=50))
    def test_deterministic(self, text):
        a = mock_client().chat(ChatRequest.simple(text)).content
        b = mock_client().chat(ChatRequest.simple(text)).content
        assert a == b


class TestTranscript:
    def test_one_entry_per_call_including_failures(self):
        t = Transcript()
        c = mock_client()
        c.chat(ChatRequest.simple("fruit salad"), transcript=t, purpose="planner")
        with pytest.raises(MissingImage):
            c.chat_with_image(ChatRequest.simple("x"), transcript=t, purpose="vision")
        c.embed(["a", "b"], transcript=t)
        with pytest.raises(ValueError):
            c.embed([], transcript=t)
        assert [e.kind for e in t.entries] == ["chat", "chat_image", "embed", "embed"]
        assert t.entries[0].response == "PLAN: fruit" and t.entries[0].error is None
        assert "MissingImage" in t.entries[1].error
        assert t.count(purpose="planner") == 1

    def test_concurrent_appends(self):
        t = Transcript()
        c = mock_client()
        with ThreadPoolExecutor(8) as pool:
            list(pool.map(lambda i: c.chat(ChatRequest.simple(f"q{i}"), transcript=t), range(200)))
        assert len(t) == 200


class TestRemote:
    def test_happy_path_and_payload(self):
        seen = {}

        def handler(req: httpx.Request):
            seen["url"] = str(req.url)
            seen["body"] = json.loads(req.content)
            seen["auth"] = req.headers.get("authorization")
            return ok_chat("  verbatim\ntext ")

        c = remote_client(handler)
        resp = c.chat(ChatRequest.simple("hi", system="sys"))
        assert resp.content == "  verbatim\ntext "
        assert seen["url"] == "http://llm.test/v1/chat/completions"
        assert seen["body"]["model"] == "m"
        assert seen["body"]["temperature"] == 0.0 and seen["body"]["seed"] == 0
        assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user"]
        assert seen["auth"] is None

    def test_auth_header_from_env(self, monkeypatch):
        monkeypatch.setenv("TEST_LLM_KEY", "sekrit")
        seen = {}

        def handler(req):
            seen["auth"] = req.headers.get("authorization")
            return ok_chat()

        remote_client(handler, api_key_env="TEST_LLM_KEY").chat(ChatRequest.simple("hi"))
        assert seen["auth"] == "Bearer sekrit"

    def test_500_thrice_with_two_retries(self):
        calls = []

        def handler(req):
            calls.append(1)
            return httpx.Response(500, text="boom")

        t = Transcript()
        with pytest.raises(HttpError) as exc:
            remote_client(handler, retries=2).chat(ChatRequest.simple("hi"), transcript=t)
        assert exc.value.status == 500
        assert len(calls) == 3
        assert len(t) == 1 and t.entries[0].attempts == 3

    def test_recovers_after_transient(self):
        responses = iter([httpx.Response(503), httpx.Response(429), ok_chat("fine")])
        delays = []
        cfg = BackendConfig("remote", base_url="http://x", retries=2, backoff=0.5)
        c = LlmClient(cfg, transport=httpx.MockTransport(lambda r: next(responses)), sleep=delays.append)
        assert c.chat(ChatRequest.simple("hi")).content == "fine"
        assert delays == [0.5, 1.0]

    def test_client_error_not_retried(self):
        calls = []

        def handler(req):
            calls.append(1)
            return httpx.Response(400, json={"error": "bad"})

        with pytest.raises(HttpError) as exc:
            remote_client(handler).chat(ChatRequest.simple("hi"))
        assert exc.value.status == 400 and len(calls) == 1

    def test_timeout(self):
        def handler(req):
            raise httpx.ReadTimeout("slow", request=req)

        with pytest.raises(GatewayTimeout):
            remote_client(handler, retries=1).chat(ChatRequest.simple("hi"))

    def test_connection_error(self):
        def handler(req):
            raise httpx.ConnectError("refused", request=req)

        with pytest.raises(ConnectionFailed):
            remote_client(handler, retries=0).chat(ChatRequest.simple("hi"))

    @pytest.mark.parametrize(
        "body",
        [{"choices": []}, {"choices": [{"message": {}}]}, {"nope": 1}, {"choices": [{"message": {"content": 3}}]}],
    )
    def test_malformed(self, body):
        with pytest.raises(MalformedResponse):
            remote_client(lambda r: httpx.Response(200, json=body)).chat(ChatRequest.simple("hi"))

    def test_non_json(self):
        with pytest.raises(MalformedResponse):
            remote_client(lambda r: httpx.Response(200, text="<html>")).chat(ChatRequest.simple("hi"))

    def test_image_sent_as_data_url(self, tmp_path):
        img = tmp_path / "scene.png"
        img.write_bytes(b"\x89PNGdata")
        seen = {}

        def handler(req):
            seen["body"] = json.loads(req.content)
            return ok_chat("pepper: 1, 2, 3, 4")

        resp = remote_client(handler).chat_with_image(ChatRequest.simple("detect", image=str(img)))
        assert resp.content == "pepper: 1, 2, 3, 4"
        parts = seen["body"]["messages"][0]["content"]
        assert parts[0] == {"type": "text", "text": "detect"}
        url = parts[1]["image_url"]["url"]
        assert url.startswith("data:image/png;base64,")
        assert base64.b64decode(url.split(",", 1)[1]) == b"\x89PNGdata"

    def test_remote_scene_ref_without_loader(self):
        with pytest.raises(MissingImage):
            remote_client(lambda r: ok_chat()).chat_with_image(ChatRequest.simple("?", image="scene:veg-ok"))

    def test_remote_embeddings_normalised(self):
        def handler(req):
            assert req.url.path == "/v1/embeddings"
            return httpx.Response(200, json={"data": [{"index": 1, "embedding": [0, 2]}, {"index": 0, "embedding": [3, 4]}]})

        vs = remote_client(handler, embedding="remote").embed(["a", "b"])
        np.testing.assert_allclose(vs[0], [0.6, 0.8])
        np.testing.assert_allclose(vs[1], [0.0, 1.0])

    def test_remote_embedding_count_mismatch(self):
        h = lambda r: httpx.Response(200, json={"data": [{"embedding": [1.0]}]})
        with pytest.raises(MalformedResponse):
            remote_client(h, embedding="remote").embed(["a", "b"])


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        last = body["messages"][-1]["content"]
        out = json.dumps({"choices": [{"message": {"content": f"echo:{last}"}, "finish_reason": "stop"}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


class TestLocalServer:
    def test_round_trip_over_real_socket(self):
        server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            url = f"http://127.0.0.1:{server.server_address[1]}/v1"
            with LlmClient(BackendConfig("remote", base_url=url, timeout=5)) as c:
                assert c.chat(ChatRequest.simple("ping")).content == "echo:ping"
        finally:
            server.shutdown()
            server.server_close()


class TestHashedEmbedder:
    def test_identical_text_identical_vector(self):
        c = mock_client()
        a, b = c.embed(["abc"])[0], c.embed(["abc"])[0]
        assert np.array_equal(a, b)

    @given(st.text(max_size=80))
    def test_unit_norm(self, text):
        v = hashed_embedding(text)
        assert v.shape == (EMBED_DIM,)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-6

    @given(st.text(max_size=40), st.text(max_size=40))
    def test_cosine_symmetric_bounded(self, a, b):
        va, vb = hashed_embedding(a), hashed_embedding(b)
        c = cosine(va, vb)
        assert c == pytest.approx(cosine(vb, va), abs=1e-12)
        assert -1.0 <= c <= 1.0
        assert cosine(va, va) == pytest.approx(1.0, abs=1e-9)

    def test_overlap_ordering_with_oracle(self):
        # all five tokens land in distinct buckets, so cosine reduces to set overlap
        toks = ["fruit", "salad", "recipe", "roast", "beef"]
        assert len({_bucket(t) for t in toks}) == 5
        q, near, far = "fruit salad recipe", "fruit salad", "roast beef"
        near_cos = cosine(hashed_embedding(q), hashed_embedding(near))
        far_cos = cosine(hashed_embedding(q), hashed_embedding(far))
        assert near_cos == pytest.approx(2 / math.sqrt(3 * 2), abs=1e-12)
        assert far_cos == pytest.approx(0.0, abs=1e-12)
        assert near_cos > far_cos

    def test_tokenizer(self):
        assert _tokens("Please make me the Salads, with tomatoes!") == ["make", "salad", "tomatoe"]
        assert _tokens("glass") == ["glass"]

    def test_stopword_only_text_still_nonzero(self):
        assert abs(np.linalg.norm(hashed_embedding("the of and")) - 1) < 1e-9
        assert abs(np.linalg.norm(hashed_embedding("")) - 1) < 1e-9
