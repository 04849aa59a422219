"""Gateway contract tests: scripting, retries, captioning, wire format."""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from deepresearch.errors import (
    InvalidRequestError,
    MalformedResponseError,
    ScriptMissError,
    TransientTransportError,
    TransportExhaustedError,
    UnresolvableImageError,
)
from deepresearch.gateway import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    Gateway,
    HttpBackend,
    ImageRef,
    RuleBackend,
    ScriptedBackend,
    TokenInfo,
    build_chat_payload,
    complete,
    fingerprint,
    parse_chat_payload,
)


def msg(content, role="user"):
    return ChatMessage(role=role, content=content)


def req(*contents):
    return ChatRequest.make([msg(c) for c in contents])


class TestRequestInvariants:
    def test_empty_messages_rejected(self):
        with pytest.raises(InvalidRequestError):
            ChatRequest.make([])

    def test_first_message_must_be_system_or_user(self):
        with pytest.raises(InvalidRequestError):
            ChatRequest.make([msg("hi", role="assistant")])

    def test_negative_temperature_rejected(self):
        with pytest.raises(InvalidRequestError):
            ChatRequest.make([msg("hi")], temperature=-0.5)

    def test_token_records_must_concatenate(self):
        with pytest.raises(MalformedResponseError):
            ChatResponse(text="hello", tokens=(TokenInfo("hel", -0.1), TokenInfo("p", -0.2)))
        ok = ChatResponse(text="hello", tokens=(TokenInfo("hel", -0.1), TokenInfo("lo", -0.2)))
        assert ok.text == "hello"


class TestFingerprint:
    def test_whitespace_insensitive(self):
        assert fingerprint(req("a  b\nc")) == fingerprint(req("a b c"))

    def test_role_sensitive(self):
        a = ChatRequest.make([msg("x", role="user")])
        b = ChatRequest.make([msg("x", role="system")])
        assert fingerprint(a) != fingerprint(b)

    def test_content_sensitive(self):
        assert fingerprint(req("a")) != fingerprint(req("b"))


class TestScriptedBackend:
    def test_identity_lookup(self):
        backend = ScriptedBackend()
        backend.add([msg("hello")], "canned")
        assert backend.complete(req("hello")).text == "canned"

    def test_same_request_twice_identical(self):
        backend = ScriptedBackend()
        backend.add([msg("hello")], "canned")
        first = complete(req("hello"), backend)
        second = complete(req("hello"), backend)
        assert first == second

    def test_empty_script_misses(self):
        backend = ScriptedBackend()
        with pytest.raises(ScriptMissError):
            complete(req("anything"), backend)

    def test_non_strict_echoes_last_message(self):
        backend = ScriptedBackend(strict=False)
        response = backend.complete(req("echo me"))
        assert response.text == "echo me"

    def test_sequence_consumed_in_order_then_sticks(self):
        backend = ScriptedBackend()
        backend.add([msg("q")], "first")
        backend.add([msg("q")], "second")
        texts = [backend.complete(req("q")).text for _ in range(4)]
        assert texts == ["first", "second", "second", "second"]

    def test_replay_determinism(self):
        def run():
            backend = ScriptedBackend()
            backend.add([msg("a")], "ra1")
            backend.add([msg("a")], "ra2")
            backend.add([msg("b")], "rb")
            sequence = [req("a"), req("b"), req("a"), req("a")]
            return [backend.complete(r).text for r in sequence]

        assert run() == run()

    def test_save_load_round_trip(self, tmp_path):
        backend = ScriptedBackend()
        backend.add([msg("q1")], ChatResponse(text="r1"))
        backend.add([msg("q1")], ChatResponse(text="r2"))
        backend.add(
            [msg("q2")],
            ChatResponse(text="tok", tokens=(TokenInfo("to", -0.5), TokenInfo("k", -0.25))),
        )
        path = tmp_path / "script.jsonl"
        backend.save(path)
        loaded = ScriptedBackend.load(path)
        assert loaded.complete(req("q1")).text == "r1"
        assert loaded.complete(req("q1")).text == "r2"
        reloaded = loaded.complete(req("q2"))
        assert reloaded.tokens is not None
        assert [t.logprob for t in reloaded.tokens] == [-0.5, -0.25]


class TestRuleBackend:
    def test_first_match_wins_and_sequences(self):
        backend = RuleBackend()
        backend.add_rule(["alpha", "beta"], ["both"])
        backend.add_rule("alpha", ["a1", "a2"])
        assert backend.complete(req("alpha beta")).text == "both"
        assert backend.complete(req("alpha only")).text == "a1"
        assert backend.complete(req("alpha only")).text == "a2"
        assert backend.complete(req("alpha only")).text == "a2"

    def test_miss_raises(self):
        backend = RuleBackend()
        backend.add_rule("x", ["y"])
        with pytest.raises(ScriptMissError):
            backend.complete(req("nothing"))

    def test_save_load(self, tmp_path):
        backend = RuleBackend()
        backend.add_rule(["m1", "m2"], ["r1", "r2"])
        path = tmp_path / "rules.jsonl"
        backend.save(path)
        loaded = RuleBackend.load(path)
        assert loaded.complete(req("m1 m2")).text == "r1"
        assert loaded.complete(req("m1 m2")).text == "r2"


class FlakyBackend:
    """Fails with transient errors n times, then succeeds."""

    def __init__(self, failures, response_text="ok"):
        self.failures = failures
        self.attempts = 0
        self.response_text = response_text

    def complete(self, request):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise TransientTransportError("flaky")
        return ChatResponse(text=self.response_text)


class TestRetries:
    def test_retry_then_success(self):
        backend = FlakyBackend(failures=2)
        sleeps = []
        response = complete(req("x"), backend, retries=3, backoff=0.5, sleep=sleeps.append)
        assert response.text == "ok"
        assert backend.attempts == 3
        assert sleeps == [0.5, 1.0]

    def test_retry_bound(self):
        backend = FlakyBackend(failures=99)
        attempt_log = []
        with pytest.raises(TransportExhaustedError) as err:
            complete(req("x"), backend, retries=3, sleep=lambda _s: None, attempt_log=attempt_log)
        assert backend.attempts == 4  # 1 + retries
        assert err.value.attempts == 4
        assert attempt_log == [1, 2, 3, 4]

    def test_no_retry_on_script_miss(self):
        backend = ScriptedBackend()
        attempt_log = []
        with pytest.raises(ScriptMissError):
            complete(req("x"), backend, retries=3, sleep=lambda _s: None, attempt_log=attempt_log)
        assert attempt_log == [1]

    def test_no_retry_on_success(self):
        backend = FlakyBackend(failures=0)
        complete(req("x"), backend, retries=3, sleep=lambda _s: None)
        assert backend.attempts == 1


class TestCaptionCache:
    def test_scripted_caption_passthrough(self, tmp_path):
        image = ImageRef(data=b"red-bridge-bytes")
        backend = RuleBackend()
        backend.add_rule("Describe", "a red bridge at night")
        gateway = Gateway(backend)
        assert gateway.caption_image(image, "Describe the image") == "a red bridge at night"

    def test_cache_hit_skips_backend(self):
        image = ImageRef(data=b"same-bytes")
        backend = RuleBackend()
        backend.add_rule("Describe", "caption-1")
        gateway = Gateway(backend)
        for _ in range(5):
            assert gateway.caption_image(image, "Describe the image") == "caption-1"
        assert gateway.calls("caption") == 1

    def test_missing_image_errors(self):
        gateway = Gateway(RuleBackend())
        with pytest.raises(UnresolvableImageError):
            gateway.caption_image(ImageRef(path="/nonexistent/img.png"), "Describe the image")

    def test_distinct_images_cached_separately(self):
        backend = RuleBackend()
        backend.add_rule("Describe", ["cap-a", "cap-b"])
        gateway = Gateway(backend)
        a = gateway.caption_image(ImageRef(data=b"aaa"), "Describe the image")
        b = gateway.caption_image(ImageRef(data=b"bbb"), "Describe the image")
        assert (a, b) == ("cap-a", "cap-b")
        assert gateway.calls("caption") == 2


class TestWireFormat:
    def test_payload_shape(self):
        request = ChatRequest.make(
            [msg("sys", role="system"), msg("hi')")], temperature=0.7, max_tokens=42, model="m1"
        )
        payload = build_chat_payload(request, want_logprobs=True)
        assert payload["model"] == "m1"
        assert payload["temperature"] == 0.7
        assert payload["max_tokens"] == 42
        assert payload["logprobs"] is True
        assert payload["messages"][0] == {"role": "system", "content": "sys"}

    def test_image_becomes_data_url(self):
        request = ChatRequest.make([ChatMessage(role="user", content="look", image=ImageRef(data=b"xy"))])
        payload = build_chat_payload(request)
        parts = payload["messages"][0]["content"]
        assert parts[0] == {"type": "text", "text": "look"}
        assert parts[1]["image_url"]["url"].startswith("data:image/octet-stream;base64,")

    def test_parse_payload(self):
        data = {
            "choices": [
                {
                    "message": {"content": "hi"},
                    "finish_reason": "stop",
                    "logprobs": {"content": [{"token": "hi", "logprob": -0.3}]},
                }
            ]
        }
        response = parse_chat_payload(data)
        assert response.text == "hi"
        assert response.tokens[0] == TokenInfo("hi", -0.3)

    def test_parse_malformed_payload(self):
        with pytest.raises(MalformedResponseError):
            parse_chat_payload({"choices": []})
        with pytest.raises(MalformedResponseError):
            parse_chat_payload({"nope": 1})


class _Handler(BaseHTTPRequestHandler):
    fail_once = {"remaining": 0}

    def do_POST(self):
        if self.fail_once["remaining"] > 0:
            self.fail_once["remaining"] -= 1
            self.send_response(503)
            self.end_headers()
            return
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        reply = {
            "choices": [
                {
                    "message": {"content": f"echo:{body['messages'][-1]['content']}"},
                    "finish_reason": "stop",
                }
            ]
        }
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


class TestHttpBackend:
    def test_round_trip(self, http_server):
        backend = HttpBackend(base_url=http_server, api_key="k")
        response = complete(req("ping"), backend, sleep=lambda _s: None)
        assert response.text == "echo:ping"

    def test_transient_5xx_retried(self, http_server):
        _Handler.fail_once["remaining"] = 1
        backend = HttpBackend(base_url=http_server)
        response = complete(req("again"), backend, retries=2, sleep=lambda _s: None)
        assert response.text == "echo:again"

    def test_exhaustion(self, http_server):
        _Handler.fail_once["remaining"] = 10
        backend = HttpBackend(base_url=http_server)
        with pytest.raises(TransportExhaustedError):
            complete(req("down"), backend, retries=1, sleep=lambda _s: None)
        _Handler.fail_once["remaining"] = 0


class TestGatewayCounters:
    def test_purpose_counters(self):
        backend = RuleBackend()
        backend.add_rule("", "any")
        gateway = Gateway(backend)
        gateway.chat([msg("a")], purpose="planner")
        gateway.chat([msg("b")], purpose="executor")
        gateway.chat([msg("c")], purpose="executor")
        assert gateway.calls("planner") == 1
        assert gateway.calls("executor") == 2
        assert gateway.calls() == 3

    def test_concurrent_calls_safe(self):
        backend = RuleBackend()
        backend.add_rule("", "ok")
        gateway = Gateway(backend)
        errors = []

        def worker():
            try:
                for _ in range(25):
                    gateway.chat([msg("x")])
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=worker) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert gateway.calls() == 100
