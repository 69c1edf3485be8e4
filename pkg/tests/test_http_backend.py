import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from isorag.backends import HTTPBackend, ModelRequest
from isorag.errors import BackendUnavailableError, CapabilityUnsupportedError


class StubHandler(BaseHTTPRequestHandler):
    server_version = "stub"
    fail_next = 0
    seen = []

    def log_message(self, *args):
        pass

    def do_POST(self):
        cls = type(self)
        if cls.fail_next > 0:
            cls.fail_next -= 1
            self.send_response(503)
            self.end_headers()
            return
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        cls.seen.append(
            {
                "path": self.path,
                "auth": self.headers.get("Authorization"),
                "body": body,
            }
        )
        if body.get("logprobs"):
            payload = {
                "choices": [
                    {
                        "message": {"content": " Everest"},
                        "logprobs": {
                            "content": [
                                {
                                    "top_logprobs": [
                                        {"token": " Everest", "logprob": math.log(0.6)},
                                        {"token": " Fuji", "logprob": math.log(0.3)},
                                    ]
                                }
                            ]
                        },
                    }
                ]
            }
        else:
            payload = {"choices": [{"message": {"content": "Mount Everest"}}]}
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture()
def stub_server():
    StubHandler.seen = []
    StubHandler.fail_next = 0
    server = HTTPServer(("127.0.0.1", 0), StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1"
    server.shutdown()


def make_backend(base_url, **kw):
    return HTTPBackend(base_url=base_url, model="test-model", **kw)


def test_generate_speaks_chat_completions(stub_server, monkeypatch):
    monkeypatch.setenv("OPENAI_API_KEY", "sk-test-token")
    backend = make_backend(stub_server)
    response = backend.generate(ModelRequest(prompt="highest mountain?"))
    assert response.text == "Mount Everest"
    seen = StubHandler.seen[-1]
    assert seen["path"].endswith("/chat/completions")
    assert seen["auth"] == "Bearer sk-test-token"
    assert seen["body"]["model"] == "test-model"
    assert seen["body"]["temperature"] == 0
    assert seen["body"]["messages"][0]["content"] == "highest mountain?"


def test_distribution_is_truncated_and_flagged_approximate(stub_server):
    backend = make_backend(stub_server)
    dist = backend.next_token_distribution("highest mountain?")
    assert not dist.exact
    assert dist.missing_mass == pytest.approx(0.1)
    assert StubHandler.seen[-1]["body"]["logprobs"] is True
    assert StubHandler.seen[-1]["body"]["top_logprobs"] == 5
    # argmax follows the highest returned logprob
    assert backend.token_text(dist.argmax()) == " Everest"


def test_exact_capabilities_are_refused(stub_server):
    backend = make_backend(stub_server)
    assert not backend.supports_exact_distributions
    with pytest.raises(CapabilityUnsupportedError):
        backend.sequence_probability("prompt", "I don't know")


def test_retry_on_server_error(stub_server):
    StubHandler.fail_next = 1
    backend = make_backend(stub_server)
    response = backend.generate(ModelRequest(prompt="q"))
    assert response.text == "Mount Everest"


def test_unreachable_backend_raises(stub_server):
    StubHandler.fail_next = 99
    backend = make_backend(stub_server, max_retries=2)
    with pytest.raises(BackendUnavailableError):
        backend.generate(ModelRequest(prompt="q"))


def test_decoding_aggregation_gate(stub_server):
    from isorag.aggregation import rrag_decoding
    from isorag.core import DefenseConfig, Query, RetrievalSet

    retrieval = RetrievalSet.from_texts(["passage about mountains"])
    config = DefenseConfig(k=1, omega=1, eta=0.0, t_max=3, aggregator="decoding")
    q = Query(id="q1", question="highest mountain?")

    blocked = make_backend(stub_server)
    with pytest.raises(CapabilityUnsupportedError):
        rrag_decoding(q, retrieval, config, blocked)

    allowed = make_backend(stub_server, allow_decoding_aggregation=True)
    response = rrag_decoding(q, retrieval, config, allowed)
    # stub always peaks on " Everest"; no EOS text configured -> t_max tokens
    assert response.text == " Everest Everest Everest"


def test_decoding_aggregation_eos_text_stops_decode(stub_server):
    from isorag.aggregation import rrag_decoding
    from isorag.core import DefenseConfig, Query, RetrievalSet

    retrieval = RetrievalSet.from_texts(["passage about mountains"])
    config = DefenseConfig(k=1, omega=1, eta=0.0, t_max=5, aggregator="decoding")
    q = Query(id="q1", question="highest mountain?")
    allowed = make_backend(
        stub_server, allow_decoding_aggregation=True, eos_text=" Everest"
    )
    response = rrag_decoding(q, retrieval, config, allowed)
    assert response.text == ""
