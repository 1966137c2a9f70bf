import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthpair.capgen import (
    BOS,
    EOS,
    MAX_LEN,
    CaptionValidationError,
    ClassVocabulary,
    LLMClient,
    LLMEndpointError,
    VocabularyError,
    build_prompt,
    detokenize,
    detokenize_bytes,
    generate_caption_llm,
    generate_caption_template,
    generate_captions,
    read_jsonl,
    tokenize,
    tokenize_bytes,
    write_jsonl,
)


def test_prompt_substitutes_class_once():
    p = build_prompt("zebra")
    assert "the following object: zebra" in p
    assert p.endswith("beginning with ``This is an image of''.")
    assert p.count("zebra") == 1
    assert "[object]" not in p


def test_prompt_length_tracks_class_name():
    assert len(build_prompt("ox")) - len(build_prompt("o")) == 1


def test_prompt_rejects_empty_class():
    with pytest.raises(ValueError):
        build_prompt("")


class EchoClient:
    def __init__(self, text):
        self.text = text
        self.calls = 0

    def complete(self, prompt, timeout=None):
        self.calls += 1
        return self.text


class FailingClient:
    def __init__(self):
        self.calls = 0

    def complete(self, prompt, timeout=None):
        self.calls += 1
        raise LLMEndpointError("boom", raw=b"<html>503</html>")


def test_llm_caption_from_mock():
    rec = generate_caption_llm(EchoClient("This is an image of a zebra."), "zebra")
    assert rec.text == "This is an image of a zebra."
    assert rec.source == "llm"


def test_llm_caption_prefix_validation():
    with pytest.raises(CaptionValidationError) as e:
        generate_caption_llm(EchoClient("A zebra grazes."), "zebra")
    assert e.value.raw == "A zebra grazes."


def test_llm_retries_then_surfaces_endpoint_error():
    client = FailingClient()
    with pytest.raises(LLMEndpointError) as e:
        generate_caption_llm(client, "zebra")
    assert client.calls == 3
    assert e.value.raw == b"<html>503</html>"


class _Handler(BaseHTTPRequestHandler):
    received = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.received.append((body, self.headers.get("Authorization")))
        if "bad" in body["messages"][0]["content"]:
            payload = b"not json"
        else:
            payload = json.dumps({"choices": [{"message": {"content": " This is an image of an ox. "}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def llm_server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_port}/v1/chat"
    srv.shutdown()


def test_llm_client_wire_format(llm_server):
    _Handler.received.clear()
    client = LLMClient(llm_server, api_key="k123", timeout=5)
    rec = generate_caption_llm(client, "ox")
    assert rec.text == "This is an image of an ox."
    body, auth = _Handler.received[0]
    assert body["messages"][0]["role"] == "user"
    assert "the following object: ox." in body["messages"][0]["content"]
    assert auth == "Bearer k123"


def test_llm_client_malformed_body_is_retryable(llm_server):
    client = LLMClient(llm_server, timeout=5)
    with pytest.raises(LLMEndpointError) as e:
        generate_caption_llm(client, "bad")
    assert e.value.retryable and e.value.raw == b"not json"


def test_llm_client_reads_env(monkeypatch):
    monkeypatch.setenv("LLM_ENDPOINT", "http://127.0.0.1:9/x")
    monkeypatch.setenv("LLM_API_KEY", "abc")
    c = LLMClient()
    assert c.endpoint.endswith("/x") and c.api_key == "abc"


def test_template_deterministic_and_prefixed():
    a = generate_caption_template("zebra", np.random.default_rng(3))
    b = generate_caption_template("zebra", np.random.default_rng(3))
    assert a.text == b.text
    assert a.text.startswith("This is an image of a zebra")
    assert len(a.text.split()) >= 8


def test_template_unknown_class():
    vocab = ClassVocabulary(["ox"])
    with pytest.raises(VocabularyError):
        generate_caption_template("zebra", np.random.default_rng(0), vocab)


def test_template_distinct_count():
    vocab = ClassVocabulary(ClassVocabulary.default().names[:50])
    # grammar supports 50 * 8 * 10 * 5 = 20000 combinations; 1000 draws collide rarely
    caps = generate_captions(vocab, 1000, seed=0)
    assert len({c.text for c in caps}) >= 200
    assert all(c.text.startswith("This is an image of") for c in caps)


def test_generate_captions_pure_in_seed():
    vocab = ClassVocabulary.default()
    a = [c.text for c in generate_captions(vocab, 40, seed=5)]
    b = [c.text for c in generate_captions(vocab, 40, seed=5)]
    c = [c.text for c in generate_captions(vocab, 40, seed=6)]
    assert a == b and a != c


def test_default_vocabulary_has_200_names():
    assert len(ClassVocabulary.default()) == 200


def test_tokenize_empty():
    assert tokenize("") == [BOS, EOS]


def test_tokenize_truncates_with_eos_last():
    ids = tokenize("x" * 100)
    assert len(ids) == MAX_LEN and ids[-1] == EOS and ids[0] == BOS


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.characters(min_codepoint=0, max_codepoint=127), max_size=62))
def test_tokenize_round_trip_ascii(s):
    assert detokenize(tokenize(s)) == s


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=62))
def test_tokenize_round_trip_bytes(b):
    assert detokenize_bytes(tokenize_bytes(b)) == b


def test_jsonl_round_trip(tmp_path):
    caps = generate_captions(ClassVocabulary.default(), 5, seed=1)
    write_jsonl(tmp_path / "c.jsonl", caps)
    back = read_jsonl(tmp_path / "c.jsonl")
    assert [c.text for c in back] == [c.text for c in caps]
    line = json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0])
    assert set(line) == {"text", "class", "source", "seed"}
