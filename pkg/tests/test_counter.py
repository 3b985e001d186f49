from __future__ import annotations

import json

import pytest

from countmatch.errors import CounterError, CountValueError, ParseError
from countmatch.pipeline.counter import (
    CounterClientConfig,
    HttpCounter,
    ReplayCounter,
    audit_path,
    count_objects,
    parse_count_response,
)
from mock_counter import MockCounter


@pytest.fixture
def image(tmp_path):
    path = tmp_path / "scene.png"
    path.write_bytes(b"\x89PNG\r\n\x1a\nfake")
    return path


def client(url, **kw):
    return HttpCounter(CounterClientConfig(endpoint=url, backoff=0.0, **kw))


def test_parse_plain():
    assert parse_count_response('{"vehicle": 10}') == {"vehicle": 10}


def test_parse_float_and_zero():
    assert parse_count_response('{"Ship": 3.0, "harbor": 0}') == {"ship": 3, "harbor": 0}


def test_parse_fences_and_prose():
    text = 'Sure! Here you go:\n```json\n{"airplane": 2}\n```\nLet me know.'
    assert parse_count_response(text) == {"airplane": 2}
    assert parse_count_response('counts: {"a": 1} and {"b": 2}') == {"a": 1}
    assert parse_count_response('{broken {"a": 1}') == {"a": 1}


@pytest.mark.parametrize("text,key", [('{"bridge": -1}', "bridge"), ('{"x": "3"}', "x"), ('{"y": 2.5}', "y"), ('{"z": true}', "z")])
def test_parse_value_errors_name_key(text, key):
    with pytest.raises(CountValueError) as info:
        parse_count_response(text)
    assert info.value.key == key
    assert info.value.raw_text == text


def test_parse_no_json():
    with pytest.raises(ParseError) as info:
        parse_count_response("no objects")
    assert info.value.raw_text == "no objects"


def test_parse_duplicate_after_normalization():
    with pytest.raises(ParseError):
        parse_count_response('{"Ship": 1, " ship": 2}')


def test_count_objects_against_mock(image, tmp_path):
    with MockCounter() as mock:
        pred, reply = count_objects(client(mock.url), "a/1", image, "PROMPT", tmp_path / "audit")
    assert dict(pred.counts) == {"airplane": 2, "ship": 0}
    assert pred.positive() == {"airplane": 2}
    body = mock.requests[0]
    assert body["temperature"] == 0.01 and body["top_p"] == 1.0
    parts = body["messages"][0]["content"]
    assert parts[0] == {"type": "text", "text": "PROMPT"}
    assert parts[1]["image_url"]["url"].startswith("data:image/png;base64,")
    rec = json.loads(audit_path(tmp_path / "audit", "a/1").read_text())
    assert rec["raw_response"] == '{"airplane": 2, "ship": 0}'
    assert rec["parsed"] == {"airplane": 2, "ship": 0}
    assert rec["usage"] == {"prompt_tokens": 100, "completion_tokens": 7}
    assert "base64" not in json.dumps(rec)


def test_credential_sent_but_never_persisted(image, tmp_path, monkeypatch):
    monkeypatch.setenv("TEST_COUNTER_KEY", "sekrit-value")
    with MockCounter() as mock:
        count_objects(client(mock.url, api_key_env="TEST_COUNTER_KEY"), "i", image, "P", tmp_path)
    assert mock.headers[0]["Authorization"] == "Bearer sekrit-value"
    assert "sekrit" not in (tmp_path / "i.json").read_text()


def test_fenced_reply_via_mock(image):
    with MockCounter('```json\n{"ship": 4}\n```') as mock:
        pred, _ = count_objects(client(mock.url), "i", image, "P")
    assert dict(pred.counts) == {"ship": 4}


def test_parse_failure_still_audited(image, tmp_path):
    with MockCounter("no objects") as mock:
        with pytest.raises(ParseError):
            count_objects(client(mock.url), "i", image, "P", tmp_path)
        assert len(mock.requests) == 1
    rec = json.loads((tmp_path / "i.json").read_text())
    assert rec["raw_response"] == "no objects" and rec["parsed"] is None and "error" in rec


def test_retries_server_errors(image):
    with MockCounter() as mock:
        mock.queue = [(503, "busy"), (500, "oops")]
        pred, reply = count_objects(client(mock.url), "i", image, "P")
    assert len(mock.requests) == 3 and reply.request["attempts"] == 3
    assert pred.counts["airplane"] == 2


def test_gives_up_after_retries(image):
    with MockCounter() as mock:
        mock.queue = [(502, "x")] * 3
        with pytest.raises(CounterError, match="after 3 attempts"):
            count_objects(client(mock.url), "i", image, "P")


def test_client_errors_are_not_retried(image):
    with MockCounter() as mock:
        mock.queue = [(401, "denied")]
        with pytest.raises(CounterError, match="401"):
            count_objects(client(mock.url), "i", image, "P")
        assert len(mock.requests) == 1


def test_unreachable_endpoint_names_it(image):
    url = "http://127.0.0.1:9/v1/chat/completions"
    with pytest.raises(CounterError, match="127.0.0.1:9"):
        count_objects(client(url, timeout=2.0), "i", image, "P")


def test_replay_reproduces_counts(image, tmp_path):
    with MockCounter('```\n{"Ship": 3.0, "harbor": 0}\n```') as mock:
        live, _ = count_objects(client(mock.url), "x", image, "P", tmp_path / "a")
    replayed, reply = count_objects(ReplayCounter(tmp_path / "a"), "x", None, "P", tmp_path / "b")
    assert replayed == live
    assert reply.usage == {"prompt_tokens": 100, "completion_tokens": 7}
    assert (tmp_path / "a" / "x.json").read_text() == (tmp_path / "b" / "x.json").read_text()
