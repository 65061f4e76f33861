"""End-to-end search over real HTTP: a local OpenAI-compatible server backs
all five roles and the CLI drives a full question through it.
"""

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from treecite.cli import main
from treecite.config import build_backends, load_config

QUESTION = "Does the wire path work?"
DOC_BODY = "wiretest body token that answers the wire question"
SENTENCE = "The wire path works [1]."


class FakeOpenAIHandler(BaseHTTPRequestHandler):
    """Minimal chat/completions server. Chat behavior is keyed on the prompt
    tail; completions echoes whitespace-token logprobs whose value depends on
    the model name.
    """

    def log_message(self, *args):  # noqa: D102 - silence request logging
        pass

    def _read_json(self) -> dict:
        length = int(self.headers["Content-Length"])
        return json.loads(self.rfile.read(length))

    def _send(self, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _chat_reply(self, prompt: str) -> str:
        if prompt.startswith("premise:"):
            return "1" if "wire path works" in prompt else "0"
        if 'Answer "supportive" or "insufficient"' in prompt:
            return "supportive"
        last_line = prompt.rstrip("\n").rsplit("\n", 1)[-1]
        if last_line == f"Question: {QUESTION}":
            return "Search: wiretest token"
        if last_line.startswith("Document [") and "wiretest" in last_line:
            return f"Output: {SENTENCE}"
        if last_line == f"Output: {SENTENCE}":
            return "End"
        return "End"

    def do_POST(self):
        payload = self._read_json()
        if self.path.endswith("/chat/completions"):
            prompt = payload["messages"][0]["content"]
            self._send({"choices": [{"message": {"content": self._chat_reply(prompt)}}]})
            return
        if self.path.endswith("/completions"):
            text = payload["prompt"]
            per_token = -0.1 if payload["model"] == "pol" else -0.2
            offsets, logprobs = [], []
            pos = 0
            for match in re.finditer(r"\S+", text):
                offsets.append(match.start())
                logprobs.append(None if not offsets[:-1] else per_token)
            self._send(
                {
                    "choices": [
                        {
                            "text": "",
                            "logprobs": {
                                "token_logprobs": logprobs,
                                "text_offset": offsets,
                            },
                        }
                    ]
                }
            )
            return
        self.send_response(404)
        self.end_headers()


@pytest.fixture(scope="module")
def server():
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), FakeOpenAIHandler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{httpd.server_address[1]}/v1"
    httpd.shutdown()


@pytest.fixture
def http_workspace(tmp_path, server):
    corpus = tmp_path / "corpus.jsonl"
    corpus.write_text(
        json.dumps({"id": 0, "title": "Wire test", "text": DOC_BODY}) + "\n",
        encoding="utf-8",
    )
    config = f"""
[search]
max_iterations = 8

[run]
dataset_tag = "asqa"

[paths]
corpus = "corpus.jsonl"

[backends.policy]
kind = "openai"
base_url = "{server}"
model = "agent"
route = "chat"

[backends.reflector]
alias = "policy"

[backends.scorer_policy]
kind = "openai"
base_url = "{server}"
model = "pol"
route = "completions"

[backends.scorer_reference]
kind = "openai"
base_url = "{server}"
model = "ref"
route = "completions"

[backends.judge]
kind = "openai"
base_url = "{server}"
model = "judge"
route = "judge"
"""
    (tmp_path / "config.toml").write_text(config, encoding="utf-8")
    return tmp_path


def test_full_search_over_http(http_workspace, capsys):
    code = main(["ask", QUESTION, "--config", str(http_workspace / "config.toml")])
    assert code == 0
    out = capsys.readouterr().out
    assert "The wire path works [0]." in out
    assert "Wire test" in out


def test_http_backends_probe_and_score(http_workspace):
    config = load_config(http_workspace / "config.toml")
    backends = build_backends(config)
    logprob, count = backends.scorer_policy.score_continuation("context here", " and more")
    assert count == 2
    assert logprob == pytest.approx(-0.2)
    reference, _ = backends.scorer_reference.score_continuation("context here", " and more")
    assert reference == pytest.approx(-0.4)
    assert backends.judge.entails("the wire path works fine", "it works") is True
    assert backends.judge.entails("something unrelated", "it works") is False
