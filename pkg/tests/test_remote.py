import json
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from agentcoord.core import BudgetSpec, load_agent_pool
from agentcoord.env import generate_tasks, reset, step
from agentcoord.remote import (MAX_REQUEST_BYTES, RemoteBackend, RemoteError, RemoteSchemaError,
                               RetryableRemoteError, build_request, parse_response, remote_invoke)


class Stub:
    """Scripted JSON endpoint; each request pops the next (status, body, delay)."""

    def __init__(self, script):
        self.script = list(script)
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers["Content-Length"]))
                stub.requests.append(json.loads(body))
                status, reply, delay = stub.script.pop(0) if stub.script else (200, b"{}", 0)
                time.sleep(delay)
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.end_headers()
                    self.wfile.write(reply)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_port}/invoke"
        threading.Thread(target=self.server.serve_forever, daemon=True).start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


OK = json.dumps({"output_text": "answer 4", "prompt_tokens": 10, "completion_tokens": 20}).encode()


@pytest.fixture
def agent():
    return load_agent_pool("math")[1]


def test_tokens_are_summed(agent):
    stub = Stub([(200, OK, 0)])
    try:
        res = remote_invoke(stub.url, agent, "2 + 2", ["a", "b"])
    finally:
        stub.close()
    assert res.tokens == 30 and res.output_text == "answer 4"
    assert stub.requests[0] == {"agent_id": 1, "role_text": agent.role_text, "task_text": "2 + 2",
                                "history_digest": ["a", "b"]}


def test_timeout_is_retried_once_then_raised(agent):
    stub = Stub([(200, OK, 0.5), (200, OK, 0.5)])
    try:
        with pytest.raises(RetryableRemoteError):
            remote_invoke(stub.url, agent, "x", timeout=0.1)
        time.sleep(0.6)
    finally:
        stub.close()
    assert len(stub.requests) == 2


def test_server_error_then_success(agent):
    stub = Stub([(503, b"busy", 0), (200, OK, 0)])
    try:
        assert remote_invoke(stub.url, agent, "x").tokens == 30
    finally:
        stub.close()


def test_missing_field_names_the_field(agent):
    body = json.dumps({"output_text": "x", "prompt_tokens": 3}).encode()
    stub = Stub([(200, body, 0)])
    try:
        with pytest.raises(RemoteSchemaError, match="completion_tokens"):
            remote_invoke(stub.url, agent, "x")
    finally:
        stub.close()
    assert len(stub.requests) == 1


def test_client_error_is_not_retried(agent):
    stub = Stub([(400, b"bad request", 0)])
    try:
        with pytest.raises(RemoteSchemaError, match="bad request"):
            remote_invoke(stub.url, agent, "x")
    finally:
        stub.close()
    assert len(stub.requests) == 1


def test_unreachable_endpoint_is_retryable(agent):
    with pytest.raises(RetryableRemoteError):
        remote_invoke("http://127.0.0.1:9/none", agent, "x", timeout=0.5, retries=0)


def test_parse_response_errors():
    with pytest.raises(RemoteSchemaError, match="not JSON"):
        parse_response(b"<html>")
    with pytest.raises(RemoteSchemaError, match="output_text"):
        parse_response(b'{"prompt_tokens": 1, "completion_tokens": 1}')
    with pytest.raises(RemoteSchemaError, match="prompt_tokens"):
        parse_response(b'{"output_text": "", "prompt_tokens": -1, "completion_tokens": 1}')
    assert parse_response(b'{"output_text": "", "prompt_tokens": 0, "completion_tokens": 0}').tokens == 1


def test_request_size_cap(agent):
    with pytest.raises(RemoteError, match="exceeds"):
        build_request(agent, "x" * (MAX_REQUEST_BYTES + 1), [])


def test_backend_drives_the_environment():
    pool = load_agent_pool("qa")
    task = generate_tasks(1, load_agent_pool("qa"), "easy", 0)[0]
    stub = Stub([(200, OK, 0)] * 3)
    try:
        backend = RemoteBackend(pool, stub.url, timeout=5)
        s = reset(task, BudgetSpec(1000, 1000), len(pool))
        s, r, _ = step(s, 0, backend, 0.02, np.random.default_rng(0))
    finally:
        stub.close()
    assert s.tokens_used == 30 and s.history == ("answer 4",)
