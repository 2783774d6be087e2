"""HTTP client for agents served behind a JSON endpoint.

The simulated backend is the default everywhere; this client lets the same
environment drive real model calls.
"""

from __future__ import annotations

import json
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import AgentSpec
from .env import EnvState, InvocationResult

DEFAULT_TIMEOUT = 60.0
MAX_REQUEST_BYTES = 256 * 1024
EXCERPT_CHARS = 200


class RemoteError(RuntimeError):
    retryable = False


class RetryableRemoteError(RemoteError):
    """Timeouts, refused connections and server-side (5xx) failures."""

    retryable = True


class RemoteSchemaError(RemoteError):
    """The endpoint answered, but not with a valid response document."""


def build_request(agent: AgentSpec, task_text: str, history: Sequence[str]) -> bytes:
    doc = {"agent_id": agent.agent_id, "role_text": agent.role_text, "task_text": task_text,
           "history_digest": list(history)}
    body = json.dumps(doc, sort_keys=True).encode()
    if len(body) > MAX_REQUEST_BYTES:
        raise RemoteError(f"request of {len(body)} bytes exceeds the {MAX_REQUEST_BYTES} byte cap")
    return body


def parse_response(body: bytes) -> InvocationResult:
    excerpt = body[:EXCERPT_CHARS].decode("utf-8", "replace")
    try:
        doc = json.loads(body)
    except ValueError:
        raise RemoteSchemaError(f"response is not JSON: {excerpt!r}") from None
    if not isinstance(doc, dict):
        raise RemoteSchemaError(f"response is not an object: {excerpt!r}")
    text = doc.get("output_text")
    if not isinstance(text, str):
        raise RemoteSchemaError(f"field output_text missing or not a string: {excerpt!r}")
    counts = []
    for field in ("prompt_tokens", "completion_tokens"):
        c = doc.get(field)
        if isinstance(c, bool) or not isinstance(c, int) or c < 0:
            raise RemoteSchemaError(f"field {field} missing or not a non-negative integer: {excerpt!r}")
        counts.append(c)
    return InvocationResult(text, max(1, counts[0] + counts[1]))


def _post(endpoint: str, body: bytes, timeout: float) -> bytes:
    req = urllib.request.Request(endpoint, data=body, method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.read()
    except urllib.error.HTTPError as exc:
        excerpt = exc.read()[:EXCERPT_CHARS].decode("utf-8", "replace")
        if exc.code >= 500:
            raise RetryableRemoteError(f"server error {exc.code}: {excerpt!r}") from exc
        raise RemoteSchemaError(f"request rejected with {exc.code}: {excerpt!r}") from exc
    except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
        raise RetryableRemoteError(f"transport failure talking to {endpoint}: {exc}") from exc


def remote_invoke(endpoint: str, agent: AgentSpec, task_text: str, history: Sequence[str] = (),
                  timeout: float = DEFAULT_TIMEOUT, retries: int = 1) -> InvocationResult:
    """POST one request document; retry transport failures ``retries`` times."""
    body = build_request(agent, task_text, history)
    for attempt in range(retries + 1):
        try:
            return parse_response(_post(endpoint, body, timeout))
        except RetryableRemoteError:
            if attempt == retries:
                raise
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class RemoteBackend:
    """Backend whose agents answer over HTTP; progress is judged from the
    final output against the task label."""

    pool: Sequence[AgentSpec]
    endpoint: str
    timeout: float = DEFAULT_TIMEOUT
    retries: int = 1

    def invoke(self, agent_id: int, state: EnvState, rng: np.random.Generator) -> InvocationResult:
        return remote_invoke(self.endpoint, self.pool[agent_id], state.task.text,
                             state.history, self.timeout, self.retries)
