"""Text-model backends: a live HTTP endpoint and replayable fixtures.

Every request is reduced to a canonical JSON form and hashed; fixture
stores key recorded responses by that hash, so replay is exact and any
drift in prompts or schemas surfaces as a missing-fixture error instead
of silently changing answers. Decoding is always requested
deterministic: temperature 0 and full nucleus mass on every call.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from ..errors import BackendError


@dataclass(frozen=True)
class CompletionRequest:
    """One chat-completion call: system text, user text, output schema."""

    system: str
    user: str
    schema: dict

    def canonical_json(self) -> str:
        return json.dumps(
            {"schema": self.schema, "system": self.system, "user": self.user},
            sort_keys=True, separators=(",", ":"))

    @property
    def key(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


class HttpBackend:
    """Chat-completion endpoint speaking the common JSON wire format."""

    def __init__(self, url: str, model: str, *, timeout: float = 60.0,
                 session=None):
        import requests

        self.url = url
        self.model = model
        self.timeout = timeout
        self._session = session or requests.Session()
        self._requests = requests

    def payload(self, request: CompletionRequest) -> dict:
        return {
            "model": self.model,
            "temperature": 0.0,
            "top_p": 1.0,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": "filter_output",
                                "schema": request.schema},
            },
        }

    def complete(self, request: CompletionRequest) -> str:
        try:
            resp = self._session.post(self.url, json=self.payload(request),
                                      timeout=self.timeout)
        except self._requests.RequestException as err:
            raise BackendError(f"request to {self.url} failed: {err}") from err
        if resp.status_code != 200:
            raise BackendError(
                f"backend {self.url} returned status {resp.status_code}")
        try:
            body = resp.json()
            return body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as err:
            raise BackendError(
                f"malformed response from {self.url}: {err}") from err


class FixtureBackend:
    """Replays recorded responses from a directory keyed by request hash."""

    def __init__(self, root):
        self.root = Path(root)

    def path_for(self, request: CompletionRequest) -> Path:
        return self.root / f"{request.key}.json"

    def complete(self, request: CompletionRequest) -> str:
        path = self.path_for(request)
        if not path.exists():
            raise BackendError(
                f"no recorded response for request {request.key} in "
                f"{self.root}")
        try:
            stored = json.loads(path.read_text())
            return stored["response"]
        except (OSError, ValueError, KeyError) as err:
            raise BackendError(f"unreadable fixture {path}: {err}") from err


class RecordingBackend:
    """Wraps a backend and records every exchange as a fixture file."""

    def __init__(self, inner, root):
        self.inner = inner
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def complete(self, request: CompletionRequest) -> str:
        response = self.inner.complete(request)
        record = {"request": {"system": request.system, "user": request.user,
                              "schema": request.schema},
                  "response": response}
        path = self.root / f"{request.key}.json"
        path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
        return response


class ScriptedBackend:
    """Answers from a plain function; the in-test stand-in for a model."""

    def __init__(self, respond):
        self._respond = respond

    def complete(self, request: CompletionRequest) -> str:
        return self._respond(request)
