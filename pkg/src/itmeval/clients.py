"""Clients for external model services (LLM, scorers, image models).

Every client speaks JSON through a :class:`Transport`. :class:`HttpTransport`
posts to real endpoints; :class:`ScriptedTransport` replays canned replies
from a JSONL script so pipelines and loops run offline and deterministically.

Script lines look like::

    {"client": "llm", "match": "node to replace", "response": {"text": "..."}}
    {"client": "vera", "match": "a dog", "response": {"score": 0.8}, "repeat": true}
    {"client": "editor", "error": "connection refused"}

Entries for a client are tried in file order; the first unused one whose
``match`` substring occurs in the request body is used and consumed, unless
it has ``"repeat": true``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from typing import Iterable, Mapping, Optional, Protocol

from itmeval.errors import ClientError
from itmeval.types import TripletSet

logger = logging.getLogger(__name__)

SCORER_KINDS = ("vera", "grammar", "clip", "aesthetic")
LOOP_CLIENTS = ("t2i", "detector", "prompt_gen", "editor")


class Transport(Protocol):
    def request(self, client: str, body: dict) -> dict: ...

    def version(self, client: str) -> str: ...


class HttpTransport:
    """POSTs JSON bodies to one endpoint per client name, with bounded retries."""

    def __init__(
        self,
        endpoints: Mapping[str, str],
        api_keys: Optional[Mapping[str, str]] = None,
        timeout: float = 60.0,
        max_retries: int = 2,
        backoff: float = 0.5,
        transport=None,
    ):
        import httpx

        self.endpoints = dict(endpoints)
        self.api_keys = dict(api_keys or {})
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._versions: dict[str, str] = {}

    def version(self, client: str) -> str:
        return self._versions.get(client, f"http:{self.endpoints.get(client, '?')}")

    def request(self, client: str, body: dict) -> dict:
        import httpx

        url = self.endpoints.get(client)
        if not url:
            raise ClientError(client, "no endpoint configured")
        key = self.api_keys.get(client)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        last = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._client.post(url, json=body, headers=headers)
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise httpx.HTTPStatusError(f"HTTP {resp.status_code}", request=resp.request, response=resp)
                if resp.status_code >= 400:
                    raise ClientError(client, f"request rejected: HTTP {resp.status_code}")
                data = resp.json()
                if not isinstance(data, dict):
                    raise ClientError(client, "response is not a JSON object")
                if "version" in data:
                    self._versions[client] = str(data["version"])
                return data
            except (httpx.TransportError, httpx.HTTPStatusError, ValueError) as exc:
                last = exc
                logger.warning("%s request failed (attempt %d): %s", client, attempt + 1, exc)
                if attempt < self.max_retries:
                    time.sleep(self.backoff * 2**attempt)
        raise ClientError(client, f"unavailable after {self.max_retries + 1} attempts: {last}")


class ScriptedTransport:
    """Replays a fixed list of script entries. Thread-safe."""

    def __init__(self, entries: Iterable[dict], name: str = "scripted"):
        self.entries = [dict(e) for e in entries]
        for i, e in enumerate(self.entries):
            if "client" not in e or ("response" not in e and "error" not in e):
                raise ValueError(f"script entry {i + 1} needs 'client' and 'response' or 'error'")
        digest = hashlib.sha256(json.dumps(self.entries, sort_keys=True).encode()).hexdigest()[:12]
        self.name = f"{name}:{digest}"
        self._used = [False] * len(self.entries)
        self._lock = threading.Lock()
        self.log: list[tuple[str, dict]] = []

    @classmethod
    def from_jsonl(cls, path: str | os.PathLike) -> "ScriptedTransport":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        entries.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise ValueError(f"{path}: line {n}: {exc}") from exc
        return cls(entries, name=f"scripted")

    def version(self, client: str) -> str:
        return self.name

    def request(self, client: str, body: dict) -> dict:
        haystack = json.dumps(body, ensure_ascii=False, sort_keys=True)
        with self._lock:
            self.log.append((client, body))
            for i, e in enumerate(self.entries):
                if e["client"] != client or self._used[i]:
                    continue
                if "match" in e and e["match"] not in haystack:
                    continue
                if not e.get("repeat"):
                    self._used[i] = True
                if "error" in e:
                    raise ClientError(client, str(e["error"]))
                return dict(e["response"])
        raise ClientError(client, "script has no reply for this request")


# ---------------------------------------------------------------------------
# typed clients


class LLMClient:
    """``{"prompt", "max_tokens"}`` -> ``{"text"}``."""

    def __init__(self, transport: Transport, max_tokens: int = 512):
        self.transport = transport
        self.max_tokens = max_tokens

    @property
    def version(self) -> str:
        return self.transport.version("llm")

    def complete(self, prompt: str, max_tokens: Optional[int] = None) -> str:
        data = self.transport.request("llm", {"prompt": prompt, "max_tokens": max_tokens or self.max_tokens})
        text = data.get("text")
        if not isinstance(text, str):
            raise ClientError("llm", "response lacks a 'text' string")
        return text


class ScorerClient:
    """``{"text", "image"}`` -> ``{"score", "version"}`` for one scorer kind."""

    def __init__(self, kind: str, transport: Transport):
        if kind not in SCORER_KINDS:
            raise ValueError(f"unknown scorer kind {kind!r}")
        self.kind = kind
        self.transport = transport

    @property
    def version(self) -> str:
        return self.transport.version(self.kind)

    def score(self, text: str, image: Optional[str] = None) -> float:
        if self.kind == "clip" and not image:
            raise ValueError("clip scorer needs an image reference")
        if self.kind in ("vera", "grammar") and image:
            raise ValueError(f"{self.kind} scorer is text-only")
        data = self.transport.request(self.kind, {"text": text, "image": image})
        try:
            return float(data["score"])
        except (KeyError, TypeError, ValueError):
            raise ClientError(self.kind, "response lacks a numeric 'score'") from None


class T2IClient:
    def __init__(self, transport: Transport):
        self.transport = transport

    @property
    def version(self) -> str:
        return self.transport.version("t2i")

    def generate(self, prompt: str) -> str:
        return _image_of("t2i", self.transport.request("t2i", {"prompt": prompt}))


class DetectorClient:
    """``{"image", "caption"}`` -> ``{"triplets": [...]}`` or ``{"text": raw}``."""

    def __init__(self, transport: Transport, task: str = "mdc"):
        self.transport = transport
        self.task = task

    @property
    def version(self) -> str:
        return self.transport.version("detector")

    def detect(self, image: str, caption: str) -> TripletSet:
        from itmeval.parsing import parse_prediction_text

        data = self.transport.request("detector", {"image": image, "caption": caption})
        if "triplets" in data:
            try:
                return TripletSet.from_list(data["triplets"], self.task)
            except (KeyError, TypeError, ValueError) as exc:
                raise ClientError("detector", f"bad triplets: {exc}") from None
        if isinstance(data.get("text"), str):
            return parse_prediction_text(data["text"], self.task).triplets
        raise ClientError("detector", "response needs 'triplets' or 'text'")


class PromptGenClient:
    def __init__(self, transport: Transport):
        self.transport = transport

    @property
    def version(self) -> str:
        return self.transport.version("prompt_gen")

    def instruction(self, caption: str, mismatches: TripletSet) -> str:
        data = self.transport.request("prompt_gen", {"caption": caption, "mismatches": mismatches.to_list()})
        if not isinstance(data.get("text"), str) or not data["text"].strip():
            raise ClientError("prompt_gen", "response lacks a non-empty 'text'")
        return data["text"].strip()


class EditorClient:
    def __init__(self, transport: Transport):
        self.transport = transport

    @property
    def version(self) -> str:
        return self.transport.version("editor")

    def edit(self, image: str, instruction: str) -> str:
        return _image_of("editor", self.transport.request("editor", {"image": image, "instruction": instruction}))


def _image_of(client: str, data: dict) -> str:
    img = data.get("image")
    if not isinstance(img, str) or not img:
        raise ClientError(client, "response lacks an 'image' reference")
    return img
