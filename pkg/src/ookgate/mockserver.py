"""Deterministic stand-ins for the embedding and chat endpoints.

The mock embedder understands ``topic-<n>`` tokens: text mentioning topics is
embedded near the mean of those topics' vectors, with noise seeded by a hash of
the text; text without a topic token gets a pseudo-random direction. The mock
chat model writes one multiple-choice question about the topics it finds in
the prompt's context block. Together they let the full pipeline run offline.

Both are exposed as an ``httpx.MockTransport`` (for in-process use) and as a
real threaded HTTP server (for the CLI).
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import numpy as np

TOPIC_RE = re.compile(r"\btopic-(\d+)\b")
_CONTEXT_RE = re.compile(r"---\n(.*?)\n---", re.DOTALL)


def _text_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


class MockEmbedder:
    def __init__(self, dim: int = 64, seed: int = 0, topic_spread: float = 0.2, noise: float = 0.08):
        self.dim = dim
        self.seed = seed
        self.topic_spread = topic_spread
        self.noise = noise
        base = np.random.default_rng([seed, 0]).standard_normal(dim)
        self._base = base / np.linalg.norm(base)
        self._topics: dict[int, np.ndarray] = {}

    def topic_vector(self, topic: int) -> np.ndarray:
        v = self._topics.get(topic)
        if v is None:
            z = np.random.default_rng([self.seed, 1, topic]).standard_normal(self.dim)
            v = self._base + self.topic_spread * z
            v = v / np.linalg.norm(v)
            self._topics[topic] = v
        return v

    def embed(self, text: str) -> list[float]:
        rng = np.random.default_rng([self.seed, 2, _text_seed(text)])
        z = rng.standard_normal(self.dim)
        topics = sorted({int(t) for t in TOPIC_RE.findall(text)})
        if topics:
            center = np.mean([self.topic_vector(t) for t in topics], axis=0)
            v = center + self.noise * z
        else:
            v = z
        return (v / np.linalg.norm(v)).tolist()

    def respond(self, body: dict) -> dict:
        inputs = body["input"]
        if isinstance(inputs, str):
            inputs = [inputs]
        return {
            "object": "list",
            "model": body.get("model", "mock-embed"),
            "data": [{"object": "embedding", "index": i, "embedding": self.embed(t)} for i, t in enumerate(inputs)],
        }


class MockChat:
    """Writes one question per request about the topics in the context block."""

    def reply(self, messages: list[dict]) -> str:
        user = next((m["content"] for m in reversed(messages) if m.get("role") == "user"), "")
        m = _CONTEXT_RE.search(user)
        context = m.group(1) if m else user
        topics = sorted({int(t) for t in TOPIC_RE.findall(context)})
        tag = hashlib.sha256(user.encode("utf-8")).hexdigest()[:8]
        subject = " and ".join(f"topic-{t}" for t in topics) if topics else "this material"
        doc = {
            "question": f"Which statement about {subject} is supported by the reference text? [{tag}]",
            "options": {"A": f"finding {tag[:4]}", "B": f"finding {tag[4:]}", "C": "none of these"},
            "answer": "AB"[int(tag[0], 16) % 2],
        }
        return json.dumps(doc)

    def respond(self, body: dict) -> dict:
        return {
            "object": "chat.completion",
            "model": body.get("model", "mock-chat"),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": self.reply(body["messages"])}}],
        }


def _route(path: str, body: dict, embedder: MockEmbedder, chat: MockChat):
    if path.rstrip("/").endswith("/embeddings"):
        return 200, embedder.respond(body)
    if path.rstrip("/").endswith("/chat/completions"):
        return 200, chat.respond(body)
    return 404, {"error": f"no route {path}"}


def mock_transport(embedder: MockEmbedder | None = None, chat: MockChat | None = None) -> httpx.MockTransport:
    embedder = embedder or MockEmbedder()
    chat = chat or MockChat()

    def handler(request: httpx.Request) -> httpx.Response:
        status, doc = _route(request.url.path, json.loads(request.content), embedder, chat)
        return httpx.Response(status, json=doc)

    return httpx.MockTransport(handler)


class _Handler(BaseHTTPRequestHandler):
    embedder: MockEmbedder
    chat: MockChat

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length))
            status, doc = _route(self.path, body, self.embedder, self.chat)
        except (ValueError, KeyError) as exc:
            status, doc = 400, {"error": str(exc)}
        payload = json.dumps(doc).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, fmt, *args):
        pass


def make_server(host: str = "127.0.0.1", port: int = 0, embedder=None, chat=None) -> ThreadingHTTPServer:
    handler = type(
        "MockHandler", (_Handler,), {"embedder": embedder or MockEmbedder(), "chat": chat or MockChat()}
    )
    return ThreadingHTTPServer((host, port), handler)


def start_server(host: str = "127.0.0.1", port: int = 0, embedder=None, chat=None):
    """Serve in a daemon thread. Returns ``(server, base_url)``; call ``server.shutdown()`` to stop."""
    server = make_server(host, port, embedder, chat)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    h, p = server.server_address[:2]
    return server, f"http://{h}:{p}/v1"
