"""Getting text into the system.

* fixed-size character chunking of raw documents
* embeddings from an HTTP endpoint speaking the common embeddings-API shape
  (``{"input": [...], "model": ...}`` -> ``{"data": [{"embedding", "index"}]}``)
* synthetic in-knowledge questions from a chat-completions endpoint
* a small binary format for embedding matrices plus an id sidecar
"""

from __future__ import annotations

import json
import logging
import os
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import httpx
import numpy as np
import tenacity

from .errors import (
    BadMagic,
    DimensionDrift,
    EmbeddingFileError,
    EndpointError,
    IdCountMismatch,
    InconsistentAnswerKey,
    InputError,
    InvalidChunking,
    InvalidHeader,
    NoSyntheticQueries,
    TruncatedPayload,
    ValidationError,
)
from .vecstore import SimilarityMetric

log = logging.getLogger(__name__)

ENV_EMBED_URL = "OOKGATE_EMBED_URL"
ENV_CHAT_URL = "OOKGATE_CHAT_URL"
ENV_API_KEY = "OOKGATE_API_KEY"


# ---------------------------------------------------------------------------
# chunking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DocumentChunk:
    chunk_id: str
    source_doc: str
    text: str
    char_span: tuple


def chunk_corpus(docs: Iterable[tuple], size: int = 1000, overlap: int = 200) -> list[DocumentChunk]:
    """Split ``(doc_id, text)`` pairs into overlapping character windows.

    Windows start every ``size - overlap`` characters; the last window is the
    first one that reaches the end of the document. Empty documents are skipped.
    """
    if overlap < 0 or size <= overlap:
        raise InvalidChunking(f"need size > overlap >= 0, got size={size}, overlap={overlap}")
    step = size - overlap
    chunks = []
    for doc_id, text in docs:
        start, i = 0, 0
        while start < len(text):
            end = min(start + size, len(text))
            chunks.append(DocumentChunk(f"{doc_id}#{i}", str(doc_id), text[start:end], (start, end)))
            if end == len(text):
                break
            start += step
            i += 1
    return chunks


def sample_chunks(chunks: Sequence[DocumentChunk], count: int | None, seed: int = 0) -> list[DocumentChunk]:
    """Uniform sample without replacement, returned in corpus order."""
    if count is None or count >= len(chunks):
        return list(chunks)
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(chunks), size=count, replace=False))
    return [chunks[i] for i in picked]


# ---------------------------------------------------------------------------
# JSONL helpers
# ---------------------------------------------------------------------------


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return rows


def read_texts_jsonl(path) -> list[tuple[str, str]]:
    """``(id, text)`` pairs from a JSONL file of ``{"id", "text"}`` objects."""
    out = []
    for i, row in enumerate(read_jsonl(path)):
        if not isinstance(row, dict) or "text" not in row:
            raise InputError(f"{path}: line {i + 1} lacks a 'text' field")
        out.append((str(row.get("id", i)), str(row["text"])))
    return out


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# HTTP clients
# ---------------------------------------------------------------------------


class _Transient(Exception):
    pass


@dataclass
class EndpointConfig:
    """Where and how to reach an HTTP endpoint.

    ``transport`` lets tests inject an ``httpx.MockTransport``.
    """

    url: str | None = None
    model: str = ""
    api_key: str | None = None
    batch_size: int = 64
    max_attempts: int = 3
    backoff: float = 0.5
    timeout: float = 60.0
    max_in_flight: int = 4
    temperature: float = 0.7
    transport: httpx.BaseTransport | None = field(default=None, repr=False)

    @classmethod
    def for_embeddings(cls, url=None, api_key=None, **kw) -> "EndpointConfig":
        """Config with URL and key falling back to the environment."""
        return cls(url=url or os.environ.get(ENV_EMBED_URL), api_key=api_key or os.environ.get(ENV_API_KEY), **kw)

    @classmethod
    def for_chat(cls, url=None, api_key=None, **kw) -> "EndpointConfig":
        return cls(url=url or os.environ.get(ENV_CHAT_URL), api_key=api_key or os.environ.get(ENV_API_KEY), **kw)

    def client(self) -> httpx.Client:
        if not self.url:
            raise EndpointError("no endpoint URL configured")
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        return httpx.Client(headers=headers, timeout=self.timeout, transport=self.transport)


def _post_json(client: httpx.Client, cfg: EndpointConfig, body: dict) -> dict:
    def attempt():
        try:
            resp = client.post(cfg.url, json=body)
        except httpx.TransportError as exc:
            raise _Transient(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise _Transient(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise EndpointError(f"{cfg.url} answered HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise EndpointError(f"{cfg.url} returned a non-JSON body") from exc

    retrying = tenacity.Retrying(
        stop=tenacity.stop_after_attempt(cfg.max_attempts),
        wait=tenacity.wait_exponential(multiplier=cfg.backoff, max=30) if cfg.backoff > 0 else tenacity.wait_none(),
        retry=tenacity.retry_if_exception_type(_Transient),
        reraise=True,
    )
    try:
        return retrying(attempt)
    except _Transient as exc:
        raise EndpointError(f"{cfg.url} failed after {cfg.max_attempts} attempts: {exc}") from exc


def _parse_embeddings(doc: dict, expected: int) -> list[list[float]]:
    try:
        items = sorted(doc["data"], key=lambda it: it["index"])
        vectors = [it["embedding"] for it in items]
    except (KeyError, TypeError) as exc:
        raise EndpointError(f"malformed embeddings response: {exc}") from exc
    if len(vectors) != expected:
        raise EndpointError(f"asked for {expected} embeddings, got {len(vectors)}")
    return vectors


def embed_texts(cfg: EndpointConfig, texts: Sequence[str]) -> np.ndarray:
    """Embed ``texts`` in batches; row i of the result belongs to ``texts[i]``."""
    texts = list(texts)
    if not texts:
        raise ValidationError("no texts to embed")
    for i, t in enumerate(texts):
        if not t or not t.strip():
            raise ValidationError(f"text {i} is empty")
    batches = [texts[i : i + cfg.batch_size] for i in range(0, len(texts), cfg.batch_size)]
    with cfg.client() as client:

        def run(batch):
            doc = _post_json(client, cfg, {"input": batch, "model": cfg.model})
            return _parse_embeddings(doc, len(batch))

        with ThreadPoolExecutor(max_workers=max(1, cfg.max_in_flight)) as pool:
            results = list(pool.map(run, batches))
    dims = {len(v) for batch in results for v in batch}
    if len(dims) != 1:
        raise DimensionDrift(f"endpoint returned embeddings of differing dimensions {sorted(dims)}")
    out = np.array([v for batch in results for v in batch], dtype=np.float64)
    if out.shape[1] == 0 or not np.all(np.isfinite(out)):
        raise EndpointError("endpoint returned empty or non-finite embeddings")
    return out


def chat_complete(client: httpx.Client, cfg: EndpointConfig, messages: list[dict]) -> str:
    doc = _post_json(client, cfg, {"model": cfg.model, "messages": messages, "temperature": cfg.temperature})
    try:
        return doc["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise EndpointError(f"malformed chat response: {exc}") from exc


# ---------------------------------------------------------------------------
# synthetic queries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    system: str
    user: str
    examples: tuple

    def render(self, context: str, variant: str = "") -> list[dict]:
        examples = "\n\n".join(json.dumps(ex, indent=2) for ex in self.examples)
        user = self.user.format(context=context)
        if variant:
            user += "\n" + variant
        return [
            {"role": "system", "content": self.system.format(examples=examples)},
            {"role": "user", "content": user},
        ]


_USER = (
    "Here is a passage from the reference material.\n\n"
    "---\n{context}\n---\n\n"
    "Write one new question that this passage answers, using the same JSON format "
    'as the samples (keys "question", "options", "answer"). Reply with the JSON object only.'
)

TEMPLATES = {
    "textbooks": PromptTemplate(
        system=(
            "You write exam questions for medical students. Every question must be answerable "
            "from the supplied reference text alone, and the questions should cover varied topics.\n"
            "Sample questions:\n\n{examples}\n"
        ),
        user=_USER,
        examples=(
            {
                "question": "A 60-year-old man on long-term lithium develops polyuria and polydipsia. "
                "Which part of the nephron is primarily affected?",
                "options": {"A": "Proximal tubule", "B": "Loop of Henle", "C": "Collecting duct", "D": "Glomerulus"},
                "answer": "C",
            },
            {
                "question": "Which enzyme deficiency causes the accumulation of homogentisic acid?",
                "options": {
                    "A": "Phenylalanine hydroxylase",
                    "B": "Homogentisate oxidase",
                    "C": "Tyrosinase",
                    "D": "Fumarylacetoacetase",
                },
                "answer": "B",
            },
        ),
    ),
    "pubmed": PromptTemplate(
        system=(
            "You write yes/no/maybe research questions about biomedical abstracts. Every question must "
            "be decidable from the supplied abstract alone.\nSample questions:\n\n{examples}\n"
        ),
        user=_USER,
        examples=(
            {
                "question": "Does early mobilisation shorten hospital stay after hip replacement?",
                "options": {"A": "yes", "B": "no", "C": "maybe"},
                "answer": "A",
            },
            {
                "question": "Is vitamin D supplementation associated with fewer asthma exacerbations in adults?",
                "options": {"A": "yes", "B": "no", "C": "maybe"},
                "answer": "C",
            },
        ),
    ),
}


@dataclass(frozen=True)
class SyntheticQuery:
    question: str
    options: dict | None
    answer: str | None
    source_chunk: str
    raw_payload: str

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "options": self.options,
            "answer": self.answer,
            "source_chunk": self.source_chunk,
            "raw_payload": self.raw_payload,
        }


class MalformedReply(ValueError):
    pass


_FENCE = re.compile(r"^\s*```(?:json)?\s*|\s*```\s*$", re.IGNORECASE)
_TRAILING_COMMA = re.compile(r",\s*([}\]])")


def parse_synthetic_reply(content: str, source_chunk: str) -> SyntheticQuery:
    """Parse one chat reply into a :class:`SyntheticQuery`.

    Tolerates code fences, surrounding prose and trailing commas. Raises
    :class:`MalformedReply` if no usable JSON object is found and
    :class:`InconsistentAnswerKey` if the answer is not one of the options.
    """
    text = _FENCE.sub("", content.strip())
    lo, hi = text.find("{"), text.rfind("}")
    if lo < 0 or hi <= lo:
        raise MalformedReply("no JSON object in reply")
    try:
        doc = json.loads(_TRAILING_COMMA.sub(r"\1", text[lo : hi + 1]))
    except json.JSONDecodeError as exc:
        raise MalformedReply(f"invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise MalformedReply("reply JSON is not an object")
    question = doc.get("question")
    if not isinstance(question, str) or not question.strip():
        raise MalformedReply("missing question")
    options = doc.get("options")
    if options is not None:
        if not isinstance(options, dict) or not options:
            raise MalformedReply("options must be a non-empty object")
        options = {str(k): str(v) for k, v in options.items()}
    answer = doc.get("answer")
    answer = None if answer is None else str(answer)
    if options is not None and answer is not None and answer not in options:
        raise InconsistentAnswerKey(f"answer {answer!r} is not among options {sorted(options)}")
    return SyntheticQuery(question.strip(), options, answer, source_chunk, content)


def synthesize_queries(
    cfg: EndpointConfig,
    chunks: Sequence[DocumentChunk],
    template_id: str = "textbooks",
    n_per_chunk: int = 1,
) -> list[SyntheticQuery]:
    """Ask the chat endpoint for ``n_per_chunk`` questions about each chunk.

    A malformed reply is retried once; if it is still unusable (or its answer
    key is inconsistent) the item is skipped with a logged warning. Raises
    :class:`NoSyntheticQueries` when nothing at all could be parsed.
    """
    if not chunks:
        raise ValidationError("no chunks to synthesize from")
    if template_id not in TEMPLATES:
        raise ValidationError(f"unknown template {template_id!r}; choose from {sorted(TEMPLATES)}")
    template = TEMPLATES[template_id]
    jobs = []
    for chunk in chunks:
        for i in range(n_per_chunk):
            variant = f"(Question {i + 1} of {n_per_chunk}.)" if n_per_chunk > 1 else ""
            jobs.append((chunk, variant))

    with cfg.client() as client:

        def run(job):
            chunk, variant = job
            messages = template.render(chunk.text, variant)
            for attempt in range(2):
                content = chat_complete(client, cfg, messages)
                try:
                    return parse_synthetic_reply(content, chunk.chunk_id)
                except InconsistentAnswerKey as exc:
                    log.warning("skipping question for %s: %s", chunk.chunk_id, exc)
                    return None
                except MalformedReply as exc:
                    if attempt == 1:
                        log.warning("skipping chunk %s: unusable reply twice (%s)", chunk.chunk_id, exc)
            return None

        with ThreadPoolExecutor(max_workers=max(1, cfg.max_in_flight)) as pool:
            results = list(pool.map(run, jobs))
    out = [r for r in results if r is not None]
    if not out:
        raise NoSyntheticQueries("no synthetic question could be parsed from any chunk")
    return out


# ---------------------------------------------------------------------------
# binary embedding files
# ---------------------------------------------------------------------------

MAGIC = b"OOKG"
FILE_VERSION = 1
_HEADER = struct.Struct("<4sIIQB3x")
_METRIC_TAGS = {SimilarityMetric.COSINE: 0, SimilarityMetric.DOT: 1}
_TAG_METRICS = {v: k for k, v in _METRIC_TAGS.items()}


def ids_path(path) -> Path:
    return Path(str(path) + ".ids")


def write_embeddings(path, vectors, ids: Sequence[str], metric=SimilarityMetric.COSINE) -> None:
    """Write ``vectors`` as little-endian float32 plus a ``<path>.ids`` sidecar."""
    v = np.asarray(vectors)
    if v.ndim != 2 or v.shape[1] == 0:
        raise ValidationError(f"expected an n x d matrix with d > 0, got shape {v.shape}")
    ids = [str(i) for i in ids]
    if len(ids) != v.shape[0]:
        raise ValidationError(f"{v.shape[0]} vectors but {len(ids)} ids")
    if any("\n" in i or "\r" in i for i in ids):
        raise ValidationError("ids may not contain line breaks")
    header = _HEADER.pack(MAGIC, FILE_VERSION, v.shape[1], v.shape[0], _METRIC_TAGS[SimilarityMetric.parse(metric)])
    payload = np.ascontiguousarray(v, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)
    ids_path(path).write_text("".join(i + "\n" for i in ids), encoding="utf-8")


def read_embeddings(path, with_metric: bool = False):
    """Read a file written by :func:`write_embeddings`.

    Returns ``(vectors, ids)`` with float32 vectors, or
    ``(vectors, ids, metric)`` when ``with_metric`` is set.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise InputError(f"no such file: {path}") from exc
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise BadMagic(f"{path} is not an embedding file")
        raise InvalidHeader(f"{path}: header is truncated")
    magic, version, dim, count, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"{path} is not an embedding file (magic {magic!r})")
    if version != FILE_VERSION:
        raise InvalidHeader(f"{path}: unsupported version {version}")
    if dim == 0:
        raise InvalidHeader(f"{path}: dimension is 0")
    if tag not in _TAG_METRICS:
        raise InvalidHeader(f"{path}: unknown metric tag {tag}")
    expected = count * dim * 4
    body = raw[_HEADER.size :]
    if len(body) < expected:
        raise TruncatedPayload(f"{path}: payload has {len(body)} bytes, header promises {expected}")
    if len(body) > expected:
        raise EmbeddingFileError(f"{path}: {len(body) - expected} unexpected trailing bytes")
    vectors = np.frombuffer(body, dtype="<f4").reshape(count, dim).copy()
    try:
        id_text = ids_path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise IdCountMismatch(f"missing id sidecar {ids_path(path)}") from exc
    ids = id_text.split("\n")
    if ids and ids[-1] == "":
        ids.pop()
    if len(ids) != count:
        raise IdCountMismatch(f"{path}: {count} vectors but {len(ids)} ids")
    if with_metric:
        return vectors, ids, _TAG_METRICS[tag]
    return vectors, ids
