import json
import logging

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ookgate.errors import (
    BadMagic,
    DimensionDrift,
    EndpointError,
    IdCountMismatch,
    InconsistentAnswerKey,
    InvalidChunking,
    InvalidHeader,
    NoSyntheticQueries,
    TruncatedPayload,
)
from ookgate.ingest import (
    EndpointConfig,
    MalformedReply,
    chunk_corpus,
    embed_texts,
    ids_path,
    parse_synthetic_reply,
    read_embeddings,
    sample_chunks,
    synthesize_queries,
    write_embeddings,
)
from ookgate.mockserver import MockEmbedder, mock_transport
from ookgate.vecstore import SimilarityMetric


def test_chunk_examples():
    chunks = chunk_corpus([("doc", "abcdef")], size=4, overlap=2)
    assert [c.text for c in chunks] == ["abcd", "cdef"]
    assert [c.chunk_id for c in chunks] == ["doc#0", "doc#1"]
    assert [c.text for c in chunk_corpus([("d", "hey")], size=10, overlap=2)] == ["hey"]
    with pytest.raises(InvalidChunking):
        chunk_corpus([("d", "abc")], size=4, overlap=4)


@settings(max_examples=150, deadline=None)
@given(
    text=st.text(alphabet="abcxyz", min_size=1, max_size=300),
    size=st.integers(2, 50),
    data=st.data(),
)
def test_chunk_coverage(text, size, data):
    overlap = data.draw(st.integers(0, size - 1))
    chunks = chunk_corpus([("d", text)], size=size, overlap=overlap)
    hits = np.zeros(len(text), dtype=int)
    for c in chunks:
        start, end = c.char_span
        assert text[start:end] == c.text and c.text
        hits[start:end] += 1
    assert hits.min() >= 1
    assert len({c.chunk_id for c in chunks}) == len(chunks)
    # interior overlaps are covered exactly twice when windows are full
    if len(chunks) > 1 and 2 * overlap <= size:
        s0, e0 = chunks[0].char_span
        s1, _ = chunks[1].char_span
        assert (hits[s1:e0] == 2).all()


def test_sample_chunks_deterministic():
    chunks = chunk_corpus([(f"d{i}", "x" * 30) for i in range(20)], size=10, overlap=0)
    a = sample_chunks(chunks, 7, seed=3)
    assert a == sample_chunks(chunks, 7, seed=3) and len({c.chunk_id for c in a}) == 7
    assert sample_chunks(chunks, None) == list(chunks)


def _fixed_transport(dim_for_call=None, fail_first=0):
    state = {"calls": 0}

    def handler(request):
        state["calls"] += 1
        if state["calls"] <= fail_first:
            return httpx.Response(503, json={"error": "busy"})
        body = json.loads(request.content)
        dim = dim_for_call(state["calls"]) if dim_for_call else 4
        data = [
            {"index": i, "embedding": [float(len(t))] + [float(j) for j in range(1, dim)]}
            for i, t in enumerate(body["input"])
        ]
        return httpx.Response(200, json={"data": data[::-1]})

    return httpx.MockTransport(handler), state


def test_embed_order_and_batching():
    transport, state = _fixed_transport()
    cfg = EndpointConfig(url="http://mock/v1/embeddings", batch_size=3, transport=transport, backoff=0)
    texts = ["a" * i for i in range(1, 11)]
    out = embed_texts(cfg, texts)
    assert out.shape == (10, 4)
    assert out[:, 0].tolist() == list(range(1, 11))
    assert state["calls"] == 4


def test_embed_dimension_drift():
    transport, _ = _fixed_transport(dim_for_call=lambda c: 4 if c == 1 else 5)
    cfg = EndpointConfig(url="http://mock/v1/embeddings", batch_size=2, transport=transport, max_in_flight=1)
    with pytest.raises(DimensionDrift):
        embed_texts(cfg, ["a", "b", "c"])


def test_embed_retries_transient_failures():
    ok_t, _ = _fixed_transport()
    flaky, state = _fixed_transport(fail_first=2)
    kw = dict(url="http://mock/v1/embeddings", backoff=0, max_in_flight=1)
    texts = ["alpha", "beta", "gamma"]
    assert embed_texts(EndpointConfig(transport=flaky, **kw), texts).tolist() == embed_texts(
        EndpointConfig(transport=ok_t, **kw), texts
    ).tolist()
    assert state["calls"] == 3

    dead, state = _fixed_transport(fail_first=100)
    with pytest.raises(EndpointError):
        embed_texts(EndpointConfig(transport=dead, **kw), texts)
    assert state["calls"] == 3


def test_embed_rejects_empty_text():
    transport, _ = _fixed_transport()
    with pytest.raises(ValueError):
        embed_texts(EndpointConfig(url="http://m", transport=transport), ["ok", "  "])


def test_no_url_configured(monkeypatch):
    monkeypatch.delenv("OOKGATE_EMBED_URL", raising=False)
    with pytest.raises(EndpointError):
        embed_texts(EndpointConfig.for_embeddings(), ["x"])
    monkeypatch.setenv("OOKGATE_EMBED_URL", "http://env/embeddings")
    assert EndpointConfig.for_embeddings().url == "http://env/embeddings"


def test_mock_embedder_topics_cluster():
    e = MockEmbedder(dim=32)
    a1, a2 = np.array(e.embed("about topic-1 here")), np.array(e.embed("more on topic-1"))
    b = np.array(e.embed("about topic-9"))
    assert a1 @ a2 > a1 @ b
    assert e.embed("same text") == e.embed("same text")


def test_parse_reply_forms():
    q = parse_synthetic_reply('{"question":"Q?","options":{"A":"x","B":"y"},"answer":"A"}', "c#0")
    assert (q.question, q.options, q.answer, q.source_chunk) == ("Q?", {"A": "x", "B": "y"}, "A", "c#0")
    fenced = 'Sure!\n```json\n{"question": "Why?", "answer": null,}\n```'
    assert parse_synthetic_reply(fenced, "c").question == "Why?"
    with pytest.raises(MalformedReply):
        parse_synthetic_reply("I cannot help with that.", "c")
    with pytest.raises(InconsistentAnswerKey):
        parse_synthetic_reply('{"question":"Q?","options":{"A":"x","B":"y"},"answer":"C"}', "c")


def _chat_transport(replies):
    calls = []

    def handler(request):
        body = json.loads(request.content)
        ctx = body["messages"][-1]["content"]
        calls.append(ctx)
        content = replies(ctx, len(calls))
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})

    return httpx.MockTransport(handler), calls


def test_synthesize_parse_contract():
    t, _ = _chat_transport(lambda ctx, n: '{"question":"Q?","options":{"A":"x","B":"y"},"answer":"A"}')
    chunks = chunk_corpus([("d", "some text")], 100, 0)
    out = synthesize_queries(EndpointConfig(url="http://m/chat", transport=t), chunks)
    assert len(out) == 1 and out[0].question == "Q?" and out[0].answer == "A"
    assert out[0].to_dict()["source_chunk"] == "d#0"


def test_synthesize_skips_malformed_and_inconsistent(caplog):
    def replies(ctx, n):
        if "BAD" in ctx:
            return "just prose, no json"
        if "KEY" in ctx:
            return '{"question":"Q?","options":{"A":"x","B":"y"},"answer":"C"}'
        return '{"question":"fine?"}'

    t, calls = _chat_transport(replies)
    chunks = chunk_corpus([("a", "BAD chunk"), ("b", "KEY chunk"), ("c", "good chunk")], 100, 0)
    with caplog.at_level(logging.WARNING):
        out = synthesize_queries(EndpointConfig(url="http://m/chat", transport=t, max_in_flight=1), chunks)
    assert [q.source_chunk for q in out] == ["c#0"]
    assert sum("BAD" in c for c in calls) == 2
    assert sum("KEY" in c for c in calls) == 1
    assert any("a#0" in r.message for r in caplog.records)
    assert any("b#0" in r.message for r in caplog.records)

    with pytest.raises(NoSyntheticQueries):
        synthesize_queries(
            EndpointConfig(url="http://m/chat", transport=t), chunk_corpus([("a", "BAD")], 100, 0)
        )


def test_synthesize_deterministic_with_mock():
    chunks = chunk_corpus([(f"d{i}", f"facts about topic-{i % 3} number {i}") for i in range(12)], 200, 0)
    runs = [
        synthesize_queries(EndpointConfig(url="http://mock/v1/chat/completions", transport=mock_transport()), chunks, "pubmed", 2)
        for _ in range(2)
    ]
    assert runs[0] == runs[1] and len(runs[0]) == 24
    assert "topic-" in runs[0][0].question


def test_file_round_trip(tmp_path, rng):
    v = rng.standard_normal((100, 24)).astype(np.float32)
    ids = [f"id-{i}" for i in range(100)]
    p = tmp_path / "x.emb"
    write_embeddings(p, v, ids, SimilarityMetric.DOT)
    back, back_ids, metric = read_embeddings(p, with_metric=True)
    assert back.astype(np.float32).tobytes() == v.tobytes()
    assert back_ids == ids and metric is SimilarityMetric.DOT


def test_file_errors(tmp_path, rng):
    p = tmp_path / "x.emb"
    write_embeddings(p, rng.standard_normal((5, 3)), [str(i) for i in range(5)])
    raw = p.read_bytes()

    p.write_bytes(raw[:-1])
    with pytest.raises(TruncatedPayload):
        read_embeddings(p)

    bad_dim = bytearray(raw)
    bad_dim[8:12] = (0).to_bytes(4, "little")
    p.write_bytes(bytes(bad_dim))
    with pytest.raises(InvalidHeader):
        read_embeddings(p)

    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(BadMagic):
        read_embeddings(p)

    p.write_bytes(raw)
    ids_path(p).write_text("0\n1\n2\n", encoding="utf-8")
    with pytest.raises(IdCountMismatch):
        read_embeddings(p)
