import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textovsr.degrade import VideoClip, sample_pipeline
from textovsr.exceptions import CaptionError, VersioningError
from textovsr.prompts import (
    EmbeddingCache,
    HashTextEncoder,
    HttpCaptioner,
    PromptPack,
    TemplateCaptioner,
    build_prompt_pack,
    caption_clip,
    encode,
    read_embeddings,
    write_embeddings,
)

from conftest import textured_clip


class CountingProvider:
    provider_id = "counting"

    def __init__(self):
        self.calls = []

    def caption(self, frame, clip_id=""):
        self.calls.append(float(frame.mean()))
        return f"caption {len(self.calls)}"


class CountingEncoder(HashTextEncoder):
    def __init__(self, d_text=64):
        super().__init__(d_text)
        self.calls = 0

    def encode_one(self, text):
        self.calls += 1
        return super().encode_one(text)


def test_caption_batching_counts():
    prov = CountingProvider()
    texts = caption_clip(textured_clip(n=14), prov, 7)
    assert len(prov.calls) == 2 and len(texts) == 14
    assert len(set(texts[:7])) == 1 and len(set(texts[7:])) == 1


def test_caption_seven_frames_identical():
    texts = caption_clip(textured_clip(n=7), TemplateCaptioner(), 7)
    assert len(set(texts)) == 1


def test_caption_remainder_batch():
    prov = CountingProvider()
    texts = caption_clip(textured_clip(n=8), prov, 7)
    assert len(prov.calls) == 2
    assert texts[7] == "caption 2" and texts[6] == "caption 1"


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 20), b=st.integers(1, 9))
def test_batch_sharing_property(n, b):
    clip = VideoClip(np.random.default_rng(n).random((n, 3, 8, 8)).astype(np.float32))
    texts = caption_clip(clip, CountingProvider(), b)
    assert all(texts[i] == texts[b * (i // b)] for i in range(n))


def test_caption_failure_carries_index():
    class Flaky:
        provider_id = "flaky"

        def __init__(self):
            self.n = 0

        def caption(self, frame, clip_id=""):
            self.n += 1
            if self.n == 2:
                raise RuntimeError("boom")
            return "ok"

    with pytest.raises(CaptionError) as e:
        caption_clip(textured_clip(n=10), Flaky(), 7)
    assert e.value.frame_index == 7

    class Empty:
        provider_id = "empty"

        def caption(self, frame, clip_id=""):
            return ""

    with pytest.raises(CaptionError):
        caption_clip(textured_clip(n=3), Empty(), 7)


def test_template_granularity():
    frame = textured_clip(n=1).frames[0]
    fine = TemplateCaptioner("fine").caption(frame)
    coarse = TemplateCaptioner("coarse").caption(frame)
    assert coarse and fine.startswith(coarse) and len(fine) > len(coarse)
    assert TemplateCaptioner().caption(frame) == fine


def test_encode_cache_contract():
    enc = CountingEncoder()
    vecs = encode(["s", "s", "s"], enc)
    assert enc.calls == 1
    assert all(np.array_equal(vecs[0], v) for v in vecs)


def test_encode_null_prompt():
    v = encode([""], HashTextEncoder(64))[0]
    assert v.shape == (64,) and not v.any()


def test_encode_distinct_severities():
    a, b = encode(["light blur", "heavy blur"], HashTextEncoder(64))
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert cos < 1 - 1e-3


def test_cache_soundness():
    texts = ["light blur", "a bright scene", "light blur", "heavy noise"]
    enc = HashTextEncoder(32)
    cached = encode(texts, enc, EmbeddingCache())
    plain = [enc.encode_one(t) for t in texts]
    assert all(np.array_equal(a, b) for a, b in zip(cached, plain))


def test_cache_concurrent_readers():
    cache = EmbeddingCache()
    enc = HashTextEncoder(16)
    results = []

    def work():
        results.append(np.stack(encode(["a b", "c d", "a b"], enc, cache)))

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(np.array_equal(results[0], r) for r in results)
    assert len(cache) == 2


def test_build_prompt_pack_train_and_infer():
    hr = textured_clip(n=8)
    rec = sample_pipeline(1)
    enc = HashTextEncoder(64)
    pack = build_prompt_pack(hr, rec, TemplateCaptioner(), enc)
    assert len(pack) == 8 and pack.content_embeddings.shape == (8, 64)
    assert pack.degradation_text == rec.text and pack.degradation_embedding.shape == (64,)
    assert np.isfinite(pack.content_embeddings).all()
    inf = build_prompt_pack(hr, None, TemplateCaptioner(), enc)
    assert inf.degradation_text is None and inf.degradation_embedding is None
    assert all(t for t in inf.content_texts)


def test_prompt_sidecars_roundtrip(tmp_path):
    pack = build_prompt_pack(textured_clip(n=3), sample_pipeline(2), TemplateCaptioner(), HashTextEncoder(16))
    pack.save(tmp_path)
    meta = json.loads((tmp_path / "prompts.json").read_text())
    assert set(meta) == {"content_texts", "degradation_text", "provider_id", "encoder_id", "d_text"}
    raw = (tmp_path / "prompts.emb").read_bytes()
    assert raw[:4] == b"TXEM" and len(raw) == 16 + 4 * 16 * 4
    back = PromptPack.load(tmp_path)
    assert np.array_equal(back.content_embeddings, pack.content_embeddings)
    assert np.array_equal(back.degradation_embedding, pack.degradation_embedding)
    assert back.content_texts == pack.content_texts


def test_embedding_sidecar_rejects_bad_header(tmp_path):
    write_embeddings(tmp_path / "x.emb", np.ones((2, 4), np.float32))
    raw = bytearray((tmp_path / "x.emb").read_bytes())
    raw[4] = 9
    (tmp_path / "y.emb").write_bytes(bytes(raw))
    with pytest.raises(VersioningError):
        read_embeddings(tmp_path / "y.emb")
    assert read_embeddings(tmp_path / "x.emb").shape == (2, 4)


class _Handler(BaseHTTPRequestHandler):
    fail_first = 0
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.seen.append(body)
        if _Handler.fail_first > 0:
            _Handler.fail_first -= 1
            self.send_response(503)
            self.end_headers()
            return
        out = json.dumps({"caption": f"remote caption len={len(body['image'])}"}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture
def caption_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{server.server_port}/caption"
    server.shutdown()


def test_http_captioner_with_retry(caption_server, monkeypatch):
    _Handler.fail_first = 1
    _Handler.seen = []
    monkeypatch.setenv("TEXTOVSR_CAPTION_URL", caption_server)
    prov = HttpCaptioner(backoff=0.0)
    texts = caption_clip(textured_clip(n=3), prov, 7)
    assert texts[0].startswith("remote caption")
    assert len(_Handler.seen) == 2
    assert set(_Handler.seen[-1]) == {"image", "prompt"}


def test_http_captioner_gives_up(caption_server):
    _Handler.fail_first = 10
    prov = HttpCaptioner(caption_server, retries=2, backoff=0.0)
    with pytest.raises(CaptionError):
        caption_clip(textured_clip(n=2), prov, 7)
    _Handler.fail_first = 0
