import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sammpa.backend import BackendClient
from sammpa.core import ImageTensor
from sammpa.embed import (
    Embedding,
    EmbeddingCache,
    EmbeddingError,
    ExternalEmbedder,
    ToyEmbedder,
    cache_path,
    cache_read,
    cache_write,
    embed_external,
    embed_toy,
)
from sammpa.select import select_support
from sammpa.stub_backend import StubBackend, tcp_server
from tests.conftest import stub_argv


def test_toy_constant_is_uniform():
    e = embed_toy(ImageTensor(np.full((64, 64), 0.3, np.float32)))
    assert e.dimension == 256
    np.testing.assert_allclose(e.vector, 1 / 16, atol=1e-7)


def test_toy_deterministic():
    rng = np.random.default_rng(0)
    img = ImageTensor(rng.random((50, 70)).astype(np.float32))
    assert np.array_equal(embed_toy(img).vector, embed_toy(img).vector)


def test_toy_block_pattern_pooling_oracle():
    rng = np.random.default_rng(1)
    blocks = rng.random((16, 16))
    img = np.kron(blocks, np.ones((2, 2))).astype(np.float32)   # 32x32, constant 2x2 blocks
    img[::2, ::2] += 0.01                                        # break within-block constancy
    img = np.clip(img, 0, 1)
    pooled = np.zeros((16, 16))
    for i in range(16):
        for j in range(16):
            pooled[i, j] = img[2 * i:2 * i + 2, 2 * j:2 * j + 2].astype(np.float64).mean()
    expected = pooled.ravel() / np.linalg.norm(pooled)
    np.testing.assert_allclose(embed_toy(ImageTensor(img)).vector, expected, atol=1e-6)


def test_toy_color_uses_channel_mean():
    rng = np.random.default_rng(2)
    rgb = rng.random((32, 32, 3)).astype(np.float32)
    gray = rgb.mean(axis=2, dtype=np.float64).astype(np.float32)
    np.testing.assert_allclose(embed_toy(ImageTensor(rgb)).vector,
                               embed_toy(ImageTensor(gray)).vector, atol=1e-6)


@settings(max_examples=40)
@given(arrays(np.float32, st.tuples(st.integers(4, 40), st.integers(4, 40)),
              elements=st.floats(0, 1, width=32)))
def test_toy_unit_norm(a):
    v = embed_toy(ImageTensor(a)).vector
    assert abs(np.linalg.norm(v.astype(np.float64)) - 1.0) <= 1e-6


def test_embedding_validation():
    with pytest.raises(EmbeddingError):
        Embedding("a", np.array([np.nan, 1.0]))
    with pytest.raises(EmbeddingError):
        Embedding("a", np.zeros(3))


# -- cache file ----------------------------------------------------------------

def _cache(n=3, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    c = EmbeddingCache("t", dim)
    for i in range(n):
        c.put(Embedding(f"id{i}", rng.normal(size=dim)))
    return c


def test_cache_roundtrip(tmp_path):
    c = _cache()
    p = tmp_path / "c.mpae"
    cache_write(c, p)
    back = cache_read(p, "t")
    assert back == c
    for k, v in c.entries.items():
        assert back.get(k).tobytes() == v.tobytes()


def test_cache_size_arithmetic(tmp_path):
    c = _cache(3, 4)
    p = tmp_path / "c.mpae"
    cache_write(c, p)
    header = 4 + 3 * 4
    ids = sum(2 + len(f"id{i}".encode()) for i in range(3))
    assert p.stat().st_size == header + ids + 48


def test_cache_layout(tmp_path):
    c = EmbeddingCache("t", 2, {"b": np.array([1, 2], np.float32),
                                "a": np.array([3, 4], np.float32)})
    p = tmp_path / "c.mpae"
    cache_write(c, p)
    raw = p.read_bytes()
    assert raw[:16] == b"MPAE" + struct.pack("<III", 1, 2, 2)
    # entries sorted by id
    assert raw[16:19] == struct.pack("<H", 1) + b"a"
    assert raw[19:27] == struct.pack("<2f", 3, 4)


def test_cache_errors(tmp_path):
    p = tmp_path / "c.mpae"
    cache_write(_cache(), p)
    raw = p.read_bytes()
    (tmp_path / "bad.mpae").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(EmbeddingError, match="magic"):
        cache_read(tmp_path / "bad.mpae")
    (tmp_path / "trunc.mpae").write_bytes(raw[:-3])
    with pytest.raises(EmbeddingError, match="truncated"):
        cache_read(tmp_path / "trunc.mpae")
    (tmp_path / "short.mpae").write_bytes(raw[:7])
    with pytest.raises(EmbeddingError):
        cache_read(tmp_path / "short.mpae")
    c = _cache()
    with pytest.raises(EmbeddingError):
        c.put(Embedding("x", np.ones(5)))


def test_cache_path_keyed_by_tag_and_dim(tmp_path):
    assert cache_path(tmp_path, "toy-pool16", 256).name == "embeddings-toy-pool16-256.mpae"
    assert cache_path(tmp_path, "a", 4) != cache_path(tmp_path, "a", 8)


def test_toy_embedder_cache_hit():
    emb = ToyEmbedder()
    img = ImageTensor(np.full((16, 16), 0.5, np.float32))
    a = emb.embed("x", img)
    b = emb.embed("x", img)
    assert emb.calls == 1 and np.array_equal(a.vector, b.vector)


def test_selection_same_from_warm_cache(tmp_path):
    rng = np.random.default_rng(4)
    imgs = [ImageTensor(rng.random((32, 32)).astype(np.float32)) for _ in range(8)]
    live = ToyEmbedder()
    e1 = [live.embed(f"s{i}", im) for i, im in enumerate(imgs)]
    p = tmp_path / "c.mpae"
    cache_write(live.cache, p)
    warm = ToyEmbedder(cache_read(p, live.tag))
    e2 = [warm.embed(f"s{i}", im) for i, im in enumerate(imgs)]
    assert warm.calls == 0
    assert select_support(e1, 3).to_json() == select_support(e2, 3).to_json()


# -- external embedder over the wire ---------------------------------------------

def _img():
    return ImageTensor(np.full((8, 8), 0.5, np.float32))


def test_external_echo_and_cache_hit(tmp_path):
    with BackendClient.spawn(stub_argv("--kind", "embedder", "--vector", "0.5,0.25,1")) as client:
        emb = ExternalEmbedder(client, tmp_path)
        assert emb.dimension == 3
        v = embed_external(_img(), emb, "a")
        np.testing.assert_array_equal(v.vector, np.array([0.5, 0.25, 1], np.float32))
        embed_external(_img(), emb, "a")
        assert emb.calls == 1 and client.requests_sent == 1


def test_external_nan_surfaces_error(tmp_path):
    with BackendClient.spawn(stub_argv("--kind", "embedder", "--mode", "nan")) as client:
        emb = ExternalEmbedder(client, tmp_path)
        with pytest.raises(EmbeddingError):
            emb.embed("a", _img())
        assert len(emb.cache) == 0


def test_external_dimension_mismatch(tmp_path):
    with BackendClient.spawn(stub_argv("--kind", "embedder", "--vector", "1,2")) as client:
        with pytest.raises(EmbeddingError):
            ExternalEmbedder(client, tmp_path, cache=EmbeddingCache("external", 3))


def test_external_wrong_kind(tmp_path):
    with BackendClient.spawn(stub_argv("--kind", "segmenter")) as client:
        with pytest.raises(EmbeddingError):
            ExternalEmbedder(client, tmp_path)


def test_external_over_tcp(tmp_path):
    stub = StubBackend("embedder", vector=[0.0, 1.0])
    srv = tcp_server(stub)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    try:
        port = srv.server_address[1]
        with BackendClient.from_address(f"tcp://127.0.0.1:{port}") as client:
            emb = ExternalEmbedder(client, tmp_path)
            assert embed_external(_img(), emb, "q").vector.tolist() == [0.0, 1.0]
    finally:
        srv.shutdown()
        srv.server_close()
