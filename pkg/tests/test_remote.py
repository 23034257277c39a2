import socket

import numpy as np
import pytest

from langsteer.remote import (
    DimensionMismatch, MockEmbeddingServer, RemoteConnectionError, RemoteEmbedding, RemoteServerError,
    decode_png, encode_png,
)
from langsteer.sim.mock_embedding import MockEmbedding


@pytest.fixture()
def server():
    with MockEmbeddingServer(MockEmbedding()) as s:
        yield s


def test_info(server):
    client = RemoteEmbedding(server.url)
    assert client.dim() == 64 and client.backend_id == "mock-v1"


def test_batches_keep_order(server):
    local = MockEmbedding()
    texts = [f"{c} block number {i}" for i, c in enumerate(["red", "green", "blue", "cyan"] * 25)]
    client = RemoteEmbedding(server.url, max_batch=32)
    client.info()
    server.requests.clear()
    out = client.embed_texts(texts)
    assert [n for path, n in server.requests] and sorted(n for _, n in server.requests) == [4, 32, 32, 32]
    assert len(server.requests) == 4
    assert np.array_equal(out, local.embed_texts(texts))


def test_image_embeddings_match_local_backend(server):
    rng = np.random.default_rng(0)
    # quantise first so the PNG round trip is lossless
    patches = np.round(rng.random((5, 3, 8, 8)) * 255) / 255
    client = RemoteEmbedding(server.url)
    assert np.allclose(client.embed_images(patches), MockEmbedding().embed_images(patches), atol=1e-12)


def test_png_round_trip():
    x = np.round(np.random.default_rng(1).random((3, 6, 9)) * 255) / 255
    assert np.array_equal(decode_png(encode_png(x)), x)
    with pytest.raises(ValueError):
        encode_png(np.zeros((4, 2, 2)))


def test_empty_request(server):
    assert RemoteEmbedding(server.url).embed_texts([]).shape == (0, 64)


def test_dimension_mismatch_is_a_hard_error(server):
    client = RemoteEmbedding(server.url)
    client.check_manifest({"policy_config": {"embed_dim": 64}})
    server.dim_override = 32
    with pytest.raises(DimensionMismatch, match="64"):
        RemoteEmbedding(server.url).check_manifest({"policy_config": {"embed_dim": 64}})


def test_server_error_is_retried(server):
    client = RemoteEmbedding(server.url, retries=3, backoff=0.0)
    client.info()
    server.fail_next = 2
    out = client.embed_texts(["red block"])
    assert np.array_equal(out, MockEmbedding().embed_texts(["red block"]))
    assert len(server.requests) == 1 + 3


def test_persistent_server_error_is_typed(server):
    client = RemoteEmbedding(server.url, retries=2, backoff=0.0)
    client.info()
    server.fail_next = 10
    with pytest.raises(RemoteServerError) as err:
        client.embed_texts(["a", "b", "c"])
    assert err.value.status == 500
    assert err.value.items == (0, 3)
    assert len(server.requests) == 1 + 3


def test_client_errors_are_not_retried(server):
    client = RemoteEmbedding(server.url, retries=3, backoff=0.0)
    with pytest.raises(RemoteServerError) as err:
        client._request("POST", "/v1/nowhere", {})
    assert err.value.status == 404
    assert len(server.requests) == 0


def test_connection_refused_is_typed():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    client = RemoteEmbedding(f"http://127.0.0.1:{port}", retries=1, backoff=0.0, timeout=1.0)
    with pytest.raises(RemoteConnectionError):
        client.embed_texts(["red"])


def test_bad_client_configuration():
    with pytest.raises(ValueError):
        RemoteEmbedding("")
    with pytest.raises(ValueError):
        RemoteEmbedding("http://x", max_batch=0)
