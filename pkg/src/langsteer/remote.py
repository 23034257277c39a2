"""HTTP embedding backend and a local mock server that speaks the same protocol.

Wire format: POST /v1/embed_text {"texts": [...]}, POST /v1/embed_image {"images_b64": [PNG, ...]},
both answering {"dim": d, "embeddings": [[...], ...]}; GET /v1/info answers {"dim", "backend_id"}.
Errors come back as {"error": message} with a non-2xx status.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


class RemoteError(RuntimeError):
    pass


class RemoteTimeout(RemoteError):
    pass


class RemoteConnectionError(RemoteError):
    pass


class RemoteServerError(RemoteError):
    def __init__(self, status: int, message: str):
        super().__init__(f"server answered {status}: {message}")
        self.status = status


class RemoteProtocolError(RemoteError):
    pass


class DimensionMismatch(RemoteError):
    pass


def encode_png(patch) -> str:
    """(3, h, w) floats in [0, 1] -> base64 PNG (8-bit)."""
    a = np.asarray(patch, dtype=float)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) patch, got {a.shape}")
    img = np.clip(np.rint(a.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img, "RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(text: str) -> np.ndarray:
    img = Image.open(io.BytesIO(base64.b64decode(text, validate=True))).convert("RGB")
    return np.asarray(img, dtype=float).transpose(2, 0, 1) / 255.0


class RemoteEmbedding:
    """Embedding backend over HTTP.

    Requests are split into batches of at most ``max_batch`` items and sent concurrently;
    results come back in request order.  Timeouts, refused connections and 5xx answers are
    retried ``retries`` times with exponential backoff, then raised as typed errors.
    """

    def __init__(self, url: str, timeout: float = 10.0, max_batch: int = 32, retries: int = 3,
                 backoff: float = 0.1, workers: int = 4, client: httpx.Client | None = None):
        if not url:
            raise ValueError("remote backend needs a URL")
        if max_batch < 1 or retries < 0:
            raise ValueError("max_batch must be positive and retries non-negative")
        self.url = url.rstrip("/")
        self.max_batch = max_batch
        self.retries = retries
        self.backoff = backoff
        self.workers = workers
        self.client = client or httpx.Client(timeout=timeout)
        self._info: dict | None = None

    # -- transport

    def _request(self, method: str, path: str, body=None) -> dict:
        delay = self.backoff
        for attempt in range(self.retries + 1):
            last = attempt == self.retries
            try:
                r = self.client.request(method, self.url + path, json=body)
            except httpx.TimeoutException as exc:
                if last:
                    raise RemoteTimeout(f"{method} {path} timed out after {attempt + 1} attempts") from exc
            except httpx.TransportError as exc:
                if last:
                    raise RemoteConnectionError(f"{method} {path} failed: {exc}") from exc
            else:
                if r.is_success:
                    try:
                        return r.json()
                    except ValueError as exc:
                        raise RemoteProtocolError(f"{path} returned non-JSON body") from exc
                try:
                    message = r.json().get("error", r.text)
                except ValueError:
                    message = r.text
                # client errors will not improve on retry
                if r.status_code < 500 or last:
                    raise RemoteServerError(r.status_code, message)
            log.info("retrying %s %s (attempt %d)", method, path, attempt + 2)
            time.sleep(delay)
            delay *= 2
        raise AssertionError("unreachable")

    def info(self) -> dict:
        if self._info is None:
            info = self._request("GET", "/v1/info")
            if not isinstance(info.get("dim"), int) or not isinstance(info.get("backend_id"), str):
                raise RemoteProtocolError(f"malformed /v1/info answer: {info}")
            self._info = info
        return self._info

    @property
    def backend_id(self) -> str:
        return self.info()["backend_id"]

    def dim(self) -> int:
        return self.info()["dim"]

    def check_manifest(self, manifest: dict) -> None:
        """Hard failure when the server cannot serve the checkpoint's embedding width."""
        want = manifest.get("policy_config", {}).get("embed_dim", manifest.get("embed_dim"))
        if want is not None and want != self.dim():
            raise DimensionMismatch(f"checkpoint expects {want}-d embeddings, {self.url} serves {self.dim()}")

    # -- batching

    def _embed(self, path: str, key: str, items: list) -> np.ndarray:
        dim = self.dim()
        if not items:
            return np.zeros((0, dim))
        starts = list(range(0, len(items), self.max_batch))

        def one(start):
            chunk = items[start:start + self.max_batch]
            try:
                out = self._request("POST", path, {key: chunk})
            except RemoteError as exc:
                exc.items = (start, start + len(chunk))  # which request items were lost
                raise
            emb = out.get("embeddings")
            if out.get("dim") != dim or not isinstance(emb, list) or len(emb) != len(chunk):
                raise RemoteProtocolError(
                    f"items {start}..{start + len(chunk) - 1}: expected {len(chunk)} x {dim} embeddings")
            arr = np.asarray(emb, dtype=float)
            if arr.shape != (len(chunk), dim) or not np.all(np.isfinite(arr)):
                raise RemoteProtocolError(f"items {start}..{start + len(chunk) - 1}: malformed embeddings")
            return arr

        if len(starts) == 1 or self.workers <= 1:
            parts = [one(s) for s in starts]
        else:
            with ThreadPoolExecutor(self.workers) as pool:
                parts = list(pool.map(one, starts))  # map keeps submission order
        return np.concatenate(parts)

    def embed_texts(self, texts) -> np.ndarray:
        return self._embed("/v1/embed_text", "texts", [str(t) for t in texts])

    def embed_images(self, patches) -> np.ndarray:
        x = np.asarray(patches, dtype=float)
        if x.ndim == 3:
            x = x[None]
        return self._embed("/v1/embed_image", "images_b64", [encode_png(p) for p in x])

    def close(self):
        self.client.close()


# ---------------------------------------------------------------------------
# mock server


class MockEmbeddingServer:
    """Threaded HTTP server around any local backend, for protocol tests and offline demos.

    ``fail_next`` makes the next n requests answer 500; ``dim_override`` makes /v1/info lie.
    """

    def __init__(self, backend=None, host: str = "127.0.0.1", port: int = 0):
        if backend is None:
            from .sim.mock_embedding import MockEmbedding

            backend = MockEmbedding()
        self.backend = backend
        self.fail_next = 0
        self.dim_override: int | None = None
        self.requests: list[tuple[str, int]] = []
        self._lock = threading.Lock()
        self.httpd = ThreadingHTTPServer((host, port), self._handler())
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def _handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                log.debug("mock server: " + fmt, *args)

            def _send(self, status, payload):
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def _injected_failure(self, count):
                with server._lock:
                    server.requests.append((self.path, count))
                    if server.fail_next > 0:
                        server.fail_next -= 1
                        return True
                return False

            def do_GET(self):
                if self.path != "/v1/info":
                    return self._send(404, {"error": f"no route {self.path}"})
                if self._injected_failure(0):
                    return self._send(500, {"error": "injected failure"})
                dim = server.dim_override or server.backend.dim()
                self._send(200, {"dim": dim, "backend_id": server.backend.backend_id})

            def do_POST(self):
                try:
                    body = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
                except ValueError:
                    return self._send(400, {"error": "body is not JSON"})
                if self.path == "/v1/embed_text":
                    items = body.get("texts")
                elif self.path == "/v1/embed_image":
                    items = body.get("images_b64")
                else:
                    return self._send(404, {"error": f"no route {self.path}"})
                if not isinstance(items, list):
                    return self._send(400, {"error": "missing item list"})
                if self._injected_failure(len(items)):
                    return self._send(500, {"error": "injected failure"})
                try:
                    if self.path == "/v1/embed_text":
                        emb = server.backend.embed_texts(items)
                    else:
                        emb = server.backend.embed_images(np.stack([decode_png(s) for s in items])) if items \
                            else np.zeros((0, server.backend.dim()))
                except Exception as exc:  # report, never crash the server thread
                    return self._send(400, {"error": str(exc)})
                self._send(200, {"dim": server.backend.dim(), "embeddings": np.asarray(emb).tolist()})

        return Handler

    def start(self) -> "MockEmbeddingServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
