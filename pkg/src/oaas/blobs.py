"""Unstructured state storage: bucket-organized blobs behind presigned URLs.

A presigned URL is the only capability the platform ever hands out for
blob access: HMAC-SHA256 over (method, path, expiry) with a server-wide
secret. Verification is stateless and constant-time, grants exactly one
method on exactly one path, and expiry is inclusive (valid while
``now <= expires_at``).

The storage adapter layers object awareness on top: it maps (object,
state key) to a blob path via the object record and serves state either
as a redirect (handing out the URL, no payload through the platform) or
as a relay (streaming bytes through the adapter).
"""

from __future__ import annotations

import hashlib
import hmac
import io
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Any, BinaryIO, Callable
from urllib.parse import parse_qs, urlsplit

from .errors import AccessDenied, NotFound, UnknownObject, UnknownStateKey
from .store import MetadataStore

COMPONENT_RE = re.compile(r"^[A-Za-z0-9_.-]+$")
CHUNK = 1024 * 1024


@dataclass(frozen=True)
class BlobPath:
    """Validated (bucket, object, key) triple; traversal-safe by construction."""

    bucket: str
    object_id: str
    key: str

    def __post_init__(self):
        for part in (self.bucket, self.object_id, self.key):
            if not COMPONENT_RE.match(part) or part in (".", ".."):
                raise ValueError(f"bad blob path component {part!r}")

    def canonical(self) -> str:
        return f"{self.bucket}/{self.object_id}/{self.key}"


@dataclass(frozen=True)
class PresignedUrl:
    path: BlobPath
    method: str  # GET | PUT
    expires_at: int  # Unix seconds, inclusive
    signature: str  # lowercase hex HMAC-SHA256

    def to_url(self, base: str) -> str:
        return (
            f"{base.rstrip('/')}/blob/{self.path.canonical()}"
            f"?expires={self.expires_at}&method={self.method}&sig={self.signature}"
        )

    @classmethod
    def from_url(cls, url: str) -> "PresignedUrl":
        parts = urlsplit(url)
        segments = parts.path.lstrip("/").split("/")
        if len(segments) != 4 or segments[0] != "blob":
            raise AccessDenied(f"not a blob url: {url!r}")
        query = parse_qs(parts.query)
        try:
            path = BlobPath(segments[1], segments[2], segments[3])
            return cls(
                path=path,
                method=query["method"][0],
                expires_at=int(query["expires"][0]),
                signature=query["sig"][0],
            )
        except (KeyError, ValueError, IndexError) as exc:
            raise AccessDenied(f"malformed presigned url: {exc}") from exc


def _signature(secret: bytes, method: str, path: BlobPath, expires_at: int) -> str:
    message = f"{method}\n{path.canonical()}\n{expires_at}".encode("utf-8")
    return hmac.new(secret, message, hashlib.sha256).hexdigest()


class BlobStore:
    """Filesystem-backed state storage with capability-checked access.

    Layout is ``<root>/<bucket>/<objectId>/<key>``; writes land in a temp
    file and are renamed into place, so readers observe either the old or
    the complete new blob. Every authenticated access is recorded in an
    access log that tests use to assert confinement.
    """

    def __init__(self, root: str, secret: bytes):
        self.root = root
        self._secret = secret
        self._log_lock = threading.Lock()
        self._access_log: list[tuple[str, str]] = []
        os.makedirs(root, exist_ok=True)

    # -- signing --------------------------------------------------------------

    def presign(self, path: BlobPath, method: str, ttl_seconds: int, now: float | None = None) -> PresignedUrl:
        if ttl_seconds < 1:
            raise ValueError("ttl_seconds must be >= 1")
        if method not in ("GET", "PUT"):
            raise ValueError(f"unsupported method {method!r}")
        now = time.time() if now is None else now
        expires_at = int(now) + int(ttl_seconds)
        return PresignedUrl(path, method, expires_at, _signature(self._secret, method, path, expires_at))

    def verify(self, url: PresignedUrl, method: str, path: BlobPath, now: float | None = None) -> bool:
        now = time.time() if now is None else now
        expected = _signature(self._secret, url.method, url.path, url.expires_at)
        if not hmac.compare_digest(expected, url.signature):
            return False
        return url.method == method and url.path == path and now <= url.expires_at

    # -- blob IO ----------------------------------------------------------------

    def put_blob(self, path: BlobPath, content: "bytes | BinaryIO", auth: PresignedUrl, now: float | None = None) -> int:
        if not self.verify(auth, "PUT", path, now):
            raise AccessDenied(f"PUT {path.canonical()}")
        self._record("PUT", path)
        final = self._fs_path(path)
        os.makedirs(os.path.dirname(final), exist_ok=True)
        tmp = f"{final}.tmp.{os.getpid()}.{threading.get_ident()}"
        written = 0
        if isinstance(content, (bytes, bytearray)):
            content = io.BytesIO(content)
        try:
            with open(tmp, "wb") as fh:
                while True:
                    chunk = content.read(CHUNK)
                    if not chunk:
                        break
                    fh.write(chunk)
                    written += len(chunk)
            os.replace(tmp, final)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        return written

    def get_blob(self, path: BlobPath, auth: PresignedUrl, now: float | None = None) -> BinaryIO:
        if not self.verify(auth, "GET", path, now):
            raise AccessDenied(f"GET {path.canonical()}")
        self._record("GET", path)
        try:
            return open(self._fs_path(path), "rb")
        except FileNotFoundError:
            raise NotFound(path.canonical()) from None

    # Trusted internal reads (no capability): used by the adapter itself.

    def exists(self, path: BlobPath) -> bool:
        return os.path.isfile(self._fs_path(path))

    def size(self, path: BlobPath) -> int:
        try:
            return os.path.getsize(self._fs_path(path))
        except OSError:
            raise NotFound(path.canonical()) from None

    def open_unchecked(self, path: BlobPath) -> BinaryIO:
        try:
            return open(self._fs_path(path), "rb")
        except FileNotFoundError:
            raise NotFound(path.canonical()) from None

    def _fs_path(self, path: BlobPath) -> str:
        return os.path.join(self.root, path.bucket, path.object_id, path.key)

    # -- instrumentation -----------------------------------------------------

    def _record(self, method: str, path: BlobPath) -> None:
        with self._log_lock:
            self._access_log.append((method, path.canonical()))

    def access_log(self) -> list[tuple[str, str]]:
        with self._log_lock:
            return list(self._access_log)

    def reset_access_log(self) -> None:
        with self._log_lock:
            self._access_log.clear()


@dataclass
class StateContent:
    """Relayed state bytes: a readable stream plus its length."""

    stream: BinaryIO
    size: int

    def read_all(self) -> bytes:
        try:
            return self.stream.read()
        finally:
            self.stream.close()


class StorageAdapter:
    """Object-aware facade over the blob store.

    ``http_fetch``, when configured, is how relay mode pulls bytes from the
    state-storage endpoint (the adapter acting as an HTTP client of the
    storage service); without it relay falls back to a direct read.
    """

    def __init__(
        self,
        store: MetadataStore,
        blobs: BlobStore,
        url_base: "str | Callable[[], str]" = "http://local",
        http_fetch: "Callable[[str], StateContent] | None" = None,
    ):
        self.store = store
        self.blobs = blobs
        self._url_base = url_base
        self._http_fetch = http_fetch

    def url_base(self) -> str:
        return self._url_base() if callable(self._url_base) else self._url_base

    def blob_path_for(self, object_id: str, key: str) -> BlobPath:
        record = self.store.get_or_none("object", object_id)
        if record is None:
            raise UnknownObject(object_id)
        paths = record.value.get("unstructuredKeys", {})
        if key not in paths:
            raise UnknownStateKey(f"object {object_id} has no unstructured key {key!r}")
        p = paths[key]
        return BlobPath(p["bucket"], p["objectId"], p["key"])

    def resolve_state(
        self,
        object_id: str,
        key: str,
        mode: str,
        ttl_seconds: int = 300,
        now: float | None = None,
    ) -> "PresignedUrl | StateContent":
        """Serve unstructured state as a redirect capability or relayed bytes.

        Content obtained through either mode is byte-identical; only the
        route the payload takes differs.
        """
        path = self.blob_path_for(object_id, key)
        url = self.blobs.presign(path, "GET", ttl_seconds, now)
        if mode == "redirect":
            return url
        if mode == "relay":
            if self._http_fetch is not None:
                return self._http_fetch(url.to_url(self.url_base()))
            stream = self.blobs.get_blob(path, url, now)
            return StateContent(stream=stream, size=self.blobs.size(path))
        raise ValueError(f"unknown state delivery mode {mode!r}")

    def allocate_upload(
        self, object_id: str, keys: list[str], ttl_seconds: int = 900, now: float | None = None
    ) -> dict[str, str]:
        """One presigned PUT URL per requested key, as embeddable strings."""
        base = self.url_base()
        out = {}
        for key in keys:
            path = self.blob_path_for(object_id, key)
            out[key] = self.blobs.presign(path, "PUT", ttl_seconds, now).to_url(base)
        return out

    def presigned_get_urls(
        self, object_id: str, ttl_seconds: int, now: float | None = None
    ) -> dict[str, str]:
        """Presigned GET URLs for every unstructured key of an object."""
        record = self.store.get_or_none("object", object_id)
        if record is None:
            raise UnknownObject(object_id)
        base = self.url_base()
        out = {}
        for key, p in record.value.get("unstructuredKeys", {}).items():
            path = BlobPath(p["bucket"], p["objectId"], p["key"])
            out[key] = self.blobs.presign(path, "GET", ttl_seconds, now).to_url(base)
        return out


class LocalBlobClient:
    """Executes presigned URLs against an in-process blob store.

    The URL is parsed and verified exactly as the HTTP endpoint would, so
    capability checks and the access log still apply; only the network hop
    is skipped. Suitable for builtins co-located with the platform.
    """

    def __init__(self, blobs: BlobStore):
        self.blobs = blobs

    def get(self, url: str) -> bytes:
        signed = PresignedUrl.from_url(url)
        with self.blobs.get_blob(signed.path, signed) as fh:
            return fh.read()

    def put(self, url: str, data: bytes) -> int:
        signed = PresignedUrl.from_url(url)
        return self.blobs.put_blob(signed.path, data, signed)


class HttpBlobClient:
    """Executes presigned URLs over real HTTP; used by remote functions."""

    def __init__(self, session: Any = None):
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def get(self, url: str) -> bytes:
        resp = self.session.get(url)
        if resp.status_code == 404:
            raise NotFound(url)
        if resp.status_code != 200:
            raise AccessDenied(f"GET {url} -> {resp.status_code}")
        return resp.content

    def put(self, url: str, data: bytes) -> int:
        resp = self.session.put(url, data=data)
        if resp.status_code not in (200, 201, 204):
            raise AccessDenied(f"PUT {url} -> {resp.status_code}")
        return len(data)
