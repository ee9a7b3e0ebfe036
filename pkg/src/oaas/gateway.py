"""End-user serving: OAI requests, content delivery, load distribution.

The gateway fronts every REST surface. Content retrieval honors the
configured state delivery mode: in redirect mode it either forwards the
303 untouched (when the client sends ``X-OaaS-Redirect: pass``) or
follows the redirect itself, caching the bytes; in relay mode the payload
streams through the platform. The content cache is safe because objects
are immutable once completed: entries never invalidate, only evict.
"""

from __future__ import annotations

import json
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable

from . import specmodel as sm
from .blobs import StateContent, StorageAdapter
from .controller import ObjectController, DeploymentRegistry
from .errors import InstanceDown, OaasError, OaiSyntaxError, UnknownObject
from .records import COMPLETED
from .taskmanager import TaskManager

REDIRECT_PASS_HEADER = "X-OaaS-Redirect"


@dataclass
class Response:
    status: int
    body: bytes = b""
    headers: dict = field(default_factory=dict)
    content_type: str = "application/json"
    stream: "Any | None" = None  # StateContent for chunked relays
    instance: "str | None" = None

    @classmethod
    def json(cls, status: int, payload: Any, **kw) -> "Response":
        return cls(status=status, body=json.dumps(payload).encode("utf-8"), **kw)


class ContentCache:
    """Byte-bounded LRU for completed objects' content."""

    def __init__(self, capacity_bytes: int = 256 * 1024 * 1024):
        self.capacity = capacity_bytes
        self._lock = threading.Lock()
        self._entries: "OrderedDict[str, bytes]" = OrderedDict()
        self._size = 0
        self.hits = 0
        self.misses = 0

    def get(self, key: str) -> "bytes | None":
        with self._lock:
            data = self._entries.get(key)
            if data is None:
                self.misses += 1
                return None
            self._entries.move_to_end(key)
            self.hits += 1
            return data

    def put(self, key: str, data: bytes) -> None:
        if len(data) > self.capacity:
            return
        with self._lock:
            if key in self._entries:
                self._size -= len(self._entries.pop(key))
            self._entries[key] = data
            self._size += len(data)
            while self._size > self.capacity:
                _, evicted = self._entries.popitem(last=False)
                self._size -= len(evicted)

    def stats(self) -> dict:
        with self._lock:
            return {"entries": len(self._entries), "bytes": self._size, "hits": self.hits, "misses": self.misses}

    def keys(self) -> list[str]:
        with self._lock:
            return list(self._entries)


class InstancePool:
    """Round-robin selection over task-manager instances.

    An instance that fails a dispatch is skipped until its cooldown
    expires, after which it is probed again and rejoins the rotation on
    success.
    """

    def __init__(self, instances: list[TaskManager], cooldown: float = 2.0):
        if not instances:
            raise ValueError("need at least one task-manager instance")
        self.instances = list(instances)
        self.cooldown = cooldown
        self._lock = threading.Lock()
        self._next = 0
        self._down_since: dict[str, float] = {}

    def _eligible(self, now: float) -> list[TaskManager]:
        out = []
        for inst in self.instances:
            down_at = self._down_since.get(inst.instance_id)
            if down_at is None or now - down_at >= self.cooldown:
                out.append(inst)
        return out

    def pick(self) -> TaskManager:
        with self._lock:
            now = time.monotonic()
            eligible = self._eligible(now)
            if not eligible:
                eligible = self.instances  # all down: probe anyway
            inst = eligible[self._next % len(eligible)]
            self._next += 1
            return inst

    def report_failure(self, instance: TaskManager) -> None:
        with self._lock:
            self._down_since[instance.instance_id] = time.monotonic()

    def report_success(self, instance: TaskManager) -> None:
        with self._lock:
            self._down_since.pop(instance.instance_id, None)

    def with_instance(self, fn: Callable[[TaskManager], Any]) -> tuple[Any, TaskManager]:
        """Run ``fn`` against a healthy instance, failing over on
        InstanceDown until every instance was tried once."""
        last_error: "Exception | None" = None
        for _ in range(len(self.instances)):
            inst = self.pick()
            try:
                result = fn(inst)
            except InstanceDown as exc:
                self.report_failure(inst)
                last_error = exc
                continue
            self.report_success(inst)
            return result, inst
        raise last_error if last_error else InstanceDown("no instances")

    def deliver_completion(self, completion) -> None:
        self.with_instance(lambda tm: tm.on_completion(completion))


class Gateway:
    def __init__(
        self,
        pool: InstancePool,
        adapter: StorageAdapter,
        controller: ObjectController,
        deployments: DeploymentRegistry,
        cache: "ContentCache | None" = None,
        state_delivery_mode: str = "redirect",
        sync_timeout: float = 120.0,
        http_get: "Callable[[str], bytes] | None" = None,
    ):
        self.pool = pool
        self.adapter = adapter
        self.controller = controller
        self.deployments = deployments
        self.cache = cache or ContentCache()
        self.state_delivery_mode = state_delivery_mode
        self.sync_timeout = sync_timeout
        self._http_get = http_get

    # -- OAI ---------------------------------------------------------------------

    def handle_oai(self, expr: str, headers: "dict | None" = None, input_ids: "list[str] | None" = None) -> Response:
        """Synchronous object access: invoke and/or fetch content."""
        headers = headers or {}
        try:
            req = sm.parse_oai(expr)
            result, inst = self.pool.with_instance(
                lambda tm: tm.invoke(
                    req, mode="sync", caller_context="external", input_ids=input_ids, timeout=self.sync_timeout
                )
            )
            record = result.record
            if req.content_key is None:
                return Response.json(200, record.status_view(), instance=inst.instance_id)
            if record.status != COMPLETED:
                return Response.json(
                    409,
                    {"error": "SourceNotCompleted", "detail": f"object {record.id} is {record.status}",
                     "failureCause": record.failure_cause},
                    instance=inst.instance_id,
                )
            return self._serve_content(record.id, req.content_key, headers, inst.instance_id)
        except OaasError as exc:
            return _error_response(exc)

    def _serve_content(self, object_id: str, key: str, headers: dict, instance: str) -> Response:
        cache_key = f"{object_id}/{key}"
        cached = self.cache.get(cache_key)
        if cached is not None:
            return Response(
                200, body=cached, content_type="application/octet-stream",
                headers={"X-OaaS-Content-Source": "cache"}, instance=instance,
            )
        if self.state_delivery_mode == "redirect":
            url = self.adapter.resolve_state(object_id, key, "redirect")
            location = url.to_url(self.adapter.url_base())
            if headers.get(REDIRECT_PASS_HEADER, "").lower() == "pass":
                # Payload bytes bypass the gateway entirely.
                return Response(303, headers={"Location": location}, instance=instance)
            data = self._fetch(location)
            self.cache.put(cache_key, data)
            return Response(
                200, body=data, content_type="application/octet-stream",
                headers={"X-OaaS-Content-Source": "redirect-follow"}, instance=instance,
            )
        content = self.adapter.resolve_state(object_id, key, "relay")
        assert isinstance(content, StateContent)
        return Response(
            200, content_type="application/octet-stream", stream=content,
            headers={"X-OaaS-Content-Source": "relay"}, instance=instance,
        )

    def _fetch(self, url: str) -> bytes:
        if self._http_get is not None:
            return self._http_get(url)
        import requests

        resp = requests.get(url)
        if resp.status_code != 200:
            raise UnknownObject(f"content fetch failed: {resp.status_code}")
        return resp.content

    # -- async invocation -----------------------------------------------------------

    def handle_async_invoke(self, body: dict) -> Response:
        try:
            expr = body.get("oai")
            if not isinstance(expr, str):
                raise OaiSyntaxError(0, "body field 'oai' must be a string")
            req = sm.parse_oai(expr)
            input_ids = body.get("inputs") or []
            result, inst = self.pool.with_instance(
                lambda tm: tm.invoke(req, mode="async", caller_context="external", input_ids=input_ids)
            )
            payload = result.record.status_view()
            if result.graph_id is not None:
                payload["graphId"] = result.graph_id
            return Response.json(202, payload, instance=inst.instance_id)
        except OaasError as exc:
            return _error_response(exc)

    def handle_object_status(self, object_id: str) -> Response:
        try:
            result, inst = self.pool.with_instance(lambda tm: tm.get_status(object_id))
            return Response.json(200, result, instance=inst.instance_id)
        except OaasError as exc:
            return _error_response(exc)

    # -- developer APIs ----------------------------------------------------------------

    def handle_register_package(self, document: str) -> Response:
        try:
            summary = self.controller.register_package(document)
            return Response.json(200, summary)
        except OaasError as exc:
            return _error_response(exc)

    def handle_deployment_status(self, function_name: str) -> Response:
        status = self.deployments.get(function_name)
        if status is None:
            return Response.json(404, {"error": "UnknownFunction", "detail": function_name})
        return Response.json(200, status.to_value())

    def handle_create_object(self, class_name: str, body: dict) -> Response:
        try:
            record, urls = self.controller.instantiate_object(
                class_name,
                structured_state=body.get("structuredState"),
                upload_keys=body.get("uploadKeys"),
                object_id=body.get("id"),
            )
            return Response.json(201, {"object": record.status_view(), "uploadUrls": urls})
        except OaasError as exc:
            return _error_response(exc)

    def handle_confirm_upload(self, object_id: str) -> Response:
        try:
            record = self.controller.confirm_upload(object_id)
            return Response.json(200, record.status_view())
        except OaasError as exc:
            return _error_response(exc)


def _error_response(exc: OaasError) -> Response:
    payload: dict[str, Any] = {"error": type(exc).__name__, "detail": str(exc)}
    if isinstance(exc, OaiSyntaxError):
        payload["offset"] = exc.offset
    extra = getattr(exc, "errors", None)
    if extra is not None:
        payload["report"] = extra
    keys = getattr(exc, "keys", None)
    if keys is not None:
        payload["missing"] = keys
    return Response.json(exc.http_status, payload)
