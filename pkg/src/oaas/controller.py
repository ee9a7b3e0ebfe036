"""Developer-facing control plane.

Package registration validates the declarations, persists them as
versioned spec records, and enqueues one provisioning request per task
function; a provisioner consumes the queue asynchronously and flips
deployments to ready (or failed) while binding the routing table. Object
instantiation persists the metadata record and hands back presigned
upload URLs; the developer confirms uploads explicitly to complete the
object.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass
from typing import Callable

from . import specmodel as sm
from .blobs import StorageAdapter
from .errors import (
    NotFound,
    SchemaError,
    MissingBlob,
    UnknownFunction,
    UnknownObject,
    UnknownStateKey,
    ValidationFailed,
    VersionConflict,
)
from .queueing import DurableQueue
from .records import COMPLETED, PENDING, ObjectRecord
from .registry import StoreRegistry
from .store import MetadataStore


@dataclass
class ProvisionRequest:
    function_name: str  # qualified
    spec_version: int
    action: str  # deploy | update

    def to_value(self) -> dict:
        return {"functionName": self.function_name, "specVersion": self.spec_version, "action": self.action}

    @classmethod
    def from_value(cls, v: dict) -> "ProvisionRequest":
        return cls(v["functionName"], v["specVersion"], v["action"])


@dataclass
class DeploymentStatus:
    function_name: str
    state: str  # pending | deploying | ready | failed
    detail: str = ""
    updated_at: int = 0

    def to_value(self) -> dict:
        return {
            "functionName": self.function_name,
            "state": self.state,
            "detail": self.detail,
            "updatedAt": self.updated_at,
        }


class DeploymentRegistry:
    """Tracks per-function deployment state; transitions are
    pending -> deploying -> ready|failed, updates restart at deploying."""

    def __init__(self, clock: Callable[[], float] = time.time):
        self._lock = threading.Lock()
        self._statuses: dict[str, DeploymentStatus] = {}
        self._clock = clock

    def set(self, function_name: str, state: str, detail: str = "") -> DeploymentStatus:
        with self._lock:
            status = DeploymentStatus(function_name, state, detail, int(self._clock() * 1000))
            self._statuses[function_name] = status
            return status

    def get(self, function_name: str) -> "DeploymentStatus | None":
        with self._lock:
            return self._statuses.get(function_name)

    def wait_for(self, function_name: str, states=("ready", "failed"), timeout: float = 10.0) -> DeploymentStatus:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            status = self.get(function_name)
            if status is not None and status.state in states:
                return status
            time.sleep(0.01)
        raise TimeoutError(f"deployment of {function_name} did not settle")


class ObjectController:
    def __init__(
        self,
        store: MetadataStore,
        adapter: StorageAdapter,
        provision_queue: DurableQueue,
        deployments: "DeploymentRegistry | None" = None,
        clock: Callable[[], float] = time.time,
        id_factory: "Callable[[], str] | None" = None,
        upload_ttl: int = 900,
    ):
        self.store = store
        self.adapter = adapter
        self.queue = provision_queue
        self.deployments = deployments or DeploymentRegistry(clock)
        self.registry = StoreRegistry(store)
        self.clock = clock
        self.id_factory = id_factory or (lambda: uuid.uuid4().hex)
        self.upload_ttl = upload_ttl
        self._register_lock = threading.Lock()

    def _now_ms(self) -> int:
        return int(self.clock() * 1000)

    # -- package registration --------------------------------------------------

    def register_package(self, package: "sm.PackageSpec | str") -> dict:
        """Validate then persist a package; nothing persists on failure.

        Returns a summary of registered names and versions. Re-registering
        bumps versions and enqueues update-action provisioning.
        """
        pkg = sm.parse_package(package) if isinstance(package, str) else package
        with self._register_lock:
            report = sm.validate_package(pkg, self.registry)
            if not report.ok:
                raise ValidationFailed(report.messages())

            writes: list[tuple[str, str, dict, int]] = []  # (kind, key, value, expected)
            for c in pkg.classes:
                key = sm.qualify(pkg.name, c.name)
                current = self.store.get_or_none("class", key)
                value = {"package": pkg.name, "spec": sm.class_to_document(c)}
                writes.append(("class", key, value, current.version if current else 0))
            for f in pkg.functions:
                key = sm.qualify(pkg.name, f.name)
                current = self.store.get_or_none("function", key)
                value = {"package": pkg.name, "spec": sm.function_to_document(f)}
                writes.append(("function", key, value, current.version if current else 0))

            summary: dict = {"package": pkg.name, "classes": {}, "functions": {}}
            provision: list[ProvisionRequest] = []
            for kind, key, value, expected in writes:
                new_version = self.store.put(kind, key, value, expected_version=expected)
                if kind == "class":
                    summary["classes"][key] = new_version
                else:
                    summary["functions"][key] = new_version
                    fn = next(f for f in pkg.functions if sm.qualify(pkg.name, f.name) == key)
                    if fn.kind == "task":
                        action = "update" if expected > 0 else "deploy"
                        provision.append(ProvisionRequest(key, new_version, action))

            for req in provision:
                if req.action == "deploy":
                    self.deployments.set(req.function_name, "pending", "queued")
                # Updates restart from deploying once the provisioner picks
                # them up; the existing ready route keeps serving until then.
                self.queue.enqueue(req.to_value())
            summary["provisioning"] = [r.function_name for r in provision]
            return summary

    # -- object lifecycle --------------------------------------------------------

    def instantiate_object(
        self,
        class_name: str,
        structured_state: "dict | None" = None,
        upload_keys: "list[str] | None" = None,
        object_id: "str | None" = None,
    ) -> tuple[ObjectRecord, dict[str, str]]:
        """Create an object of a registered class.

        The record is COMPLETED immediately when there is nothing to
        upload, otherwise PENDING until confirm_upload verifies the blobs.
        """
        upload_keys = list(upload_keys or [])
        resolved = sm.resolve_class(class_name, self.registry)
        declared = {s.key: s for s in resolved.unstructured_keys()}
        for key in upload_keys:
            if key not in declared:
                raise UnknownStateKey(f"class {class_name} declares no unstructured key {key!r}")
        if structured_state and not resolved.has_structured_key():
            raise UnknownStateKey(f"class {class_name} declares no structured state")

        oid = object_id or self.id_factory()
        now = self._now_ms()
        record = ObjectRecord(
            id=oid,
            class_name=class_name,
            status=COMPLETED if not upload_keys else PENDING,
            structured_state=structured_state or {},
            unstructured_keys={
                key: {"bucket": declared[key].provider, "objectId": oid, "key": key}
                for key in upload_keys
            },
            origin=None,
            class_version=self.registry.class_record_version(class_name),
            created_at=now,
            updated_at=now,
        )
        try:
            self.store.put("object", oid, record.to_value(), expected_version=0)
        except VersionConflict:
            raise VersionConflict(0, f"object id {oid!r} already exists") from None

        urls = self.adapter.allocate_upload(oid, upload_keys, self.upload_ttl) if upload_keys else {}
        return record, urls

    def confirm_upload(self, object_id: str) -> ObjectRecord:
        """Verify declared blobs exist, then flip the object to COMPLETED.

        Idempotent: confirming a completed object returns it unchanged.
        """
        while True:
            stored = self.store.get_or_none("object", object_id)
            if stored is None:
                raise UnknownObject(object_id)
            record = ObjectRecord.from_value(stored.value)
            if record.origin is not None:
                raise SchemaError("$", "confirm_upload applies to developer-instantiated objects")
            if record.status == COMPLETED:
                return record
            missing = [
                key
                for key, p in record.unstructured_keys.items()
                if not self.adapter.blobs.exists(self.adapter.blob_path_for(object_id, key))
            ]
            if missing:
                raise MissingBlob(sorted(missing))
            record.status = COMPLETED
            record.updated_at = self._now_ms()
            try:
                self.store.put("object", object_id, record.to_value(), expected_version=stored.version)
                return record
            except VersionConflict:
                continue  # concurrent confirm; re-read and settle

    def get_object(self, object_id: str) -> ObjectRecord:
        stored = self.store.get_or_none("object", object_id)
        if stored is None:
            raise UnknownObject(object_id)
        return ObjectRecord.from_value(stored.value)


class Provisioner:
    """Consumes provisioning requests and makes functions routable.

    Builtin targets must exist in the executor's registry; remote-http
    targets must answer a 2xx health probe. Failures become a failed
    deployment status, never an exception: deployment is asynchronous.
    Provisioning is idempotent, so redelivered requests are harmless.
    """

    def __init__(
        self,
        queue: DurableQueue,
        store: MetadataStore,
        routing,
        deployments: DeploymentRegistry,
        builtin_names: Callable[[], set],
        health_probe: "Callable[[str], bool] | None" = None,
    ):
        self.queue = queue
        self.store = store
        self.routing = routing
        self.deployments = deployments
        self.builtin_names = builtin_names
        self.health_probe = health_probe or self._default_probe
        self._thread: "threading.Thread | None" = None
        self._stop = threading.Event()

    @staticmethod
    def _default_probe(endpoint: str) -> bool:
        import requests

        try:
            resp = requests.get(endpoint.rstrip("/") + "/healthz", timeout=5)
            return 200 <= resp.status_code < 300
        except requests.RequestException:
            return False

    def provision(self, req: ProvisionRequest) -> DeploymentStatus:
        try:
            record = self.store.get("function", req.function_name)
        except NotFound:
            raise UnknownFunction(req.function_name) from None
        spec = sm.function_from_document(record.value["spec"], sm.package_of(req.function_name))
        if spec.kind != "task" or spec.executor is None:
            return self.deployments.set(req.function_name, "failed", "not a task function")

        self.deployments.set(req.function_name, "deploying", f"action={req.action}")
        binding = spec.executor
        if binding.mode == "builtin":
            if binding.target not in self.builtin_names():
                return self.deployments.set(req.function_name, "failed", "unknown builtin")
        else:
            if not self.health_probe(binding.target):
                return self.deployments.set(req.function_name, "failed", f"health probe failed for {binding.target}")
        # Rebind replaces any existing route; updates never duplicate.
        self.routing.bind(req.function_name, binding, record.version)
        return self.deployments.set(req.function_name, "ready", binding.mode)

    def drain(self) -> int:
        """Process everything currently deliverable; returns the count."""
        handled = 0
        while True:
            item = self.queue.dequeue()
            if item is None:
                return handled
            item_id, payload = item
            self.provision(ProvisionRequest.from_value(payload))
            self.queue.ack(item_id)
            handled += 1

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="provisioner", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def _run(self) -> None:
        while not self._stop.is_set():
            item = self.queue.dequeue_wait(0.2)
            if item is None:
                continue
            item_id, payload = item
            try:
                self.provision(ProvisionRequest.from_value(payload))
            except Exception:
                continue  # left unacked: redelivered after the visibility timeout
            self.queue.ack(item_id)
