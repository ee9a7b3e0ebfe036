"""Wires every component into one runnable platform process.

Topology: a shared metadata store and blob store; a provisioning queue
consumed by the provisioner; N task-manager instances behind a
round-robin pool; an executor pool feeding completions through a durable
pump back into the managers; one HTTP listener serving the gateway, the
developer APIs, and the state-storage blob endpoint.
"""

from __future__ import annotations

import io
import time
import uuid
from typing import Callable

from .blobs import BlobStore, LocalBlobClient, StateContent, StorageAdapter
from .config import PlatformConfig
from .controller import DeploymentRegistry, ObjectController, Provisioner
from .executor import BUILTINS, CompletionPump, ExecutorService, RoutingTable, TaskEnvelope
from .gateway import ContentCache, Gateway, InstancePool
from .httpd import PlatformServer
from .queueing import DurableQueue
from .store import MetadataStore
from .taskmanager import TaskManager


class Platform:
    def __init__(
        self,
        config: "PlatformConfig | None" = None,
        clock: Callable[[], float] = time.time,
        id_factory: "Callable[[], str] | None" = None,
    ):
        self.config = config or PlatformConfig()
        self.clock = clock
        self.id_factory = id_factory or (lambda: uuid.uuid4().hex)

        self.store = MetadataStore(
            cache_enabled=self.config.metadata_cache, cache_ttl=self.config.spec_cache_ttl_secs
        )
        self.blobs = BlobStore(self.config.blob_root, self.config.load_secret())
        self.adapter = StorageAdapter(
            self.store, self.blobs, url_base=self.base_url, http_fetch=self._relay_fetch
        )
        self.blob_client = LocalBlobClient(self.blobs)

        self.provision_queue = DurableQueue()
        self.deployments = DeploymentRegistry(self.clock)
        self.routing = RoutingTable()
        self.controller = ObjectController(
            self.store,
            self.adapter,
            self.provision_queue,
            deployments=self.deployments,
            clock=self.clock,
            id_factory=self.id_factory,
        )
        self.provisioner = Provisioner(
            self.provision_queue,
            self.store,
            self.routing,
            self.deployments,
            builtin_names=lambda: set(BUILTINS),
        )

        self.pump = CompletionPump(self._deliver_completion)
        self.executor = ExecutorService(
            self.routing,
            self.pump.handle,
            self.blob_client,
            pool_size=self.config.worker_pool_size,
            deadline=self.config.executor_deadline_secs,
            clock=self.clock,
        )

        managers = [
            TaskManager(
                self.store,
                self.adapter,
                dispatcher=self._dispatcher(f"tm-{i}"),
                instance_id=f"tm-{i}",
                clock=self.clock,
                id_factory=self.id_factory,
                sync_timeout=self.config.sync_timeout_secs,
                poll_interval=self.config.poll_interval_secs,
                executor_deadline=self.config.executor_deadline_secs,
            )
            for i in range(max(1, self.config.task_manager_instances))
        ]
        self.pool = InstancePool(managers)

        self.cache = ContentCache(self.config.cache_capacity_bytes)
        self.gateway = Gateway(
            self.pool,
            self.adapter,
            self.controller,
            self.deployments,
            cache=self.cache,
            state_delivery_mode=self.config.state_delivery_mode,
            sync_timeout=self.config.sync_timeout_secs,
        )
        host, port = self.config.host_port()
        self.server = PlatformServer(host, port, self.gateway, self.blobs)
        self._session = None
        self._started = False

    # -- wiring helpers -----------------------------------------------------------

    def _dispatcher(self, instance_id: str):
        return lambda task: self.executor.route_task(TaskEnvelope.wrap(task, instance_id))

    def _deliver_completion(self, completion) -> None:
        self.pool.deliver_completion(completion)

    def _http_session(self):
        if self._session is None:
            import requests
            from requests.adapters import HTTPAdapter

            self._session = requests.Session()
            self._session.mount("http://", HTTPAdapter(pool_maxsize=64))
        return self._session

    def _relay_fetch(self, url: str) -> StateContent:
        # Relayed payloads cross the state-storage HTTP boundary for real.
        from .errors import AccessDenied, NotFound

        resp = self._http_session().get(url)
        if resp.status_code == 404:
            raise NotFound(url)
        if resp.status_code != 200:
            raise AccessDenied(f"relay fetch failed: {resp.status_code}")
        return StateContent(stream=io.BytesIO(resp.content), size=len(resp.content))

    def base_url(self) -> str:
        if self._started:
            host, port = self.server.address
            return f"http://{host}:{port}"
        return "http://oaas.local"

    # -- lifecycle -----------------------------------------------------------------

    def start(self) -> "Platform":
        if self._started:
            return self
        if self.config.snapshot_path:
            import os

            if os.path.exists(self.config.snapshot_path):
                self.store.snapshot_load(self.config.snapshot_path)
                self._reconcile_deployments()
        self.server.start()
        self._started = True
        self.provisioner.start()
        self.pump.start()
        return self

    def _reconcile_deployments(self) -> None:
        """Re-provision every persisted task function after a restart.

        Routing and deployment state are process-local; the snapshot only
        carries the store. Provisioning is idempotent, so enqueueing every
        function again is safe.
        """
        from . import specmodel as sm
        from .controller import ProvisionRequest

        for key in self.store.list_keys("function"):
            record = self.store.get("function", key)
            spec = sm.function_from_document(record.value["spec"], sm.package_of(key))
            if spec.kind != "task":
                continue
            self.deployments.set(key, "pending", "re-provisioning after restart")
            self.provision_queue.enqueue(ProvisionRequest(key, record.version, "deploy").to_value())

    def stop(self) -> None:
        if not self._started:
            return
        self.pump.stop()
        self.provisioner.stop()
        self.executor.shutdown()
        self.server.stop()
        if self._session is not None:
            self._session.close()
            self._session = None
        if self.config.snapshot_path:
            self.store.snapshot_save(self.config.snapshot_path)
        self._started = False

    def __enter__(self) -> "Platform":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
