"""Platform configuration: one file (TOML or JSON), camelCase keys."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass


@dataclass
class PlatformConfig:
    listen_addr: str = "127.0.0.1:0"  # port 0 binds an ephemeral port
    blob_root: str = "./oaas-data/blobs"
    snapshot_path: "str | None" = None
    hmac_secret_path: "str | None" = None
    sync_timeout_secs: float = 120.0
    cache_capacity_bytes: int = 256 * 1024 * 1024
    worker_pool_size: "int | None" = None
    state_delivery_mode: str = "redirect"  # redirect | relay
    metadata_cache: bool = True
    spec_cache_ttl_secs: "float | None" = None
    task_manager_instances: int = 2
    executor_deadline_secs: float = 60.0
    poll_interval_secs: float = 0.05

    KEY_MAP = {
        "listenAddr": "listen_addr",
        "blobRoot": "blob_root",
        "snapshotPath": "snapshot_path",
        "hmacSecretPath": "hmac_secret_path",
        "syncTimeoutSecs": "sync_timeout_secs",
        "cacheCapacityBytes": "cache_capacity_bytes",
        "workerPoolSize": "worker_pool_size",
        "stateDeliveryMode": "state_delivery_mode",
        "metadataCache": "metadata_cache",
        "specCacheTtlSecs": "spec_cache_ttl_secs",
        "taskManagerInstances": "task_manager_instances",
        "executorDeadlineSecs": "executor_deadline_secs",
        "pollIntervalSecs": "poll_interval_secs",
    }

    @classmethod
    def from_mapping(cls, raw: dict) -> "PlatformConfig":
        kwargs = {}
        for key, value in raw.items():
            attr = cls.KEY_MAP.get(key)
            if attr is None:
                raise ValueError(f"unknown configuration key {key!r}")
            kwargs[attr] = value
        config = cls(**kwargs)
        if config.state_delivery_mode not in ("redirect", "relay"):
            raise ValueError("stateDeliveryMode must be 'redirect' or 'relay'")
        if isinstance(config.metadata_cache, str):
            config.metadata_cache = config.metadata_cache == "on"
        return config

    @classmethod
    def load(cls, path: str) -> "PlatformConfig":
        with open(path, "rb") as fh:
            data = fh.read()
        if path.endswith(".toml"):
            import tomli

            return cls.from_mapping(tomli.loads(data.decode("utf-8")))
        return cls.from_mapping(json.loads(data.decode("utf-8")))

    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen_addr.rpartition(":")
        return host or "127.0.0.1", int(port)

    def load_secret(self) -> bytes:
        if self.hmac_secret_path and os.path.exists(self.hmac_secret_path):
            with open(self.hmac_secret_path, "rb") as fh:
                return fh.read().strip()
        return os.urandom(32)
