"""Object metadata records.

An object record carries everything the platform knows about one object:
class, lifecycle status, structured state (piggybacked on the metadata),
blob references for unstructured state, and provenance. Once an object
reaches COMPLETED its structured state and blob references never change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

PENDING = "PENDING"
RUNNING = "RUNNING"
COMPLETED = "COMPLETED"
FAILED = "FAILED"

TERMINAL = (COMPLETED, FAILED)


@dataclass
class ObjectRecord:
    id: str
    class_name: str
    status: str
    structured_state: dict = field(default_factory=dict)
    unstructured_keys: dict[str, dict] = field(default_factory=dict)  # key -> blob path
    origin: "dict | None" = None  # {sourceObjectIds, function, args} for function outputs
    graph: "dict | None" = None  # {graphId, node} when produced by a macro step
    failure_cause: "str | None" = None
    class_version: int = 1
    created_at: int = 0  # Unix millis
    updated_at: int = 0

    def to_value(self) -> dict:
        value: dict[str, Any] = {
            "id": self.id,
            "class": self.class_name,
            "status": self.status,
            "structuredState": self.structured_state,
            "unstructuredKeys": self.unstructured_keys,
            "origin": self.origin,
            "classVersion": self.class_version,
            "createdAt": self.created_at,
            "updatedAt": self.updated_at,
        }
        if self.graph is not None:
            value["graph"] = self.graph
        if self.failure_cause is not None:
            value["failureCause"] = self.failure_cause
        return value

    @classmethod
    def from_value(cls, value: dict) -> "ObjectRecord":
        return cls(
            id=value["id"],
            class_name=value["class"],
            status=value["status"],
            structured_state=value.get("structuredState", {}),
            unstructured_keys=value.get("unstructuredKeys", {}),
            origin=value.get("origin"),
            graph=value.get("graph"),
            failure_cause=value.get("failureCause"),
            class_version=value.get("classVersion", 1),
            created_at=value.get("createdAt", 0),
            updated_at=value.get("updatedAt", 0),
        )

    @property
    def terminal(self) -> bool:
        return self.status in TERMINAL

    def status_view(self) -> dict:
        """What get_status / the REST surface reports for this object."""
        view: dict[str, Any] = {
            "id": self.id,
            "class": self.class_name,
            "status": self.status,
            "origin": self.origin,
            "availableContentKeys": sorted(self.unstructured_keys) if self.status == COMPLETED else [],
            "structuredState": self.structured_state,
            "createdAt": self.created_at,
            "updatedAt": self.updated_at,
        }
        if self.failure_cause is not None:
            view["failureCause"] = self.failure_cause
        return view
