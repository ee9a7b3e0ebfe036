"""Spec registry backed by the metadata store's cached read path."""

from __future__ import annotations

from . import specmodel as sm
from .errors import NotFound
from .store import MetadataStore


class StoreRegistry(sm.SpecRegistry):
    """Resolves qualified class/function names to parsed specs.

    All reads go through the store's spec cache, which is what keeps the
    invocation hot path free of backing-store metadata reads once warm.
    """

    def __init__(self, store: MetadataStore):
        self.store = store

    def get_class(self, qualified: str) -> "sm.ClassSpec | None":
        try:
            record = self.store.get_spec_cached("class", qualified)
        except NotFound:
            return None
        return sm.class_from_document(record.value["spec"], sm.package_of(qualified))

    def get_function(self, qualified: str) -> "sm.FunctionSpec | None":
        try:
            record = self.store.get_spec_cached("function", qualified)
        except NotFound:
            return None
        return sm.function_from_document(record.value["spec"], sm.package_of(qualified))

    def class_record_version(self, qualified: str) -> int:
        return self.store.get_spec_cached("class", qualified).version
