"""Exception hierarchy shared across the platform.

Every error that crosses a module boundary derives from OaasError so callers
can distinguish platform failures from programming bugs. HTTP handlers map
these onto status codes via ``http_status``.
"""

from __future__ import annotations


class OaasError(Exception):
    """Base class for all platform errors."""

    http_status = 500


class PackageSyntaxError(OaasError):
    """The package document is not well-formed YAML/JSON."""

    http_status = 400


class SchemaError(OaasError):
    """The package document violates the declaration schema.

    ``path`` points at the offending element, e.g. ``classes[1].name``.
    """

    http_status = 400

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ValidationFailed(OaasError):
    """Package validation produced one or more report entries."""

    http_status = 400

    def __init__(self, errors: list):
        super().__init__("package validation failed: " + "; ".join(str(e) for e in errors))
        self.errors = errors


class OaiSyntaxError(OaasError):
    """Malformed object-access expression. ``offset`` is the byte position."""

    http_status = 400

    def __init__(self, offset: int, message: str):
        super().__init__(f"at offset {offset}: {message}")
        self.offset = offset


class UnknownClass(OaasError):
    http_status = 404


class CyclicInheritance(OaasError):
    http_status = 400


class UnknownBinding(OaasError):
    http_status = 404


class UnknownFunction(OaasError):
    http_status = 404


class UnknownObject(OaasError):
    http_status = 404


class UnknownStateKey(OaasError):
    http_status = 404


class AccessDenied(OaasError):
    http_status = 403


class NotFound(OaasError):
    http_status = 404


class VersionConflict(OaasError):
    """Compare-and-set failed; ``current`` carries the version now in force."""

    http_status = 409

    def __init__(self, current: int, message: str = ""):
        super().__init__(message or f"version conflict, current={current}")
        self.current = current


class StorageError(OaasError):
    http_status = 500


class CorruptSnapshot(OaasError):
    http_status = 500


class MissingBlob(OaasError):
    """Upload confirmation found declared blobs absent."""

    http_status = 409

    def __init__(self, keys: list):
        super().__init__(f"missing blobs for keys: {', '.join(keys)}")
        self.keys = list(keys)


class SourceNotCompleted(OaasError):
    """An invocation named a source object that is not COMPLETED."""

    http_status = 409


class InvokeTimeout(OaasError):
    """Synchronous invocation exceeded its wait budget."""

    http_status = 504


class InstanceDown(OaasError):
    """A task-manager instance was stopped; callers should pick another."""

    http_status = 503
