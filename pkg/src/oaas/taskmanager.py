"""Invocation handling: task generation, macro graphs, completion driving.

A task manager instance holds no coordination state of its own; object
records and invocation graphs live in the metadata store and every
transition is a compare-and-set, so any number of instances can race on
the same graph and a fresh instance can pick up wherever a dead one
stopped. Completions may arrive duplicated, late, or for unknown tasks;
all of those are absorbed.

Graph nodes move WAITING -> READY -> RUNNING -> COMPLETED, or FAILED /
SKIPPED on the failure path. A node is READY exactly when all of its
producers are COMPLETED; claiming it (READY -> RUNNING) is the CAS that
makes dispatch exactly-once even under duplicated completion delivery.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass
from typing import Any, Callable

from . import specmodel as sm
from .blobs import StorageAdapter
from .errors import (
    AccessDenied,
    InstanceDown,
    InvokeTimeout,
    SchemaError,
    SourceNotCompleted,
    UnknownFunction,
    UnknownObject,
    VersionConflict,
)
from .records import COMPLETED, FAILED, PENDING, ObjectRecord
from .registry import StoreRegistry
from .store import MetadataStore
from .tasks import Task, TaskCompletion, TaskObjectView, TaskOutputView

WAITING = "WAITING"
READY = "READY"
RUNNING = "RUNNING"
SKIPPED = "SKIPPED"

NODE_TERMINAL = (COMPLETED, FAILED, SKIPPED)


@dataclass
class InvokeResult:
    record: ObjectRecord
    content_key: "str | None" = None
    graph_id: "str | None" = None


class TaskManager:
    def __init__(
        self,
        store: MetadataStore,
        adapter: StorageAdapter,
        dispatcher: Callable[[Task], Any],
        instance_id: str = "tm-0",
        clock: Callable[[], float] = time.time,
        id_factory: "Callable[[], str] | None" = None,
        sync_timeout: float = 120.0,
        poll_interval: float = 0.05,
        executor_deadline: float = 60.0,
    ):
        self.store = store
        self.adapter = adapter
        self.dispatcher = dispatcher
        self.instance_id = instance_id
        self.clock = clock
        self.id_factory = id_factory or (lambda: uuid.uuid4().hex)
        self.registry = StoreRegistry(store)
        self.sync_timeout = sync_timeout
        self.poll_interval = poll_interval
        # Embedded URLs must outlive the execution deadline with margin.
        self.url_ttl = int(executor_deadline + 60)
        self._stopped = threading.Event()

    # -- lifecycle (multi-instance simulation) ---------------------------------

    def stop(self) -> None:
        """Simulate killing this instance: every entry point raises."""
        self._stopped.set()

    @property
    def stopped(self) -> bool:
        return self._stopped.is_set()

    def _check_alive(self) -> None:
        if self._stopped.is_set():
            raise InstanceDown(self.instance_id)

    def _now_ms(self) -> int:
        return int(self.clock() * 1000)

    # -- invocation ---------------------------------------------------------------

    def invoke(
        self,
        req: sm.OaiRequest,
        mode: str = "sync",
        caller_context: str = "external",
        input_ids: "list[str] | None" = None,
        timeout: "float | None" = None,
    ) -> InvokeResult:
        """Run a function of an object, or address its state directly.

        Sync mode blocks until the output object is terminal; async returns
        the prospective output record immediately after persistence.
        """
        self._check_alive()
        input_ids = list(input_ids or [])
        main = self._load_object(req.main_object)

        if req.function is None:
            # Plain state access: no task is generated.
            if req.content_key is not None and main.status != COMPLETED:
                raise SourceNotCompleted(f"object {main.id} is {main.status}")
            return InvokeResult(record=main, content_key=req.content_key)

        resolved = sm.resolve_class(main.class_name, self.registry)
        binding = resolved.binding(req.function)
        if not sm.check_access(caller_context, resolved, req.function):
            raise AccessDenied(f"binding {req.function!r} on {resolved.name} is internal")
        fn = self.registry.get_function(binding.function_ref)
        if fn is None:
            raise UnknownFunction(binding.function_ref)

        graph_id = None
        if fn.kind == "task":
            task = self.generate_task(main.id, binding, dict(req.args), input_ids)
            output_id = task.output_object.id
            self.dispatcher(task)
        else:
            graph_value = self.build_invocation_graph(
                fn.macro, main.id, input_ids, dict(req.args), sm.package_of(binding.function_ref)
            )
            graph_id = graph_value["graphId"]
            output_id = graph_value["rootOutputObjectId"]
            self.dispatch_ready(graph_id)

        if mode == "async":
            return InvokeResult(
                record=self._load_object(output_id), content_key=req.content_key, graph_id=graph_id
            )
        record = self.wait_for_terminal(output_id, timeout if timeout is not None else self.sync_timeout)
        return InvokeResult(record=record, content_key=req.content_key, graph_id=graph_id)

    def wait_for_terminal(self, object_id: str, timeout: float) -> ObjectRecord:
        deadline = time.monotonic() + timeout
        while True:
            record = self._load_object(object_id)
            if record.terminal:
                return record
            if time.monotonic() >= deadline:
                raise InvokeTimeout(f"object {object_id} still {record.status} after {timeout}s")
            time.sleep(self.poll_interval)

    # -- task generation ------------------------------------------------------------

    def generate_task(
        self,
        main_object_id: str,
        binding: sm.FunctionBinding,
        args: dict[str, str],
        input_ids: "list[str] | None" = None,
        output_object_id: "str | None" = None,
        graph_ref: "dict | None" = None,
        attempt: int = 1,
    ) -> Task:
        """Bundle everything a stateless executor needs into one task.

        Creates the output object record (PENDING, provenance filled)
        unless one was pre-allocated by a graph build; snapshots structured
        state by value and embeds presigned URLs for all blob access.
        """
        self._check_alive()
        main = self._load_object(main_object_id)
        if main.status != COMPLETED:
            raise SourceNotCompleted(f"main object {main_object_id} is {main.status}")
        inputs = [self._load_object(i) for i in (input_ids or [])]
        for rec in inputs:
            if rec.status != COMPLETED:
                raise SourceNotCompleted(f"input object {rec.id} is {rec.status}")

        if output_object_id is None:
            output = self._allocate_output(
                binding.output_class,
                origin={
                    "sourceObjectIds": [main.id] + [r.id for r in inputs],
                    "function": binding.name,
                    "args": args,
                },
                graph_ref=graph_ref,
            )
        else:
            output = self._load_object(output_object_id)

        return Task(
            task_id=f"{output.id}:{attempt}",
            function_name=binding.function_ref,
            main_object=self._object_view(main),
            inputs=[self._object_view(r) for r in inputs],
            output_object=TaskOutputView(
                id=output.id,
                put_urls=self.adapter.allocate_upload(output.id, sorted(output.unstructured_keys), self.url_ttl),
            ),
            args=args,
            issued_at=self._now_ms(),
            attempt=attempt,
        )

    def _object_view(self, record: ObjectRecord) -> TaskObjectView:
        return TaskObjectView(
            id=record.id,
            structured_state=record.structured_state,
            get_urls=self.adapter.presigned_get_urls(record.id, self.url_ttl),
        )

    def _allocate_output(
        self, output_class: str, origin: dict, graph_ref: "dict | None" = None
    ) -> ObjectRecord:
        resolved = sm.resolve_class(output_class, self.registry)
        oid = self.id_factory()
        now = self._now_ms()
        record = ObjectRecord(
            id=oid,
            class_name=output_class,
            status=PENDING,
            structured_state={},
            unstructured_keys={
                s.key: {"bucket": s.provider, "objectId": oid, "key": s.key}
                for s in resolved.unstructured_keys()
            },
            origin=origin,
            graph=graph_ref,
            class_version=self.registry.class_record_version(output_class),
            created_at=now,
            updated_at=now,
        )
        self.store.put("object", oid, record.to_value(), expected_version=0)
        return record

    # -- invocation graphs -------------------------------------------------------------

    def build_invocation_graph(
        self,
        macro: sm.MacroSpec,
        main_object_id: str,
        input_ids: "list[str] | None",
        args: dict[str, str],
        macro_package: str,
    ) -> dict:
        """Expand a macro into a persisted graph with pre-allocated outputs.

        Each node captures its resolved target/input object ids, the
        qualified function to route to, and substituted arguments, so
        claiming a node later needs no spec resolution. The graph is
        persisted before anything is dispatched.
        """
        self._check_alive()
        input_ids = list(input_ids or [])
        main = self._load_object(main_object_id)
        if main.status != COMPLETED:
            raise SourceNotCompleted(f"main object {main_object_id} is {main.status}")
        input_records = [self._load_object(i) for i in input_ids]
        for rec in input_records:
            if rec.status != COMPLETED:
                raise SourceNotCompleted(f"input object {rec.id} is {rec.status}")

        graph_id = self.id_factory()
        step_names = {s.name for s in macro.steps}
        # local name -> (object id, qualified class)
        produced: dict[str, tuple[str, str]] = {}
        nodes: dict[str, dict] = {}

        def resolve_ref(ref: str, where: str) -> tuple[str, str]:
            if ref == sm.SELF_REF:
                return main.id, main.class_name
            m = sm.INPUT_REF_RE.match(ref)
            if m:
                idx = int(m.group(1))
                if idx >= len(input_records):
                    raise SchemaError(where, f"input index {idx} out of range")
                return input_records[idx].id, input_records[idx].class_name
            if ref in produced:
                return produced[ref]
            raise SchemaError(where, f"unresolved reference {ref!r}")

        for i, step in enumerate(macro.steps):
            where = f"macro.steps[{i}]"
            target_id, target_class = resolve_ref(step.target, where)
            resolved = sm.resolve_class(target_class, self.registry)
            binding = resolved.binding(step.function)
            context = "same-package" if sm.package_of(target_class) == macro_package else "external"
            if not sm.check_access(context, resolved, step.function):
                raise AccessDenied(f"step {step.name!r}: binding {step.function!r} is internal to {sm.package_of(target_class)}")
            step_fn = self.registry.get_function(binding.function_ref)
            if step_fn is None:
                raise UnknownFunction(binding.function_ref)
            if step_fn.kind != "task":
                raise SchemaError(where, f"step {step.name!r} binds a macro; macros do not nest")
            try:
                step_args = sm.substitute_args(step.args, args)
            except KeyError as exc:
                raise SchemaError(f"{where}.args", str(exc)) from None
            resolved_inputs = [resolve_ref(r, where)[0] for r in step.inputs]

            output = self._allocate_output(
                binding.output_class,
                origin={
                    "sourceObjectIds": [target_id] + resolved_inputs,
                    "function": step.function,
                    "args": step_args,
                },
                graph_ref={"graphId": graph_id, "node": step.name},
            )
            produced[step.name] = (output.id, binding.output_class)
            nodes[step.name] = {
                "function": step.function,
                "functionRef": binding.function_ref,
                "targetRef": step.target,
                "inputRefs": list(step.inputs),
                "targetObjectId": target_id,
                "inputObjectIds": resolved_inputs,
                "args": step_args,
                "outputObjectId": output.id,
                "status": WAITING,
                "failureCause": None,
            }

        edges = [[a, b] for a, b in sm.macro_edges(macro)]
        consumers = {b for _, b in edges}
        for name, node in nodes.items():
            if name not in consumers:
                node["status"] = READY

        graph_value = {
            "graphId": graph_id,
            "outputNode": macro.output,
            "rootOutputObjectId": produced[macro.output][0],
            "mainObjectId": main.id,
            "nodes": nodes,
            "edges": edges,
            "createdAt": self._now_ms(),
        }
        self.store.put("graph", graph_id, graph_value, expected_version=0)
        return graph_value

    def get_graph(self, graph_id: str) -> dict:
        record = self.store.get_or_none("graph", graph_id)
        if record is None:
            raise UnknownObject(f"graph {graph_id}")
        return record.value

    # -- completion handling ---------------------------------------------------------

    def on_completion(self, completion: TaskCompletion) -> list[Task]:
        """Apply a completion and dispatch whatever became ready.

        Safe under duplicate and out-of-order delivery: terminal objects
        and nodes are left untouched, and the READY -> RUNNING claim makes
        downstream dispatch happen exactly once per node.
        """
        self._check_alive()
        stored = self.store.get_or_none("object", completion.output_object_id)
        if stored is None:
            return []  # unknown task: acknowledge and drop
        record = ObjectRecord.from_value(stored.value)

        if not record.terminal:
            self._settle_object(stored.version, record, completion)
            record = self._load_object(completion.output_object_id)

        if record.graph is None:
            return []
        # Drive the graph from the object's settled status, not the
        # completion flag: the first delivery settles the record, and any
        # conflicting late delivery (e.g. a synthesized timeout racing a
        # genuine success) must not overturn it.
        graph_id, node_name = record.graph["graphId"], record.graph["node"]
        if record.status == COMPLETED:
            self._complete_node(graph_id, node_name)
            return self.dispatch_ready(graph_id)
        if record.status == FAILED:
            self.propagate_failure(graph_id, node_name, record.failure_cause or "failed")
        return []

    def _settle_object(self, version: int, record: ObjectRecord, completion: TaskCompletion) -> None:
        while True:
            if completion.success:
                record.status = COMPLETED
                if completion.structured_output is not None:
                    # Whole replacement, not a deep merge.
                    record.structured_state = completion.structured_output
            else:
                record.status = FAILED
                record.failure_cause = completion.error_detail
            record.updated_at = self._now_ms()
            try:
                self.store.put("object", record.id, record.to_value(), expected_version=version)
                return
            except VersionConflict:
                stored = self.store.get("object", record.id)
                record = ObjectRecord.from_value(stored.value)
                version = stored.version
                if record.terminal:
                    return  # someone else settled it

    def _complete_node(self, graph_id: str, node_name: str) -> None:
        """Mark a node COMPLETED and promote eligible waiters to READY."""

        def update(graph: dict) -> "dict | None":
            node = graph["nodes"].get(node_name)
            if node is None or node["status"] in NODE_TERMINAL:
                return None
            node["status"] = COMPLETED
            producers: dict[str, list[str]] = {}
            for a, b in graph["edges"]:
                producers.setdefault(b, []).append(a)
            for name, nv in graph["nodes"].items():
                if nv["status"] != WAITING:
                    continue
                if all(graph["nodes"][p]["status"] == COMPLETED for p in producers.get(name, [])):
                    nv["status"] = READY
            return graph

        self._update_graph(graph_id, update)

    def dispatch_ready(self, graph_id: str) -> list[Task]:
        """Claim every READY node (CAS to RUNNING), then dispatch its task.

        Claimed in lexicographic node order for deterministic dispatch
        sequencing among simultaneously ready nodes.
        """
        claimed: list[str] = []

        def update(graph: dict) -> "dict | None":
            claimed.clear()
            for name in sorted(graph["nodes"]):
                if graph["nodes"][name]["status"] == READY:
                    graph["nodes"][name]["status"] = RUNNING
                    claimed.append(name)
            return graph if claimed else None

        graph = self._update_graph(graph_id, update)
        tasks = []
        for name in claimed:
            node = graph["nodes"][name]
            task = self._task_for_node(node)
            tasks.append(task)
            self.dispatcher(task)
        return tasks

    def _task_for_node(self, node: dict) -> Task:
        main = self._load_object(node["targetObjectId"])
        inputs = [self._load_object(i) for i in node["inputObjectIds"]]
        output = self._load_object(node["outputObjectId"])
        return Task(
            task_id=f"{output.id}:1",
            function_name=node["functionRef"],
            main_object=self._object_view(main),
            inputs=[self._object_view(r) for r in inputs],
            output_object=TaskOutputView(
                id=output.id,
                put_urls=self.adapter.allocate_upload(output.id, sorted(output.unstructured_keys), self.url_ttl),
            ),
            args=dict(node["args"]),
            issued_at=self._now_ms(),
        )

    def propagate_failure(self, graph_id: str, node_name: str, cause: str) -> dict:
        """Fail a node and skip its transitive consumers.

        Skipped nodes never dispatch; their pre-allocated output objects
        become FAILED with the chained cause. Branches not downstream of
        the failure keep running.
        """
        self._check_alive()
        to_fail: list[tuple[str, str]] = []  # (object id, cause)

        def update(graph: dict) -> "dict | None":
            to_fail.clear()
            nodes = graph["nodes"]
            node = nodes.get(node_name)
            if node is None or node["status"] == COMPLETED:
                return None  # completed nodes are immutable history
            changed = False
            if node["status"] not in (FAILED, SKIPPED):
                node["status"] = FAILED
                node["failureCause"] = cause
                to_fail.append((node["outputObjectId"], cause))
                changed = True
            chained = f"skipped: upstream {node_name} failed: {cause}"
            for name in sorted(_descendants(graph["edges"], node_name)):
                nv = nodes[name]
                if nv["status"] in (FAILED, SKIPPED):
                    continue
                nv["status"] = SKIPPED
                nv["failureCause"] = chained
                to_fail.append((nv["outputObjectId"], chained))
                changed = True
            return graph if changed else None

        graph = self._update_graph(graph_id, update)
        for object_id, fail_cause in to_fail:
            self._fail_object(object_id, fail_cause)
        return graph

    def _fail_object(self, object_id: str, cause: str) -> None:
        while True:
            stored = self.store.get_or_none("object", object_id)
            if stored is None:
                return
            record = ObjectRecord.from_value(stored.value)
            if record.terminal:
                return
            record.status = FAILED
            record.failure_cause = cause
            record.updated_at = self._now_ms()
            try:
                self.store.put("object", object_id, record.to_value(), expected_version=stored.version)
                return
            except VersionConflict:
                continue

    def _update_graph(self, graph_id: str, fn: Callable[[dict], "dict | None"]) -> dict:
        """CAS-retry loop applying a functional update to a graph record."""
        while True:
            record = self.store.get_or_none("graph", graph_id)
            if record is None:
                raise UnknownObject(f"graph {graph_id}")
            updated = fn(record.value)
            if updated is None:
                return record.value
            try:
                self.store.put("graph", graph_id, updated, expected_version=record.version)
                return updated
            except VersionConflict:
                continue

    # -- reads ------------------------------------------------------------------------

    def get_status(self, object_id: str) -> dict:
        return self._load_object(object_id).status_view()

    def _load_object(self, object_id: str) -> ObjectRecord:
        stored = self.store.get_or_none("object", object_id)
        if stored is None:
            raise UnknownObject(object_id)
        return ObjectRecord.from_value(stored.value)


def _descendants(edges: list, start: str) -> set:
    out: dict[str, list[str]] = {}
    for a, b in edges:
        out.setdefault(a, []).append(b)
    seen: set = set()
    frontier = [start]
    while frontier:
        current = frontier.pop()
        for nxt in out.get(current, []):
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return seen
