"""Shared fixtures: an in-process platform harness wired for direct driving."""

from __future__ import annotations

import itertools

import pytest

from oaas.blobs import BlobStore, LocalBlobClient, StorageAdapter
from oaas.controller import DeploymentRegistry, ObjectController, Provisioner
from oaas.executor import BUILTINS, RoutingTable
from oaas.queueing import DurableQueue
from oaas.store import MetadataStore
from oaas.taskmanager import TaskManager
from oaas.tasks import Task, TaskCompletion

BENCH_PACKAGE = """
name: bench
classes:
  - name: textobj
    stateKeys:
      - {key: str, form: unstructured, provider: bench}
    bindings:
      - {name: concat, access: public, functionRef: concat, outputClass: textobj}
      - {name: hidden, access: internal, functionRef: concat, outputClass: textobj}
  - name: jsonobj
    stateKeys:
      - {key: doc, form: structured}
    bindings:
      - {name: update, access: public, functionRef: json_update, outputClass: jsonobj}
  - name: binobj
    stateKeys:
      - {key: data, form: unstructured, provider: bench}
    bindings:
      - {name: burn, access: public, functionRef: cpu_burn, outputClass: binobj}
functions:
  - {name: concat, kind: task, executor: {mode: builtin, target: concat}}
  - {name: json_update, kind: task, executor: {mode: builtin, target: json_update}}
  - {name: cpu_burn, kind: task, executor: {mode: builtin, target: cpu_burn}}
"""

# A parentless class with one no-op-style binding, used to build arbitrary
# dataflow graphs programmatically in tests.
NODE_PACKAGE = """
name: flow
classes:
  - name: node
    stateKeys: []
    bindings:
      - {name: go, access: public, functionRef: step, outputClass: node}
functions:
  - {name: step, kind: task, executor: {mode: builtin, target: cpu_burn}}
"""


class SequentialIds:
    """Deterministic id factory: ids become id-0001, id-0002, ..."""

    def __init__(self, prefix: str = "id"):
        self.prefix = prefix
        self.counter = itertools.count(1)

    def __call__(self) -> str:
        return f"{self.prefix}-{next(self.counter):04d}"


class FrozenClock:
    def __init__(self, at: float = 1_700_000_000.0):
        self.at = at

    def __call__(self) -> float:
        return self.at


class Harness:
    """Everything wired against one store, with a recording dispatcher.

    Dispatched tasks pile up in ``dispatched``; tests drain them manually
    (deciding success, failure, duplication, ordering) or call ``pump`` to
    run builtins inline and feed completions back until quiescent.
    """

    def __init__(self, tmp_path, clock=None, id_factory=None, cache_enabled=True):
        self.clock = clock or FrozenClock()
        self.id_factory = id_factory or SequentialIds()
        self.store = MetadataStore(cache_enabled=cache_enabled)
        self.blobs = BlobStore(str(tmp_path / "blobs"), secret=b"harness-secret")
        self.adapter = StorageAdapter(self.store, self.blobs)
        self.blob_client = LocalBlobClient(self.blobs)
        self.queue = DurableQueue(visibility_timeout=0.2)
        self.deployments = DeploymentRegistry(self.clock)
        self.routing = RoutingTable()
        self.controller = ObjectController(
            self.store,
            self.adapter,
            self.queue,
            deployments=self.deployments,
            clock=self.clock,
            id_factory=self.id_factory,
        )
        self.provisioner = Provisioner(
            self.queue,
            self.store,
            self.routing,
            self.deployments,
            builtin_names=lambda: set(BUILTINS),
        )
        self.dispatched: list[Task] = []
        self._tm_count = itertools.count()

    def new_tm(self, dispatcher=None, **kwargs) -> TaskManager:
        return TaskManager(
            self.store,
            self.adapter,
            dispatcher if dispatcher is not None else self.dispatched.append,
            instance_id=f"tm-{next(self._tm_count)}",
            clock=self.clock,
            id_factory=self.id_factory,
            **kwargs,
        )

    def deploy(self, package_yaml: str) -> dict:
        summary = self.controller.register_package(package_yaml)
        self.provisioner.drain()
        return summary

    def create_text_object(self, content: bytes = b"hello", cls: str = "bench.textobj", object_id=None):
        record, urls = self.controller.instantiate_object(cls, upload_keys=["str"], object_id=object_id)
        self.blob_client.put(urls["str"], content)
        return self.controller.confirm_upload(record.id)

    def create_json_object(self, pairs: dict, cls: str = "bench.jsonobj", object_id=None):
        record, _ = self.controller.instantiate_object(cls, structured_state={"pairs": pairs}, object_id=object_id)
        return record

    def run_task(self, task: Task) -> TaskCompletion:
        """Execute a task's builtin inline (no pool, no threads)."""
        route = self.routing.lookup(task.function_name)
        assert route is not None, f"no route for {task.function_name}"
        fn = BUILTINS[route.binding.target]
        return fn(task, self.blob_client, self.clock)

    def success_completion(self, task: Task, structured_output=None) -> TaskCompletion:
        return TaskCompletion(
            task.task_id, task.output_object.id, True, structured_output, None, int(self.clock() * 1000)
        )

    def failure_completion(self, task: Task, detail="boom") -> TaskCompletion:
        return TaskCompletion(
            task.task_id, task.output_object.id, False, None, detail, int(self.clock() * 1000)
        )

    def pump(self, tm: TaskManager, execute: bool = True, fail_tasks=()) -> list[Task]:
        """Drain the dispatch queue until quiescent, returning the order."""
        order = []
        while self.dispatched:
            task = self.dispatched.pop(0)
            order.append(task)
            if task.task_id in fail_tasks or task.output_object.id in fail_tasks:
                completion = self.failure_completion(task)
            elif execute:
                completion = self.run_task(task)
            else:
                completion = self.success_completion(task)
            tm.on_completion(completion)
        return order

    def inline_dispatcher(self, tm_ref: list) -> callable:
        """Dispatcher that executes builtins synchronously on dispatch."""

        def dispatch(task: Task) -> None:
            completion = self.run_task(task)
            tm_ref[0].on_completion(completion)

        return dispatch


@pytest.fixture
def harness(tmp_path):
    h = Harness(tmp_path)
    h.deploy(BENCH_PACKAGE)
    h.deploy(NODE_PACKAGE)
    return h


# ---------------------------------------------------------------------------
# Graph-building helpers shared by the dataflow tests


def make_macro(steps: dict[str, list[str]], output: str):
    """Build a macro over flow.node objects from {step: [dependencies]}.

    The first dependency becomes the target (or $self for sources); the
    rest become inputs.
    """
    from oaas.specmodel import MacroSpec, MacroStep

    ordered = topo_sort(steps)
    macro_steps = []
    for name in ordered:
        deps = steps[name]
        target = deps[0] if deps else "$self"
        macro_steps.append(
            MacroStep(name=name, target=target, function="go", args={}, inputs=list(deps[1:]))
        )
    return MacroSpec(steps=macro_steps, output=output)


def topo_sort(steps: dict[str, list[str]]) -> list[str]:
    order, seen = [], set()

    def visit(n):
        if n in seen:
            return
        seen.add(n)
        for d in steps[n]:
            visit(d)
        order.append(n)

    for n in sorted(steps):
        visit(n)
    return order


def build_graph(h: Harness, tm, steps: dict[str, list[str]], output: str) -> dict:
    main, _ = h.controller.instantiate_object("flow.node")
    macro = make_macro(steps, output)
    graph = tm.build_invocation_graph(macro, main.id, [], {}, "flow")
    tm.dispatch_ready(graph["graphId"])
    return graph


def enumerate_topological_orders(nodes, edges) -> list[list[str]]:
    """Brute-force oracle: every permutation consistent with the edges."""
    orders = []
    for perm in itertools.permutations(nodes):
        index = {n: i for i, n in enumerate(perm)}
        if all(index[a] < index[b] for a, b in edges):
            orders.append(list(perm))
    return orders


def dispatched_node_names(h: Harness, tasks) -> list[str]:
    return [h.store.get("object", t.output_object.id).value["graph"]["node"] for t in tasks]
