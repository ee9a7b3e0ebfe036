"""Function execution plane.

Tasks arrive wrapped in an envelope (id/type/source/data, structurally
CloudEvents-shaped), get routed by function name to either a builtin
running on the worker pool or a remote HTTP function, and always produce
exactly one completion: success, function-reported failure, synthesized
transport failure, or synthesized timeout. Builtins touch nothing but the
URLs embedded in their task.
"""

from __future__ import annotations

import hashlib
import math
import random
import string
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable

from .errors import AccessDenied, NotFound
from .specmodel import ExecutorBinding
from .queueing import DurableQueue
from .tasks import Task, TaskCompletion

ENVELOPE_TYPE = "oaas.task"


@dataclass
class TaskEnvelope:
    id: str
    source: str
    data: dict  # serialized Task
    type: str = ENVELOPE_TYPE

    def to_value(self) -> dict:
        return {"id": self.id, "type": self.type, "source": self.source, "data": self.data}

    @classmethod
    def from_value(cls, v: dict) -> "TaskEnvelope":
        return cls(id=v["id"], source=v.get("source", ""), data=v["data"], type=v.get("type", ENVELOPE_TYPE))

    @classmethod
    def wrap(cls, task: Task, source: str) -> "TaskEnvelope":
        return cls(id=task.task_id, source=source, data=task.to_value())

    def task(self) -> Task:
        return Task.from_value(self.data)


@dataclass
class Route:
    binding: ExecutorBinding
    spec_version: int


class RoutingTable:
    """Function name -> executor binding; only ready deployments appear."""

    def __init__(self):
        self._lock = threading.Lock()
        self._routes: dict[str, Route] = {}

    def bind(self, function_name: str, binding: ExecutorBinding, spec_version: int) -> None:
        with self._lock:
            self._routes[function_name] = Route(binding, spec_version)

    def lookup(self, function_name: str) -> "Route | None":
        with self._lock:
            return self._routes.get(function_name)

    def entries(self) -> dict[str, Route]:
        with self._lock:
            return dict(self._routes)


# ---------------------------------------------------------------------------
# Builtin workloads

ALNUM = string.ascii_letters + string.digits


def builtin_concat(task: Task, blob_client, clock: Callable[[], float] = time.time) -> TaskCompletion:
    """Append the "append" argument to the main object's "str" blob."""
    now = lambda: int(clock() * 1000)
    url = task.main_object.get_urls.get("str")
    if url is None:
        return _failure(task, "main object has no unstructured key 'str'", now())
    if "append" not in task.args:
        return _failure(task, "missing argument 'append'", now())
    out_url = task.output_object.put_urls.get("str")
    if out_url is None:
        return _failure(task, "output class has no unstructured key 'str'", now())
    try:
        data = blob_client.get(url)
        blob_client.put(out_url, data + task.args["append"].encode("utf-8"))
    except (AccessDenied, NotFound) as exc:
        return _failure(task, f"blob access failed: {exc}", now())
    return _success(task, None, now())


def builtin_json_update(task: Task, blob_client, clock: Callable[[], float] = time.time) -> TaskCompletion:
    """Double the key-value pairs under structuredState["pairs"].

    Fresh pairs use 10-byte keys and 40-byte values; pass a "seed"
    argument for reproducible output.
    """
    now = lambda: int(clock() * 1000)
    pairs = task.main_object.structured_state.get("pairs")
    if not isinstance(pairs, dict):
        return _failure(task, "structuredState has no 'pairs' object", now())
    seed = task.args.get("seed")
    rng = random.Random(seed) if seed is not None else random.Random()
    merged = dict(pairs)
    for _ in range(len(pairs)):
        key = _rand_string(rng, 10)
        while key in merged:
            key = _rand_string(rng, 10)
        merged[key] = _rand_string(rng, 40)
    output = dict(task.main_object.structured_state)
    output["pairs"] = merged
    return _success(task, output, now())


def builtin_cpu_burn(task: Task, blob_client, clock: Callable[[], float] = time.time) -> TaskCompletion:
    """Compute-heavy stand-in: hash-chain over the main blob.

    Runs iters_per_kib x ceil(size/1KiB) rounds of SHA-256 over the
    previous digest, then writes the final hex digest as the output blob.
    Work scales linearly with blob size by construction.
    """
    now = lambda: int(clock() * 1000)
    try:
        iters_per_kib = int(task.args.get("iters_per_kib", ""))
        if iters_per_kib < 0:
            raise ValueError
    except ValueError:
        return _failure(task, "argument 'iters_per_kib' must be a non-negative integer", now())
    data = b""
    if task.main_object.get_urls:
        first_key = sorted(task.main_object.get_urls)[0]
        try:
            data = blob_client.get(task.main_object.get_urls[first_key])
        except (AccessDenied, NotFound) as exc:
            return _failure(task, f"blob access failed: {exc}", now())
    digest = hashlib.sha256(data).digest()
    for _ in range(iters_per_kib * math.ceil(len(data) / 1024)):
        digest = hashlib.sha256(digest).digest()
    try:
        for url in task.output_object.put_urls.values():
            blob_client.put(url, digest.hex().encode("ascii"))
    except (AccessDenied, NotFound) as exc:
        return _failure(task, f"blob access failed: {exc}", now())
    return _success(task, None, now())


def _rand_string(rng: random.Random, length: int) -> str:
    return "".join(rng.choice(ALNUM) for _ in range(length))


def _success(task: Task, structured_output: "dict | None", at: int) -> TaskCompletion:
    return TaskCompletion(task.task_id, task.output_object.id, True, structured_output, None, at)


def _failure(task: Task, detail: str, at: int) -> TaskCompletion:
    return TaskCompletion(task.task_id, task.output_object.id, False, None, detail, at)


BUILTINS: dict[str, Callable] = {
    "concat": builtin_concat,
    "json_update": builtin_json_update,
    "cpu_burn": builtin_cpu_burn,
}


# ---------------------------------------------------------------------------
# Remote execution


class TransportError(Exception):
    """Endpoint unreachable; distinct from a function-reported failure."""


def remote_http_execute(
    env: TaskEnvelope,
    endpoint: str,
    session: Any = None,
    timeout: float = 60.0,
    clock: Callable[[], float] = time.time,
) -> TaskCompletion:
    """POST the envelope; any 2xx means success, anything else is failure."""
    import requests

    task = env.task()
    if session is None:
        session = requests
    try:
        resp = session.post(endpoint, json=env.to_value(), timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc
    at = int(clock() * 1000)
    if 200 <= resp.status_code < 300:
        structured = None
        try:
            body = resp.json()
            if isinstance(body, dict) and "structuredOutput" in body:
                structured = body["structuredOutput"]
        except ValueError:
            structured = None
        return _success(task, structured, at)
    return _failure(task, f"status {resp.status_code}", at)


# ---------------------------------------------------------------------------
# Dispatch


class ExecutorService:
    """Routes task envelopes to functions and guarantees one completion each.

    A deadline watchdog synthesizes a timeout failure when a function does
    not report in time; a late genuine completion is then absorbed by the
    completion handler's idempotence downstream.
    """

    def __init__(
        self,
        routing: RoutingTable,
        completion_sink: Callable[[TaskCompletion], None],
        blob_client,
        pool_size: "int | None" = None,
        deadline: float = 60.0,
        clock: Callable[[], float] = time.time,
        builtins: "dict[str, Callable] | None" = None,
        http_session: Any = None,
    ):
        import os

        self.routing = routing
        self.completion_sink = completion_sink
        self.blob_client = blob_client
        self.deadline = deadline
        self.clock = clock
        self.builtins = builtins if builtins is not None else dict(BUILTINS)
        self.http_session = http_session
        self.pool = ThreadPoolExecutor(
            max_workers=pool_size or os.cpu_count() or 4, thread_name_prefix="executor"
        )

    def builtin_names(self) -> set:
        return set(self.builtins)

    def route_task(self, env: TaskEnvelope) -> "Future | None":
        route = self.routing.lookup(env.task().function_name)
        if route is None:
            self._emit(_failure(env.task(), "no route", int(self.clock() * 1000)))
            return None
        emitted = threading.Event()
        timer = threading.Timer(self.deadline, self._timeout, args=(env, emitted))
        timer.daemon = True
        timer.start()
        future = self.pool.submit(self._execute, env, route, emitted, timer)
        return future

    def _execute(self, env: TaskEnvelope, route: Route, emitted: threading.Event, timer: threading.Timer) -> None:
        task = env.task()
        try:
            if route.binding.mode == "builtin":
                fn = self.builtins.get(route.binding.target)
                if fn is None:
                    completion = _failure(task, "unknown builtin", int(self.clock() * 1000))
                else:
                    completion = fn(task, self.blob_client, self.clock)
            else:
                completion = self._remote(env, route.binding.target)
        except Exception as exc:  # a builtin bug must still complete the task
            completion = _failure(task, f"executor error: {exc}", int(self.clock() * 1000))
        timer.cancel()
        if not emitted.is_set():
            emitted.set()
            self._emit(completion)

    def _remote(self, env: TaskEnvelope, endpoint: str) -> TaskCompletion:
        # One retry on transport errors only; the attempt is baked into the
        # task id so a duplicate effect stays idempotent downstream.
        task = env.task()
        try:
            return remote_http_execute(env, endpoint, self.http_session, self.deadline, self.clock)
        except TransportError:
            retry = task.with_attempt(task.attempt + 1)
            retry_env = TaskEnvelope.wrap(retry, env.source)
            try:
                return remote_http_execute(retry_env, endpoint, self.http_session, self.deadline, self.clock)
            except TransportError as exc:
                return _failure(retry, f"transport error: {exc}", int(self.clock() * 1000))

    def _timeout(self, env: TaskEnvelope, emitted: threading.Event) -> None:
        if not emitted.is_set():
            emitted.set()
            self._emit(_failure(env.task(), f"deadline exceeded ({self.deadline}s)", int(self.clock() * 1000)))

    def _emit(self, completion: TaskCompletion) -> None:
        self.completion_sink(completion)

    def shutdown(self) -> None:
        self.pool.shutdown(wait=False, cancel_futures=True)


class CompletionPump:
    """At-least-once delivery of completions into the task managers.

    Completions are queued durably; the pump acks only after a manager
    accepted the completion, so a crash mid-handling redelivers. Duplicate
    deliveries are absorbed by on_completion's idempotence.
    """

    def __init__(self, deliver: Callable[[TaskCompletion], Any], visibility_timeout: float = 5.0):
        self.queue = DurableQueue(visibility_timeout=visibility_timeout)
        self.deliver = deliver
        self._thread: "threading.Thread | None" = None
        self._stop = threading.Event()

    def handle(self, completion: TaskCompletion) -> None:
        self.queue.enqueue(completion.to_value())

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="completion-pump", daemon=True)
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
                self.deliver(TaskCompletion.from_value(payload))
            except Exception:
                continue  # unacked: redelivered after the visibility timeout
            self.queue.ack(item_id)
