"""Invocation pipeline: task generation, graphs, completions, failure paths."""

from __future__ import annotations

import json
import random

import pytest

from oaas import specmodel as sm
from oaas.errors import (
    AccessDenied,
    InstanceDown,
    InvokeTimeout,
    SourceNotCompleted,
    UnknownBinding,
    UnknownObject,
)
from oaas.specmodel import OaiRequest
from tests.conftest import (
    Harness,
    build_graph,
    dispatched_node_names,
    enumerate_topological_orders,
    make_macro,
)


@pytest.fixture
def h(harness):
    return harness


def canonical_object(h, object_id):
    return json.dumps(h.store.get("object", object_id).value, sort_keys=True)


# ---------------------------------------------------------------------------
# Direct task invocation


def test_sync_invoke_concat_end_to_end(h):
    source = h.create_text_object(b"hello")
    tm_ref = [None]
    tm = h.new_tm(dispatcher=None)
    tm.dispatcher = h.inline_dispatcher(tm_ref)
    tm_ref[0] = tm

    result = tm.invoke(sm.parse_oai(f"{source.id}:concat(append=%20world)"), mode="sync")
    assert result.record.status == "COMPLETED"
    assert result.record.class_name == "bench.textobj"
    assert result.record.id != source.id

    out = h.blob_client.get(h.adapter.presigned_get_urls(result.record.id, 60)["str"])
    assert out == b"hello world"


def test_plain_state_access_generates_no_task(h):
    source = h.create_text_object(b"data")
    tm = h.new_tm()
    result = tm.invoke(OaiRequest(main_object=source.id, content_key="str"))
    assert result.record.id == source.id
    assert h.dispatched == []


def test_internal_binding_denied_externally(h):
    source = h.create_text_object()
    tm = h.new_tm()
    with pytest.raises(AccessDenied):
        tm.invoke(sm.parse_oai(f"{source.id}:hidden(append=x)"))


def test_internal_binding_allowed_same_package(h):
    source = h.create_text_object()
    tm = h.new_tm()
    result = tm.invoke(
        sm.parse_oai(f"{source.id}:hidden(append=x)"), mode="async", caller_context="same-package"
    )
    assert result.record.status == "PENDING"


def test_invoke_unknown_object(h):
    tm = h.new_tm()
    with pytest.raises(UnknownObject):
        tm.invoke(sm.parse_oai("ghost:concat(append=x)"))


def test_invoke_unknown_binding(h):
    source = h.create_text_object()
    tm = h.new_tm()
    with pytest.raises(UnknownBinding):
        tm.invoke(sm.parse_oai(f"{source.id}:nosuch()"))


def test_invoke_on_pending_source(h):
    record, _ = h.controller.instantiate_object("bench.textobj", upload_keys=["str"])
    tm = h.new_tm()
    with pytest.raises(SourceNotCompleted):
        tm.invoke(sm.parse_oai(f"{record.id}:concat(append=x)"))


def test_sync_invoke_times_out_without_executor(h):
    source = h.create_text_object()
    tm = h.new_tm()  # recording dispatcher: nothing ever completes
    with pytest.raises(InvokeTimeout):
        tm.invoke(sm.parse_oai(f"{source.id}:concat(append=x)"), timeout=0.15)


def test_async_invoke_returns_prospective_record(h):
    source = h.create_text_object(b"base")
    tm = h.new_tm()
    result = tm.invoke(sm.parse_oai(f"{source.id}:concat(append=x)"), mode="async")
    assert result.record.status == "PENDING"
    assert result.record.origin["sourceObjectIds"] == [source.id]
    assert result.record.origin["function"] == "concat"
    # Drive the dispatched task to completion by hand.
    order = h.pump(tm)
    assert len(order) == 1
    assert tm.get_status(result.record.id)["status"] == "COMPLETED"


def test_generate_task_embeds_urls_and_snapshot(h):
    source = h.create_text_object(b"abc")
    tm = h.new_tm()
    binding = sm.FunctionBinding("concat", "public", "bench.concat", "bench.textobj")
    task = tm.generate_task(source.id, binding, {"append": "z"}, [])
    assert set(task.main_object.get_urls) == {"str"}
    assert set(task.output_object.put_urls) == {"str"}
    assert task.attempt == 1
    assert task.task_id == f"{task.output_object.id}:1"
    out_record = h.store.get("object", task.output_object.id)
    assert out_record.value["status"] == "PENDING"


def test_generate_task_structured_only_class(h):
    source = h.create_json_object({"a": "1"})
    tm = h.new_tm()
    binding = sm.FunctionBinding("update", "public", "bench.json_update", "bench.jsonobj")
    task = tm.generate_task(source.id, binding, {}, [])
    assert task.main_object.get_urls == {}
    assert task.output_object.put_urls == {}
    assert task.main_object.structured_state == {"pairs": {"a": "1"}}


def test_generate_task_inputs_in_declared_order(h):
    main = h.create_text_object(b"m")
    in1 = h.create_text_object(b"1")
    in2 = h.create_text_object(b"2")
    tm = h.new_tm()
    binding = sm.FunctionBinding("concat", "public", "bench.concat", "bench.textobj")
    task = tm.generate_task(main.id, binding, {"append": "z"}, [in1.id, in2.id])
    assert [v.id for v in task.inputs] == [in1.id, in2.id]


def test_concurrent_invocations_make_distinct_outputs(h):
    source = h.create_text_object(b"base")
    tm_ref = [None]
    tm = h.new_tm(dispatcher=None)
    tm.dispatcher = h.inline_dispatcher(tm_ref)
    tm_ref[0] = tm
    r1 = tm.invoke(sm.parse_oai(f"{source.id}:concat(append=x)"))
    r2 = tm.invoke(sm.parse_oai(f"{source.id}:concat(append=x)"))
    assert r1.record.id != r2.record.id
    url1 = h.adapter.presigned_get_urls(r1.record.id, 60)["str"]
    url2 = h.adapter.presigned_get_urls(r2.record.id, 60)["str"]
    assert h.blob_client.get(url1) == h.blob_client.get(url2) == b"basex"


# ---------------------------------------------------------------------------
# Invocation graphs


def test_linear_chain_builds_and_orders(h):
    tm = h.new_tm()
    graph = build_graph(h, tm, {"s1": [], "s2": ["s1"], "s3": ["s2"]}, "s3")
    assert len(graph["nodes"]) == 3
    assert sorted(map(tuple, graph["edges"])) == [("s1", "s2"), ("s2", "s3")]
    order = [t.output_object.id for t in h.pump(tm, execute=False)]
    names = [h.store.get("object", oid).value["graph"]["node"] for oid in order]
    assert names == ["s1", "s2", "s3"]
    final = tm.get_graph(graph["graphId"])
    assert all(n["status"] == "COMPLETED" for n in final["nodes"].values())
    assert tm.get_status(graph["rootOutputObjectId"])["status"] == "COMPLETED"


def test_diamond_order_is_a_valid_topological_order(h):
    tm = h.new_tm()
    steps = {"s1": [], "s2": ["s1"], "s3": ["s1"], "s4": ["s2", "s3"]}
    graph = build_graph(h, tm, steps, "s4")
    order = dispatched_node_names(h, h.pump(tm, execute=False))
    edges = [tuple(e) for e in graph["edges"]]
    valid = enumerate_topological_orders(list(steps), edges)
    assert order in valid
    assert order[0] == "s1" and order[-1] == "s4"


def test_macro_step_can_target_an_input_object(h):
    from oaas.specmodel import MacroSpec, MacroStep

    tm = h.new_tm()
    main, _ = h.controller.instantiate_object("flow.node")
    extra, _ = h.controller.instantiate_object("flow.node")
    macro = MacroSpec(steps=[MacroStep(name="s1", target="$input[0]", function="go")], output="s1")
    graph = tm.build_invocation_graph(macro, main.id, [extra.id], {}, "flow")
    tasks = tm.dispatch_ready(graph["graphId"])
    assert tasks[0].main_object.id == extra.id


def test_macro_input_index_out_of_range(h):
    from oaas.errors import SchemaError
    from oaas.specmodel import MacroSpec, MacroStep

    tm = h.new_tm()
    main, _ = h.controller.instantiate_object("flow.node")
    macro = MacroSpec(steps=[MacroStep(name="s1", target="$input[3]", function="go")], output="s1")
    with pytest.raises(SchemaError):
        tm.build_invocation_graph(macro, main.id, [], {}, "flow")


def test_macro_step_denied_on_internal_binding_cross_package(h):
    # A macro living in another package cannot call internal bindings.
    from oaas.specmodel import MacroSpec, MacroStep

    tm = h.new_tm()
    source = h.create_text_object(b"x")
    macro = MacroSpec(
        steps=[MacroStep(name="s1", target="$self", function="hidden", args={"append": "y"})],
        output="s1",
    )
    with pytest.raises(AccessDenied):
        tm.build_invocation_graph(macro, source.id, [], {}, "otherpkg")
    # Same package: allowed.
    graph = tm.build_invocation_graph(macro, source.id, [], {}, "bench")
    assert graph["nodes"]["s1"]["functionRef"] == "bench.concat"


def test_macro_step_may_not_bind_a_macro(h):
    from oaas.errors import SchemaError
    from oaas.specmodel import MacroSpec, MacroStep

    doc = """
name: nest
classes:
  - name: c
    stateKeys: []
    bindings:
      - {name: inner, access: public, functionRef: wf, outputClass: c}
functions:
  - name: wf
    kind: macro
    macro:
      steps:
        - {as: s1, target: $self, function: inner}
      output: s1
"""
    # Validation rejects the nesting statically.
    from oaas import specmodel as sm_mod

    report = sm_mod.validate_package(sm_mod.parse_package(doc), sm_mod.DictRegistry())
    assert any("do not nest" in m for m in report.messages())

    # And the graph builder refuses defensively even if a registry sneaks one in.
    tm = h.new_tm()
    main, _ = h.controller.instantiate_object("flow.node")
    macro = MacroSpec(steps=[MacroStep(name="s1", target="$self", function="go")], output="s1")
    # flow.node's "go" binds a task; rebind it to a macro in a fake registry entry.
    record = h.store.get("function", "flow.step")
    h.store.put(
        "function",
        "flow.step",
        {
            "package": "flow",
            "spec": {
                "name": "step",
                "kind": "macro",
                "macro": {"steps": [{"as": "x", "target": "$self", "function": "go"}], "output": "x"},
            },
        },
    )
    try:
        with pytest.raises(SchemaError):
            tm.build_invocation_graph(macro, main.id, [], {}, "flow")
    finally:
        h.store.put("function", "flow.step", record.value)


def test_single_step_macro_equals_direct_invocation(h):
    tm = h.new_tm()
    graph = build_graph(h, tm, {"s1": []}, "s1")
    tasks = h.pump(tm, execute=False)
    assert len(tasks) == 1
    assert graph["rootOutputObjectId"] == tasks[0].output_object.id
    assert tm.get_status(graph["rootOutputObjectId"])["status"] == "COMPLETED"


def test_random_dags_follow_topological_order_oracle(h):
    rng = random.Random(7)
    tm = h.new_tm()
    for _ in range(25):
        n = rng.randint(2, 6)
        names = [f"s{i}" for i in range(n)]
        steps = {}
        for i, name in enumerate(names):
            max_deps = min(i, 3)
            k = rng.randint(0, max_deps)
            steps[name] = rng.sample(names[:i], k) if k else []
        output = names[-1]
        graph = build_graph(h, tm, steps, output)
        # Pump in random order to exercise out-of-order completion.
        order = []
        while h.dispatched:
            idx = rng.randrange(len(h.dispatched))
            task = h.dispatched.pop(idx)
            order.append(task)
            tm.on_completion(h.success_completion(task))
        observed = dispatched_node_names(h, order)
        edges = [tuple(e) for e in graph["edges"]]
        index = {name: i for i, name in enumerate(observed)}
        assert len(observed) == n
        assert all(index[a] < index[b] for a, b in edges)


# ---------------------------------------------------------------------------
# Completion handling


def test_duplicate_completion_is_ignored(h):
    source = h.create_text_object(b"x")
    tm = h.new_tm()
    tm.invoke(sm.parse_oai(f"{source.id}:concat(append=y)"), mode="async")
    task = h.dispatched.pop(0)
    completion = h.run_task(task)
    first = tm.on_completion(completion)
    snapshot = canonical_object(h, task.output_object.id)
    second = tm.on_completion(completion)
    assert second == []
    assert canonical_object(h, task.output_object.id) == snapshot
    assert first == []  # direct task: nothing downstream either


def test_conflicting_late_deliveries_cannot_overturn_outcome(h):
    # A synthesized timeout failure racing a genuine success (or vice
    # versa) must not flip an already-settled object or its graph node.
    tm = h.new_tm()
    graph = build_graph(h, tm, {"s1": [], "s2": ["s1"]}, "s2")
    s1 = h.dispatched.pop(0)
    tm.on_completion(h.success_completion(s1))
    assert len(h.dispatched) == 1  # s2 dispatched once
    late_failure = h.failure_completion(s1, detail="deadline exceeded")
    assert tm.on_completion(late_failure) == []
    final = tm.get_graph(graph["graphId"])
    assert final["nodes"]["s1"]["status"] == "COMPLETED"
    assert final["nodes"]["s2"]["status"] == "RUNNING"
    assert h.store.get("object", s1.output_object.id).value["status"] == "COMPLETED"

    # And the mirror image: failure first, late success ignored.
    h.dispatched.clear()
    graph2 = build_graph(h, tm, {"s1": [], "s2": ["s1"]}, "s2")
    t1 = h.dispatched.pop(0)
    tm.on_completion(h.failure_completion(t1, detail="boom"))
    tm.on_completion(h.success_completion(t1))
    final2 = tm.get_graph(graph2["graphId"])
    assert final2["nodes"]["s1"]["status"] == "FAILED"
    assert final2["nodes"]["s2"]["status"] == "SKIPPED"
    assert h.store.get("object", t1.output_object.id).value["status"] == "FAILED"


def test_completion_for_unknown_task_is_dropped(h):
    tm = h.new_tm()
    from oaas.tasks import TaskCompletion

    assert tm.on_completion(TaskCompletion("ghost:1", "ghost", True)) == []


def test_completion_with_structured_output_replaces_state(h):
    source = h.create_json_object({"a": "1"})
    tm = h.new_tm()
    result = tm.invoke(sm.parse_oai(f"{source.id}:update(seed=1)"), mode="async")
    task = h.dispatched.pop(0)
    tm.on_completion(h.run_task(task))
    out = h.store.get("object", result.record.id).value
    assert out["status"] == "COMPLETED"
    assert len(out["structuredState"]["pairs"]) == 2


def test_completion_dispatches_exactly_one_ready_successor(h):
    tm = h.new_tm()
    build_graph(h, tm, {"s1": [], "s2": ["s1"]}, "s2")
    first = h.dispatched.pop(0)
    newly = tm.on_completion(h.success_completion(first))
    assert len(newly) == 1
    assert h.store.get("object", newly[0].output_object.id).value["graph"]["node"] == "s2"


# ---------------------------------------------------------------------------
# Failure propagation


def test_diamond_failure_skips_only_descendants(h):
    tm = h.new_tm()
    steps = {"s1": [], "s2": ["s1"], "s3": ["s1"], "s4": ["s2", "s3"]}
    graph = build_graph(h, tm, steps, "s4")
    gid = graph["graphId"]

    s1 = h.dispatched.pop(0)
    tm.on_completion(h.success_completion(s1))
    # s2 and s3 now dispatched; fail s2, complete s3.
    by_node = {
        h.store.get("object", t.output_object.id).value["graph"]["node"]: t for t in h.dispatched
    }
    h.dispatched.clear()
    tm.on_completion(h.failure_completion(by_node["s2"], detail="boom"))
    tm.on_completion(h.success_completion(by_node["s3"]))

    final = tm.get_graph(gid)
    statuses = {n: v["status"] for n, v in final["nodes"].items()}
    assert statuses == {"s1": "COMPLETED", "s2": "FAILED", "s3": "COMPLETED", "s4": "SKIPPED"}
    assert h.dispatched == []  # s4 never dispatched
    s4_obj = h.store.get("object", final["nodes"]["s4"]["outputObjectId"]).value
    assert s4_obj["status"] == "FAILED"
    assert "upstream s2 failed: boom" in s4_obj["failureCause"]
    # Reachability oracle: the skipped set is exactly the descendants of s2.
    descendants = {"s4"}
    skipped = {n for n, v in final["nodes"].items() if v["status"] == "SKIPPED"}
    assert skipped == descendants


def test_source_failure_skips_whole_chain(h):
    tm = h.new_tm()
    graph = build_graph(h, tm, {"s1": [], "s2": ["s1"], "s3": ["s2"]}, "s3")
    s1 = h.dispatched.pop(0)
    tm.on_completion(h.failure_completion(s1, detail="dead"))
    final = tm.get_graph(graph["graphId"])
    statuses = {n: v["status"] for n, v in final["nodes"].items()}
    assert statuses == {"s1": "FAILED", "s2": "SKIPPED", "s3": "SKIPPED"}
    assert tm.get_status(graph["rootOutputObjectId"])["status"] == "FAILED"


def test_failure_with_no_descendants_marks_only_node(h):
    tm = h.new_tm()
    graph = build_graph(h, tm, {"s1": [], "s2": ["s1"]}, "s2")
    s1 = h.dispatched.pop(0)
    tm.on_completion(h.success_completion(s1))
    s2 = h.dispatched.pop(0)
    tm.on_completion(h.failure_completion(s2))
    final = tm.get_graph(graph["graphId"])
    assert final["nodes"]["s1"]["status"] == "COMPLETED"
    assert final["nodes"]["s2"]["status"] == "FAILED"


def test_get_status_shows_chained_failure(h):
    tm = h.new_tm()
    graph = build_graph(h, tm, {"s1": [], "s2": ["s1"]}, "s2")
    s1 = h.dispatched.pop(0)
    tm.on_completion(h.failure_completion(s1, detail="root cause"))
    status = tm.get_status(graph["rootOutputObjectId"])
    assert status["status"] == "FAILED"
    assert "root cause" in status["failureCause"]
    assert status["availableContentKeys"] == []


# ---------------------------------------------------------------------------
# Idempotence and recovery


def run_macro_with_redelivery(h, tm, repeats: int) -> tuple[dict, list[str], int]:
    """Run the fixed 4-node macro delivering each completion ``repeats`` times.

    Returns (final node statuses, sorted output ids, dispatch count).
    """
    steps = {"a": [], "b": ["a"], "c": ["a"], "d": ["b", "c"]}
    graph = build_graph(h, tm, steps, "d")
    dispatch_count = 0
    while h.dispatched:
        task = h.dispatched.pop(0)
        dispatch_count += 1
        completion = h.success_completion(task)
        for _ in range(repeats):
            tm.on_completion(completion)
    final = tm.get_graph(graph["graphId"])
    statuses = {n: v["status"] for n, v in final["nodes"].items()}
    outputs = sorted(v["outputObjectId"] for v in final["nodes"].values())
    return statuses, outputs, dispatch_count


def test_triple_delivery_matches_single_delivery(tmp_path):
    from tests.conftest import BENCH_PACKAGE, NODE_PACKAGE

    results = []
    for repeats in (1, 3):
        h = Harness(tmp_path / f"run{repeats}")
        h.deploy(BENCH_PACKAGE)
        h.deploy(NODE_PACKAGE)
        tm = h.new_tm()
        statuses, outputs, dispatches = run_macro_with_redelivery(h, tm, repeats)
        records = [canonical_object(h, oid) for oid in outputs]
        results.append((statuses, records, dispatches))

    single, triple = results
    assert single[0] == triple[0] == {"a": "COMPLETED", "b": "COMPLETED", "c": "COMPLETED", "d": "COMPLETED"}
    assert single[1] == triple[1]  # byte-identical records
    assert single[2] == triple[2]  # same dispatch count


def test_fresh_instance_finishes_graph_after_kill(h):
    # 4-node chain; kill the only instance after each completion prefix.
    for prefix in range(4):
        tm = h.new_tm()
        main, _ = h.controller.instantiate_object("flow.node")
        macro = make_macro({"s1": [], "s2": ["s1"], "s3": ["s2"], "s4": ["s3"]}, "s4")
        graph = tm.build_invocation_graph(macro, main.id, [], {}, "flow")
        tm.dispatch_ready(graph["graphId"])

        delivered = 0
        pending = None
        while h.dispatched:
            task = h.dispatched.pop(0)
            if delivered == prefix:
                pending = task
                break
            tm.on_completion(h.success_completion(task))
            delivered += 1
        assert pending is not None

        tm.stop()  # kill every instance
        with pytest.raises(InstanceDown):
            tm.on_completion(h.success_completion(pending))

        fresh = h.new_tm()
        fresh.on_completion(h.success_completion(pending))  # redelivery
        while h.dispatched:
            task = h.dispatched.pop(0)
            fresh.on_completion(h.success_completion(task))

        final = fresh.get_graph(graph["graphId"])
        assert all(v["status"] == "COMPLETED" for v in final["nodes"].values()), (
            prefix,
            {n: v["status"] for n, v in final["nodes"].items()},
        )


def test_completed_object_never_rewritten_during_macro(h):
    completed_states: dict[str, str] = {}

    def immutability_hook(kind, key, old, new):
        if kind != "object" or old is None:
            return
        if old.value.get("status") == "COMPLETED":
            assert new["structuredState"] == old.value["structuredState"], key
            assert new["unstructuredKeys"] == old.value["unstructuredKeys"], key

    h.store.add_write_hook(immutability_hook)
    tm = h.new_tm()
    build_graph(h, tm, {"s1": [], "s2": ["s1"], "s3": ["s1"]}, "s3")
    h.pump(tm, execute=False)
