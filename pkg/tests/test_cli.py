"""CLI flows against a live platform."""

from __future__ import annotations

import json
import time

import pytest

from oaas import Platform, PlatformConfig
from oaas.cli import main

EXAMPLE_PACKAGE = """
name: demo
classes:
  - name: test1
    stateKeys:
      - {key: str, form: unstructured, provider: s3}
    bindings:
      - {name: concat, access: public, functionRef: demo.concat, outputClass: demo.test1}
functions:
  - {name: concat, kind: task, executor: {mode: builtin, target: concat}}
"""


@pytest.fixture(scope="module")
def server(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    p = Platform(PlatformConfig(blob_root=str(tmp / "blobs"), task_manager_instances=1)).start()
    yield p.base_url()
    p.stop()


@pytest.fixture(scope="module")
def deployed(server, tmp_path_factory):
    pkg = tmp_path_factory.mktemp("pkg") / "demo.yaml"
    pkg.write_text(EXAMPLE_PACKAGE)
    assert main(["deploy", str(pkg), "--server", server]) == 0
    return server


def test_deploy_invalid_package_fails(server, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(EXAMPLE_PACKAGE.replace("demo.concat", "demo.ghost"))
    assert main(["deploy", str(bad), "--server", server]) == 2


def test_object_create_invoke_and_get_round_trip(deployed, tmp_path, capsys):
    src = tmp_path / "hello.txt"
    src.write_bytes(b"hello")
    rc = main(
        ["object", "create", "demo.test1", "--id", "o1", "--upload", f"str={src}", "--server", deployed]
    )
    assert rc == 0
    record = json.loads(capsys.readouterr().out)
    assert record["status"] == "COMPLETED"

    rc = main(["invoke", "o1:concat(append=%20world)/str", "--server", deployed])
    assert rc == 0
    assert capsys.readouterr().out == "hello world"

    out_file = tmp_path / "round_trip.txt"
    rc = main(["get", "o1/str", "-o", str(out_file), "--server", deployed])
    assert rc == 0
    assert out_file.read_bytes() == b"hello"


def test_async_invoke_then_status_polls_to_completed(deployed, capsys):
    rc = main(["invoke", "o1:concat(append=x)", "--async", "--server", deployed])
    assert rc == 0
    record = json.loads(capsys.readouterr().out)
    assert record["status"] in ("PENDING", "RUNNING")
    out_id = record["id"]
    deadline = time.monotonic() + 10
    while time.monotonic() < deadline:
        assert main(["status", out_id, "--server", deployed]) == 0
        status = json.loads(capsys.readouterr().out)
        if status["status"] in ("COMPLETED", "FAILED"):
            break
        time.sleep(0.05)
    assert status["status"] == "COMPLETED"


def test_invoke_failure_exit_code(deployed, capsys):
    assert main(["invoke", "ghost:concat(append=x)", "--server", deployed]) == 3
    capsys.readouterr()


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1


def test_get_usage_error(deployed, capsys):
    assert main(["get", "missing-slash", "--server", deployed]) == 1
    capsys.readouterr()


def test_unreachable_server_is_platform_error(capsys):
    assert main(["status", "o1", "--server", "http://127.0.0.1:9"]) == 2
    capsys.readouterr()
