"""Command-line interface: deploy packages, manage objects, invoke, serve, bench.

Exit codes: 0 success, 1 usage error, 2 platform error, 3 invocation failed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

DEFAULT_SERVER = "http://127.0.0.1:8700"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PLATFORM = 2
EXIT_INVOCATION = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> _Parser:
    parser = _Parser(prog="oaas", description="Object-as-a-service platform CLI")
    sub = parser.add_subparsers(dest="command", required=True)

    deploy = sub.add_parser("deploy", help="register a package and wait for provisioning")
    deploy.add_argument("package", help="path to a package YAML/JSON document")
    deploy.add_argument("--server", default=DEFAULT_SERVER)
    deploy.add_argument("--no-wait", action="store_true", help="do not wait for deployments")

    obj = sub.add_parser("object", help="object lifecycle")
    obj_sub = obj.add_subparsers(dest="object_command", required=True)
    create = obj_sub.add_parser("create", help="instantiate an object")
    create.add_argument("cls", metavar="class", help="qualified class name")
    create.add_argument("--id", dest="object_id")
    create.add_argument("--state-json", help="file with the structured state document")
    create.add_argument(
        "--upload", action="append", default=[], metavar="KEY=FILE",
        help="upload FILE as unstructured state KEY (repeatable)",
    )
    create.add_argument("--server", default=DEFAULT_SERVER)

    invoke = sub.add_parser("invoke", help="invoke via the object access interface")
    invoke.add_argument("oai", help="expression like obj1:fn(a=1)/key")
    invoke.add_argument("--async", dest="async_mode", action="store_true")
    invoke.add_argument("--input", action="append", default=[], help="input object id (repeatable)")
    invoke.add_argument("-o", "--out", help="write content response to file")
    invoke.add_argument("--server", default=DEFAULT_SERVER)

    status = sub.add_parser("status", help="object status")
    status.add_argument("object_id")
    status.add_argument("--server", default=DEFAULT_SERVER)

    get = sub.add_parser("get", help="fetch unstructured state: <objectId>/<key>")
    get.add_argument("target", help="objectId/key")
    get.add_argument("-o", "--out", help="output file (default stdout)")
    get.add_argument("--server", default=DEFAULT_SERVER)

    serve = sub.add_parser("serve", help="run the full platform in this process")
    serve.add_argument("--config", help="TOML or JSON configuration file")
    serve.add_argument("--listen", help="override listen address, host:port")

    bench = sub.add_parser("bench", help="latency benchmark sweeps")
    bench.add_argument("--function", choices=["concat", "json_update", "cpu_burn"], default="concat")
    bench.add_argument("--sizes", default="10KB", help="comma-separated sizes (pair counts for json_update)")
    bench.add_argument("--concurrency", default="1", help="comma-separated client counts")
    bench.add_argument("--mode", choices=["redirect", "relay"], default="redirect")
    bench.add_argument("--cache", choices=["on", "off"], default="on", help="metadata cache toggle")
    bench.add_argument("--reps", type=int, default=10, help="invocations per client per cell")
    bench.add_argument("--seed", type=int, default=1)
    bench.add_argument("--iters-per-kib", type=int, default=1)
    bench.add_argument("--out", help="CSV output file (default stdout)")
    bench.add_argument("--server", help="use a running platform instead of spawning one")
    return parser


def main(argv: "list[str] | None" = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except SystemExit as exc:  # raised by helpers with a specific exit code
        return int(exc.code or 0)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PLATFORM


def _request(method: str, url: str, **kwargs):
    import requests

    try:
        return requests.request(method, url, **kwargs)
    except requests.RequestException as exc:
        print(f"error: cannot reach platform: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_PLATFORM) from exc


def cmd_deploy(args) -> int:
    with open(args.package, "r", encoding="utf-8") as fh:
        document = fh.read()
    resp = _request("POST", args.server + "/api/packages", data=document.encode("utf-8"))
    if resp.status_code != 200:
        print(json.dumps(resp.json(), indent=2), file=sys.stderr)
        return EXIT_PLATFORM
    summary = resp.json()
    print(json.dumps(summary, indent=2))
    if args.no_wait:
        return EXIT_OK
    for fn in summary.get("provisioning", []):
        deadline = time.monotonic() + 30
        while True:
            status = _request("GET", args.server + f"/api/deployments/{fn}").json()
            if status.get("state") in ("ready", "failed"):
                print(f"{fn}: {status['state']} {status.get('detail', '')}".strip(), file=sys.stderr)
                if status["state"] == "failed":
                    return EXIT_PLATFORM
                break
            if time.monotonic() > deadline:
                print(f"{fn}: still {status.get('state')} after 30s", file=sys.stderr)
                return EXIT_PLATFORM
            time.sleep(0.1)
    return EXIT_OK


def cmd_object(args) -> int:
    body: dict = {}
    if args.object_id:
        body["id"] = args.object_id
    if args.state_json:
        with open(args.state_json, "r", encoding="utf-8") as fh:
            body["structuredState"] = json.load(fh)
    uploads = {}
    for item in args.upload:
        if "=" not in item:
            print(f"error: --upload wants KEY=FILE, got {item!r}", file=sys.stderr)
            return EXIT_USAGE
        key, file_path = item.split("=", 1)
        uploads[key] = file_path
    body["uploadKeys"] = sorted(uploads)

    resp = _request("POST", args.server + f"/api/classes/{args.cls}/objects", json=body)
    if resp.status_code != 201:
        print(json.dumps(resp.json(), indent=2), file=sys.stderr)
        return EXIT_PLATFORM
    payload = resp.json()
    object_id = payload["object"]["id"]
    for key, file_path in uploads.items():
        with open(file_path, "rb") as fh:
            put = _request("PUT", payload["uploadUrls"][key], data=fh)
        if put.status_code != 200:
            print(f"error: upload of {key} failed: {put.status_code}", file=sys.stderr)
            return EXIT_PLATFORM
    if uploads:
        confirm = _request("POST", args.server + f"/api/objects/{object_id}/confirm")
        if confirm.status_code != 200:
            print(json.dumps(confirm.json(), indent=2), file=sys.stderr)
            return EXIT_PLATFORM
        payload["object"] = confirm.json()
    print(json.dumps(payload["object"], indent=2))
    return EXIT_OK


def cmd_invoke(args) -> int:
    if args.async_mode:
        resp = _request(
            "POST", args.server + "/api/invocations", json={"oai": args.oai, "inputs": args.input}
        )
        print(json.dumps(resp.json(), indent=2))
        return EXIT_OK if resp.status_code == 202 else EXIT_INVOCATION
    params = [("input", i) for i in args.input]
    resp = _request("GET", args.server + "/oal/" + args.oai, params=params)
    if resp.status_code != 200:
        print(json.dumps(_safe_json(resp), indent=2), file=sys.stderr)
        return EXIT_INVOCATION
    if resp.headers.get("Content-Type", "").startswith("application/json"):
        body = resp.json()
        print(json.dumps(body, indent=2))
        return EXIT_OK if body.get("status") != "FAILED" else EXIT_INVOCATION
    _write_content(resp.content, args.out)
    return EXIT_OK


def cmd_status(args) -> int:
    resp = _request("GET", args.server + f"/api/objects/{args.object_id}")
    print(json.dumps(_safe_json(resp), indent=2))
    return EXIT_OK if resp.status_code == 200 else EXIT_PLATFORM


def cmd_get(args) -> int:
    if "/" not in args.target:
        print("error: expected <objectId>/<key>", file=sys.stderr)
        return EXIT_USAGE
    resp = _request("GET", args.server + "/oal/" + args.target)
    if resp.status_code != 200:
        print(json.dumps(_safe_json(resp), indent=2), file=sys.stderr)
        return EXIT_PLATFORM
    _write_content(resp.content, args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    from .config import PlatformConfig
    from .runtime import Platform

    config = PlatformConfig.load(args.config) if args.config else PlatformConfig(listen_addr="127.0.0.1:8700")
    if args.listen:
        config.listen_addr = args.listen
    platform = Platform(config).start()
    host, port = platform.server.address
    print(f"listening on http://{host}:{port}", file=sys.stderr)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        print("shutting down", file=sys.stderr)
        platform.stop()
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import Scenario, parse_size, run_scenario

    scenario = Scenario(
        function=args.function,
        state_sizes=[parse_size(s) for s in args.sizes.split(",")],
        concurrency=[int(c) for c in args.concurrency.split(",")],
        mode=args.mode,
        cache=args.cache == "on",
        repetitions=args.reps,
        seed=args.seed,
        iters_per_kib=args.iters_per_kib,
    )
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        summaries = run_scenario(scenario, base_url=args.server, csv_out=out)
    finally:
        if args.out:
            out.close()
    failures = sum(s.failures for s in summaries)
    return EXIT_OK if failures == 0 else EXIT_INVOCATION


def _safe_json(resp):
    try:
        return resp.json()
    except ValueError:
        return {"status_code": resp.status_code, "body": resp.text[:500]}


def _write_content(content: bytes, out: "str | None") -> None:
    if out:
        with open(out, "wb") as fh:
            fh.write(content)
    else:
        sys.stdout.buffer.write(content)


HANDLERS = {
    "deploy": cmd_deploy,
    "object": cmd_object,
    "invoke": cmd_invoke,
    "status": cmd_status,
    "get": cmd_get,
    "serve": cmd_serve,
    "bench": cmd_bench,
}


if __name__ == "__main__":
    raise SystemExit(main())
