"""Benchmark harness: state-size and concurrency sweeps with CSV output.

Closed-loop load generation: each virtual client waits for its response
before issuing the next request, so the configured concurrency is an
upper bound on in-flight invocations. Latency is measured at the client
boundary of the gateway: the full round trip including content retrieval.

In redirect mode the client sends ``X-OaaS-Redirect: pass`` and follows
the 303 itself, so payload bytes take the pure one-hop path; in relay
mode the payload streams through the platform. The ``cache`` toggle
controls the metadata (spec) cache, the platform knob the two modes
ablate.
"""

from __future__ import annotations

import csv
import shutil
import statistics
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field

import requests

from .config import PlatformConfig
from .runtime import Platform

BENCH_PACKAGE = """
name: bench
classes:
  - name: textobj
    stateKeys:
      - {key: str, form: unstructured, provider: bench}
    bindings:
      - {name: concat, access: public, functionRef: concat, outputClass: textobj}
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

CSV_COLUMNS = ["function", "size_bytes", "concurrency", "mode", "cache", "rep", "latency_ms", "outcome"]


@dataclass
class Scenario:
    function: str  # concat | json_update | cpu_burn
    state_sizes: list[int]  # bytes (pair count for json_update)
    concurrency: list[int]
    mode: str = "redirect"  # redirect | relay
    cache: bool = True  # metadata cache on/off
    repetitions: int = 10  # invocations per client per cell
    seed: int = 1
    iters_per_kib: int = 1  # cpu_burn knob

    def platform_config(self, blob_root: str) -> PlatformConfig:
        return PlatformConfig(
            blob_root=blob_root,
            state_delivery_mode=self.mode,
            metadata_cache=self.cache,
            task_manager_instances=2,
            sync_timeout_secs=300,
            executor_deadline_secs=240,
            poll_interval_secs=0.005,  # finer waiter granularity for timing sweeps
        )


@dataclass
class CellSummary:
    function: str
    size: int
    concurrency: int
    mode: str
    cache: bool
    latencies_ms: list = field(default_factory=list)
    failures: int = 0

    def mean(self) -> float:
        return statistics.fmean(self.latencies_ms) if self.latencies_ms else float("nan")

    def percentile(self, q: float) -> float:
        if not self.latencies_ms:
            return float("nan")
        ordered = sorted(self.latencies_ms)
        index = min(len(ordered) - 1, max(0, round(q * (len(ordered) - 1))))
        return ordered[index]

    def stderr(self) -> float:
        if len(self.latencies_ms) < 2:
            return 0.0
        return statistics.stdev(self.latencies_ms) / (len(self.latencies_ms) ** 0.5)


class BenchClient:
    """One virtual user: creates sources, invokes, retrieves content."""

    def __init__(self, base_url: str, scenario: Scenario):
        self.base = base_url
        self.scenario = scenario
        self.session = requests.Session()
        adapter = requests.adapters.HTTPAdapter(pool_maxsize=8)
        self.session.mount("http://", adapter)

    def create_source(self, size: int, tag: str) -> str:
        s = self.scenario
        if s.function == "json_update":
            pairs = {f"k{i:08d}__": "v" * 40 for i in range(size)}
            r = self.session.post(
                self.base + "/api/classes/bench.jsonobj/objects",
                json={"structuredState": {"pairs": pairs}},
            )
            r.raise_for_status()
            return r.json()["object"]["id"]
        cls, key = ("bench.textobj", "str") if s.function == "concat" else ("bench.binobj", "data")
        r = self.session.post(self.base + f"/api/classes/{cls}/objects", json={"uploadKeys": [key]})
        r.raise_for_status()
        payload = r.json()
        content = _payload_bytes(size, seed=f"{s.seed}/{tag}")
        self.session.put(payload["uploadUrls"][key], data=content).raise_for_status()
        self.session.post(self.base + f"/api/objects/{payload['object']['id']}/confirm").raise_for_status()
        return payload["object"]["id"]

    def invoke_once(self, source_id: str, rep: int) -> tuple[float, str]:
        """One full round trip; returns (latency_ms, outcome)."""
        s = self.scenario
        start = time.perf_counter()
        try:
            if s.function == "concat":
                outcome = self._content_invoke(f"{source_id}:concat(append=01234567)/str")
            elif s.function == "cpu_burn":
                outcome = self._content_invoke(
                    f"{source_id}:burn(iters_per_kib={s.iters_per_kib})/data"
                )
            else:
                r = self.session.get(self.base + f"/oal/{source_id}:update(seed={s.seed}-{rep})")
                outcome = "ok" if r.status_code == 200 and r.json()["status"] == "COMPLETED" else "failed"
        except requests.RequestException as exc:
            return (time.perf_counter() - start) * 1000, f"error:{type(exc).__name__}"
        return (time.perf_counter() - start) * 1000, outcome

    def _content_invoke(self, expr: str) -> str:
        if self.scenario.mode == "redirect":
            r = self.session.get(
                self.base + "/oal/" + expr,
                headers={"X-OaaS-Redirect": "pass"},
                allow_redirects=False,
            )
            if r.status_code == 303:
                r = self.session.get(r.headers["Location"])
        else:
            r = self.session.get(self.base + "/oal/" + expr)
        return "ok" if r.status_code == 200 else f"failed:{r.status_code}"


def _payload_bytes(size: int, seed: str) -> bytes:
    # Deterministic, incompressible-ish filler without hashing cost.
    import random as _random

    block = bytes(_random.Random(seed).randrange(256) for _ in range(min(size, 65536)))
    if not block:
        return b""
    repeats = size // len(block) + 1
    return (block * repeats)[:size]


def run_scenario(
    scenario: Scenario,
    base_url: "str | None" = None,
    csv_out=None,
    summary_out=None,
    keep_blobs: bool = False,
) -> list[CellSummary]:
    """Run every (size, concurrency) cell; emit one CSV row per invocation.

    Spawns a platform configured for the scenario unless ``base_url``
    points at a running one (whose mode/cache must already match).
    """
    summary_out = summary_out or sys.stderr
    owned: "Platform | None" = None
    blob_root = None
    if base_url is None:
        blob_root = tempfile.mkdtemp(prefix="oaas-bench-")
        owned = Platform(scenario.platform_config(blob_root)).start()
        base_url = owned.base_url()
        requests.post(base_url + "/api/packages", data=BENCH_PACKAGE).raise_for_status()
        _wait_ready(base_url, ["bench.concat", "bench.json_update", "bench.cpu_burn"])

    writer = None
    if csv_out is not None:
        writer = csv.writer(csv_out)
        writer.writerow(CSV_COLUMNS)

    summaries = []
    try:
        for size in scenario.state_sizes:
            for conc in scenario.concurrency:
                cell = _run_cell(scenario, base_url, size, conc, writer)
                summaries.append(cell)
                print(
                    f"[bench] fn={cell.function} size={cell.size} conc={cell.concurrency} "
                    f"mode={cell.mode} cache={'on' if cell.cache else 'off'} "
                    f"n={len(cell.latencies_ms)} failures={cell.failures} "
                    f"mean={cell.mean():.1f}ms p50={cell.percentile(0.5):.1f}ms "
                    f"p95={cell.percentile(0.95):.1f}ms",
                    file=summary_out,
                    flush=True,
                )
    finally:
        if owned is not None:
            owned.stop()
            if blob_root and not keep_blobs:
                shutil.rmtree(blob_root, ignore_errors=True)
    return summaries


def _run_cell(scenario: Scenario, base_url: str, size: int, conc: int, writer) -> CellSummary:
    cell = CellSummary(scenario.function, size, conc, scenario.mode, scenario.cache)
    warm_client = BenchClient(base_url, scenario)
    source_id = warm_client.create_source(size, tag=f"{size}/{conc}")
    # One warm-up invocation primes spec caches and routing; not recorded.
    warm_client.invoke_once(source_id, rep=-1)

    rows: list[tuple[int, float, str]] = []
    rows_lock = threading.Lock()
    counter = iter(range(10 ** 9))
    counter_lock = threading.Lock()
    total = scenario.repetitions * conc

    def worker():
        client = BenchClient(base_url, scenario)
        while True:
            with counter_lock:
                rep = next(counter)
            if rep >= total:
                return
            latency, outcome = client.invoke_once(source_id, rep)
            with rows_lock:
                rows.append((rep, latency, outcome))

    threads = [threading.Thread(target=worker, name=f"bench-{i}") for i in range(conc)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    rows.sort()
    for rep, latency, outcome in rows:
        if writer is not None:
            writer.writerow(
                [
                    scenario.function,
                    size,
                    conc,
                    scenario.mode,
                    "on" if scenario.cache else "off",
                    rep,
                    f"{latency:.3f}",
                    outcome,
                ]
            )
        if outcome == "ok":
            cell.latencies_ms.append(latency)
        else:
            cell.failures += 1
    return cell


def _wait_ready(base_url: str, functions: list[str], timeout: float = 15.0) -> None:
    deadline = time.monotonic() + timeout
    for fn in functions:
        while True:
            r = requests.get(base_url + f"/api/deployments/{fn}")
            if r.status_code == 200 and r.json()["state"] == "ready":
                break
            if r.status_code == 200 and r.json()["state"] == "failed":
                raise RuntimeError(f"deployment failed: {r.json()}")
            if time.monotonic() > deadline:
                raise TimeoutError(f"deployment of {fn} not ready")
            time.sleep(0.05)


def parse_size(text: str) -> int:
    text = text.strip().upper()
    for suffix, factor in (("KB", 1000), ("MB", 1000 ** 2), ("GB", 1000 ** 3), ("K", 1000), ("M", 1000 ** 2), ("B", 1)):
        if text.endswith(suffix):
            return int(float(text[: -len(suffix)]) * factor)
    return int(text)
