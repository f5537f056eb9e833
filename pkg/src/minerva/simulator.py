"""Legacy-host simulator: plays the orchestrator and data-processing unit.

Drives a live service purely through its public surfaces — HTTP routes
plus the documented shared-storage file formats — so a passing scenario
certifies the externally observable contract. Also hosts the callback
sink used by hybrid-prediction scenarios.
"""

from __future__ import annotations

import json
import random
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any

import requests

from minerva.storage import Table, TableRef, TableStore

TERMINAL = ("SUCCEEDED", "FAILED", "REJECTED")


@dataclass
class StepResult:
    index: int
    op: str
    ok: bool
    detail: str = ""

    def to_doc(self) -> dict[str, Any]:
        return {"index": self.index, "op": self.op, "ok": self.ok, "detail": self.detail}


@dataclass
class SimulationReport:
    scenario: str
    steps: list[StepResult] = field(default_factory=list)
    max_running: dict[str, int] = field(default_factory=dict)
    callbacks_received: int = 0

    @property
    def passed(self) -> bool:
        return all(step.ok for step in self.steps)

    def to_doc(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "passed": self.passed,
            "steps": [s.to_doc() for s in self.steps],
            "maxRunningObserved": self.max_running,
            "callbacksReceived": self.callbacks_received,
        }


class CallbackSink:
    """Tiny HTTP server that records every POSTed document."""

    def __init__(self, host: str = "127.0.0.1"):
        self.deliveries: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        sink = self

        class _SinkHandler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                try:
                    doc = json.loads(raw.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError):
                    doc = {"raw": raw.decode("utf-8", "replace")}
                with sink._lock:
                    sink.deliveries.append({"path": self.path, "body": doc})
                payload = b'{"ok":true}'
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

        self._server = ThreadingHTTPServer((host, 0), _SinkHandler)
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        self.url = f"http://{host}:{self._server.server_address[1]}"

    def count(self) -> int:
        with self._lock:
            return len(self.deliveries)

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class _RunningSampler:
    """Samples RUNNING job counts per app through the public jobs route."""

    def __init__(self, server_url: str, interval: float = 0.02):
        self.server_url = server_url
        self.interval = interval
        self.max_running: dict[str, int] = {}
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def start(self):
        self._thread.start()

    def _loop(self):
        while not self._stop.is_set():
            try:
                reply = requests.get(f"{self.server_url}/v1/jobs", timeout=5)
                counts: dict[str, int] = {}
                for view in reply.json().get("jobs", []):
                    if view.get("state") == "RUNNING":
                        counts[view["appName"]] = counts.get(view["appName"], 0) + 1
                for app, count in counts.items():
                    self.max_running[app] = max(self.max_running.get(app, 0), count)
            except requests.RequestException:
                pass
            self._stop.wait(self.interval)

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=2)


def generate_orders_table(seed: int, rows: int, customers: int) -> Table:
    """Deterministic per-customer order rows; byte-identical for a fixed seed."""
    rng = random.Random(seed)
    ids = [f"c{i:03d}" for i in range(1, customers + 1)]
    out = []
    for _ in range(rows):
        cents = rng.randrange(100, 50000)
        out.append([rng.choice(ids), _plain(Decimal(cents) / 100)])
    return Table(columns=["customer_id", "order_value"], rows=out)


def _plain(value: Decimal) -> str:
    text = format(value, "f")
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text or "0"


def clv_oracle_rows(input_table: Table) -> dict[str, Decimal]:
    """Independent straight-line aggregation over the raw input rows."""
    cid = input_table.columns.index("customer_id")
    val = input_table.columns.index("order_value")
    totals: dict[str, Decimal] = {}
    for row in input_table.rows:
        totals[row[cid]] = totals.get(row[cid], Decimal(0)) + Decimal(row[val])
    return totals


class ScenarioRunner:
    def __init__(
        self,
        scenario: dict[str, Any],
        server_url: str,
        data_root: str | Path | None = None,
        base_dir: str | Path | None = None,
        seed: int | None = None,
    ):
        self.scenario = scenario
        self.server_url = server_url.rstrip("/")
        self.store = TableStore(data_root) if data_root is not None else None
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.seed = seed if seed is not None else scenario.get("seed", 0)
        self.sink = CallbackSink()
        self.job_ids: list[str] = []
        self.last_group: list[tuple[int, str | None]] = []  # (status, jobId)

    def run(self) -> SimulationReport:
        report = SimulationReport(scenario=self.scenario.get("name", "<unnamed>"))
        sampler = _RunningSampler(self.server_url)
        sampler.start()
        try:
            steps = list(self.scenario.get("steps", []))
            index = 0
            while index < len(steps):
                if steps[index].get("parallel"):
                    group = []
                    while index < len(steps) and steps[index].get("parallel"):
                        group.append((index, steps[index]))
                        index += 1
                    self._run_parallel_group(group, report)
                else:
                    report.steps.append(self._run_step(index, steps[index]))
                    index += 1
        finally:
            sampler.stop()
            report.max_running = dict(sampler.max_running)
            report.callbacks_received = self.sink.count()
            self.sink.stop()
        return report

    def _run_parallel_group(self, group, report: SimulationReport) -> None:
        results: dict[int, StepResult] = {}
        self.last_group = []
        group_lock = threading.Lock()

        def runner(idx, step):
            result = self._run_step(idx, step)
            with group_lock:
                results[idx] = result

        threads = [threading.Thread(target=runner, args=(i, s), daemon=True) for i, s in group]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for idx, _ in group:
            report.steps.append(results[idx])

    def _run_step(self, index: int, step: dict[str, Any]) -> StepResult:
        op = step.get("op", "?")
        try:
            handler = getattr(self, "_step_" + op.replace("-", "_"), None)
            if handler is None:
                return StepResult(index, op, False, f"unknown step op {op!r}")
            detail = handler(step)
            return StepResult(index, op, True, detail or "")
        except Exception as exc:
            return StepResult(index, op, False, f"{type(exc).__name__}: {exc}")

    # -- step implementations ------------------------------------------------

    def _require_store(self) -> TableStore:
        if self.store is None:
            raise RuntimeError("scenario uses table steps; pass --data-root")
        return self.store

    def _load_payload(self, step: dict[str, Any]) -> bytes:
        if "payload" in step:
            doc = step["payload"]
        else:
            path = self.base_dir / step["payloadFile"]
            doc = json.loads(path.read_text(encoding="utf-8"))
        text = json.dumps(doc, ensure_ascii=False)
        text = text.replace("{sink}", self.sink.url)
        return text.encode("utf-8")

    def _step_generate_table(self, step) -> str:
        store = self._require_store()
        seed = step.get("seed", self.seed)
        table = generate_orders_table(seed, step.get("rows", 20), step.get("customers", 6))
        store.write_table(TableRef(step["dbName"], step["tableName"]), table)
        return f"wrote {len(table.rows)} rows to {step['dbName']}.{step['tableName']} (seed {seed})"

    def _step_submit_train(self, step) -> str:
        body = self._load_payload(step)
        reply = requests.post(
            f"{self.server_url}/v1/train",
            data=body,
            headers={"Content-Type": "application/json"},
            timeout=30,
        )
        job_id = reply.json().get("jobId") if reply.status_code in (200, 202) else None
        if job_id:
            self.job_ids.append(job_id)
        self.last_group.append((reply.status_code, job_id))
        expect = step.get("expect", "accepted")
        outcomes = {"accepted": reply.status_code == 202, "rejected": reply.status_code == 429}
        ok = outcomes.get(expect, True)
        if not ok:
            raise AssertionError(f"expected {expect}, got HTTP {reply.status_code}: {reply.text}")
        return f"HTTP {reply.status_code}" + (f" jobId {job_id}" if job_id else "")

    def _await(self, job_id: str, timeout: float) -> dict[str, Any]:
        deadline = time.monotonic() + timeout
        while True:
            reply = requests.get(f"{self.server_url}/v1/jobs/{job_id}", timeout=10)
            view = reply.json()
            if view.get("state") in TERMINAL:
                return view
            if time.monotonic() > deadline:
                raise TimeoutError(f"job {job_id} still {view.get('state')} after {timeout}s")
            time.sleep(0.05)

    def _step_await_job(self, step) -> str:
        if not self.job_ids:
            raise RuntimeError("no submitted job to await")
        view = self._await(self.job_ids[-1], step.get("timeoutSeconds", 30))
        expected = step.get("expectState", "SUCCEEDED")
        if view["state"] != expected:
            raise AssertionError(
                f"job {view['jobId']} ended {view['state']} "
                f"(reason: {view.get('failureReason')}), expected {expected}"
            )
        return f"job {view['jobId']} {view['state']}"

    def _step_await_all(self, step) -> str:
        states = [self._await(j, step.get("timeoutSeconds", 60))["state"] for j in self.job_ids]
        return f"terminal states: {states}"

    def _step_submit_predict(self, step) -> str:
        body = self._load_payload(step)
        url = f"{self.server_url}/v1/apps/{step['app']}/v{step['version']}/predict"
        reply = requests.post(
            url, data=body, headers={"Content-Type": "application/json"}, timeout=30
        )
        if step.get("expectAck"):
            if reply.status_code != 202 or not reply.json().get("correlationId"):
                raise AssertionError(f"expected ack, got HTTP {reply.status_code}: {reply.text}")
            return f"acknowledged, correlationId {reply.json()['correlationId']}"
        if reply.status_code != 200:
            raise AssertionError(f"predict failed: HTTP {reply.status_code}: {reply.text}")
        doc = reply.json()
        if "expectScore" in step:
            got = doc.get("result", {}).get("score")
            if got != step["expectScore"]:
                raise AssertionError(f"score {got} != expected {step['expectScore']}")
        return f"result {json.dumps(doc.get('result'), ensure_ascii=False)}"

    def _step_expect_callback(self, step) -> str:
        want = step.get("count", 1)
        deadline = time.monotonic() + step.get("timeoutSeconds", 10)
        while self.sink.count() < want and time.monotonic() < deadline:
            time.sleep(0.05)
        time.sleep(0.3)  # catch stray duplicate deliveries
        got = self.sink.count()
        if got != want:
            raise AssertionError(f"sink received {got} deliveries, expected exactly {want}")
        return f"sink received exactly {got}"

    def _step_assert_admission(self, step) -> str:
        accepted = sum(1 for status, _ in self.last_group if status == 202)
        rejected = sum(1 for status, _ in self.last_group if status == 429)
        if accepted != step.get("accepted") or rejected != step.get("rejected"):
            raise AssertionError(
                f"admission was {accepted} accepted / {rejected} rejected, "
                f"expected {step.get('accepted')}/{step.get('rejected')}"
            )
        return f"{accepted} accepted, {rejected} rejected"

    def _step_assert_table_equals_oracle(self, step) -> str:
        store = self._require_store()
        input_table = store.read_table(TableRef(step["dbName"], step["inputTable"]))
        output_table = store.read_table(TableRef(step["dbName"], step["outputTable"]))
        expected = clv_oracle_rows(input_table)
        if output_table.columns != ["customer_id", "clv"]:
            raise AssertionError(f"unexpected output columns {output_table.columns}")
        got = {row[0]: Decimal(row[1]) for row in output_table.rows}
        if set(got) != set(expected):
            raise AssertionError(
                f"customer sets differ: output {sorted(got)} vs oracle {sorted(expected)}"
            )
        mismatches = {c: (got[c], expected[c]) for c in expected if got[c] != expected[c]}
        if mismatches:
            raise AssertionError(f"values differ from oracle: {mismatches}")
        ids = [row[0] for row in output_table.rows]
        if ids != sorted(ids):
            raise AssertionError("output rows are not sorted by customer_id")
        return f"{len(expected)} rows match the aggregation oracle exactly"


def run_scenario_file(
    path: str | Path,
    server_url: str,
    data_root: str | Path | None = None,
    seed: int | None = None,
) -> SimulationReport:
    path = Path(path)
    scenario = json.loads(path.read_text(encoding="utf-8"))
    runner = ScenarioRunner(
        scenario, server_url, data_root=data_root, base_dir=path.parent, seed=seed
    )
    return runner.run()
