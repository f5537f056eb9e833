"""The abstraction layer: app discovery and isolated worker execution.

Each app is a directory holding a ``minerva-app`` manifest plus a worker
entrypoint. Workers are separate OS processes speaking newline-delimited
JSON over stdio — a boundary no single language owns, so apps can be
written in anything. Batch executions get a fresh process per job; online
prediction uses one pre-warmed resident worker per app.
"""

from __future__ import annotations

import json
import os
import queue
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import minerva
from minerva.contracts import EndpointKind, PredictRequest, PredictResponse, TrainRequest
from minerva.logs import TieredLogger
from minerva.storage import (
    CorruptTable,
    ModelNotFound,
    ModelStore,
    TableRef,
    TableStore,
    parse_csv_table,
    read_csv_text,
)

MANIFEST_FILENAME = "minerva-app"

FAILURE_REASONS = ("spawn-error", "protocol-violation", "worker-error", "timeout", "nonzero-exit")


class WorkerFailure(Exception):
    def __init__(self, reason: str, detail: str = ""):
        assert reason in FAILURE_REASONS, reason
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)

    def failure_reason(self) -> str:
        """Job-record failure text; timeouts keep the bare reason code."""
        if self.reason == "timeout":
            return "timeout"
        return f"{self.reason}: {self.detail}" if self.detail else self.reason


class DeadlineExceeded(Exception):
    pass


class NoModel(Exception):
    def failure_reason(self) -> str:
        return f"NoModel: {self}"


class ManifestError(Exception):
    pass


@dataclass(frozen=True)
class EndpointSpec:
    kind: EndpointKind
    version: int
    path: str | None = None  # predict only; None means the standard template


@dataclass(frozen=True)
class AppManifest:
    app_name: str
    api_versions: tuple[int, ...]
    worker_command: tuple[str, ...]
    endpoints: tuple[EndpointSpec, ...]
    app_dir: Path
    description: str = ""
    workflow_names: tuple[str, ...] = ()
    max_in_flight: int | None = None
    max_queued: int | None = None
    sla_millis: int | None = None
    batch_timeout_seconds: float | None = None
    model_store: TableRef | None = None
    env: dict[str, str] = field(default_factory=dict)

    def predict_endpoints(self) -> list[EndpointSpec]:
        return [e for e in self.endpoints if e.kind is EndpointKind.PREDICT_TEMPLATE]

    def has_train_endpoint(self) -> bool:
        return any(e.kind is EndpointKind.TRAIN_STANDARD for e in self.endpoints)


def parse_manifest(app_dir: Path) -> AppManifest:
    path = app_dir / MANIFEST_FILENAME
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ManifestError(f"unreadable manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError("manifest root must be an object")

    name = doc.get("appName")
    if not isinstance(name, str) or not name:
        raise ManifestError("appName must be a non-empty string")

    versions = doc.get("apiVersions")
    if (
        not isinstance(versions, list)
        or not versions
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in versions)
        or list(versions) != sorted(set(versions))
    ):
        raise ManifestError("apiVersions must be a non-empty, strictly increasing list of integers")

    command = doc.get("workerCommand")
    if not isinstance(command, list) or not command or not all(isinstance(c, str) for c in command):
        raise ManifestError("workerCommand must be a non-empty list of strings")

    endpoints: list[EndpointSpec] = []
    for i, entry in enumerate(doc.get("endpoints", [])):
        if not isinstance(entry, dict):
            raise ManifestError(f"endpoints[{i}] must be an object")
        try:
            kind = EndpointKind(entry.get("kind"))
        except ValueError:
            raise ManifestError(f"endpoints[{i}].kind must be train-standard or predict-template") from None
        version = entry.get("version")
        if not isinstance(version, int) or version not in versions:
            raise ManifestError(f"endpoints[{i}].version must be one of apiVersions")
        endpoints.append(EndpointSpec(kind, version, entry.get("path")))
    if not endpoints:
        raise ManifestError("endpoints must declare at least one endpoint")

    throttle = doc.get("throttle", {})
    if not isinstance(throttle, dict):
        raise ManifestError("throttle must be an object")

    store_doc = doc.get("modelStore")
    model_store = None
    if store_doc is not None:
        try:
            model_store = TableRef(store_doc["dbName"], store_doc["tableName"])
        except (TypeError, KeyError, ValueError) as exc:
            raise ManifestError(f"modelStore must name dbName and tableName: {exc}") from None

    env = doc.get("env", {})
    if not isinstance(env, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in env.items()
    ):
        raise ManifestError("env must be a string-to-string map")

    return AppManifest(
        app_name=name,
        api_versions=tuple(versions),
        worker_command=tuple(command),
        endpoints=tuple(endpoints),
        app_dir=app_dir,
        description=doc.get("description", ""),
        workflow_names=tuple(doc.get("workflowNames", [])),
        max_in_flight=throttle.get("maxInFlight"),
        max_queued=throttle.get("maxQueued"),
        sla_millis=doc.get("slaMillis"),
        batch_timeout_seconds=doc.get("batchTimeoutSeconds"),
        model_store=model_store,
        env=dict(env),
    )


def scan_apps(apps_root: str | Path) -> tuple[list[AppManifest], dict[str, str]]:
    """All valid manifests under the root, plus per-directory failure reasons."""
    manifests: list[AppManifest] = []
    failures: dict[str, str] = {}
    seen: dict[str, Path] = {}
    root = Path(apps_root)
    if not root.is_dir():
        return manifests, failures
    for child in sorted(root.iterdir()):
        if not child.is_dir() or not (child / MANIFEST_FILENAME).is_file():
            continue
        try:
            manifest = parse_manifest(child)
        except ManifestError as exc:
            failures[child.name] = str(exc)
            continue
        if manifest.app_name in seen:
            failures[child.name] = (
                f"duplicate appName {manifest.app_name!r} (already provided by {seen[manifest.app_name].name})"
            )
            continue
        seen[manifest.app_name] = child
        manifests.append(manifest)
    return manifests, failures


def discover_apps(apps_root: str | Path, logger: TieredLogger | None = None) -> list[AppManifest]:
    """Discovery never aborts: invalid manifests are skipped with an ERROR log."""
    manifests, failures = scan_apps(apps_root)
    if logger is not None:
        for directory, reason in failures.items():
            logger.error("framework", f"skipping app directory {directory!r}: {reason}")
    return manifests


def _worker_env(manifest: AppManifest, extra: dict[str, str] | None = None) -> dict[str, str]:
    env = dict(os.environ)
    # make the framework importable by reference workers even when the
    # service runs from a source checkout
    package_parent = str(Path(minerva.__file__).resolve().parent.parent)
    existing = env.get("PYTHONPATH", "")
    env["PYTHONPATH"] = package_parent + (os.pathsep + existing if existing else "")
    env.update(manifest.env)
    if extra:
        env.update(extra)
    return env


def _resolve_command(manifest: AppManifest) -> list[str]:
    argv = []
    for part in manifest.worker_command:
        candidate = manifest.app_dir / part
        argv.append(str(candidate) if candidate.is_file() else part)
    return argv


class WorkerProcess:
    """One spawned worker and its message streams.

    A reader thread parses stdout lines into a queue so callers can wait
    with deadlines; stderr drains into the app's log tier.
    """

    def __init__(self, manifest: AppManifest, logger: TieredLogger, hello_timeout: float = 5.0):
        self.manifest = manifest
        self.logger = logger
        self.hello_timeout = hello_timeout
        self.proc: subprocess.Popen | None = None
        self._messages: "queue.Queue[tuple[str, Any]]" = queue.Queue()

    def start(self) -> None:
        try:
            self.proc = subprocess.Popen(
                _resolve_command(self.manifest),
                cwd=self.manifest.app_dir,
                env=_worker_env(self.manifest),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise WorkerFailure("spawn-error", str(exc)) from exc
        threading.Thread(target=self._read_stdout, daemon=True).start()
        threading.Thread(target=self._drain_stderr, daemon=True).start()
        self._handshake()

    def _read_stdout(self) -> None:
        assert self.proc is not None and self.proc.stdout is not None
        for line in self.proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                self._messages.put(("msg", json.loads(line)))
            except json.JSONDecodeError:
                self._messages.put(("garbage", line))
        self._messages.put(("eof", None))

    def _drain_stderr(self) -> None:
        assert self.proc is not None and self.proc.stderr is not None
        for line in self.proc.stderr:
            line = line.rstrip("\n")
            if line:
                self.logger.log("INFO", self.manifest.app_name, f"[worker stderr] {line}")

    def _handshake(self) -> None:
        kind, payload = self.next_message(self.hello_timeout)
        if kind == "timeout":
            self.kill()
            raise WorkerFailure("timeout", f"no hello within {self.hello_timeout}s")
        if kind == "eof":
            self.kill()
            raise WorkerFailure(self._eof_reason(), "worker exited before hello")
        if kind == "garbage" or payload.get("op") != "hello":
            self.kill()
            raise WorkerFailure("protocol-violation", "first message was not a valid hello")
        if payload.get("appName") != self.manifest.app_name:
            self.kill()
            raise WorkerFailure(
                "protocol-violation",
                f"hello appName {payload.get('appName')!r} does not match manifest",
            )
        self.send({"op": "hello-ack"})

    def send(self, message: dict[str, Any]) -> None:
        assert self.proc is not None
        if self.proc.stdin is None or self.proc.poll() is not None:
            raise WorkerFailure("worker-error", "worker process is not running")
        try:
            self.proc.stdin.write(json.dumps(message, ensure_ascii=False) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise WorkerFailure("worker-error", f"worker pipe closed: {exc}") from exc

    def close_stdin(self) -> None:
        if self.proc is not None and self.proc.stdin is not None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass

    def next_message(self, timeout: float) -> tuple[str, Any]:
        try:
            return self._messages.get(timeout=max(0.0, timeout))
        except queue.Empty:
            return ("timeout", None)

    def pending_message(self) -> tuple[str, Any] | None:
        try:
            return self._messages.get_nowait()
        except queue.Empty:
            return None

    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None

    def kill(self) -> None:
        if self.proc is None:
            return
        self.close_stdin()
        if self.proc.poll() is None:
            self.proc.kill()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass

    def returncode(self) -> int | None:
        return None if self.proc is None else self.proc.poll()

    def wait_returncode(self, timeout: float = 5.0) -> int | None:
        if self.proc is None:
            return None
        try:
            return self.proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            return self.proc.poll()

    def _eof_reason(self) -> str:
        rc = self.returncode()
        return "nonzero-exit" if rc not in (0, None) else "protocol-violation"


def run_batch_worker(
    manifest: AppManifest,
    message: dict[str, Any],
    logger: TieredLogger,
    timeout_seconds: float,
    hello_timeout: float = 5.0,
) -> dict[str, Any]:
    """One-shot conversation: spawn, hello, send one request, collect the terminal.

    The worker's stdin is closed right after the request so a well-behaved
    worker exits when done; everything it says until EOF is accounted for,
    which makes duplicate-terminal detection deterministic.
    """
    worker = WorkerProcess(manifest, logger, hello_timeout)
    worker.start()
    deadline = time.monotonic() + timeout_seconds
    terminals: list[dict[str, Any]] = []
    try:
        worker.send(message)
        worker.close_stdin()
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                worker.kill()
                if not terminals:
                    raise WorkerFailure("timeout", f"no result within {timeout_seconds}s")
                logger.warn(manifest.app_name, "worker lingered after terminal message; killed")
                break
            kind, payload = worker.next_message(remaining)
            if kind == "timeout":
                continue
            if kind == "eof":
                break
            if kind == "garbage":
                worker.kill()
                raise WorkerFailure("protocol-violation", f"unparseable worker line: {payload!r}")
            op = payload.get("op")
            if op == "progress":
                logger.info(manifest.app_name, f"progress: {payload.get('message', '')}")
            elif op in ("result", "error"):
                terminals.append(payload)
            else:
                worker.kill()
                raise WorkerFailure("protocol-violation", f"unexpected worker op {op!r}")
        if len(terminals) > 1:
            raise WorkerFailure("protocol-violation", "worker sent more than one terminal message")
        if not terminals:
            rc = worker.returncode()
            if rc not in (0, None):
                raise WorkerFailure("nonzero-exit", f"worker exited with code {rc} before any result")
            raise WorkerFailure("protocol-violation", "worker exited without a terminal message")
        terminal = terminals[0]
        if terminal.get("op") == "error":
            raise WorkerFailure("worker-error", str(terminal.get("message", "")))
        body = terminal.get("body", {})
        return body if isinstance(body, dict) else {}
    finally:
        worker.kill()


class ResidentWorker:
    """The pre-warmed online-predict worker for one app, serialized per request."""

    def __init__(self, manifest: AppManifest, logger: TieredLogger, hello_timeout: float = 5.0):
        self.manifest = manifest
        self.logger = logger
        self.hello_timeout = hello_timeout
        self._lock = threading.Lock()
        self._worker: WorkerProcess | None = None

    def start(self) -> None:
        with self._lock:
            self._spawn_locked()

    def _spawn_locked(self) -> None:
        try:
            worker = WorkerProcess(self.manifest, self.logger, self.hello_timeout)
            worker.start()
            self._worker = worker
        except WorkerFailure as exc:
            self._worker = None
            self.logger.error(
                self.manifest.app_name, f"resident worker failed to start: {exc}"
            )

    def status(self) -> str:
        worker = self._worker
        return "alive" if worker is not None and worker.alive() else "dead"

    def predict(self, message: dict[str, Any], deadline_seconds: float) -> dict[str, Any]:
        with self._lock:
            worker = self._worker
            if worker is None or not worker.alive():
                self._spawn_locked()  # heal for the next caller
                raise WorkerFailure("worker-error", "resident worker was dead; respawned")
            leftover = worker.pending_message()
            if leftover is not None and leftover[0] != "eof":
                worker.kill()
                self._spawn_locked()
                raise WorkerFailure(
                    "protocol-violation", "resident worker sent messages outside a request"
                )
            deadline = time.monotonic() + deadline_seconds
            try:
                worker.send(message)
            except WorkerFailure:
                self._spawn_locked()
                raise
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    # recycle: the stream is desynchronized past the deadline
                    worker.kill()
                    threading.Thread(target=self.start, daemon=True).start()
                    raise DeadlineExceeded(
                        f"no prediction within {int(deadline_seconds * 1000)} ms"
                    )
                kind, payload = worker.next_message(remaining)
                if kind == "timeout":
                    continue
                if kind in ("eof", "garbage"):
                    worker.kill()
                    self._spawn_locked()
                    raise WorkerFailure(
                        "worker-error" if kind == "eof" else "protocol-violation",
                        "resident worker died mid-request" if kind == "eof"
                        else f"unparseable worker line: {payload!r}",
                    )
                op = payload.get("op")
                if op == "progress":
                    self.logger.info(
                        self.manifest.app_name, f"progress: {payload.get('message', '')}"
                    )
                    continue
                if op == "error":
                    # worker-level error; the process stays warm
                    raise WorkerFailure("worker-error", str(payload.get("message", "")))
                if op == "result":
                    body = payload.get("body", {})
                    return body if isinstance(body, dict) else {}
                worker.kill()
                self._spawn_locked()
                raise WorkerFailure("protocol-violation", f"unexpected worker op {op!r}")

    def stop(self) -> None:
        with self._lock:
            if self._worker is not None:
                self._worker.kill()
                self._worker = None

    def pid(self) -> int | None:
        worker = self._worker
        return worker.proc.pid if worker is not None and worker.proc is not None else None


@dataclass
class TrainResult:
    model_version: int


class PluginHost:
    """Executes app work against the storage layer on behalf of the engine."""

    def __init__(
        self,
        table_store: TableStore,
        model_store: ModelStore,
        logger: TieredLogger,
        scratch_root: str | Path,
        batch_timeout_seconds: float = 3600.0,
        hello_timeout_seconds: float = 5.0,
    ):
        self.table_store = table_store
        self.model_store = model_store
        self.logger = logger
        self.scratch_root = Path(scratch_root)
        self.batch_timeout_seconds = batch_timeout_seconds
        self.hello_timeout_seconds = hello_timeout_seconds

    def _batch_timeout(self, manifest: AppManifest) -> float:
        if manifest.batch_timeout_seconds is not None:
            return float(manifest.batch_timeout_seconds)
        return self.batch_timeout_seconds

    def _scratch_dir(self, job_id: str) -> Path:
        directory = self.scratch_root / job_id
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    @staticmethod
    def _first_ref(refs) -> TableRef:
        table_name, db_name = refs.pairs()[0]
        return TableRef(db_name, table_name)

    def execute_train(self, manifest: AppManifest, request: TrainRequest, job_id: str) -> TrainResult:
        store_ref = self._first_ref(request.model_stored_table_name)
        input_paths = [
            str(self.table_store.table_path(TableRef(db, table)))
            for table, db in request.model_input_payload.pairs()
        ]
        scratch_dir = self._scratch_dir(job_id)
        scratch = scratch_dir / "model.bin"
        message = {
            "op": "train",
            "request": request.to_doc(),
            "paths": {"inputs": input_paths, "modelScratch": str(scratch)},
            "logPath": str(self.logger.log_dir / f"{manifest.app_name}.log"),
        }
        body = run_batch_worker(
            manifest, message, self.logger, self._batch_timeout(manifest), self.hello_timeout_seconds
        )
        blob_path = Path(body.get("modelBlobPath", scratch))
        if not blob_path.is_file() or blob_path.stat().st_size == 0:
            raise WorkerFailure("worker-error", "worker produced no model blob")
        blob = blob_path.read_bytes()
        version = self.model_store.put_model(
            store_ref,
            request.account_id,
            request.model_name,
            blob,
            {"producingJobId": job_id, "appName": manifest.app_name},
        )
        self.logger.info(
            "framework",
            f"committed model {request.model_name} v{version} for account {request.account_id}",
        )
        return TrainResult(model_version=version)

    def execute_predict_batch(self, manifest: AppManifest, request: TrainRequest, job_id: str) -> TableRef:
        store_ref = self._first_ref(request.model_stored_table_name)
        output_ref = self._first_ref(request.model_predicted_table_name)
        try:
            artifact = self.model_store.get_model(store_ref, request.account_id, request.model_name)
        except ModelNotFound as exc:
            raise NoModel(str(exc)) from exc
        model_path = self.model_store.blob_path(
            store_ref, request.account_id, request.model_name, artifact.version
        )
        scratch_dir = self._scratch_dir(job_id)
        output_scratch = scratch_dir / "output.csv"
        message = {
            "op": "predict",
            "mode": "batch",
            "request": request.to_doc(),
            "paths": {"model": str(model_path), "output": str(output_scratch)},
        }
        body = run_batch_worker(
            manifest, message, self.logger, self._batch_timeout(manifest), self.hello_timeout_seconds
        )
        out_path = Path(body.get("outputPath", output_scratch))
        if not out_path.is_file():
            raise WorkerFailure("worker-error", "worker produced no output table")
        try:
            table = parse_csv_table(read_csv_text(out_path))
        except CorruptTable as exc:
            raise WorkerFailure("worker-error", f"malformed output table: {exc}") from exc
        self.table_store.write_table(output_ref, table)
        return output_ref

    def execute_predict_online(
        self,
        manifest: AppManifest,
        request: PredictRequest,
        resident: ResidentWorker,
        deadline_seconds: float,
    ) -> PredictResponse:
        model_path: str | None = None
        version_used = 0
        if manifest.model_store is not None:
            account = _as_int(request.account_id)
            model_key = request.model_storage.get("model")
            if account is not None and isinstance(model_key, str) and model_key:
                try:
                    artifact = self.model_store.get_model(manifest.model_store, account, model_key)
                except (ModelNotFound, ValueError):
                    pass
                else:
                    version_used = artifact.version
                    model_path = str(
                        self.model_store.blob_path(
                            manifest.model_store, account, model_key, artifact.version
                        )
                    )
        message = {
            "op": "predict",
            "mode": "online",
            "request": request.to_doc(),
            "paths": {"model": model_path},
        }
        body = resident.predict(message, deadline_seconds)
        return PredictResponse(
            version=request.version,
            account_id=request.account_id,
            result=body,
            model_version_used=version_used,
        )


def _as_int(value: str) -> int | None:
    try:
        return int(value)
    except (TypeError, ValueError):
        return None


def scaffold_app(app_name: str, target_dir: str | Path) -> Path:
    """Write a runnable stub app that registers cleanly and answers with
    not-implemented errors until the algorithm is filled in."""
    if not app_name or not all(c.isalnum() or c in "-_" for c in app_name):
        raise ValueError(f"app name must be alphanumeric/dash/underscore, got {app_name!r}")
    app_dir = Path(target_dir) / app_name
    if app_dir.exists():
        raise FileExistsError(f"{app_dir} already exists")
    app_dir.mkdir(parents=True)
    manifest = {
        "appName": app_name,
        "apiVersions": [1],
        "workerCommand": ["python3", "worker.py"],
        "endpoints": [
            {"kind": "train-standard", "version": 1},
            {"kind": "predict-template", "version": 1},
        ],
        "workflowNames": [app_name.upper().replace("-", "_")],
        "description": f"Scaffolded app stub for {app_name}",
    }
    (app_dir / MANIFEST_FILENAME).write_text(
        json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    worker = f'''#!/usr/bin/env python3
"""Worker stub for the {app_name} app. Replace the handlers with a real
algorithm; the framework only cares about the message contract."""

import sys

from minerva.appkit import WorkerApp, WorkerError


def handle_train(message):
    raise WorkerError("train not implemented for {app_name}")


def handle_predict(message):
    raise WorkerError("predict not implemented for {app_name}")


if __name__ == "__main__":
    app = WorkerApp("{app_name}", [1])
    sys.exit(app.run(train=handle_train, predict=handle_predict))
'''
    (app_dir / "worker.py").write_text(worker, encoding="utf-8")
    return app_dir
