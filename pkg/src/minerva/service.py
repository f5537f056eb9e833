"""The core layer: HTTP surface, app registry, callbacks, redaction.

Routes (all JSON):
  POST /v1/train                           standardized batch submit
  POST /v1/apps/{app}/v{version}/predict   templated online predict
  GET  /v1/jobs/{jobId}                    poll one job
  GET  /v1/jobs                            list jobs (appName/accountId/state filters)
  GET  /v1/catalog                         self-documenting endpoint catalog
  GET  /v1/health                          liveness + resident-worker status
  POST /v1/admin/reload                    re-discover apps without restart
"""

from __future__ import annotations

import re
import threading
import traceback
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any
from urllib.parse import parse_qs, urlsplit

import requests

from minerva import contracts
from minerva.config import FrameworkConfig
from minerva.contracts import (
    ActionType,
    ContractSchema,
    EndpointKind,
    SchemaRegistry,
    TRAIN_FIELD_SPECS,
    ValidationError,
    VersionMismatch,
    serialize,
)
from minerva.jobs import (
    JobEngine,
    JobNotFound,
    JobState,
    ThrottlePolicy,
    ThrottleRejection,
    UnknownApp,
)
from minerva.logs import TieredLogger
from minerva.plugins import (
    AppManifest,
    DeadlineExceeded,
    NoModel,
    PluginHost,
    ResidentWorker,
    WorkerFailure,
    scan_apps,
)
from minerva.storage import ModelStore, TableRef, TableStore

_PREDICT_ROUTE = re.compile(r"^/v1/apps/([A-Za-z0-9_-]+)/v(\d+)/predict$")
_JOB_ROUTE = re.compile(r"^/v1/jobs/([A-Za-z0-9-]+)$")


class StartupError(Exception):
    pass


@dataclass
class AppEntry:
    manifest: AppManifest
    resident: ResidentWorker | None = None


@dataclass(frozen=True)
class RegistryState:
    entries: dict[str, AppEntry] = field(default_factory=dict)
    workflow_map: dict[str, str] = field(default_factory=dict)
    predict_routes: dict[str, tuple[str, int]] = field(default_factory=dict)


@dataclass
class CallbackDelivery:
    correlation_id: str
    target_url: str
    attempts: int = 0
    last_status: str | None = None
    succeeded: bool = False


def _ensure_writable(path: Path, label: str) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / f".writable-{uuid.uuid4().hex}"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise StartupError(f"{label} {path} is not writable: {exc}") from exc


class MinervaService:
    def __init__(self, config: FrameworkConfig):
        self.config = config
        _ensure_writable(config.data_root, "data root")
        _ensure_writable(config.shared_root, "shared root")
        _ensure_writable(config.apps_root, "apps root")
        self.logger = TieredLogger(config.shared_root, config.log_tier)
        self.table_store = TableStore(config.data_root)
        self.model_store = ModelStore(config.data_root)
        self.plugin_host = PluginHost(
            self.table_store,
            self.model_store,
            self.logger,
            scratch_root=config.shared_root / "scratch",
            batch_timeout_seconds=config.batch_timeout_seconds,
            hello_timeout_seconds=config.hello_timeout_seconds,
        )
        self.engine = JobEngine(
            config.shared_root,
            executor=self._execute_job,
            default_throttle=ThrottlePolicy(
                app_name="*",
                max_in_flight=config.default_max_in_flight,
                max_queued=config.default_max_queued,
            ),
            logger=self.logger,
        )
        self.callback_deliveries: list[CallbackDelivery] = []
        self._callback_lock = threading.Lock()
        self._reload_lock = threading.Lock()
        self._schemas = SchemaRegistry()
        self._state = RegistryState()
        self._httpd: ThreadingHTTPServer | None = None
        self._http_thread: threading.Thread | None = None

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "MinervaService":
        self.reload_apps()
        address = (self.config.listen_host, self.config.listen_port)
        try:
            httpd = _Server(address, _Handler)
        except OSError as exc:
            raise StartupError(
                f"cannot listen on {self.config.listen_host}:{self.config.listen_port}: {exc}"
            ) from exc
        httpd.service = self  # type: ignore[attr-defined]
        self._httpd = httpd
        self._http_thread = threading.Thread(
            target=httpd.serve_forever, daemon=True, name="minerva-http"
        )
        self._http_thread.start()
        self.logger.info("framework", f"service listening on {self.base_url}")
        return self

    @property
    def port(self) -> int:
        assert self._httpd is not None
        return self._httpd.server_address[1]

    @property
    def base_url(self) -> str:
        return f"http://{self.config.listen_host}:{self.port}"

    def stop(self, drain_seconds: float = 10.0) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
        self.engine.shutdown(wait_seconds=drain_seconds)
        for entry in self._state.entries.values():
            if entry.resident is not None:
                entry.resident.stop()
        self.logger.info("framework", "service stopped")

    # -- app registry --------------------------------------------------------

    def reload_apps(self) -> dict[str, Any]:
        """Re-discover apps; new ones mount, removed ones drain and unmount.

        Running jobs are never interrupted: the engine holds its own
        manifest reference for the lifetime of each job.
        """
        with self._reload_lock:
            manifests, failures = scan_apps(self.config.apps_root)
            for directory, reason in failures.items():
                self.logger.error("framework", f"skipping app directory {directory!r}: {reason}")

            old_entries = self._state.entries
            new_names = {m.app_name for m in manifests}
            added = sorted(new_names - set(old_entries))
            removed = sorted(set(old_entries) - new_names)
            unchanged = sorted(new_names & set(old_entries))

            entries: dict[str, AppEntry] = {}
            workflow_map: dict[str, str] = {}
            predict_routes: dict[str, tuple[str, int]] = {}
            schemas = SchemaRegistry()

            for manifest in sorted(manifests, key=lambda m: m.app_name):
                name = manifest.app_name
                resident = old_entries[name].resident if name in old_entries else None
                if manifest.predict_endpoints():
                    if resident is None:
                        resident = ResidentWorker(
                            manifest, self.logger, self.config.hello_timeout_seconds
                        )
                        resident.start()
                elif resident is not None:
                    resident.stop()
                    resident = None
                entries[name] = AppEntry(manifest, resident)

                if manifest.has_train_endpoint():
                    for workflow in manifest.workflow_names:
                        if workflow in workflow_map:
                            self.logger.error(
                                "framework",
                                f"workflow {workflow!r} already claimed by "
                                f"{workflow_map[workflow]!r}; ignoring claim from {name!r}",
                            )
                            continue
                        workflow_map[workflow] = name
                    for spec in manifest.endpoints:
                        if spec.kind is EndpointKind.TRAIN_STANDARD:
                            schemas.register(
                                ContractSchema(name, spec.kind, spec.version, TRAIN_FIELD_SPECS)
                            )
                for spec in manifest.predict_endpoints():
                    path = spec.path or f"/v1/apps/{name}/v{spec.version}/predict"
                    if path in predict_routes:
                        self.logger.error(
                            "framework", f"predict route {path} already mounted; skipping"
                        )
                        continue
                    predict_routes[path] = (name, spec.version)
                    schemas.register(ContractSchema(name, spec.kind, spec.version))

            for name in removed:
                resident = old_entries[name].resident
                if resident is not None:
                    resident.stop()  # waits for any in-flight request

            self._schemas = schemas
            self._state = RegistryState(entries, workflow_map, predict_routes)
            self.logger.info(
                "framework",
                f"apps loaded: {sorted(entries)} (added={added} removed={removed})",
            )
            return {
                "added": added,
                "removed": removed,
                "unchanged": unchanged,
                "failures": failures,
            }

    # -- job execution -------------------------------------------------------

    def _execute_job(self, record, manifest: AppManifest):
        assert record.request is not None
        if record.action_type is ActionType.TRAIN:
            result = self.plugin_host.execute_train(manifest, record.request, record.job_id)
            return result.model_version
        return self.plugin_host.execute_predict_batch(manifest, record.request, record.job_id)

    # -- request dispatch ----------------------------------------------------

    def dispatch(self, method: str, path: str, query: dict[str, list[str]], body: bytes) -> tuple[int, dict[str, Any]]:
        try:
            return self._route(method, path, query, body)
        except Exception as exc:
            return self._error_response(exc)

    def _route(self, method: str, path: str, query: dict[str, list[str]], body: bytes):
        if path == "/v1/train":
            self._require(method, "POST")
            return self._handle_train(body)
        match = _PREDICT_ROUTE.match(path)
        if match or path in self._state.predict_routes:
            self._require(method, "POST")
            if path in self._state.predict_routes:
                app_name, version = self._state.predict_routes[path]
            else:
                app_name, version = match.group(1), int(match.group(2))
            return self._handle_predict(app_name, version, body)
        match = _JOB_ROUTE.match(path)
        if match:
            self._require(method, "GET")
            return 200, self.engine.poll_job(match.group(1))
        if path == "/v1/jobs":
            self._require(method, "GET")
            return 200, {"jobs": self._handle_list_jobs(query)}
        if path == "/v1/catalog":
            self._require(method, "GET")
            return 200, self._catalog_doc()
        if path == "/v1/health":
            self._require(method, "GET")
            return 200, self._health_doc()
        if path == "/v1/admin/reload":
            self._require(method, "POST")
            return 200, self.reload_apps()
        return 404, {"code": "NotFound", "message": f"no route {path}"}

    @staticmethod
    def _require(method: str, expected: str) -> None:
        if method != expected:
            raise _MethodNotAllowed(expected)

    def _handle_train(self, body: bytes) -> tuple[int, dict[str, Any]]:
        request = contracts.parse_train_request(body, on_unknown_field=self._log_unknown_field)
        self.logger.add_secrets(request.secret_values())
        self._check_table_refs(request)
        state = self._state
        app_name = state.workflow_map.get(request.workflow_name)
        if app_name is None:
            raise UnknownApp(f"no registered app handles workflow {request.workflow_name!r}")
        manifest = state.entries[app_name].manifest
        job_id = self.engine.submit_job(request, manifest)
        self.logger.info(
            "framework",
            f"accepted {request.action_type.value} job {job_id} for app {app_name} "
            f"account {request.account_id}",
        )
        return 202, {
            "jobId": job_id,
            "workflowExecId": request.workflow_exec_id,
            "workflowTaskId": request.workflow_task_id,
        }

    @staticmethod
    def _check_table_refs(request) -> None:
        for label, refset in (
            ("modelInputPayload", request.model_input_payload),
            ("modelStoredTableName", request.model_stored_table_name),
            ("modelPredictedTableName", request.model_predicted_table_name),
        ):
            for table, db in refset.pairs():
                try:
                    TableRef(db, table)
                except ValueError as exc:
                    raise contracts.BadFieldType(str(exc), path=label) from None

    def _handle_predict(self, app_name: str, path_version: int, body: bytes):
        state = self._state
        entry = state.entries.get(app_name)
        if entry is None:
            raise UnknownApp(f"no registered app {app_name!r}")
        payload_version = contracts.peek_version(body)
        if payload_version != path_version:
            raise VersionMismatch(
                f"path version {path_version} does not match payload version {payload_version}",
                "version",
            )
        schemas = self._schemas.endpoint(app_name, EndpointKind.PREDICT_TEMPLATE)
        request = contracts.parse_predict_request(body, schemas, self._log_unknown_field)
        deadline_seconds = (entry.manifest.sla_millis or self.config.default_sla_millis) / 1000.0

        if request.callback_url is not None:
            correlation_id = str(uuid.uuid4())
            threading.Thread(
                target=self._predict_and_deliver,
                args=(entry, request, deadline_seconds, correlation_id),
                daemon=True,
                name=f"callback-{correlation_id[:8]}",
            ).start()
            return 202, {"accepted": True, "correlationId": correlation_id}

        if entry.resident is None:
            raise WorkerFailure("worker-error", f"app {app_name!r} has no online predict worker")
        response = self.plugin_host.execute_predict_online(
            entry.manifest, request, entry.resident, deadline_seconds
        )
        return 200, response.to_doc()

    def _predict_and_deliver(self, entry, request, deadline_seconds, correlation_id) -> None:
        try:
            if entry.resident is None:
                raise WorkerFailure("worker-error", "app has no online predict worker")
            response = self.plugin_host.execute_predict_online(
                entry.manifest, request, entry.resident, deadline_seconds
            )
            doc = response.to_doc()
            doc["correlationId"] = correlation_id
        except Exception as exc:
            _, error_doc = self._error_response(exc)
            doc = {"correlationId": correlation_id, "error": error_doc}
        delivery = CallbackDelivery(correlation_id, request.callback_url)
        with self._callback_lock:
            self.callback_deliveries.append(delivery)
        backoffs = self.config.callback_backoff_seconds
        for attempt in range(self.config.callback_max_attempts):
            delivery.attempts = attempt + 1
            try:
                reply = requests.post(
                    request.callback_url,
                    data=serialize(doc),
                    headers={"Content-Type": "application/json"},
                    timeout=10,
                )
                delivery.last_status = str(reply.status_code)
                if 200 <= reply.status_code < 300:
                    delivery.succeeded = True
                    self.logger.info(
                        "framework", f"callback {correlation_id} delivered to {request.callback_url}"
                    )
                    return
            except requests.RequestException as exc:
                delivery.last_status = f"transport-error: {type(exc).__name__}"
            if attempt < self.config.callback_max_attempts - 1:
                import time

                time.sleep(backoffs[min(attempt, len(backoffs) - 1)])
        self.logger.warn(
            "framework",
            f"callback {correlation_id} exhausted {self.config.callback_max_attempts} attempts",
        )

    def _handle_list_jobs(self, query: dict[str, list[str]]) -> list[dict[str, Any]]:
        app_name = query.get("appName", [None])[0]
        account_raw = query.get("accountId", [None])[0]
        state_raw = query.get("state", [None])[0]
        account_id = None
        if account_raw is not None:
            try:
                account_id = int(account_raw)
            except ValueError:
                raise contracts.BadFieldType("accountId filter must be an integer", "accountId") from None
        state = None
        if state_raw is not None:
            try:
                state = JobState(state_raw)
            except ValueError:
                raise contracts.BadFieldType(
                    f"state filter must be one of {[s.value for s in JobState]}", "state"
                ) from None
        return self.engine.list_jobs(app_name=app_name, account_id=account_id, state=state)

    def _catalog_doc(self) -> dict[str, Any]:
        state = self._state
        apps = []
        for name in sorted(state.entries):
            manifest = state.entries[name].manifest
            policy = self.engine.policy_for(manifest)
            endpoints = []
            for spec in manifest.endpoints:
                if spec.kind is EndpointKind.TRAIN_STANDARD:
                    endpoints.append(
                        {"method": "POST", "path": "/v1/train", "kind": spec.kind.value,
                         "version": spec.version}
                    )
                else:
                    path = spec.path or f"/v1/apps/{name}/v{spec.version}/predict"
                    endpoints.append(
                        {"method": "POST", "path": path, "kind": spec.kind.value,
                         "version": spec.version}
                    )
            apps.append(
                {
                    "appName": name,
                    "apiVersions": list(manifest.api_versions),
                    "description": manifest.description,
                    "workflowNames": list(manifest.workflow_names),
                    "throttle": {
                        "maxInFlight": policy.max_in_flight,
                        "maxQueued": policy.max_queued,
                    },
                    "endpoints": endpoints,
                }
            )
        return {"apps": apps}

    def _health_doc(self) -> dict[str, Any]:
        state = self._state
        apps = {}
        degraded = []
        for name, entry in sorted(state.entries.items()):
            if entry.resident is None:
                apps[name] = {"residentWorker": "none"}
            else:
                status = entry.resident.status()
                apps[name] = {"residentWorker": status}
                if status != "alive":
                    degraded.append(name)
        return {
            "status": "degraded" if degraded else "ok",
            "degradedApps": degraded,
            "apps": apps,
        }

    # -- error mapping -------------------------------------------------------

    def _log_unknown_field(self, name: str) -> None:
        self.logger.debug("framework", f"ignoring unrecognized payload field {name!r}")

    def _error_response(self, exc: Exception) -> tuple[int, dict[str, Any]]:
        if isinstance(exc, ValidationError):
            status, doc = 400, exc.to_doc()
        elif isinstance(exc, UnknownApp):
            status, doc = 404, {"code": "UnknownApp", "message": str(exc)}
        elif isinstance(exc, JobNotFound):
            status, doc = 404, {"code": "JobNotFound", "message": str(exc)}
        elif isinstance(exc, ThrottleRejection):
            status, doc = 429, {"code": "Throttled", "message": str(exc), "jobId": exc.job_id}
        elif isinstance(exc, DeadlineExceeded):
            status, doc = 504, {"code": "DeadlineExceeded", "message": str(exc)}
        elif isinstance(exc, WorkerFailure):
            status, doc = 502, {
                "code": "WorkerFailure", "reason": exc.reason, "message": exc.detail,
            }
        elif isinstance(exc, NoModel):
            status, doc = 409, {"code": "NoModel", "message": str(exc)}
        elif isinstance(exc, _MethodNotAllowed):
            status, doc = 405, {"code": "MethodNotAllowed", "message": str(exc)}
        else:
            self.logger.error(
                "framework", f"internal error: {type(exc).__name__}: {exc}\n{traceback.format_exc()}"
            )
            status, doc = 500, {"code": "InternalError", "message": type(exc).__name__}
        return status, self._redact_doc(doc)

    def _redact_doc(self, doc: Any) -> Any:
        if isinstance(doc, str):
            return self.logger.redact(doc)
        if isinstance(doc, dict):
            return {k: self._redact_doc(v) for k, v in doc.items()}
        if isinstance(doc, list):
            return [self._redact_doc(v) for v in doc]
        return doc


class _MethodNotAllowed(Exception):
    def __init__(self, expected: str):
        super().__init__(f"use {expected} for this route")


class _Server(ThreadingHTTPServer):
    daemon_threads = True


class _Handler(BaseHTTPRequestHandler):
    server_version = "minerva"
    protocol_version = "HTTP/1.1"

    @property
    def _service(self) -> MinervaService:
        return self.server.service  # type: ignore[attr-defined]

    def log_message(self, fmt: str, *args) -> None:
        self._service.logger.debug("framework", "http " + fmt % args)

    def _handle(self, method: str) -> None:
        parsed = urlsplit(self.path)
        body = b""
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            body = self.rfile.read(length)
        status, doc = self._service.dispatch(method, parsed.path, parse_qs(parsed.query), body)
        payload = serialize(doc)
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_GET(self) -> None:
        self._handle("GET")

    def do_POST(self) -> None:
        self._handle("POST")


def start_service(config: FrameworkConfig) -> MinervaService:
    """Build and start a service; raises StartupError with a diagnostic on failure."""
    return MinervaService(config).start()
