"""Asynchronous batch-job tracking: state machine, throttling, polling.

Every transition is appended to a structured event log under
``<sharedRoot>/jobs/`` and replayed at startup, so job history survives
restarts. Rejected submissions still produce queryable records.
"""

from __future__ import annotations

import hashlib
import json
import threading
import uuid
from collections import defaultdict, deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable

from minerva.contracts import ActionType, TrainRequest, serialize
from minerva.storage import TableRef

if TYPE_CHECKING:
    from minerva.plugins import AppManifest


class JobState(Enum):
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"
    REJECTED = "REJECTED"


TERMINAL_STATES = frozenset({JobState.SUCCEEDED, JobState.FAILED, JobState.REJECTED})

LEGAL_TRANSITIONS = frozenset(
    {
        (JobState.QUEUED, JobState.RUNNING),
        (JobState.RUNNING, JobState.SUCCEEDED),
        (JobState.RUNNING, JobState.FAILED),
        (JobState.QUEUED, JobState.FAILED),  # startup failure
    }
)


@dataclass(frozen=True)
class ThrottlePolicy:
    app_name: str
    max_in_flight: int = 2
    max_queued: int = 4

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("maxInFlight must be >= 1")
        if self.max_queued < 0:
            raise ValueError("maxQueued must be >= 0")


class IllegalTransition(Exception):
    pass


class ThrottleRejection(Exception):
    """Submission refused by admission control; a REJECTED record exists."""

    def __init__(self, job_id: str, app_name: str):
        super().__init__(f"job {job_id} rejected: throttle queue full for {app_name}")
        self.job_id = job_id


class UnknownApp(Exception):
    pass


class JobNotFound(Exception):
    pass


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class JobRecord:
    job_id: str
    app_name: str
    account_id: int
    action_type: ActionType
    workflow_exec_id: int
    workflow_task_id: str
    workflow_name: str
    model_name: str
    state: JobState
    submitted_at: str
    request: TrainRequest | None = None
    started_at: str | None = None
    finished_at: str | None = None
    failure_reason: str | None = None
    produced_model_version: int | None = None
    output_table: TableRef | None = None

    def transition(self, to_state: JobState) -> None:
        if (self.state, to_state) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(f"{self.state.value} -> {to_state.value}")
        if to_state is JobState.RUNNING:
            self.started_at = _utc_now()
        if to_state in TERMINAL_STATES:
            self.finished_at = _utc_now()
        self.state = to_state

    def to_view(self) -> dict[str, Any]:
        """Poll-facing snapshot; never includes credentials."""
        view: dict[str, Any] = {
            "jobId": self.job_id,
            "appName": self.app_name,
            "accountId": self.account_id,
            "actionType": self.action_type.value,
            "modelName": self.model_name,
            "workflowExecId": self.workflow_exec_id,
            "workflowTaskId": self.workflow_task_id,
            "workflowName": self.workflow_name,
            "state": self.state.value,
            "submittedAt": self.submitted_at,
            "startedAt": self.started_at,
            "finishedAt": self.finished_at,
            "failureReason": self.failure_reason,
            "producedModelVersion": self.produced_model_version,
        }
        if self.output_table is not None:
            view["outputTable"] = self.output_table.to_doc()
        return view


class JobEngine:
    """Admits, executes, and tracks batch jobs under per-app throttling.

    ``executor(record, manifest)`` does the actual work and returns either
    a committed model version (train) or an output TableRef (batch
    predict); any exception it raises becomes a FAILED record.
    """

    def __init__(
        self,
        shared_root: str | Path,
        executor: Callable[[JobRecord, "AppManifest"], Any],
        default_throttle: ThrottlePolicy | None = None,
        logger=None,
        replay: bool = True,
    ):
        self._executor = executor
        self._default = default_throttle or ThrottlePolicy(app_name="*")
        self._logger = logger
        self._events_path = Path(shared_root) / "jobs" / "events.log"
        self._events_path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._records: dict[str, JobRecord] = {}
        self._order: list[str] = []
        self._queued: dict[str, deque[tuple[JobRecord, "AppManifest"]]] = defaultdict(deque)
        self._slots: dict[str, int] = defaultdict(int)
        self._threads: list[threading.Thread] = []
        self._accepting = True
        if replay:
            self._replay()

    # -- admission ---------------------------------------------------------

    def policy_for(self, manifest: "AppManifest") -> ThrottlePolicy:
        return ThrottlePolicy(
            app_name=manifest.app_name,
            max_in_flight=(
                manifest.max_in_flight
                if manifest.max_in_flight is not None
                else self._default.max_in_flight
            ),
            max_queued=(
                manifest.max_queued
                if manifest.max_queued is not None
                else self._default.max_queued
            ),
        )

    def submit_job(self, request: TrainRequest, manifest: "AppManifest") -> str:
        policy = self.policy_for(manifest)
        with self._lock:
            if not self._accepting:
                raise RuntimeError("engine is shut down")
            record = self._new_record(request, manifest.app_name, JobState.QUEUED)
            if self._slots[manifest.app_name] < policy.max_in_flight:
                self._track(record)
                self._slots[manifest.app_name] += 1
                self._start_worker_thread(record, manifest)
            elif len(self._queued[manifest.app_name]) < policy.max_queued:
                self._track(record)
                self._queued[manifest.app_name].append((record, manifest))
            else:
                record.state = JobState.REJECTED
                record.failure_reason = "throttled"
                record.finished_at = _utc_now()
                self._track(record)
                raise ThrottleRejection(record.job_id, manifest.app_name)
        return record.job_id

    def _new_record(self, request: TrainRequest, app_name: str, state: JobState) -> JobRecord:
        return JobRecord(
            job_id=str(uuid.uuid4()),
            app_name=app_name,
            account_id=request.account_id,
            action_type=request.action_type,
            workflow_exec_id=request.workflow_exec_id,
            workflow_task_id=request.workflow_task_id,
            workflow_name=request.workflow_name,
            model_name=request.model_name,
            state=state,
            submitted_at=_utc_now(),
            request=request,
        )

    def _track(self, record: JobRecord) -> None:
        self._records[record.job_id] = record
        self._order.append(record.job_id)
        self._append_event(record, from_state=None, to_state=record.state)

    # -- execution ---------------------------------------------------------

    def _start_worker_thread(self, record: JobRecord, manifest: "AppManifest") -> None:
        thread = threading.Thread(
            target=self._run_job, args=(record, manifest), daemon=True,
            name=f"job-{record.job_id[:8]}",
        )
        self._threads.append(thread)
        thread.start()

    def _run_job(self, record: JobRecord, manifest: "AppManifest") -> None:
        try:
            self._transition(record, JobState.RUNNING)
            outcome = self._executor(record, manifest)
            if record.action_type is ActionType.TRAIN:
                record.produced_model_version = int(outcome)
            else:
                record.output_table = outcome
            self._transition(record, JobState.SUCCEEDED)
        except Exception as exc:
            record.failure_reason = self._failure_reason(exc)
            try:
                self._transition(record, JobState.FAILED)
            except IllegalTransition:
                pass
        finally:
            with self._lock:
                self._slots[record.app_name] -= 1
                self._promote(record.app_name)

    @staticmethod
    def _failure_reason(exc: Exception) -> str:
        to_reason = getattr(exc, "failure_reason", None)
        if callable(to_reason):
            return to_reason()
        return f"{type(exc).__name__}: {exc}"

    def _promote(self, app_name: str) -> None:
        # caller holds the lock
        queue = self._queued[app_name]
        while queue and self._slots[app_name] < self._running_limit(queue[0][1]):
            record, manifest = queue.popleft()
            self._slots[app_name] += 1
            self._start_worker_thread(record, manifest)

    def _running_limit(self, manifest: "AppManifest") -> int:
        return self.policy_for(manifest).max_in_flight

    def _transition(self, record: JobRecord, to_state: JobState) -> None:
        from_state = record.state
        record.transition(to_state)
        self._append_event(record, from_state=from_state, to_state=to_state)

    # -- queries -----------------------------------------------------------

    def poll_job(self, job_id: str) -> dict[str, Any]:
        with self._lock:
            record = self._records.get(job_id)
            if record is None:
                raise JobNotFound(f"no job {job_id}")
            return record.to_view()

    def list_jobs(
        self,
        app_name: str | None = None,
        account_id: int | None = None,
        state: JobState | None = None,
    ) -> list[dict[str, Any]]:
        with self._lock:
            views = [self._records[job_id].to_view() for job_id in self._order]
        views.sort(key=lambda v: (v["submittedAt"], v["jobId"]))
        if app_name is not None:
            views = [v for v in views if v["appName"] == app_name]
        if account_id is not None:
            views = [v for v in views if v["accountId"] == account_id]
        if state is not None:
            views = [v for v in views if v["state"] == state.value]
        return views

    def running_count(self, app_name: str) -> int:
        with self._lock:
            return sum(
                1
                for r in self._records.values()
                if r.app_name == app_name and r.state is JobState.RUNNING
            )

    def state_digest(self) -> str:
        """Order-independent digest of all job views, for purity checks."""
        views = self.list_jobs()
        return hashlib.sha256(serialize([v for v in views])).hexdigest()

    def wait_for_terminal(self, job_id: str, timeout: float = 30.0) -> dict[str, Any]:
        import time

        deadline = time.monotonic() + timeout
        while True:
            view = self.poll_job(job_id)
            if view["state"] in (s.value for s in TERMINAL_STATES):
                return view
            if time.monotonic() > deadline:
                raise TimeoutError(f"job {job_id} still {view['state']} after {timeout}s")
            time.sleep(0.02)

    def shutdown(self, wait_seconds: float = 10.0) -> None:
        with self._lock:
            self._accepting = False
            threads = list(self._threads)
        import time

        deadline = time.monotonic() + wait_seconds
        for thread in threads:
            thread.join(timeout=max(0.0, deadline - time.monotonic()))

    # -- persistence -------------------------------------------------------

    def _append_event(self, record: JobRecord, from_state: JobState | None, to_state: JobState) -> None:
        detail: dict[str, Any] = {}
        if from_state is None:
            detail = {
                "appName": record.app_name,
                "accountId": record.account_id,
                "actionType": record.action_type.value,
                "modelName": record.model_name,
                "workflowExecId": record.workflow_exec_id,
                "workflowTaskId": record.workflow_task_id,
                "workflowName": record.workflow_name,
                "submittedAt": record.submitted_at,
            }
        if to_state in TERMINAL_STATES:
            if record.failure_reason is not None:
                detail["failureReason"] = record.failure_reason
            if record.produced_model_version is not None:
                detail["producedModelVersion"] = record.produced_model_version
            if record.output_table is not None:
                detail["outputTable"] = record.output_table.to_doc()
        event = {
            "jobId": record.job_id,
            "fromState": from_state.value if from_state else None,
            "toState": to_state.value,
            "timestamp": _utc_now(),
            "detail": detail,
        }
        line = json.dumps(event, ensure_ascii=False)
        try:
            with open(self._events_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        except OSError:
            if self._logger is not None:
                self._logger.error("framework", f"failed to append job event for {record.job_id}")

    def _replay(self) -> None:
        """Rebuild records from the event log; orphaned live jobs become FAILED."""
        if not self._events_path.is_file():
            return
        for line in self._events_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError:
                continue
            job_id = event.get("jobId")
            detail = event.get("detail", {})
            to_state = JobState(event["toState"])
            record = self._records.get(job_id)
            if record is None:
                record = JobRecord(
                    job_id=job_id,
                    app_name=detail.get("appName", "?"),
                    account_id=detail.get("accountId", -1),
                    action_type=ActionType(detail.get("actionType", "train")),
                    workflow_exec_id=detail.get("workflowExecId", -1),
                    workflow_task_id=detail.get("workflowTaskId", ""),
                    workflow_name=detail.get("workflowName", ""),
                    model_name=detail.get("modelName", ""),
                    state=to_state,
                    submitted_at=detail.get("submittedAt", event.get("timestamp", "")),
                )
                self._records[job_id] = record
                self._order.append(job_id)
            else:
                record.state = to_state
                if to_state is JobState.RUNNING:
                    record.started_at = event.get("timestamp")
                if to_state in TERMINAL_STATES:
                    record.finished_at = event.get("timestamp")
            if "failureReason" in detail:
                record.failure_reason = detail["failureReason"]
            if "producedModelVersion" in detail:
                record.produced_model_version = detail["producedModelVersion"]
            if "outputTable" in detail:
                ref = detail["outputTable"]
                record.output_table = TableRef(ref["dbName"], ref["tableName"])
        # jobs that were live when the previous process stopped cannot resume
        for record in self._records.values():
            if record.state not in TERMINAL_STATES:
                from_state = record.state
                record.state = JobState.FAILED
                record.failure_reason = "service restart"
                record.finished_at = _utc_now()
                self._append_event(record, from_state=from_state, to_state=JobState.FAILED)
