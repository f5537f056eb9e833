"""File-backed emulation of the legacy data layer.

Tables live at ``<dataRoot>/<dbName>/<tableName>.csv`` (header row,
RFC-4180 quoting). Model versions live under
``<dataRoot>/<dbName>/<storeTable>/<accountId>/<modelName>/`` as
``v<k>.bin`` + ``v<k>.meta`` pairs; the meta rename is the commit point,
so a version exists iff its meta file does. All writes are
write-temp-then-rename on the same filesystem.
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import io
import json
import os
import re
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

_NAME_RE = re.compile(r"^[A-Za-z0-9_]+$")

# Test hook: called with a kill-point name at commit-critical moments.
# Raising from the hook simulates a crash between write and commit.
kill_point_hook: Callable[[str], None] | None = None


def _kill_point(name: str) -> None:
    if kill_point_hook is not None:
        kill_point_hook(name)


class StorageError(Exception):
    pass


class TableNotFound(StorageError):
    pass


class CorruptTable(StorageError):
    pass


class StorageFailure(StorageError):
    pass


class ModelNotFound(StorageError):
    pass


class VersionNotFound(StorageError):
    pass


class IntegrityFailure(StorageError):
    pass


@dataclass(frozen=True)
class TableRef:
    db_name: str
    table_name: str

    def __post_init__(self):
        for label, name in (("dbName", self.db_name), ("tableName", self.table_name)):
            if not name or not _NAME_RE.match(name):
                raise ValueError(f"{label} must match [A-Za-z0-9_]+, got {name!r}")

    def to_doc(self) -> dict[str, str]:
        return {"dbName": self.db_name, "tableName": self.table_name}


@dataclass
class Table:
    """Ordered columns plus string-cell rows; typing is the app's concern."""

    columns: list[str]
    rows: list[list[str]]

    def __post_init__(self):
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("column names must be unique")
        for i, row in enumerate(self.rows):
            if len(row) != len(self.columns):
                raise ValueError(
                    f"row {i} has {len(row)} cells, expected {len(self.columns)}"
                )
            # NUL cannot survive a text-mode CSV file
            if any("\x00" in cell for cell in row):
                raise ValueError(f"row {i} contains a NUL character")


@dataclass(frozen=True)
class ModelArtifact:
    account_id: int
    model_name: str
    version: int
    blob: bytes
    metadata: dict[str, Any] = field(default_factory=dict)


def _digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def read_csv_text(path: str | os.PathLike) -> str:
    """Read CSV source with newline translation disabled (RFC-4180 cells
    may legally contain bare newlines)."""
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def _atomic_write_bytes(target: Path, payload: bytes, kill_point_name: str) -> None:
    tmp = target.with_name(f"{target.name}.tmp-{uuid.uuid4().hex}")
    try:
        tmp.write_bytes(payload)
        _kill_point(kill_point_name)
        os.replace(tmp, target)
    finally:
        tmp.unlink(missing_ok=True)


class TableStore:
    """Named tabular datasets shared with the host's data-processing unit."""

    def __init__(self, data_root: str | os.PathLike):
        self.data_root = Path(data_root)

    def table_path(self, ref: TableRef) -> Path:
        return self.data_root / ref.db_name / f"{ref.table_name}.csv"

    def exists(self, ref: TableRef) -> bool:
        return self.table_path(ref).is_file()

    def read_table(self, ref: TableRef) -> Table:
        path = self.table_path(ref)
        if not path.is_file():
            raise TableNotFound(f"no table {ref.db_name}.{ref.table_name} under {self.data_root}")
        try:
            text = read_csv_text(path)
        except OSError as exc:
            raise StorageFailure(f"reading {path}: {exc}") from exc
        return parse_csv_table(text, where=f"{ref.db_name}.{ref.table_name}")

    def write_table(self, ref: TableRef, table: Table) -> None:
        """Atomic replace: concurrent readers see the old or the new table."""
        Table(table.columns, table.rows)  # re-check invariants before any I/O
        path = self.table_path(ref)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            _atomic_write_bytes(
                path, render_csv_table(table).encode("utf-8"), "table-before-commit"
            )
        except OSError as exc:
            raise StorageFailure(f"writing {path}: {exc}") from exc


def parse_csv_table(text: str, where: str = "<inline>") -> Table:
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        records = list(reader)
    except csv.Error as exc:
        raise CorruptTable(f"{where}: {exc}") from exc
    if not records:
        raise CorruptTable(f"{where}: empty file, expected a header row")
    columns, rows = records[0], records[1:]
    if len(set(columns)) != len(columns):
        raise CorruptTable(f"{where}: duplicate column names {columns}")
    for i, row in enumerate(rows):
        if len(row) != len(columns):
            raise CorruptTable(
                f"{where}: row {i} has {len(row)} cells under {len(columns)} columns"
            )
    return Table(columns, rows)


def render_csv_table(table: Table) -> str:
    buf = io.StringIO(newline="")
    # default excel dialect: CRLF rows, and minimal quoting then covers
    # cells containing bare \r or \n
    writer = csv.writer(buf)
    writer.writerow(table.columns)
    writer.writerows(table.rows)
    return buf.getvalue()


class ModelStore:
    """Versioned model registry: contiguous versions, digest-checked reads.

    Version allocation is serialized per (account, model) by an exclusive
    advisory lock, so concurrent puts from any mix of threads and
    processes still yield the contiguous set {1..N}.
    """

    def __init__(self, data_root: str | os.PathLike):
        self.data_root = Path(data_root)

    def model_dir(self, store: TableRef, account_id: int, model_name: str) -> Path:
        if not _NAME_RE.match(model_name or ""):
            raise ValueError(f"modelName must match [A-Za-z0-9_]+, got {model_name!r}")
        return self.data_root / store.db_name / store.table_name / str(account_id) / model_name

    def blob_path(self, store: TableRef, account_id: int, model_name: str, version: int) -> Path:
        return self.model_dir(store, account_id, model_name) / f"v{version}.bin"

    def versions(self, store: TableRef, account_id: int, model_name: str) -> set[int]:
        directory = self.model_dir(store, account_id, model_name)
        if not directory.is_dir():
            return set()
        found = set()
        for meta in directory.glob("v*.meta"):
            m = re.fullmatch(r"v(\d+)\.meta", meta.name)
            if m:
                found.add(int(m.group(1)))
        return found

    def put_model(
        self,
        store: TableRef,
        account_id: int,
        model_name: str,
        blob: bytes,
        metadata: dict[str, Any] | None = None,
    ) -> int:
        """Commit a new version atomically and return its number.

        The meta-file rename is the commit point: on any failure before it,
        the visible version set is unchanged.
        """
        if not blob:
            raise ValueError("model blob must be non-empty")
        directory = self.model_dir(store, account_id, model_name)
        try:
            directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageFailure(f"creating {directory}: {exc}") from exc

        meta = dict(metadata or {})
        meta.setdefault("createdAt", _utc_now())
        meta["contentDigest"] = _digest(blob)

        lock_path = directory / ".lock"
        with open(lock_path, "w") as lock_file:
            fcntl.flock(lock_file, fcntl.LOCK_EX)
            try:
                version = max(self.versions(store, account_id, model_name), default=0) + 1
                blob_target = directory / f"v{version}.bin"
                meta_target = directory / f"v{version}.meta"
                try:
                    _atomic_write_bytes(blob_target, blob, "model-blob-before-commit")
                    _kill_point("model-between-blob-and-meta")
                    _atomic_write_bytes(
                        meta_target,
                        json.dumps(meta, ensure_ascii=False, sort_keys=True).encode("utf-8"),
                        "model-meta-before-commit",
                    )
                except OSError as exc:
                    raise StorageFailure(f"committing {blob_target}: {exc}") from exc
                return version
            finally:
                fcntl.flock(lock_file, fcntl.LOCK_UN)

    def get_model(
        self,
        store: TableRef,
        account_id: int,
        model_name: str,
        version: int | None = None,
    ) -> ModelArtifact:
        """Fetch a version (latest if omitted), verifying the content digest."""
        available = self.versions(store, account_id, model_name)
        if not available:
            raise ModelNotFound(f"no model {model_name!r} for account {account_id}")
        if version is None:
            version = max(available)
        elif version not in available:
            raise VersionNotFound(
                f"model {model_name!r} account {account_id} has no version {version}"
            )
        directory = self.model_dir(store, account_id, model_name)
        try:
            blob = (directory / f"v{version}.bin").read_bytes()
            meta = json.loads((directory / f"v{version}.meta").read_text(encoding="utf-8"))
        except OSError as exc:
            raise StorageFailure(f"reading version {version}: {exc}") from exc
        if _digest(blob) != meta.get("contentDigest"):
            raise IntegrityFailure(
                f"digest mismatch for {model_name!r} v{version} (account {account_id})"
            )
        return ModelArtifact(account_id, model_name, version, blob, meta)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")
