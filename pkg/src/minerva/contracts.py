"""Payload contracts: parsing, validation, serialization, and version routing.

Every document exchanged with host-application subsystems passes through
here. Field names on the wire are fixed by the contract (camelCase, e.g.
``modelInputPayload``); unrecognized top-level fields are tolerated so
providers can evolve without breaking callers.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable
from urllib.parse import urlparse


class ValidationError(Exception):
    """A payload failed contract validation.

    Carries a machine-readable ``code`` plus the offending field ``path``
    so callers can map it onto an error response without string parsing.
    """

    code = "ValidationError"

    def __init__(self, message: str, path: str | None = None):
        super().__init__(message)
        self.path = path

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"code": self.code, "message": str(self)}
        if self.path is not None:
            doc["path"] = self.path
        return doc


class MalformedDocument(ValidationError):
    code = "MalformedDocument"


class MissingField(ValidationError):
    code = "MissingField"

    def __init__(self, path: str):
        super().__init__(f"required field missing: {path}", path)


class BadFieldType(ValidationError):
    code = "BadFieldType"


class BadEnumValue(ValidationError):
    code = "BadEnumValue"


class UnsupportedVersion(ValidationError):
    code = "UnsupportedVersion"

    def __init__(self, requested: int, supported: Iterable[int]):
        self.requested = requested
        self.supported = frozenset(supported)
        sup = sorted(self.supported)
        super().__init__(
            f"version {requested} not supported (supported: {sup})", "version"
        )


class VersionMismatch(ValidationError):
    code = "VersionMismatch"


class DuplicateSchema(ValidationError):
    code = "DuplicateSchema"


class ActionType(Enum):
    TRAIN = "train"
    PREDICT = "predict"


class EndpointKind(Enum):
    TRAIN_STANDARD = "train-standard"
    PREDICT_TEMPLATE = "predict-template"


@dataclass(frozen=True)
class TableRefSet:
    """Parallel lists of (tableName, dbName) naming one or more tables."""

    table_names: tuple[str, ...]
    db_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.table_names) != len(self.db_names) or not self.table_names:
            raise ValueError("tableNames and dbNames must be equal-length and non-empty")

    def pairs(self) -> list[tuple[str, str]]:
        return list(zip(self.table_names, self.db_names))

    def to_doc(self) -> dict[str, Any]:
        return {"tableNames": list(self.table_names), "dbNames": list(self.db_names)}


@dataclass(frozen=True)
class DataSourceCredential:
    """Opaque connection credentials; values never reach any log tier."""

    db_user: str
    db_url: str
    db_password: str
    db_name: str

    def to_doc(self) -> dict[str, Any]:
        return {
            "dbUser": self.db_user,
            "dbURL": self.db_url,
            "dbPassword": self.db_password,
            "dbName": self.db_name,
        }

    def secret_values(self) -> tuple[str, ...]:
        return (self.db_user, self.db_url, self.db_password, self.db_name)


@dataclass(frozen=True)
class TrainRequest:
    """The standardized batch payload; ``actionType`` selects train vs predict."""

    account_id: int
    workflow_exec_id: int
    workflow_task_id: str
    workflow_name: str
    model_name: str
    action_type: ActionType
    model_input_payload: TableRefSet
    model_stored_table_name: TableRefSet
    model_predicted_table_name: TableRefSet
    server_name: str
    data_source: tuple[DataSourceCredential, ...]
    sys_admin_db_url: str
    sys_admin_db_user: str
    sys_admin_encrypted_pwd: str

    def to_doc(self) -> dict[str, Any]:
        return {
            "accountId": self.account_id,
            "workflowExecId": self.workflow_exec_id,
            "workflowTaskId": self.workflow_task_id,
            "workflowName": self.workflow_name,
            "modelName": self.model_name,
            "actionType": self.action_type.value,
            "modelInputPayload": self.model_input_payload.to_doc(),
            "modelStoredTableName": self.model_stored_table_name.to_doc(),
            "modelPredictedTableName": self.model_predicted_table_name.to_doc(),
            "serverName": self.server_name,
            "dataSource": [c.to_doc() for c in self.data_source],
            "sysAdminDbUrl": self.sys_admin_db_url,
            "sysAdminDbUser": self.sys_admin_db_user,
            "sysAdminEncryptedPwd": self.sys_admin_encrypted_pwd,
        }

    def secret_values(self) -> list[str]:
        """All credential values that must be redacted from logs and views."""
        secrets: list[str] = []
        for cred in self.data_source:
            secrets.extend(cred.secret_values())
        secrets.extend(
            (self.sys_admin_db_url, self.sys_admin_db_user, self.sys_admin_encrypted_pwd)
        )
        return [s for s in secrets if s]


@dataclass(frozen=True)
class PredictRequest:
    """Templated online payload; ``data`` is opaque to the framework."""

    version: str
    account_id: str
    data: dict[str, Any]
    model_storage: dict[str, Any]
    callback_url: str | None = None

    @property
    def version_number(self) -> int:
        return int(self.version)

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "version": self.version,
            "accountId": self.account_id,
            "data": self.data,
            "modelStorage": self.model_storage,
        }
        if self.callback_url is not None:
            doc["callbackUrl"] = self.callback_url
        return doc


@dataclass(frozen=True)
class PredictResponse:
    version: str
    account_id: str
    result: dict[str, Any]
    model_version_used: int

    def to_doc(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "accountId": self.account_id,
            "result": self.result,
            "modelVersionUsed": self.model_version_used,
        }


# Field kinds understood by the dynamic validator. Composite kinds carry
# their own nested checks; everything else is a direct type test.
@dataclass(frozen=True)
class FieldSpec:
    path: str
    required: bool
    kind: str


TRAIN_FIELD_SPECS: tuple[FieldSpec, ...] = (
    FieldSpec("accountId", True, "nonneg-integer"),
    FieldSpec("workflowExecId", True, "integer"),
    FieldSpec("workflowTaskId", True, "string"),
    FieldSpec("workflowName", True, "string"),
    FieldSpec("modelName", True, "string"),
    FieldSpec("actionType", True, "action-type"),
    FieldSpec("modelInputPayload", True, "table-ref-set"),
    FieldSpec("modelStoredTableName", True, "table-ref-set"),
    FieldSpec("modelPredictedTableName", True, "table-ref-set"),
    FieldSpec("serverName", True, "string"),
    FieldSpec("dataSource", True, "credential-list"),
    FieldSpec("sysAdminDbUrl", True, "string"),
    FieldSpec("sysAdminDbUser", True, "string"),
    FieldSpec("sysAdminEncryptedPwd", True, "string"),
)

PREDICT_FIELD_SPECS: tuple[FieldSpec, ...] = (
    FieldSpec("version", True, "version-string"),
    FieldSpec("accountId", True, "string"),
    FieldSpec("data", True, "object"),
    FieldSpec("modelStorage", True, "model-storage"),
    FieldSpec("callbackUrl", False, "url"),
)


@dataclass(frozen=True)
class ContractSchema:
    """One validated shape of one endpoint at one version."""

    app_name: str
    endpoint_kind: EndpointKind
    version: int
    field_specs: tuple[FieldSpec, ...] = PREDICT_FIELD_SPECS

    def key(self) -> tuple[str, EndpointKind, int]:
        return (self.app_name, self.endpoint_kind, self.version)


@dataclass(frozen=True)
class EndpointSchemas:
    """All registered versions of one (app, endpoint kind)."""

    app_name: str
    endpoint_kind: EndpointKind
    by_version: dict[int, ContractSchema] = field(default_factory=dict)

    def supported_versions(self) -> set[int]:
        return set(self.by_version)

    def route(self, version: int) -> ContractSchema:
        """Version routing: a request validates against exactly its own version."""
        schema = self.by_version.get(version)
        if schema is None:
            raise UnsupportedVersion(version, self.supported_versions())
        return schema


class SchemaRegistry:
    """Concurrent-read registry of contract schemas, keyed by (app, kind, version).

    Registration happens at startup and on explicit admin reload only.
    """

    def __init__(self):
        self._lock = threading.RLock()
        self._schemas: dict[tuple[str, EndpointKind, int], ContractSchema] = {}

    def register(self, schema: ContractSchema) -> None:
        with self._lock:
            if schema.key() in self._schemas:
                raise DuplicateSchema(
                    f"schema already registered: {schema.app_name}/"
                    f"{schema.endpoint_kind.value}/v{schema.version}"
                )
            self._schemas[schema.key()] = schema

    def supported_versions(self, app_name: str, kind: EndpointKind) -> set[int]:
        with self._lock:
            return {
                v for (a, k, v) in self._schemas if a == app_name and k == kind
            }

    def endpoint(self, app_name: str, kind: EndpointKind) -> EndpointSchemas:
        with self._lock:
            by_version = {
                v: s for (a, k, v), s in self._schemas.items()
                if a == app_name and k == kind
            }
        return EndpointSchemas(app_name, kind, by_version)

    def clear(self) -> None:
        with self._lock:
            self._schemas.clear()


def _type_name(value: Any) -> str:
    return type(value).__name__


def _is_str(value: Any) -> bool:
    return isinstance(value, str)


def _is_int(value: Any) -> bool:
    # bool is an int subclass; the contract means a real integer
    return isinstance(value, int) and not isinstance(value, bool)


def _validate_table_ref_set(value: Any, path: str) -> TableRefSet:
    if not isinstance(value, dict):
        raise BadFieldType(f"{path} must be an object, got {_type_name(value)}", path)
    for key in ("tableNames", "dbNames"):
        if key not in value:
            raise MissingField(f"{path}.{key}")
        names = value[key]
        if not isinstance(names, list) or not all(_is_str(n) for n in names):
            raise BadFieldType(f"{path}.{key} must be a list of strings", f"{path}.{key}")
    tables, dbs = value["tableNames"], value["dbNames"]
    if len(tables) != len(dbs) or not tables:
        raise BadFieldType(
            f"{path}: tableNames and dbNames must be equal-length and non-empty", path
        )
    return TableRefSet(tuple(tables), tuple(dbs))


def _validate_credential(value: Any, path: str) -> DataSourceCredential:
    if not isinstance(value, dict):
        raise BadFieldType(f"{path} must be an object, got {_type_name(value)}", path)
    fields = {}
    for key in ("dbUser", "dbURL", "dbPassword", "dbName"):
        if key not in value:
            raise MissingField(f"{path}.{key}")
        if not _is_str(value[key]):
            raise BadFieldType(f"{path}.{key} must be a string", f"{path}.{key}")
        fields[key] = value[key]
    return DataSourceCredential(
        fields["dbUser"], fields["dbURL"], fields["dbPassword"], fields["dbName"]
    )


def _validate_field(value: Any, spec: FieldSpec) -> Any:
    path, kind = spec.path, spec.kind
    if kind == "string":
        if not _is_str(value):
            raise BadFieldType(f"{path} must be a string, got {_type_name(value)}", path)
        return value
    if kind == "integer":
        if not _is_int(value):
            raise BadFieldType(f"{path} must be an integer, got {_type_name(value)}", path)
        return value
    if kind == "nonneg-integer":
        if not _is_int(value):
            raise BadFieldType(f"{path} must be an integer, got {_type_name(value)}", path)
        if value < 0:
            raise BadFieldType(f"{path} must be >= 0", path)
        return value
    if kind == "action-type":
        if not _is_str(value):
            raise BadFieldType(f"{path} must be a string", path)
        try:
            return ActionType(value)
        except ValueError:
            raise BadEnumValue(
                f"{path} must be one of ['train', 'predict'], got {value!r}", path
            ) from None
    if kind == "table-ref-set":
        return _validate_table_ref_set(value, path)
    if kind == "credential-list":
        if not isinstance(value, list):
            raise BadFieldType(f"{path} must be an array", path)
        return tuple(
            _validate_credential(item, f"{path}[{i}]") for i, item in enumerate(value)
        )
    if kind == "object":
        if not isinstance(value, dict):
            raise BadFieldType(f"{path} must be an object, got {_type_name(value)}", path)
        return value
    if kind == "model-storage":
        if not isinstance(value, dict):
            raise BadFieldType(f"{path} must be an object, got {_type_name(value)}", path)
        if "model" not in value:
            raise MissingField(f"{path}.model")
        if not _is_str(value["model"]):
            raise BadFieldType(f"{path}.model must be a string", f"{path}.model")
        return value
    if kind == "version-string":
        if not _is_str(value):
            raise BadFieldType(f"{path} must be a string, got {_type_name(value)}", path)
        try:
            number = int(value)
        except ValueError:
            raise BadFieldType(f"{path} must be a positive-integer string", path) from None
        if number <= 0:
            raise BadFieldType(f"{path} must be a positive-integer string", path)
        return value
    if kind == "url":
        if not _is_str(value):
            raise BadFieldType(f"{path} must be a string", path)
        parsed = urlparse(value)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise BadFieldType(f"{path} must be an absolute http(s) URL", path)
        return value
    raise AssertionError(f"unknown field kind {kind!r}")


def _load_document(raw: bytes | str) -> dict[str, Any]:
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedDocument(f"payload is not UTF-8: {exc}") from None
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"payload is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedDocument("payload root must be an object")
    return doc


def _validated_fields(
    doc: dict[str, Any],
    specs: tuple[FieldSpec, ...],
    on_unknown_field: Callable[[str], None] | None,
) -> dict[str, Any]:
    known = {spec.path for spec in specs}
    if on_unknown_field is not None:
        for name in doc:
            if name not in known:
                on_unknown_field(name)
    out: dict[str, Any] = {}
    for spec in specs:
        if spec.path not in doc:
            if spec.required:
                raise MissingField(spec.path)
            continue
        out[spec.path] = _validate_field(doc[spec.path], spec)
    return out


def parse_train_request(
    raw: bytes | str,
    on_unknown_field: Callable[[str], None] | None = None,
) -> TrainRequest:
    """Parse and validate a standardized batch payload.

    Unrecognized top-level fields are ignored (reported through
    ``on_unknown_field`` so the caller can log them at DEBUG tier).
    """
    doc = _load_document(raw)
    fields = _validated_fields(doc, TRAIN_FIELD_SPECS, on_unknown_field)
    return TrainRequest(
        account_id=fields["accountId"],
        workflow_exec_id=fields["workflowExecId"],
        workflow_task_id=fields["workflowTaskId"],
        workflow_name=fields["workflowName"],
        model_name=fields["modelName"],
        action_type=fields["actionType"],
        model_input_payload=fields["modelInputPayload"],
        model_stored_table_name=fields["modelStoredTableName"],
        model_predicted_table_name=fields["modelPredictedTableName"],
        server_name=fields["serverName"],
        data_source=fields["dataSource"],
        sys_admin_db_url=fields["sysAdminDbUrl"],
        sys_admin_db_user=fields["sysAdminDbUser"],
        sys_admin_encrypted_pwd=fields["sysAdminEncryptedPwd"],
    )


def peek_version(raw: bytes | str) -> int:
    """Extract the contract version of a predict payload without full validation."""
    doc = _load_document(raw)
    if "version" not in doc:
        raise MissingField("version")
    spec = FieldSpec("version", True, "version-string")
    return int(_validate_field(doc["version"], spec))


def parse_predict_request(
    raw: bytes | str,
    schemas: EndpointSchemas,
    on_unknown_field: Callable[[str], None] | None = None,
) -> PredictRequest:
    """Parse a templated online payload against its version-routed schema.

    Framework-owned fields are validated; ``data`` passes through to the
    app untouched.
    """
    doc = _load_document(raw)
    if "version" not in doc:
        raise MissingField("version")
    requested = _validate_field(doc["version"], FieldSpec("version", True, "version-string"))
    schema = schemas.route(int(requested))
    fields = _validated_fields(doc, schema.field_specs, on_unknown_field)
    return PredictRequest(
        version=fields["version"],
        account_id=fields["accountId"],
        data=fields["data"],
        model_storage=fields["modelStorage"],
        callback_url=fields.get("callbackUrl"),
    )


def serialize(value: Any) -> bytes:
    """Serialize any contract value to UTF-8 JSON with deterministic field order."""
    doc = value.to_doc() if hasattr(value, "to_doc") else value
    return json.dumps(doc, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
