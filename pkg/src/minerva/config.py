"""Framework configuration, kept strictly separate from per-app manifests.

Precedence: built-in defaults < config file < environment overrides
(MINERVA_*) < explicit CLI flags. App manifests can never set
framework-global values.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from minerva.logs import tier_level

ENV_CONFIG = "MINERVA_CONFIG"
ENV_LISTEN = "MINERVA_LISTEN"
ENV_DATA_ROOT = "MINERVA_DATA_ROOT"
ENV_SHARED_ROOT = "MINERVA_SHARED_ROOT"
ENV_APPS_ROOT = "MINERVA_APPS_ROOT"
ENV_LOG_TIER = "MINERVA_LOG_TIER"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class FrameworkConfig:
    data_root: Path
    shared_root: Path
    apps_root: Path
    listen_host: str = "127.0.0.1"
    listen_port: int = 8080
    default_max_in_flight: int = 2
    default_max_queued: int = 4
    default_sla_millis: int = 2000
    log_tier: str = "INFO"
    batch_timeout_seconds: float = 3600.0
    hello_timeout_seconds: float = 5.0
    scheduling_slack_millis: int = 100
    callback_max_attempts: int = 3
    callback_backoff_seconds: tuple[float, ...] = (1.0, 5.0)

    def __post_init__(self):
        tier_level(self.log_tier)  # validates
        if self.default_sla_millis < 1:
            raise ConfigError("defaultSlaMillis must be >= 1")
        if self.default_max_in_flight < 1:
            raise ConfigError("defaultThrottle.maxInFlight must be >= 1")
        if self.default_max_queued < 0:
            raise ConfigError("defaultThrottle.maxQueued must be >= 0")

    @property
    def listen_address(self) -> str:
        return f"{self.listen_host}:{self.listen_port}"


def _parse_listen(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep:
        raise ConfigError(f"listen address must be host:port, got {value!r}")
    try:
        return (host or "127.0.0.1", int(port))
    except ValueError:
        raise ConfigError(f"listen port must be an integer, got {port!r}") from None


def _from_file(path: Path) -> dict[str, Any]:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold an object")
    return doc


def load_config(
    config_path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    **flag_overrides: Any,
) -> FrameworkConfig:
    """Assemble a FrameworkConfig from file, environment, and flags.

    ``flag_overrides`` accepts: listen, data_root, shared_root, apps_root,
    log_tier (all optional, highest precedence).
    """
    env = os.environ if env is None else env
    values: dict[str, Any] = {
        "data_root": "data",
        "shared_root": "shared",
        "apps_root": "apps",
    }

    path = config_path or env.get(ENV_CONFIG)
    if path:
        doc = _from_file(Path(path))
        mapping = {
            "listen": "listen",
            "dataRoot": "data_root",
            "sharedRoot": "shared_root",
            "appsRoot": "apps_root",
            "defaultSlaMillis": "default_sla_millis",
            "logTier": "log_tier",
            "batchTimeoutSeconds": "batch_timeout_seconds",
            "helloTimeoutSeconds": "hello_timeout_seconds",
            "schedulingSlackMillis": "scheduling_slack_millis",
            "callbackMaxAttempts": "callback_max_attempts",
        }
        for doc_key, attr in mapping.items():
            if doc_key in doc:
                values[attr] = doc[doc_key]
        throttle = doc.get("defaultThrottle", {})
        if not isinstance(throttle, dict):
            raise ConfigError("defaultThrottle must be an object")
        if "maxInFlight" in throttle:
            values["default_max_in_flight"] = throttle["maxInFlight"]
        if "maxQueued" in throttle:
            values["default_max_queued"] = throttle["maxQueued"]
        if "callbackBackoffSeconds" in doc:
            values["callback_backoff_seconds"] = tuple(doc["callbackBackoffSeconds"])

    env_mapping = {
        ENV_LISTEN: "listen",
        ENV_DATA_ROOT: "data_root",
        ENV_SHARED_ROOT: "shared_root",
        ENV_APPS_ROOT: "apps_root",
        ENV_LOG_TIER: "log_tier",
    }
    for env_key, attr in env_mapping.items():
        if env.get(env_key):
            values[attr] = env[env_key]

    for attr in ("listen", "data_root", "shared_root", "apps_root", "log_tier"):
        if flag_overrides.get(attr) is not None:
            values[attr] = flag_overrides[attr]

    listen = values.pop("listen", None)
    if listen is not None:
        values["listen_host"], values["listen_port"] = _parse_listen(str(listen))

    for attr in ("data_root", "shared_root", "apps_root"):
        values[attr] = Path(values[attr])

    try:
        return FrameworkConfig(**values)
    except TypeError as exc:
        raise ConfigError(f"bad configuration value: {exc}") from exc


def with_port(config: FrameworkConfig, port: int) -> FrameworkConfig:
    return replace(config, listen_port=port)
