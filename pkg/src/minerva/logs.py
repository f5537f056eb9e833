"""Tiered logging onto the shared filesystem, with credential redaction.

One structured line per event under ``<sharedRoot>/logs/<source>.log``.
Known secret values are replaced before anything touches disk; a logging
failure never fails the operation being logged.
"""

from __future__ import annotations

import json
import threading
from datetime import datetime, timezone
from pathlib import Path

TIERS = ("DEBUG", "INFO", "WARN", "ERROR")
REDACTED = "«redacted»"  # «redacted»


def tier_level(tier: str) -> int:
    try:
        return TIERS.index(tier)
    except ValueError:
        raise ValueError(f"unknown log tier {tier!r}, expected one of {TIERS}") from None


class TieredLogger:
    def __init__(self, shared_root: str | Path, threshold: str = "INFO"):
        self.log_dir = Path(shared_root) / "logs"
        self.threshold = tier_level(threshold)
        self._secrets: list[str] = []
        self._lock = threading.Lock()

    def add_secrets(self, values) -> None:
        """Register credential values to scrub from every future line."""
        with self._lock:
            for value in values:
                if value and value not in self._secrets:
                    self._secrets.append(value)
            # longest-first so overlapping secrets redact fully
            self._secrets.sort(key=len, reverse=True)

    def redact(self, text: str) -> str:
        with self._lock:
            secrets = list(self._secrets)
        for secret in secrets:
            text = text.replace(secret, REDACTED)
        return text

    def log(self, tier: str, source: str, message: str) -> None:
        try:
            if tier_level(tier) < self.threshold:
                return
            line = json.dumps(
                {
                    "timestamp": datetime.now(timezone.utc).isoformat(timespec="milliseconds"),
                    "tier": tier,
                    "source": source,
                    "message": self.redact(message),
                },
                ensure_ascii=False,
            )
            with self._lock:
                self.log_dir.mkdir(parents=True, exist_ok=True)
                with open(self.log_dir / f"{source}.log", "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
        except Exception:
            pass

    def debug(self, source: str, message: str) -> None:
        self.log("DEBUG", source, message)

    def info(self, source: str, message: str) -> None:
        self.log("INFO", source, message)

    def warn(self, source: str, message: str) -> None:
        self.log("WARN", source, message)

    def error(self, source: str, message: str) -> None:
        self.log("ERROR", source, message)
