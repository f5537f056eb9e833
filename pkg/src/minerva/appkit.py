"""Worker-side abstraction stub: the train/predict message loop for apps.

An app implements plain functions; ``WorkerApp.run`` speaks the
newline-delimited JSON protocol over stdio. The same grammar works from
any language; this module is merely the convenience kit for apps written
in Python.
"""

from __future__ import annotations

import json
import os
import sys
from typing import Any, Callable

Handler = Callable[[dict[str, Any]], dict[str, Any]]


class WorkerError(Exception):
    """Raised by app handlers to report a request-level failure."""


def maybe_kill(point: str) -> None:
    """Test hook: die instantly when MINERVA_TEST_KILL_POINT names this point."""
    if os.environ.get("MINERVA_TEST_KILL_POINT") == point:
        os._exit(9)


class WorkerApp:
    def __init__(self, app_name: str, api_versions: list[int]):
        self.app_name = app_name
        self.api_versions = list(api_versions)

    def emit(self, message: dict[str, Any]) -> None:
        sys.stdout.write(json.dumps(message, ensure_ascii=False) + "\n")
        sys.stdout.flush()

    def progress(self, message: str) -> None:
        self.emit({"op": "progress", "message": message})

    def run(self, *, train: Handler | None = None, predict: Handler | None = None) -> int:
        """Answer messages until stdin closes; exactly one terminal per request."""
        self.emit({"op": "hello", "appName": self.app_name, "apiVersions": self.api_versions})
        for line in sys.stdin:
            line = line.strip()
            if not line:
                continue
            try:
                message = json.loads(line)
            except json.JSONDecodeError:
                self.emit({"op": "error", "message": "unparseable message from host"})
                return 1
            op = message.get("op")
            if op == "hello-ack":
                continue
            handler = {"train": train, "predict": predict}.get(op, None)
            if op not in ("train", "predict"):
                self.emit({"op": "error", "message": f"unsupported op {op!r}"})
                return 1
            if handler is None:
                self.emit({"op": "error", "message": f"{op} not implemented by {self.app_name}"})
                continue
            try:
                body = handler(message)
            except WorkerError as exc:
                self.emit({"op": "error", "message": str(exc)})
            except Exception as exc:  # report, keep serving
                self.emit({"op": "error", "message": f"{type(exc).__name__}: {exc}"})
            else:
                self.emit({"op": "result", "body": body if body is not None else {}})
        return 0
