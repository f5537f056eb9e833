#!/usr/bin/env python3
"""Subject-line scoring worker: stateless online predictions."""

import sys

from minerva.appkit import WorkerApp, WorkerError
from minerva.refapps.subjectline import score_subject_line


def handle_predict(message):
    if message.get("mode") != "online":
        raise WorkerError("subjectline serves online predictions only")
    data = message.get("request", {}).get("data", {})
    if "subjectline" not in data:
        raise WorkerError("data.subjectline is required")
    subject = data["subjectline"]
    if not isinstance(subject, str):
        raise WorkerError("data.subjectline must be a string")
    return score_subject_line(subject).to_doc()


if __name__ == "__main__":
    app = WorkerApp("subjectline", [1])
    sys.exit(app.run(predict=handle_predict))
