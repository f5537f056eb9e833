#!/usr/bin/env python3
"""CLV worker: builds the aggregate model from input tables and writes the
per-customer lifetime-value output table.

Test hooks (ignored in production): MINERVA_TEST_KILL_POINT dies at a named
point, MINERVA_TEST_TRAIN_SLEEP_MS delays training.
"""

import os
import sys
import time
from pathlib import Path

from minerva.appkit import WorkerApp, WorkerError, maybe_kill
from minerva.refapps import clv
from minerva.storage import parse_csv_table, read_csv_text, render_csv_table


def _test_sleep():
    millis = int(os.environ.get("MINERVA_TEST_TRAIN_SLEEP_MS", "0"))
    if millis:
        time.sleep(millis / 1000.0)


def handle_train(message):
    maybe_kill("train-received")
    _test_sleep()
    paths = message["paths"]
    model = clv.ClvModel()
    for input_path in paths["inputs"]:
        path = Path(input_path)
        if not path.is_file():
            raise WorkerError(f"input table not found: {input_path}")
        table = parse_csv_table(read_csv_text(path))
        try:
            part = clv.train(table)
        except clv.BadColumn as exc:
            raise WorkerError(str(exc)) from None
        for customer, (count, total) in part.customers.items():
            prev_count, prev_total = model.customers.get(customer, (0, clv.Decimal(0)))
            model.customers[customer] = (prev_count + count, prev_total + total)
    maybe_kill("model-aggregated")
    blob = clv.serialize_model(model)
    scratch = Path(paths["modelScratch"])
    if os.environ.get("MINERVA_TEST_KILL_POINT") == "mid-model-write":
        scratch.write_bytes(blob[: max(1, len(blob) // 2)])
        os._exit(9)
    scratch.write_bytes(blob)
    maybe_kill("before-result")
    return {"modelBlobPath": str(scratch), "customers": len(model.customers)}


def handle_predict(message):
    if message.get("mode") != "batch":
        raise WorkerError("clv serves batch predictions only")
    paths = message["paths"]
    model = clv.deserialize_model(Path(paths["model"]).read_bytes())
    table = clv.predict(model)
    output = Path(paths["output"])
    output.write_text(render_csv_table(table), encoding="utf-8")
    return {"outputPath": str(output), "rows": len(table.rows)}


if __name__ == "__main__":
    app = WorkerApp("clv", [1])
    sys.exit(app.run(train=handle_train, predict=handle_predict))
