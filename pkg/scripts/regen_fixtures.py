#!/usr/bin/env python3
"""Regenerate the shipped app fixtures and their golden outputs.

Goldens are computed by straight-line oracles written here, independently
of the reference-app implementations, so the committed files double as an
external check on the apps. Deterministic for a fixed seed.
"""

from __future__ import annotations

import csv
import io
import json
import random
from decimal import Decimal
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
SEED = 20240901
ROWS = 20
CUSTOMERS = 6


def plain_decimal(value: Decimal) -> str:
    text = format(value, "f")
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text or "0"


def generate_clv_input(seed: int, rows: int, customers: int) -> list[list[str]]:
    rng = random.Random(seed)
    ids = [f"c{index:03d}" for index in range(1, customers + 1)]
    out = []
    for _ in range(rows):
        cents = rng.randrange(100, 50000)
        out.append([rng.choice(ids), plain_decimal(Decimal(cents) / 100)])
    return out


def clv_oracle(rows: list[list[str]]) -> list[list[str]]:
    """Brute-force aggregation: lifetime value = exact sum of order values."""
    totals: dict[str, Decimal] = {}
    for customer, value in rows:
        totals[customer] = totals.get(customer, Decimal(0)) + Decimal(value)
    return [[customer, plain_decimal(totals[customer])] for customer in sorted(totals)]


def write_csv(path: Path, columns: list[str], rows: list[list[str]]) -> None:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf)  # excel dialect, matching the table store
    writer.writerow(columns)
    writer.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def subjectline_oracle(line: str) -> float:
    has_number = any("0" <= c <= "9" for c in line)
    has_exclamation = "!" in line
    lowered = line.lower()
    has_discount = any(t in lowered for t in ("%", "off", "free", "discount"))
    two_hundredths = (
        40 * has_number + 40 * has_exclamation + 60 * has_discount + min(len(line), 60)
    )
    return min(max(two_hundredths, 0), 200) / 200


SUBJECT_LINES = [
    "50% off for new socks!",
    "",
    "Quarterly account review scheduled for next week, no action needed",
    "Free shipping ends tonight",
    "Meeting notes",
    "3 new discount codes inside!!!",
    "Last chance: 20% OFF everything",
    "hello",
    "Exclamation only!",
    "1234567890",
]


def main() -> None:
    rows = generate_clv_input(SEED, ROWS, CUSTOMERS)
    write_csv(REPO / "apps/clv/fixtures/CLV_MODEL_INPUT.csv", ["customer_id", "order_value"], rows)
    write_csv(REPO / "apps/clv/golden/CLV_MODEL_OUTPUT.csv", ["customer_id", "clv"], clv_oracle(rows))

    lines_path = REPO / "apps/subjectline/fixtures/subject_lines.json"
    lines_path.write_text(
        json.dumps(SUBJECT_LINES, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    golden = [{"subjectline": line, "score": subjectline_oracle(line)} for line in SUBJECT_LINES]
    (REPO / "apps/subjectline/golden/scores.json").write_text(
        json.dumps(golden, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    print(f"wrote CLV fixture ({ROWS} rows, {CUSTOMERS} customers) and goldens under apps/")


if __name__ == "__main__":
    main()
