"""Customer-lifetime-value reference algorithm: exact per-customer aggregation.

The model holds, per customer, the order count and the exact decimal sum
of order values; the predicted lifetime value is orderCount x
meanOrderValue, i.e. the total observed value. Decimal cells are parsed
as exact decimal fractions so oracle comparisons are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction

from minerva.storage import Table

MODEL_FORMAT = "clv-aggregate-v1"


class BadColumn(Exception):
    """Input table is missing a required column or a cell won't parse."""


@dataclass
class ClvModel:
    # customer_id -> (order count, exact total order value)
    customers: dict[str, tuple[int, Decimal]] = field(default_factory=dict)

    def order_count(self, customer_id: str) -> int:
        return self.customers[customer_id][0]

    def mean_order_value(self, customer_id: str) -> Fraction:
        count, total = self.customers[customer_id]
        return Fraction(total) / count

    def lifetime_value(self, customer_id: str) -> Decimal:
        # orderCount x meanOrderValue collapses to the exact total
        return self.customers[customer_id][1]


def canonical_decimal(value: Decimal) -> str:
    """Plain decimal string: no exponent, no trailing fraction zeros."""
    text = format(value, "f")
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    if text in ("", "-0"):
        text = "0"
    return text


def parse_decimal(cell: str) -> Decimal:
    try:
        value = Decimal(cell)
    except InvalidOperation:
        raise BadColumn(f"order_value cell {cell!r} is not a decimal") from None
    if not value.is_finite():
        raise BadColumn(f"order_value cell {cell!r} is not a finite decimal")
    return value


def train(table: Table) -> ClvModel:
    """Aggregate (count, total) per distinct customer_id, exactly."""
    for column in ("customer_id", "order_value"):
        if column not in table.columns:
            raise BadColumn(f"input table is missing column {column!r}")
    cid_idx = table.columns.index("customer_id")
    val_idx = table.columns.index("order_value")
    model = ClvModel()
    for row in table.rows:
        customer, value = row[cid_idx], parse_decimal(row[val_idx])
        count, total = model.customers.get(customer, (0, Decimal(0)))
        model.customers[customer] = (count + 1, total + value)
    return model


def predict(model: ClvModel) -> Table:
    """One output row per customer, sorted by id, with the exact CLV."""
    rows = [
        [customer, canonical_decimal(model.lifetime_value(customer))]
        for customer in sorted(model.customers)
    ]
    return Table(columns=["customer_id", "clv"], rows=rows)


def serialize_model(model: ClvModel) -> bytes:
    doc = {
        "format": MODEL_FORMAT,
        "customers": {
            customer: {"count": count, "total": canonical_decimal(total)}
            for customer, (count, total) in model.customers.items()
        },
    }
    # sorted keys -> deterministic bytes -> reproducible content digests
    return json.dumps(doc, ensure_ascii=False, sort_keys=True).encode("utf-8")


def deserialize_model(blob: bytes) -> ClvModel:
    doc = json.loads(blob.decode("utf-8"))
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"unexpected model format {doc.get('format')!r}")
    model = ClvModel()
    for customer, entry in doc["customers"].items():
        model.customers[customer] = (int(entry["count"]), Decimal(entry["total"]))
    return model
