"""Reference-app algorithms checked against independent straight-line oracles."""

from __future__ import annotations

import json
from decimal import Decimal
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minerva.refapps import clv
from minerva.refapps.subjectline import score_subject_line
from minerva.storage import Table, parse_csv_table
from tests.conftest import APPS_DIR, CLV_FIXTURE


def brute_force_clv(rows: list[list[str]]) -> dict[str, tuple[int, Decimal]]:
    """Oracle: independent aggregation over (customer_id, order_value) rows."""
    out: dict[str, tuple[int, Decimal]] = {}
    for customer, value in rows:
        count, total = out.get(customer, (0, Decimal(0)))
        out[customer] = (count + 1, total + Decimal(value))
    return out


class TestClvTrain:
    def test_small_example(self):
        table = Table(["customer_id", "order_value"], [["c1", "10.0"], ["c1", "30.0"], ["c2", "5.0"]])
        model = clv.train(table)
        assert set(model.customers) == {"c1", "c2"}
        assert model.order_count("c1") == 2
        assert model.mean_order_value("c1") == Fraction(20)
        assert model.order_count("c2") == 1
        assert model.mean_order_value("c2") == Fraction(5)

    def test_empty_rows_give_empty_model(self):
        model = clv.train(Table(["customer_id", "order_value"], []))
        assert model.customers == {}
        assert clv.predict(model) == Table(["customer_id", "clv"], [])

    def test_unparseable_value_is_bad_column(self):
        table = Table(["customer_id", "order_value"], [["c1", "abc"]])
        with pytest.raises(clv.BadColumn):
            clv.train(table)

    def test_nan_is_rejected(self):
        table = Table(["customer_id", "order_value"], [["c1", "NaN"]])
        with pytest.raises(clv.BadColumn):
            clv.train(table)

    def test_missing_column_is_bad_column(self):
        with pytest.raises(clv.BadColumn):
            clv.train(Table(["customer_id", "amount"], [["c1", "1"]]))

    def test_non_terminating_mean_stays_exact(self):
        table = Table(
            ["customer_id", "order_value"], [["c1", "1"], ["c1", "1"], ["c1", "1.34"]]
        )
        model = clv.train(table)
        assert model.mean_order_value("c1") == Fraction(334, 300)
        assert model.lifetime_value("c1") == Decimal("3.34")


class TestClvPredict:
    def test_small_example(self):
        model = clv.ClvModel({"c1": (2, Decimal("40.0"))})
        table = clv.predict(model)
        assert table.rows == [["c1", "40"]]
        assert Decimal(table.rows[0][1]) == Decimal("40.0")

    def test_fixture_matches_committed_golden_and_oracle(self):
        fixture = parse_csv_table(CLV_FIXTURE.read_text(encoding="utf-8"))
        model = clv.train(fixture)
        predicted = clv.predict(model)

        oracle = brute_force_clv(fixture.rows)
        assert set(r[0] for r in predicted.rows) == set(oracle)
        for customer, value in predicted.rows:
            assert Decimal(value) == oracle[customer][1]

        golden = parse_csv_table(
            (APPS_DIR / "clv" / "golden" / "CLV_MODEL_OUTPUT.csv").read_text(encoding="utf-8")
        )
        assert predicted == golden

    def test_rows_sorted_by_customer(self):
        model = clv.ClvModel({"b": (1, Decimal(1)), "a": (1, Decimal(2))})
        assert [r[0] for r in clv.predict(model).rows] == ["a", "b"]


class TestModelBlob:
    def test_round_trip(self):
        model = clv.ClvModel({"c1": (2, Decimal("40.00")), "c2": (1, Decimal("5"))})
        restored = clv.deserialize_model(clv.serialize_model(model))
        assert restored.customers.keys() == model.customers.keys()
        for key in model.customers:
            assert restored.order_count(key) == model.order_count(key)
            assert restored.lifetime_value(key) == model.lifetime_value(key)

    def test_deterministic_bytes(self):
        a = clv.ClvModel({"x": (1, Decimal("1.5")), "a": (2, Decimal("3"))})
        b = clv.ClvModel(dict(reversed(list(a.customers.items()))))
        assert clv.serialize_model(a) == clv.serialize_model(b)

    def test_unknown_format_rejected(self):
        with pytest.raises(ValueError):
            clv.deserialize_model(json.dumps({"format": "other", "customers": {}}).encode())


class TestCanonicalDecimal:
    @pytest.mark.parametrize(
        "raw,expected",
        [("40.00", "40"), ("20.50", "20.5"), ("0.815", "0.815"), ("0", "0"),
         ("-0.00", "0"), ("1000", "1000"), ("0.100", "0.1")],
    )
    def test_formatting(self, raw, expected):
        assert clv.canonical_decimal(Decimal(raw)) == expected


class TestSubjectLine:
    def test_standard_example_matches_hand_evaluation(self):
        # 22 chars, digit + '!' + '%' all present:
        # (40 + 40 + 60 + 22) / 200 = 0.81
        score = score_subject_line("50% off for new socks!")
        assert score.length == 22
        assert score.has_number and score.has_exclamation and score.has_discount_token
        assert score.score == 0.81

    def test_empty_line_scores_zero(self):
        score = score_subject_line("")
        assert score.score == 0.0
        assert not (score.has_number or score.has_exclamation or score.has_discount_token)

    def test_long_line_without_tokens_saturates_at_point_three(self):
        line = "q" * 61
        assert score_subject_line(line).score == 0.3
        assert score_subject_line("q" * 60).score == 0.3

    def test_discount_tokens_case_insensitive(self):
        assert score_subject_line("FREE stuff").has_discount_token
        assert score_subject_line("Discount day").has_discount_token
        assert score_subject_line("50% only").has_discount_token
        assert score_subject_line("OFFer").has_discount_token
        assert not score_subject_line("nothing here").has_discount_token

    def test_golden_fixture_scores(self):
        lines = json.loads(
            (APPS_DIR / "subjectline" / "fixtures" / "subject_lines.json").read_text()
        )
        golden = json.loads(
            (APPS_DIR / "subjectline" / "golden" / "scores.json").read_text()
        )
        assert [g["subjectline"] for g in golden] == lines
        for entry in golden:
            assert score_subject_line(entry["subjectline"]).score == entry["score"]


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=200))
def test_score_always_within_bounds(line):
    score = score_subject_line(line)
    assert 0.0 <= score.score <= 1.0


_ids = st.text(alphabet="abcdefghij", min_size=1, max_size=3)
_money = st.integers(min_value=-(10**7), max_value=10**7).map(
    lambda cents: str(Decimal(cents) / 100)
)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(_ids, _money), max_size=50))
def test_train_predict_equals_oracle_on_random_fixtures(pairs):
    rows = [[c, v] for c, v in pairs]
    table = Table(["customer_id", "order_value"], rows)
    oracle = brute_force_clv(rows)
    predicted = clv.predict(clv.train(table))
    assert [r[0] for r in predicted.rows] == sorted(oracle)
    for customer, value in predicted.rows:
        assert Decimal(value) == oracle[customer][1]
