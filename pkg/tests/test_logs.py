"""Tiered logging: thresholds, per-source files, redaction."""

from __future__ import annotations

import json

import pytest

from minerva.logs import REDACTED, TieredLogger, tier_level


def read_lines(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


def test_lines_land_in_per_source_files(tmp_path):
    logger = TieredLogger(tmp_path, threshold="DEBUG")
    logger.info("framework", "service started")
    logger.info("clv", "training begun")
    framework = read_lines(tmp_path / "logs" / "framework.log")
    assert framework[0]["message"] == "service started"
    assert framework[0]["tier"] == "INFO"
    assert framework[0]["source"] == "framework"
    assert "timestamp" in framework[0]
    assert read_lines(tmp_path / "logs" / "clv.log")[0]["message"] == "training begun"


def test_threshold_suppresses_lower_tiers(tmp_path):
    logger = TieredLogger(tmp_path, threshold="INFO")
    logger.debug("framework", "chatty detail")
    assert not (tmp_path / "logs" / "framework.log").exists()
    logger.warn("framework", "heads up")
    assert len(read_lines(tmp_path / "logs" / "framework.log")) == 1


def test_known_secrets_are_redacted(tmp_path):
    logger = TieredLogger(tmp_path, threshold="DEBUG")
    logger.add_secrets(["pwd2", "db_service2"])
    logger.error("clv", "connect failed for db_service2 with password pwd2")
    line = read_lines(tmp_path / "logs" / "clv.log")[0]
    assert "pwd2" not in line["message"]
    assert "db_service2" not in line["message"]
    assert line["message"].count(REDACTED) == 2


def test_overlapping_secrets_redact_longest_first(tmp_path):
    logger = TieredLogger(tmp_path, threshold="DEBUG")
    logger.add_secrets(["pwd", "pwd-extended"])
    assert logger.redact("x pwd-extended y") == f"x {REDACTED} y"


def test_logging_failure_never_raises(tmp_path):
    blocker = tmp_path / "blocked"
    blocker.write_text("a file where the log dir should be")
    logger = TieredLogger(blocker, threshold="DEBUG")  # logs dir cannot be created
    logger.info("framework", "this must not raise")


def test_unknown_tier_rejected():
    with pytest.raises(ValueError):
        tier_level("TRACE")
