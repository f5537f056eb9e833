"""Shared test fixtures: isolated workspaces and in-process services."""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from minerva.config import FrameworkConfig, load_config
from minerva.service import MinervaService, start_service

REPO = Path(__file__).resolve().parent.parent
APPS_DIR = REPO / "apps"
PAYLOADS = REPO / "fixtures" / "payloads"
SCENARIOS = REPO / "fixtures" / "scenarios"
CLV_FIXTURE = APPS_DIR / "clv" / "fixtures" / "CLV_MODEL_INPUT.csv"

# Credential values carried by the standard train payload fixture; nothing
# the service emits may ever contain them.
FIXTURE_SECRETS = ("db_service2", "user2", "pwd2", "db_service1", "user1", "pwd1")


def load_payload(name: str) -> bytes:
    return (PAYLOADS / name).read_bytes()


@dataclass
class Workspace:
    root: Path
    data_root: Path
    shared_root: Path
    apps_root: Path

    def seed_fixture_table(self, db: str = "DB1", table: str = "CLV_MODEL_INPUT") -> Path:
        target = self.data_root / db / f"{table}.csv"
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(CLV_FIXTURE, target)
        return target

    def patch_manifest(self, app_name: str, patch: dict) -> None:
        path = self.apps_root / app_name / "minerva-app"
        doc = json.loads(path.read_text(encoding="utf-8"))
        doc.update(patch)
        path.write_text(json.dumps(doc, indent=2), encoding="utf-8")

    def config(self, **overrides) -> FrameworkConfig:
        kwargs = dict(
            listen="127.0.0.1:0",
            data_root=self.data_root,
            shared_root=self.shared_root,
            apps_root=self.apps_root,
        )
        kwargs.update(overrides)
        return load_config(**kwargs)


def make_workspace(root: Path, copy_apps: bool = True) -> Workspace:
    ws = Workspace(
        root=root,
        data_root=root / "data",
        shared_root=root / "shared",
        apps_root=root / "apps",
    )
    ws.data_root.mkdir(parents=True, exist_ok=True)
    ws.shared_root.mkdir(parents=True, exist_ok=True)
    if copy_apps:
        shutil.copytree(APPS_DIR, ws.apps_root)
    else:
        ws.apps_root.mkdir(parents=True, exist_ok=True)
    return ws


@pytest.fixture
def workspace(tmp_path) -> Workspace:
    return make_workspace(tmp_path)


@pytest.fixture
def make_service():
    """Factory that starts services and guarantees teardown."""
    started: list[MinervaService] = []

    def factory(ws: Workspace, **config_overrides) -> MinervaService:
        service = start_service(ws.config(**config_overrides))
        started.append(service)
        return service

    yield factory
    for service in started:
        service.stop(drain_seconds=15)


@pytest.fixture
def service(workspace, make_service) -> MinervaService:
    workspace.seed_fixture_table()
    return make_service(workspace)
