"""Shared fixtures: challenge repo builders, a live mock scoreboard, and the
sim backend wiring most suites lean on."""

from __future__ import annotations

from pathlib import Path

import hypothesis
import pytest
import yaml

from ctfpilot.backend import SimBackend, SimBackendConfig
from ctfpilot.clock import ManualClock
from ctfpilot.instancer import Instancer, InstancerConfig
from ctfpilot.scoreboard import ScoreboardClient
from ctfpilot.scoreboard_mock import MockScoreboard

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.load_profile("default")

SECRET_KEY = b"0123456789abcdef-test-key"
ADMIN_TOKEN = "test-admin-token"


# ---------------------------------------------------------------------------
# challenge directory builders


def write_challenge(
    root: Path,
    cid: str,
    kind: str = "static",
    *,
    category: str = "misc",
    points: int = 100,
    scoring: dict | None = None,
    flags: list[dict] | None = None,
    handouts: dict[str, bytes] | None = None,
    containers: list[dict] | None = None,
    expose: list[dict] | None = None,
    ttl_seconds: int | None = None,
    shared_host: str | None = None,
    visible: bool = True,
    description: str = "Solve me.",
    build_context: dict[str, bytes] | None = None,
) -> Path:
    """Write a valid challenge directory and return it. Handouts maps
    relative path -> bytes; build_context maps relative path (under ./src)
    -> bytes and switches the first container's image to ./src."""
    directory = root / cid
    directory.mkdir(parents=True)

    handout_paths = []
    for rel, data in (handouts or {}).items():
        p = directory / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
        handout_paths.append(rel)

    info = {
        "id": cid,
        "name": cid.replace("-", " ").title(),
        "author": "tester",
        "category": category,
        "description": description,
        "kind": kind,
        "scoring": scoring or {"type": "fixed", "points": points},
        "flags": flags or [{"match": "exact", "value": f"flag{{{cid}}}"}],
        "handouts": sorted(handout_paths),
        "visible": visible,
    }
    (directory / "challenge.yaml").write_text(yaml.safe_dump(info, sort_keys=False))

    if kind in ("shared", "instanced"):
        image = "registry.example.com/lib/app:1.0"
        if build_context is not None:
            for rel, data in build_context.items():
                p = directory / "src" / rel
                p.parent.mkdir(parents=True, exist_ok=True)
                p.write_bytes(data)
            image = "./src"
        deploy = {
            "containers": containers or [{
                "name": "app",
                "image": image,
                "ports": [{"number": 8080, "protocol": "http"}],
                "env": {"FLAG": "{{FLAG}}"} if kind == "instanced" else {},
                "resources": {"cpu_millis": 100, "memory_mb": 64},
            }],
            "expose": expose or [{"name": "web", "container": "app", "port": 8080,
                                  "kind": "http"}],
        }
        if kind == "instanced" and ttl_seconds is not None:
            deploy["ttl_seconds"] = ttl_seconds
        if kind == "shared" and shared_host is not None:
            deploy["shared_host"] = shared_host
        (directory / "deployment.yaml").write_text(yaml.safe_dump(deploy, sort_keys=False))

    return directory


def make_corpus(root: Path, n_static: int = 54, n_shared: int = 6, n_instanced: int = 23) -> Path:
    """Fixture repository mirroring a production distribution of kinds."""
    for i in range(n_static):
        write_challenge(root, f"static-{i:02d}",
                        handouts={"dist/readme.txt": f"static {i}".encode()} if i % 2 == 0 else None)
    for i in range(n_shared):
        write_challenge(root, f"shared-{i:02d}", kind="shared", shared_host=f"shared-{i:02d}")
    for i in range(n_instanced):
        write_challenge(root, f"instanced-{i:02d}", kind="instanced",
                        build_context={"Dockerfile": f"FROM scratch\n# {i}\n".encode()} if i % 3 == 0 else None)
    return root


def make_mixed_repo(root: Path, n_static: int = 4, n_shared: int = 2, n_instanced: int = 4) -> Path:
    """Small mixed-kind repo used by the reconciler suites."""
    for i in range(n_static):
        write_challenge(root, f"web-{i}", category="web",
                        handouts={"dist/source.txt": f"code {i}".encode()})
    for i in range(n_shared):
        write_challenge(root, f"share-{i}", kind="shared", category="pwn")
    for i in range(n_instanced):
        write_challenge(root, f"inst-{i}", kind="instanced", category="pwn", ttl_seconds=600)
    return root


# ---------------------------------------------------------------------------
# live services


@pytest.fixture()
def mock_scoreboard():
    mock = MockScoreboard(admin_token=ADMIN_TOKEN)
    service = mock.serve()
    yield mock, service
    service.stop()


@pytest.fixture()
def scoreboard_client(mock_scoreboard):
    mock, service = mock_scoreboard
    client = ScoreboardClient(service.url, ADMIN_TOKEN)
    yield client, mock
    client.close()


@pytest.fixture()
def manual_clock():
    return ManualClock()


@pytest.fixture()
def sim_backend(manual_clock):
    return SimBackend(clock=manual_clock, config=SimBackendConfig())


def make_instancer(backend, clock, catalog=None, journal_path=None, **cfg) -> Instancer:
    config = InstancerConfig(secret_key=SECRET_KEY, challs_domain="challs.example.com", **cfg)
    return Instancer(backend, config, clock=clock, catalog=catalog, journal_path=journal_path)
