"""Operator configuration (``ctfpilot.yaml``) and the team token file.

Flags override file values; the ``CTFPILOT_CONFIG`` environment variable
supplies the config path when ``--config`` is absent.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .instancer import InstancerConfig

CONFIG_ENV_VAR = "CTFPILOT_CONFIG"
MIN_TOKEN_LENGTH = 32


class ConfigError(Exception):
    pass


@dataclass
class ScoreboardTarget:
    url: str = "sim"  # literal "sim" embeds the bundled mock server
    token: str = "admin-token"
    sim_port: int = 0

    @property
    def is_sim(self) -> bool:
        return self.url == "sim"


@dataclass
class BackendTarget:
    kind: str = "sim"
    state_path: str | None = None


@dataclass
class ApiSettings:
    host: str = "127.0.0.1"
    port: int = 8080
    admin_token: str = ""
    cors_origin: str = "*"


@dataclass
class ServeConfig:
    repo: str = "."
    revision: str = "working-tree"
    loop_interval_seconds: int = 30
    scoreboard: ScoreboardTarget = field(default_factory=ScoreboardTarget)
    backend: BackendTarget = field(default_factory=BackendTarget)
    api: ApiSettings = field(default_factory=ApiSettings)
    teams_file: str | None = None
    audit_log: str = "-"
    journal: str | None = None
    instancer: InstancerConfig | None = None


def _section(doc: dict, key: str) -> dict:
    value = doc.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section {key!r} must be a mapping")
    return value


def load_serve_config(path: str | Path | None) -> ServeConfig:
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        raise ConfigError(f"no config file given (flag or ${CONFIG_ENV_VAR})")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")

    sb = _section(doc, "scoreboard")
    be = _section(doc, "backend")
    api = _section(doc, "api")
    inst = _section(doc, "instancer")

    instancer = None
    if inst:
        if "secret_key" not in inst:
            raise ConfigError("instancer.secret_key is required")
        instancer = InstancerConfig(**inst)

    cfg = ServeConfig(
        repo=str(doc.get("repo", ".")),
        revision=str(doc.get("revision", "working-tree")),
        loop_interval_seconds=int(doc.get("loop_interval_seconds", 30)),
        scoreboard=ScoreboardTarget(
            url=str(sb.get("url", "sim")),
            token=str(sb.get("token", "admin-token")),
            sim_port=int(sb.get("sim_port", 0)),
        ),
        backend=BackendTarget(
            kind=str(be.get("kind", "sim")),
            state_path=be.get("state_path"),
        ),
        api=ApiSettings(
            host=str(api.get("host", "127.0.0.1")),
            port=int(api.get("port", 8080)),
            admin_token=str(api.get("admin_token", "")),
            cors_origin=str(api.get("cors_origin", "*")),
        ),
        teams_file=doc.get("teams_file"),
        audit_log=str(doc.get("audit_log", "-")),
        journal=doc.get("journal"),
        instancer=instancer,
    )
    # relative paths resolve against the config file's directory
    base = path.parent
    cfg.repo = str((base / cfg.repo).resolve())
    if cfg.teams_file:
        cfg.teams_file = str((base / cfg.teams_file).resolve())
    if cfg.journal:
        cfg.journal = str((base / cfg.journal).resolve())
    if cfg.backend.state_path:
        cfg.backend.state_path = str((base / cfg.backend.state_path).resolve())
    if cfg.audit_log not in ("-",):
        cfg.audit_log = str((base / cfg.audit_log).resolve())
    return cfg


def load_teams(path: str | Path) -> dict[str, str]:
    """teams.yaml -> token->team_id map. Tokens must be >= 32 chars and the
    mapping injective; tokens are never logged."""
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    entries = doc.get("teams")
    if not isinstance(entries, list):
        raise ConfigError("teams file must contain a 'teams' list")
    tokens: dict[str, str] = {}
    seen_teams: set[str] = set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "team_id" not in entry or "token" not in entry:
            raise ConfigError(f"teams[{i}] must have team_id and token")
        team_id = str(entry["team_id"])
        token = str(entry["token"])
        if len(token) < MIN_TOKEN_LENGTH:
            raise ConfigError(f"teams[{i}].token is shorter than {MIN_TOKEN_LENGTH} chars")
        if token in tokens or team_id in seen_teams:
            raise ConfigError(f"teams[{i}] duplicates a token or team id")
        tokens[token] = team_id
        seen_teams.add(team_id)
    return tokens
