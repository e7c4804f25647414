"""Declarative challenge definitions.

Each challenge lives in its own directory holding up to two YAML files:

* ``challenge.yaml``  — metadata synced to the scoreboard (id, name, flags,
  scoring, handouts, ...).
* ``deployment.yaml`` — runtime definition (containers, exposed endpoints),
  required for ``shared`` and ``instanced`` challenges and forbidden for
  ``static`` ones.

This module parses and validates those files into immutable dataclasses,
serializes them back (parse -> serialize -> parse is a fixed point), batch
validates whole repositories, and scaffolds new challenge directories.

Validation is fail-fast: the first violation in a file raises. Container
resource requests are mandatory; env values may only use the placeholders
``{{TEAM_ID}} {{INSTANCE_ID}} {{HOST}} {{FLAG}}``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Union

import yaml

INFO_FILE = "challenge.yaml"
DEPLOY_FILE = "deployment.yaml"

# lowercase alphanumerics and hyphens, no leading/trailing hyphen, <= 64 chars
SLUG_RE = re.compile(r"^[a-z0-9](?:[a-z0-9-]{0,62}[a-z0-9])?$")

PLACEHOLDERS = ("TEAM_ID", "INSTANCE_ID", "HOST", "FLAG")
_PLACEHOLDER_RE = re.compile(r"\{\{(TEAM_ID|INSTANCE_ID|HOST|FLAG)\}\}")

INFO_FIELDS = {
    "id", "name", "author", "category", "description",
    "kind", "scoring", "flags", "handouts", "visible",
}
DEPLOY_FIELDS = {"containers", "expose", "ttl_seconds", "shared_host"}

DEFAULT_TTL_SECONDS = 3600


class ChallengeSchemaError(Exception):
    """Base class for challenge definition errors."""


class MissingInfoFile(ChallengeSchemaError):
    pass


class MissingDeploymentFile(ChallengeSchemaError):
    pass


class UnexpectedDeploymentFile(ChallengeSchemaError):
    pass


class SchemaViolation(ChallengeSchemaError):
    """A field failed validation. ``path`` is a dotted/indexed field path
    such as ``scoring.points`` or ``containers[0].ports[1].number``."""

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}" if path else reason)


class DuplicateContainerName(SchemaViolation):
    pass


class DanglingExposeTarget(SchemaViolation):
    pass


class IdAlreadyExists(ChallengeSchemaError):
    pass


class InvalidSlug(ChallengeSchemaError):
    pass


class ChallengeKind(str, Enum):
    STATIC = "static"
    SHARED = "shared"
    INSTANCED = "instanced"


class FlagMatch(str, Enum):
    EXACT = "exact"
    REGEX = "regex"


class NetProtocol(str, Enum):
    TCP = "tcp"
    HTTP = "http"


@dataclass(frozen=True)
class Flag:
    match: FlagMatch
    value: str
    case_insensitive: bool = False


@dataclass(frozen=True)
class FixedScoring:
    points: int


@dataclass(frozen=True)
class DynamicScoring:
    initial: int
    minimum: int
    decay: int


Scoring = Union[FixedScoring, DynamicScoring]


@dataclass(frozen=True)
class PortSpec:
    number: int
    protocol: NetProtocol


@dataclass(frozen=True)
class Resources:
    cpu_millis: int
    memory_mb: int


@dataclass(frozen=True)
class ContainerSpec:
    name: str
    image: str  # registry reference, or a ./path build context
    ports: list[PortSpec]
    env: dict[str, str]
    resources: Resources


@dataclass(frozen=True)
class ExposeSpec:
    name: str
    container: str
    port: int
    kind: NetProtocol


@dataclass(frozen=True)
class DeploymentTemplate:
    containers: list[ContainerSpec]
    expose: list[ExposeSpec]
    ttl_seconds: int | None = None  # instanced only
    shared_host: str | None = None  # shared only


@dataclass(frozen=True)
class ChallengeInfo:
    id: str
    name: str
    author: str
    category: str
    description: str
    kind: ChallengeKind
    scoring: Scoring
    flags: list[Flag]
    handouts: list[str]
    visible: bool = True


@dataclass(frozen=True)
class ChallengeSpec:
    """Validated union of challenge info and its optional deployment.

    ``directory`` records where the files live (handouts and build contexts
    resolve against it) but does not participate in structural equality.
    """

    info: ChallengeInfo
    deployment: DeploymentTemplate | None
    directory: Path = field(compare=False)

    @property
    def id(self) -> str:
        return self.info.id

    @property
    def kind(self) -> ChallengeKind:
        return self.info.kind


def is_build_context(image: str) -> bool:
    """Image values starting with ``./`` (or equal to ``.``) are build
    contexts inside the challenge directory; anything else is treated as a
    registry reference."""
    return image == "." or image.startswith("./")


# ---------------------------------------------------------------------------
# low-level field readers


def _expect_map(value: Any, path: str) -> dict:
    if not isinstance(value, dict):
        raise SchemaViolation(path, f"expected a mapping, got {type(value).__name__}")
    return value


def _expect_list(value: Any, path: str) -> list:
    if not isinstance(value, list):
        raise SchemaViolation(path, f"expected a list, got {type(value).__name__}")
    return value


def _expect_str(value: Any, path: str) -> str:
    if not isinstance(value, str):
        raise SchemaViolation(path, f"expected a string, got {type(value).__name__}")
    return value


def _expect_bool(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise SchemaViolation(path, f"expected a boolean, got {type(value).__name__}")
    return value


def _expect_pos_int(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaViolation(path, f"expected an integer, got {type(value).__name__}")
    if value <= 0:
        raise SchemaViolation(path, "must be a positive integer")
    return value


def _expect_slug(value: Any, path: str) -> str:
    s = _expect_str(value, path)
    if not SLUG_RE.match(s):
        raise SchemaViolation(
            path, "must be a slug (lowercase alphanumerics and hyphens, 1-64 chars)"
        )
    return s


def _check_keys(data: dict, allowed: set[str], required: set[str], path: str) -> None:
    for key in data:
        if key not in allowed:
            raise SchemaViolation(f"{path}{key}" if path else key, "unknown field")
    for key in sorted(required):
        if key not in data:
            raise SchemaViolation(f"{path}{key}" if path else key, "required field is missing")


def _check_placeholders(value: str, path: str) -> None:
    # every '{{' must open a well-formed placeholder from the closed set
    idx = 0
    while True:
        idx = value.find("{{", idx)
        if idx < 0:
            return
        m = _PLACEHOLDER_RE.match(value, idx)
        if m is None:
            snippet = value[idx : idx + 20]
            raise SchemaViolation(
                path,
                f"unknown placeholder at {snippet!r}; allowed: "
                + ", ".join("{{%s}}" % p for p in PLACEHOLDERS),
            )
        idx = m.end()


# ---------------------------------------------------------------------------
# parsing


def _load_yaml(path: Path, label: str) -> dict:
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise SchemaViolation(label, f"invalid YAML: {exc}") from exc
    if data is None:
        raise SchemaViolation(label, "file is empty")
    return _expect_map(data, label)


def parse_info_dict(data: dict, directory: Path) -> ChallengeInfo:
    _check_keys(
        data,
        INFO_FIELDS,
        {"id", "name", "author", "category", "description", "kind", "scoring", "flags"},
        "",
    )
    cid = _expect_slug(data["id"], "id")
    name = _expect_str(data["name"], "name")
    if not 1 <= len(name) <= 128:
        raise SchemaViolation("name", "must be 1-128 characters")
    author = _expect_str(data["author"], "author")
    category = _expect_str(data["category"], "category")
    description = _expect_str(data["description"], "description")

    kind_raw = _expect_str(data["kind"], "kind")
    try:
        kind = ChallengeKind(kind_raw)
    except ValueError:
        raise SchemaViolation("kind", f"must be one of static, shared, instanced (got {kind_raw!r})")

    scoring = _parse_scoring(_expect_map(data["scoring"], "scoring"))

    flags_raw = _expect_list(data["flags"], "flags")
    if not flags_raw:
        raise SchemaViolation("flags", "at least one flag is required")
    flags = [_parse_flag(f, f"flags[{i}]") for i, f in enumerate(flags_raw)]

    handouts_raw = _expect_list(data.get("handouts", []), "handouts")
    handouts = []
    base = directory.resolve()
    for i, h in enumerate(handouts_raw):
        p = _expect_str(h, f"handouts[{i}]")
        if Path(p).is_absolute():
            raise SchemaViolation(f"handouts[{i}]", "must be a relative path")
        resolved = (directory / p).resolve()
        if base != resolved and base not in resolved.parents:
            raise SchemaViolation(f"handouts[{i}]", "path escapes the challenge directory")
        if not resolved.is_file():
            raise SchemaViolation(f"handouts[{i}]", f"no such handout file: {p}")
        handouts.append(p)

    visible = _expect_bool(data.get("visible", True), "visible")

    return ChallengeInfo(
        id=cid, name=name, author=author, category=category,
        description=description, kind=kind, scoring=scoring,
        flags=flags, handouts=handouts, visible=visible,
    )


def _parse_scoring(data: dict) -> Scoring:
    stype = _expect_str(data.get("type", ""), "scoring.type")
    if stype == "fixed":
        _check_keys(data, {"type", "points"}, {"type", "points"}, "scoring.")
        return FixedScoring(points=_expect_pos_int(data["points"], "scoring.points"))
    if stype == "dynamic":
        _check_keys(
            data, {"type", "initial", "minimum", "decay"},
            {"type", "initial", "minimum", "decay"}, "scoring.",
        )
        initial = _expect_pos_int(data["initial"], "scoring.initial")
        minimum = _expect_pos_int(data["minimum"], "scoring.minimum")
        decay = _expect_pos_int(data["decay"], "scoring.decay")
        if minimum > initial:
            raise SchemaViolation("scoring.minimum", "must not exceed scoring.initial")
        return DynamicScoring(initial=initial, minimum=minimum, decay=decay)
    raise SchemaViolation("scoring.type", f"must be 'fixed' or 'dynamic' (got {stype!r})")


def _parse_flag(data: Any, path: str) -> Flag:
    data = _expect_map(data, path)
    _check_keys(data, {"match", "value", "case_insensitive"}, {"match", "value"}, path + ".")
    match_raw = _expect_str(data["match"], f"{path}.match")
    try:
        match = FlagMatch(match_raw)
    except ValueError:
        raise SchemaViolation(f"{path}.match", f"must be 'exact' or 'regex' (got {match_raw!r})")
    value = _expect_str(data["value"], f"{path}.value")
    if not value:
        raise SchemaViolation(f"{path}.value", "must be non-empty")
    if match is FlagMatch.REGEX:
        try:
            re.compile(value)
        except re.error as exc:
            raise SchemaViolation(f"{path}.value", f"invalid regular expression: {exc}")
    ci = _expect_bool(data.get("case_insensitive", False), f"{path}.case_insensitive")
    return Flag(match=match, value=value, case_insensitive=ci)


def parse_deployment_dict(
    data: dict,
    kind: ChallengeKind,
    directory: Path,
    has_exact_flag: bool,
    check_files: bool = True,
) -> DeploymentTemplate:
    _check_keys(data, DEPLOY_FIELDS, {"containers", "expose"}, "")

    containers_raw = _expect_list(data["containers"], "containers")
    if not containers_raw:
        raise SchemaViolation("containers", "at least one container is required")
    containers = []
    seen_names: set[str] = set()
    for i, c in enumerate(containers_raw):
        spec = _parse_container(c, f"containers[{i}]", kind, directory, has_exact_flag, check_files)
        if spec.name in seen_names:
            raise DuplicateContainerName(
                f"containers[{i}].name", f"container name {spec.name!r} is not unique"
            )
        seen_names.add(spec.name)
        containers.append(spec)

    expose_raw = _expect_list(data["expose"], "expose")
    if not expose_raw:
        raise SchemaViolation("expose", "at least one exposed endpoint is required")
    declared = {(c.name, p.number) for c in containers for p in c.ports}
    expose = []
    seen_expose: set[str] = set()
    for i, e in enumerate(expose_raw):
        spec = _parse_expose(e, f"expose[{i}]")
        if spec.name in seen_expose:
            raise SchemaViolation(f"expose[{i}].name", f"expose name {spec.name!r} is not unique")
        seen_expose.add(spec.name)
        if (spec.container, spec.port) not in declared:
            raise DanglingExposeTarget(
                f"expose[{i}]",
                f"no container {spec.container!r} declaring port {spec.port}",
            )
        expose.append(spec)

    ttl = data.get("ttl_seconds")
    shared_host = data.get("shared_host")
    if kind is ChallengeKind.INSTANCED:
        if shared_host is not None:
            raise SchemaViolation("shared_host", "only valid for shared challenges")
        ttl = DEFAULT_TTL_SECONDS if ttl is None else _expect_pos_int(ttl, "ttl_seconds")
    else:  # shared
        if ttl is not None:
            raise SchemaViolation("ttl_seconds", "only valid for instanced challenges")
        if shared_host is not None:
            shared_host = _expect_slug(shared_host, "shared_host")

    return DeploymentTemplate(
        containers=containers, expose=expose, ttl_seconds=ttl, shared_host=shared_host
    )


def _parse_container(
    data: Any,
    path: str,
    kind: ChallengeKind,
    directory: Path,
    has_exact_flag: bool,
    check_files: bool = True,
) -> ContainerSpec:
    data = _expect_map(data, path)
    _check_keys(
        data, {"name", "image", "ports", "env", "resources"},
        {"name", "image", "resources"}, path + ".",
    )
    name = _expect_slug(data["name"], f"{path}.name")
    image = _expect_str(data["image"], f"{path}.image")
    if not image:
        raise SchemaViolation(f"{path}.image", "must be non-empty")
    if image.startswith("../") or "/../" in image:
        raise SchemaViolation(f"{path}.image", "build context escapes the challenge directory")
    if is_build_context(image) and check_files:
        context = (directory / image).resolve()
        base = directory.resolve()
        if base != context and base not in context.parents:
            raise SchemaViolation(f"{path}.image", "build context escapes the challenge directory")
        if not context.is_dir():
            raise SchemaViolation(f"{path}.image", f"no such build context: {image}")

    ports = []
    seen_ports: set[int] = set()
    for i, p in enumerate(_expect_list(data.get("ports", []), f"{path}.ports")):
        p = _expect_map(p, f"{path}.ports[{i}]")
        _check_keys(p, {"number", "protocol"}, {"number", "protocol"}, f"{path}.ports[{i}].")
        number = _expect_pos_int(p["number"], f"{path}.ports[{i}].number")
        if number > 65535:
            raise SchemaViolation(f"{path}.ports[{i}].number", "must be 1-65535")
        if number in seen_ports:
            raise SchemaViolation(f"{path}.ports[{i}].number", f"port {number} declared twice")
        seen_ports.add(number)
        proto_raw = _expect_str(p["protocol"], f"{path}.ports[{i}].protocol")
        try:
            proto = NetProtocol(proto_raw)
        except ValueError:
            raise SchemaViolation(
                f"{path}.ports[{i}].protocol", f"must be 'tcp' or 'http' (got {proto_raw!r})"
            )
        ports.append(PortSpec(number=number, protocol=proto))

    env: dict[str, str] = {}
    for key, value in _expect_map(data.get("env", {}), f"{path}.env").items():
        key = _expect_str(key, f"{path}.env")
        value = _expect_str(value, f"{path}.env.{key}")
        _check_placeholders(value, f"{path}.env.{key}")
        if kind is ChallengeKind.SHARED and ("{{TEAM_ID}}" in value or "{{INSTANCE_ID}}" in value):
            raise SchemaViolation(
                f"{path}.env.{key}",
                "TEAM_ID/INSTANCE_ID placeholders are meaningless in shared deployments",
            )
        if "{{FLAG}}" in value and not has_exact_flag:
            raise SchemaViolation(
                f"{path}.env.{key}", "{{FLAG}} requires the challenge to declare an exact flag"
            )
        env[key] = value

    res = _expect_map(data["resources"], f"{path}.resources")
    _check_keys(
        res, {"cpu_millis", "memory_mb"}, {"cpu_millis", "memory_mb"}, f"{path}.resources."
    )
    resources = Resources(
        cpu_millis=_expect_pos_int(res["cpu_millis"], f"{path}.resources.cpu_millis"),
        memory_mb=_expect_pos_int(res["memory_mb"], f"{path}.resources.memory_mb"),
    )
    return ContainerSpec(name=name, image=image, ports=ports, env=env, resources=resources)


def _parse_expose(data: Any, path: str) -> ExposeSpec:
    data = _expect_map(data, path)
    _check_keys(data, {"name", "container", "port", "kind"},
                {"name", "container", "port", "kind"}, path + ".")
    name = _expect_slug(data["name"], f"{path}.name")
    container = _expect_str(data["container"], f"{path}.container")
    port = _expect_pos_int(data["port"], f"{path}.port")
    kind_raw = _expect_str(data["kind"], f"{path}.kind")
    try:
        kind = NetProtocol(kind_raw)
    except ValueError:
        raise SchemaViolation(f"{path}.kind", f"must be 'tcp' or 'http' (got {kind_raw!r})")
    return ExposeSpec(name=name, container=container, port=port, kind=kind)


def parse_challenge(directory: Path) -> ChallengeSpec:
    """Parse and validate one challenge directory.

    Raises MissingInfoFile, MissingDeploymentFile, UnexpectedDeploymentFile,
    or SchemaViolation (and its subclasses) on invalid input.
    """
    directory = Path(directory)
    info_path = directory / INFO_FILE
    if not info_path.is_file():
        raise MissingInfoFile(str(info_path))

    info = parse_info_dict(_load_yaml(info_path, INFO_FILE), directory)

    deploy_path = directory / DEPLOY_FILE
    if info.kind is ChallengeKind.STATIC:
        if deploy_path.exists():
            raise UnexpectedDeploymentFile(str(deploy_path))
        return ChallengeSpec(info=info, deployment=None, directory=directory)

    if not deploy_path.is_file():
        raise MissingDeploymentFile(str(deploy_path))
    deployment = parse_deployment_dict(
        _load_yaml(deploy_path, DEPLOY_FILE), info.kind, directory,
        has_exact_flag=any(f.match is FlagMatch.EXACT for f in info.flags),
    )
    return ChallengeSpec(info=info, deployment=deployment, directory=directory)


# ---------------------------------------------------------------------------
# serialization


def info_to_dict(info: ChallengeInfo) -> dict:
    scoring: dict[str, Any]
    if isinstance(info.scoring, FixedScoring):
        scoring = {"type": "fixed", "points": info.scoring.points}
    else:
        scoring = {
            "type": "dynamic",
            "initial": info.scoring.initial,
            "minimum": info.scoring.minimum,
            "decay": info.scoring.decay,
        }
    return {
        "id": info.id,
        "name": info.name,
        "author": info.author,
        "category": info.category,
        "description": info.description,
        "kind": info.kind.value,
        "scoring": scoring,
        "flags": [
            {"match": f.match.value, "value": f.value, "case_insensitive": f.case_insensitive}
            for f in info.flags
        ],
        "handouts": list(info.handouts),
        "visible": info.visible,
    }


def deployment_to_dict(template: DeploymentTemplate) -> dict:
    out: dict[str, Any] = {
        "containers": [
            {
                "name": c.name,
                "image": c.image,
                "ports": [{"number": p.number, "protocol": p.protocol.value} for p in c.ports],
                "env": dict(c.env),
                "resources": {
                    "cpu_millis": c.resources.cpu_millis,
                    "memory_mb": c.resources.memory_mb,
                },
            }
            for c in template.containers
        ],
        "expose": [
            {"name": e.name, "container": e.container, "port": e.port, "kind": e.kind.value}
            for e in template.expose
        ],
    }
    if template.ttl_seconds is not None:
        out["ttl_seconds"] = template.ttl_seconds
    if template.shared_host is not None:
        out["shared_host"] = template.shared_host
    return out


def serialize_challenge(spec: ChallengeSpec, directory: Path | None = None) -> Path:
    """Write the spec back as challenge.yaml (+ deployment.yaml). Returns the
    directory written to."""
    directory = Path(directory) if directory is not None else spec.directory
    directory.mkdir(parents=True, exist_ok=True)
    (directory / INFO_FILE).write_text(
        yaml.safe_dump(info_to_dict(spec.info), sort_keys=False, allow_unicode=True),
        encoding="utf-8",
    )
    if spec.deployment is not None:
        (directory / DEPLOY_FILE).write_text(
            yaml.safe_dump(deployment_to_dict(spec.deployment), sort_keys=False, allow_unicode=True),
            encoding="utf-8",
        )
    return directory


# ---------------------------------------------------------------------------
# repository scanning


@dataclass(frozen=True)
class Diagnostic:
    code: str
    path: str
    message: str

    def __str__(self) -> str:
        if self.path:
            return f"{self.code}: {self.path}: {self.message}"
        return f"{self.code}: {self.message}"


_ERROR_CODES = {
    MissingInfoFile: "missing-info-file",
    MissingDeploymentFile: "missing-deployment-file",
    UnexpectedDeploymentFile: "unexpected-deployment-file",
    DuplicateContainerName: "duplicate-container-name",
    DanglingExposeTarget: "dangling-expose-target",
    SchemaViolation: "schema-violation",
}


def _diagnostic_for(exc: ChallengeSchemaError) -> Diagnostic:
    code = _ERROR_CODES.get(type(exc), "schema-violation")
    if isinstance(exc, SchemaViolation):
        return Diagnostic(code=code, path=exc.path, message=exc.reason)
    return Diagnostic(code=code, path="", message=str(exc))


def iter_challenge_dirs(root: Path) -> list[Path]:
    """Every directory under root containing a challenge.yaml, sorted."""
    root = Path(root)
    return sorted(p.parent for p in root.rglob(INFO_FILE))


def _raw_id(directory: Path, root: Path) -> str:
    # best-effort label for a directory whose challenge failed to parse
    try:
        data = yaml.safe_load((directory / INFO_FILE).read_text(encoding="utf-8"))
        if isinstance(data, dict) and isinstance(data.get("id"), str):
            return data["id"]
    except Exception:
        pass
    return directory.relative_to(root).as_posix()


def scan_repo(root: Path) -> list[tuple[str, Path, ChallengeSpec | None, list[Diagnostic]]]:
    """Parse every challenge directory under root. Returns one entry per
    directory: (id-or-label, directory, spec-or-None, diagnostics). Duplicate
    ids across directories are reported on every colliding entry."""
    root = Path(root)
    entries: list[tuple[str, Path, ChallengeSpec | None, list[Diagnostic]]] = []
    for directory in iter_challenge_dirs(root):
        try:
            spec = parse_challenge(directory)
            entries.append((spec.id, directory, spec, []))
        except ChallengeSchemaError as exc:
            entries.append((_raw_id(directory, root), directory, None, [_diagnostic_for(exc)]))

    counts: dict[str, int] = {}
    for label, _, _, _ in entries:
        counts[label] = counts.get(label, 0) + 1
    for label, _, _, diags in entries:
        if counts[label] > 1:
            diags.append(
                Diagnostic(code="duplicate-id", path="id",
                           message=f"challenge id {label!r} is declared more than once")
            )
    entries.sort(key=lambda e: (e[0], e[1].as_posix()))
    return entries


def validate_repo(root: Path) -> list[tuple[str, list[Diagnostic]]]:
    """Batch validation: one (challenge id, diagnostics) pair per challenge
    directory, ordered by id. Never raises; problems come back as
    diagnostics."""
    return [(label, diags) for label, _, _, diags in scan_repo(root)]


# ---------------------------------------------------------------------------
# scaffolding

_INFO_TEMPLATE = """\
# Challenge metadata. This file is synced to the scoreboard.
id: {id}
name: {title}
author: change-me
category: misc
description: |
  Describe the challenge here. Markdown is supported.
kind: {kind}
scoring:
  type: fixed
  points: 100
flags:
  - match: exact
    value: flag{{change-me}}
# Files listed here are packaged into {id}.zip and attached to the
# scoreboard entry. Paths are relative to this directory.
handouts: []
visible: true
"""

_DEPLOY_INSTANCED_TEMPLATE = """\
# Runtime definition for per-team instances.
containers:
  - name: app
    # Registry reference, or a ./path build context inside this directory.
    image: ./src
    ports:
      - number: 8080
        protocol: http
    env:
      # Placeholders filled per instance: {{TEAM_ID}} {{INSTANCE_ID}} {{HOST}} {{FLAG}}
      FLAG: "{{FLAG}}"
    resources:  # mandatory; unbounded containers destabilize scheduling
      cpu_millis: 100
      memory_mb: 64
expose:
  - name: web
    container: app
    port: 8080
    kind: http
# Seconds an instance lives before the janitor reaps it (extensions allowed).
ttl_seconds: 3600
"""

_DEPLOY_SHARED_TEMPLATE = """\
# Runtime definition for the single shared deployment.
containers:
  - name: app
    image: registry.example.com/{id}/app:latest
    ports:
      - number: 8080
        protocol: http
    env: {{}}
    resources:  # mandatory; unbounded containers destabilize scheduling
      cpu_millis: 250
      memory_mb: 128
expose:
  - name: web
    container: app
    port: 8080
    kind: http
# Optional label for the public hostname; defaults to the challenge id.
shared_host: {id}
"""

_DOCKERFILE_STUB = """\
FROM alpine:3
# Build the challenge service here.
CMD ["sh", "-c", "echo replace me"]
"""


def scaffold(root: Path, challenge_id: str, kind: ChallengeKind | str) -> Path:
    """Create a new challenge directory under root with commented template
    files appropriate to the kind. The result parses cleanly."""
    root = Path(root)
    kind = ChallengeKind(kind)
    if not SLUG_RE.match(challenge_id):
        raise InvalidSlug(challenge_id)
    target = root / challenge_id
    if target.exists():
        raise IdAlreadyExists(challenge_id)
    existing = {label for label, _, spec, _ in scan_repo(root) if spec is not None}
    if challenge_id in existing:
        raise IdAlreadyExists(challenge_id)

    target.mkdir(parents=True)
    title = challenge_id.replace("-", " ").title()
    (target / INFO_FILE).write_text(
        _INFO_TEMPLATE.format(id=challenge_id, title=title, kind=kind.value), encoding="utf-8"
    )
    if kind is ChallengeKind.INSTANCED:
        (target / DEPLOY_FILE).write_text(_DEPLOY_INSTANCED_TEMPLATE, encoding="utf-8")
        src = target / "src"
        src.mkdir()
        (src / "Dockerfile").write_text(_DOCKERFILE_STUB, encoding="utf-8")
    elif kind is ChallengeKind.SHARED:
        (target / DEPLOY_FILE).write_text(
            _DEPLOY_SHARED_TEMPLATE.format(id=challenge_id), encoding="utf-8"
        )
    return target
