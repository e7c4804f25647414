"""Deterministic handout archives and container build plans.

Archives are bit-exact across runs and machines: entries in path-sorted
order, deflate level 9, timestamps pinned to the ZIP epoch (1980-01-01),
permissions normalized to 0644, no platform extra fields. Image tags embed a
12-hex digest of the build context, so a tag changes iff the context content
changes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

from .schema import ChallengeSpec, is_build_context
from .state import DesiredState, compute_context_digest

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
_FILE_MODE = 0o644


class PackagerError(Exception):
    pass


class MissingHandoutFile(PackagerError):
    pass


class MissingBuildContext(PackagerError):
    pass


@dataclass(frozen=True)
class HandoutArchive:
    challenge_id: str
    filename: str
    content_hash: bytes
    data: bytes


@dataclass(frozen=True)
class BuildPlanEntry:
    challenge_id: str
    container: str
    context: str  # challenge-relative context path
    tag: str


@dataclass(frozen=True)
class BuildPlan:
    entries: list[BuildPlanEntry]

    def to_json_dict(self) -> dict:
        return {
            "entries": [
                {"challenge_id": e.challenge_id, "container": e.container,
                 "context": e.context, "tag": e.tag}
                for e in self.entries
            ]
        }

    def to_shell(self) -> str:
        """Executable build/push command list; CI runs this, not us."""
        lines = ["#!/bin/sh", "set -eu"]
        for e in self.entries:
            lines.append(f"docker build -t '{e.tag}' '{e.context}'")
            lines.append(f"docker push '{e.tag}'")
        return "\n".join(lines) + "\n"


def package_handouts(spec: ChallengeSpec) -> HandoutArchive | None:
    """ZIP the challenge's handouts; None when it has none. Byte-identical
    for identical file contents regardless of mtimes or scan order."""
    if not spec.info.handouts:
        return None
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED, compresslevel=9) as zf:
        for rel in sorted(spec.info.handouts):
            source = spec.directory / rel
            if not source.is_file():
                raise MissingHandoutFile(rel)
            zinfo = zipfile.ZipInfo(filename=Path(rel).as_posix(), date_time=_ZIP_EPOCH)
            zinfo.compress_type = zipfile.ZIP_DEFLATED
            zinfo.external_attr = _FILE_MODE << 16
            zinfo.create_system = 0  # fixed, not host OS
            zf.writestr(zinfo, source.read_bytes(), compresslevel=9)
    data = buf.getvalue()
    return HandoutArchive(
        challenge_id=spec.id,
        filename=f"{spec.id}.zip",
        content_hash=hashlib.sha256(data).digest(),
        data=data,
    )


def build_plan(desired: DesiredState, registry: str) -> BuildPlan:
    """One entry per container whose image is a build context; registry
    references are excluded. Tag = registry/challenge/container:digest12."""
    entries: list[BuildPlanEntry] = []
    for cid, entry in desired.entries.items():  # id-sorted
        template = entry.spec.deployment
        if template is None:
            continue
        for container in template.containers:
            if not is_build_context(container.image):
                continue
            context = entry.spec.directory / container.image
            if not context.is_dir():
                raise MissingBuildContext(f"{cid}/{container.image}")
            digest12 = compute_context_digest(context).hex()[:12]
            entries.append(BuildPlanEntry(
                challenge_id=cid,
                container=container.name,
                context=context.as_posix(),
                tag=f"{registry}/{cid}/{container.name}:{digest12}",
            ))
    entries.sort(key=lambda e: (e.challenge_id, e.container))
    return BuildPlan(entries=entries)


def write_build_plan(plan: BuildPlan, out_dir: Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "build-plan.json"
    sh_path = out_dir / "build-plan.sh"
    json_path.write_text(json.dumps(plan.to_json_dict(), indent=1, sort_keys=True) + "\n",
                         encoding="utf-8")
    sh_path.write_text(plan.to_shell(), encoding="utf-8")
    return json_path, sh_path
