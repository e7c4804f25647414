"""Desired-state snapshots and reconcile planning.

``snapshot`` turns a validated challenge repository into a content-addressed
``DesiredState``; ``plan`` diffs that against what the scoreboard and the
orchestration backend report live and emits the ordered action list that
closes the gap. Both are pure functions: same tree, same hashes; same
(desired, live) pair, same plan.

Hashing recipe (sha256 throughout, named in serialized snapshots):
field-name-sorted minified JSON of the parsed structure, followed by the
referenced file bytes in path-sorted order, each frame prefixed with the
path and byte length. Hashes therefore survive YAML formatting churn,
fs iteration order, and timestamp changes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .schema import (
    ChallengeKind,
    ChallengeSpec,
    Diagnostic,
    deployment_to_dict,
    info_to_dict,
    is_build_context,
    scan_repo,
)

HASH_ALG = "sha256"
ZERO_DIGEST = bytes(32)


class ValidationFailed(Exception):
    """Snapshot refused: the repository has diagnostics (fail-closed)."""

    def __init__(self, diagnostics: list[tuple[str, list[Diagnostic]]]):
        self.diagnostics = diagnostics
        flat = "; ".join(
            f"{cid}: {d}" for cid, diags in diagnostics for d in diags
        )
        super().__init__(f"repository validation failed: {flat}")


def canonical_json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def _frame(path: str, data: bytes) -> bytes:
    return f"{path}\x00{len(data)}\x00".encode() + data


def _iter_context_files(context: Path) -> list[tuple[str, Path]]:
    files = [(p.relative_to(context).as_posix(), p) for p in context.rglob("*") if p.is_file()]
    files.sort(key=lambda t: t[0])
    return files


def compute_info_hash(spec: ChallengeSpec) -> bytes:
    h = hashlib.sha256()
    h.update(canonical_json_bytes(info_to_dict(spec.info)))
    for rel in sorted(spec.info.handouts):
        h.update(_frame(rel, (spec.directory / rel).read_bytes()))
    return h.digest()


def compute_deploy_hash(spec: ChallengeSpec) -> bytes:
    if spec.deployment is None:
        return ZERO_DIGEST
    h = hashlib.sha256()
    h.update(canonical_json_bytes(deployment_to_dict(spec.deployment)))
    for container in spec.deployment.containers:
        if not is_build_context(container.image):
            continue
        context = spec.directory / container.image
        h.update(_frame(f"context:{container.name}", b""))
        for rel, p in _iter_context_files(context):
            h.update(_frame(rel, p.read_bytes()))
    return h.digest()


def compute_context_digest(context: Path) -> bytes:
    """Digest of one build context directory (used for image tags)."""
    h = hashlib.sha256()
    for rel, p in _iter_context_files(Path(context)):
        h.update(_frame(rel, p.read_bytes()))
    return h.digest()


@dataclass(frozen=True)
class DesiredEntry:
    spec: ChallengeSpec
    info_hash: bytes
    deploy_hash: bytes


@dataclass(frozen=True)
class DesiredState:
    revision: str
    entries: dict[str, DesiredEntry]  # insertion order is id-sorted

    def to_json_dict(self) -> dict:
        return {
            "revision": self.revision,
            "hash_alg": HASH_ALG,
            "entries": {
                cid: {
                    "info_hash": entry.info_hash.hex(),
                    "deploy_hash": entry.deploy_hash.hex(),
                }
                for cid, entry in self.entries.items()
            },
        }


def snapshot(root: Path, revision: str = "working-tree") -> DesiredState:
    """Scan a checked-out working tree into a DesiredState.

    Fail-closed: any diagnostic anywhere in the repository aborts the whole
    snapshot with ValidationFailed.
    """
    scanned = scan_repo(root)
    bad = [(label, diags) for label, _, _, diags in scanned if diags]
    if bad:
        raise ValidationFailed(bad)
    entries: dict[str, DesiredEntry] = {}
    for label, _, spec, _ in scanned:  # already id-sorted
        assert spec is not None
        entries[label] = DesiredEntry(
            spec=spec,
            info_hash=compute_info_hash(spec),
            deploy_hash=compute_deploy_hash(spec),
        )
    return DesiredState(revision=revision, entries=entries)


# ---------------------------------------------------------------------------
# live state and planning


class BackendFlavor(str, Enum):
    SHARED = "shared"
    TEMPLATE = "template"


@dataclass(frozen=True)
class LiveState:
    """Read-only view of what the targets currently hold.

    scoreboard maps challenge id -> info hash annotation; backend maps
    challenge id -> (flavor, deploy hash) where flavor records whether the
    id is live as a shared deployment or a registered instance template
    (needed to pick the right removal action after a kind change).
    """

    scoreboard: dict[str, bytes] = field(default_factory=dict)
    backend: dict[str, tuple[BackendFlavor, bytes]] = field(default_factory=dict)


class ActionKind(str, Enum):
    CREATE_CHALLENGE = "create_challenge"
    UPDATE_CHALLENGE_INFO = "update_challenge_info"
    DELETE_CHALLENGE = "delete_challenge"
    UPLOAD_HANDOUTS = "upload_handouts"
    APPLY_SHARED = "apply_shared"
    REMOVE_SHARED = "remove_shared"
    REGISTER_TEMPLATE = "register_template"
    UNREGISTER_TEMPLATE = "unregister_template"


_DELETIONS = {
    ActionKind.DELETE_CHALLENGE,
    ActionKind.REMOVE_SHARED,
    ActionKind.UNREGISTER_TEMPLATE,
}


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    challenge_id: str


@dataclass(frozen=True)
class ReconcilePlan:
    actions: list[Action]

    def __bool__(self) -> bool:
        return bool(self.actions)


def plan(desired: DesiredState, live: LiveState) -> ReconcilePlan:
    """Compute the ordered action list that makes live equal desired.

    Per id: additions/updates first (scoreboard before backend), all
    deletion variants last. Empty iff ids and hashes already agree.
    """
    actions: list[Action] = []
    deletions: list[Action] = []

    for cid, entry in desired.entries.items():  # id-sorted
        live_info = live.scoreboard.get(cid)
        if live_info is None:
            actions.append(Action(ActionKind.CREATE_CHALLENGE, cid))
            if entry.spec.info.handouts:
                actions.append(Action(ActionKind.UPLOAD_HANDOUTS, cid))
        elif live_info != entry.info_hash:
            actions.append(Action(ActionKind.UPDATE_CHALLENGE_INFO, cid))
            if entry.spec.info.handouts:
                actions.append(Action(ActionKind.UPLOAD_HANDOUTS, cid))

        kind = entry.spec.kind
        live_backend = live.backend.get(cid)
        if kind is ChallengeKind.SHARED:
            if live_backend is not None and live_backend[0] is BackendFlavor.TEMPLATE:
                deletions.append(Action(ActionKind.UNREGISTER_TEMPLATE, cid))
                live_backend = None
            if live_backend is None or live_backend[1] != entry.deploy_hash:
                actions.append(Action(ActionKind.APPLY_SHARED, cid))
        elif kind is ChallengeKind.INSTANCED:
            if live_backend is not None and live_backend[0] is BackendFlavor.SHARED:
                deletions.append(Action(ActionKind.REMOVE_SHARED, cid))
                live_backend = None
            if live_backend is None or live_backend[1] != entry.deploy_hash:
                actions.append(Action(ActionKind.REGISTER_TEMPLATE, cid))
        else:  # static: nothing may live on the backend
            if live_backend is not None:
                if live_backend[0] is BackendFlavor.SHARED:
                    deletions.append(Action(ActionKind.REMOVE_SHARED, cid))
                else:
                    deletions.append(Action(ActionKind.UNREGISTER_TEMPLATE, cid))

    for cid in sorted(set(live.scoreboard) | set(live.backend)):
        if cid in desired.entries:
            continue
        if cid in live.scoreboard:
            deletions.append(Action(ActionKind.DELETE_CHALLENGE, cid))
        flavor_hash = live.backend.get(cid)
        if flavor_hash is not None:
            if flavor_hash[0] is BackendFlavor.SHARED:
                deletions.append(Action(ActionKind.REMOVE_SHARED, cid))
            else:
                deletions.append(Action(ActionKind.UNREGISTER_TEMPLATE, cid))

    deletions.sort(key=lambda a: (a.challenge_id, a.kind is not ActionKind.DELETE_CHALLENGE))
    return ReconcilePlan(actions=actions + deletions)


_DIFF_RENDER = {
    ActionKind.CREATE_CHALLENGE: "+ challenge {id}",
    ActionKind.UPDATE_CHALLENGE_INFO: "~ challenge {id}",
    ActionKind.DELETE_CHALLENGE: "- challenge {id}",
    ActionKind.UPLOAD_HANDOUTS: "~ handouts {id}",
    ActionKind.APPLY_SHARED: "+ shared {id}",
    ActionKind.REMOVE_SHARED: "- shared {id}",
    ActionKind.REGISTER_TEMPLATE: "+ template {id}",
    ActionKind.UNREGISTER_TEMPLATE: "- template {id}",
}


def diff_human(reconcile_plan: ReconcilePlan) -> str:
    """One greppable line per action (+ add, ~ update, - delete)."""
    if not reconcile_plan.actions:
        return "no changes"
    return "\n".join(
        _DIFF_RENDER[a.kind].format(id=a.challenge_id) for a in reconcile_plan.actions
    )
