"""Idempotent scoreboard client.

Challenges created by this client carry two tags server-side: ``slug:<id>``
(the idempotency key) and ``hash:<hex>`` (the content hash last applied).
Every operation converges the server toward the given spec and performs zero
mutating requests when nothing changed, so a reconcile loop can call it
blindly every cycle.
"""

from __future__ import annotations

import base64
import hashlib
import ssl
import threading
from dataclasses import dataclass
from typing import Optional

import httpx

# building an SSL context dominates httpx.Client construction; share one
_SSL_CONTEXT = ssl.create_default_context()

from .schema import ChallengeKind, ChallengeSpec, DynamicScoring, FixedScoring


class ScoreboardError(Exception):
    pass


class Unauthorized(ScoreboardError):
    pass


class Conflict(ScoreboardError):
    """One slug resolved to several remote challenges; manual cleanup needed."""


class UnknownSlug(ScoreboardError):
    pass


class Transport(ScoreboardError):
    pass


@dataclass(frozen=True)
class ScoreboardChallenge:
    remote_id: int
    slug: str
    name: str
    category: str
    description: str
    visible: bool
    score_record: dict
    connection_info: Optional[str]
    info_hash_annotation: str


def _score_record(spec: ChallengeSpec) -> dict:
    scoring = spec.info.scoring
    if isinstance(scoring, FixedScoring):
        return {"type": "standard", "value": scoring.points,
                "initial": None, "decay": None, "minimum": None}
    assert isinstance(scoring, DynamicScoring)
    return {"type": "dynamic", "value": scoring.initial, "initial": scoring.initial,
            "decay": scoring.decay, "minimum": scoring.minimum}


class ScoreboardClient:
    """Safe to share across threads; per-slug operations are serialized so
    concurrent upserts of the same challenge cannot interleave."""

    def __init__(self, base_url: str, token: str, timeout: float = 10.0,
                 http: httpx.Client | None = None):
        self._http = http or httpx.Client(base_url=base_url, timeout=timeout,
                                          verify=_SSL_CONTEXT)
        self._headers = {"Authorization": f"Bearer {token}"}
        self._lock = threading.Lock()
        self._slug_locks: dict[str, threading.Lock] = {}

    def close(self) -> None:
        self._http.close()

    # -- requests ------------------------------------------------------------

    def _request(self, method: str, path: str, json_body: dict | None = None) -> dict:
        try:
            resp = self._http.request(method, path, json=json_body, headers=self._headers)
        except httpx.HTTPError as exc:
            raise Transport(f"{method} {path}: {exc}") from exc
        if resp.status_code == 401:
            raise Unauthorized(path)
        if resp.status_code >= 400:
            raise Transport(f"{method} {path}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise Transport(f"{method} {path}: invalid JSON body") from exc

    def _slug_lock(self, slug: str) -> threading.Lock:
        with self._lock:
            lock = self._slug_locks.get(slug)
            if lock is None:
                lock = self._slug_locks[slug] = threading.Lock()
            return lock

    def _challenges(self) -> list[dict]:
        return self._request("GET", "/api/v1/challenges").get("data", [])

    def _find_remote(self, slug: str) -> Optional[dict]:
        matches = [ch for ch in self._challenges() if f"slug:{slug}" in ch.get("tags", [])]
        if len(matches) > 1:
            raise Conflict(f"slug {slug!r} matches {len(matches)} remote challenges")
        return matches[0] if matches else None

    # -- operations ------------------------------------------------------------

    def upsert_challenge(
        self,
        spec: ChallengeSpec,
        connection_info: str | None = None,
        info_hash: bytes = b"",
    ) -> ScoreboardChallenge:
        """Create or converge the challenge for spec.id. Flags are replaced
        wholesale when they differ; the hash tag records info_hash. A second
        call with identical inputs mutates nothing."""
        slug = spec.id
        hash_hex = info_hash.hex()
        desired = {
            "name": spec.info.name,
            "category": spec.info.category,
            "description": spec.info.description,
            "state": "visible" if spec.info.visible else "hidden",
            "connection_info": connection_info,
            **_score_record(spec),
        }
        desired_flags = sorted(
            (f.match.value, f.value, f.case_insensitive) for f in spec.info.flags
        )

        with self._slug_lock(slug):
            remote = self._find_remote(slug)
            if remote is None:
                # tags go in the create body: the slug key must be written
                # atomically or a crash here would orphan the challenge
                created = self._request("POST", "/api/v1/challenges", dict(
                    desired, tags=[f"slug:{slug}", f"hash:{hash_hex}"],
                ))
                rid = created["data"]["id"]
                for match, value, ci in desired_flags:
                    self._request("POST", f"/api/v1/challenges/{rid}/flags",
                                  {"match": match, "value": value, "case_insensitive": ci})
            else:
                rid = remote["id"]
                delta = {k: v for k, v in desired.items() if remote.get(k) != v}
                if delta:
                    self._request("PATCH", f"/api/v1/challenges/{rid}", delta)
                self._converge_flags(rid, desired_flags)
                self._converge_hash_tag(rid, hash_hex)

            return ScoreboardChallenge(
                remote_id=rid, slug=slug, name=spec.info.name, category=spec.info.category,
                description=spec.info.description, visible=spec.info.visible,
                score_record=_score_record(spec), connection_info=connection_info,
                info_hash_annotation=hash_hex,
            )

    def _converge_flags(self, rid: int, desired_flags: list[tuple]) -> None:
        listed = self._request("GET", f"/api/v1/challenges/{rid}/flags").get("data", [])
        current = sorted((f["match"], f["value"], f["case_insensitive"]) for f in listed)
        if current == desired_flags:
            return
        for f in listed:
            self._request("DELETE", f"/api/v1/challenges/{rid}/flags/{f['id']}")
        for match, value, ci in desired_flags:
            self._request("POST", f"/api/v1/challenges/{rid}/flags",
                          {"match": match, "value": value, "case_insensitive": ci})

    def _converge_hash_tag(self, rid: int, hash_hex: str) -> None:
        listed = self._request("GET", f"/api/v1/challenges/{rid}/tags").get("data", [])
        hash_tags = [t for t in listed if t["value"].startswith("hash:")]
        if [t["value"] for t in hash_tags] == [f"hash:{hash_hex}"]:
            return
        for t in hash_tags:
            self._request("DELETE", f"/api/v1/challenges/{rid}/tags/{t['id']}")
        self._request("POST", f"/api/v1/challenges/{rid}/tags", {"value": f"hash:{hash_hex}"})

    def upload_handout(self, slug: str, archive: bytes, filename: str) -> None:
        """Attach the handout archive. Identical content is a no-op; changed
        content replaces the old attachment (never two coexisting)."""
        digest = hashlib.sha256(archive).hexdigest()
        with self._slug_lock(slug):
            remote = self._find_remote(slug)
            if remote is None:
                raise UnknownSlug(slug)
            rid = remote["id"]
            listed = self._request("GET", f"/api/v1/challenges/{rid}/files").get("data", [])
            if any(f["filename"] == filename and f["sha256"] == digest for f in listed):
                return
            for f in listed:
                self._request("DELETE", f"/api/v1/challenges/{rid}/files/{f['id']}")
            self._request("POST", f"/api/v1/challenges/{rid}/files", {
                "filename": filename,
                "content_b64": base64.b64encode(archive).decode(),
            })

    def list_live(self) -> dict[str, bytes]:
        """slug -> info hash annotation for client-created challenges only;
        challenges lacking the slug tag are ignored."""
        out: dict[str, bytes] = {}
        for ch in self._challenges():
            slug = None
            hash_hex = ""
            for tag in ch.get("tags", []):
                if tag.startswith("slug:"):
                    slug = tag[len("slug:"):]
                elif tag.startswith("hash:"):
                    hash_hex = tag[len("hash:"):]
            if slug is None:
                continue
            try:
                out[slug] = bytes.fromhex(hash_hex)
            except ValueError:
                out[slug] = b""  # corrupted annotation: forces an update
        return out

    def delete_challenge(self, slug: str) -> None:
        """Remove the challenge if present; deleting a missing slug is ok."""
        with self._slug_lock(slug):
            try:
                remote = self._find_remote(slug)
            except Conflict:
                raise
            if remote is None:
                return
            self._request("DELETE", f"/api/v1/challenges/{remote['id']}")
