"""Conformance mock of the scoreboard HTTP API.

Implements exactly the challenge/flag/file/tag subset the client speaks:

    GET/POST   /api/v1/challenges
    GET/PATCH/DELETE /api/v1/challenges/{remote_id}
    GET/POST   /api/v1/challenges/{remote_id}/flags   (+ DELETE .../{flag_id})
    GET/POST   /api/v1/challenges/{remote_id}/files   (+ DELETE .../{file_id})
    GET/POST   /api/v1/challenges/{remote_id}/tags    (+ DELETE .../{tag_id})

Admin bearer token on every request. The server keeps a request log and a
mutating-request counter so tests can assert idempotence ("second call issues
zero write requests"), and can be told to start failing after N requests to
exercise crash-recovery replays.
"""

from __future__ import annotations

import base64
import hashlib
import threading
from typing import Optional

from .httputil import HttpService, make_routes

_WRITE_METHODS = {"POST", "PATCH", "DELETE"}


class MockScoreboard:
    """In-memory scoreboard state plus its HTTP surface."""

    def __init__(self, admin_token: str = "admin-token"):
        self.admin_token = admin_token
        self._lock = threading.RLock()
        self._next_id = 1
        self.challenges: dict[int, dict] = {}
        self.flags: dict[int, dict[int, dict]] = {}
        self.files: dict[int, dict[int, dict]] = {}
        self.tags: dict[int, dict[int, str]] = {}
        self.request_log: list[tuple[str, str]] = []
        self.write_count = 0
        self._fail_after: Optional[int] = None
        self._requests_seen = 0

    # -- test controls -----------------------------------------------------

    def fail_after(self, n: Optional[int]) -> None:
        """Start answering 500 after n more requests (None disarms)."""
        with self._lock:
            self._fail_after = n
            self._requests_seen = 0

    def reset_counters(self) -> None:
        with self._lock:
            self.request_log.clear()
            self.write_count = 0

    def seed_challenge(self, name: str, tags: list[str] | None = None, **fields) -> int:
        """Insert a challenge directly (simulates manual admin edits)."""
        with self._lock:
            rid = self._alloc_id()
            self.challenges[rid] = {
                "id": rid, "name": name, "category": fields.get("category", "misc"),
                "description": fields.get("description", ""),
                "state": fields.get("state", "visible"),
                "type": fields.get("type", "standard"),
                "value": fields.get("value", 100),
                "initial": fields.get("initial"), "decay": fields.get("decay"),
                "minimum": fields.get("minimum"),
                "connection_info": fields.get("connection_info"),
            }
            self.flags[rid] = {}
            self.files[rid] = {}
            self.tags[rid] = {}
            for t in tags or []:
                self.tags[rid][self._alloc_id()] = t
            return rid

    def slug_of(self, rid: int) -> Optional[str]:
        for tag in self.tags.get(rid, {}).values():
            if tag.startswith("slug:"):
                return tag[len("slug:"):]
        return None

    def find_by_slug(self, slug: str) -> list[int]:
        return [rid for rid in self.challenges if self.slug_of(rid) == f"{slug}"]

    def normalized_state(self) -> dict:
        """Server state keyed by slug with volatile ids stripped; lets tests
        compare end states across different request histories."""
        with self._lock:
            out = {}
            for rid, ch in self.challenges.items():
                slug = self.slug_of(rid) or f"__untagged_{rid}"
                out[slug] = {
                    "challenge": {k: v for k, v in ch.items() if k != "id"},
                    "flags": sorted(
                        (f["match"], f["value"], f["case_insensitive"])
                        for f in self.flags[rid].values()
                    ),
                    "files": sorted(
                        (f["filename"], f["sha256"]) for f in self.files[rid].values()
                    ),
                    "tags": sorted(self.tags[rid].values()),
                }
            return out

    # -- http plumbing ---------------------------------------------------------

    def _alloc_id(self) -> int:
        rid = self._next_id
        self._next_id += 1
        return rid

    def _gate(self, handler) -> bool:
        """Auth + fault gate. Returns True when the request may proceed."""
        with self._lock:
            self.request_log.append((handler.command, handler.path.split("?", 1)[0]))
            self._requests_seen += 1
            if self._fail_after is not None and self._requests_seen > self._fail_after:
                handler.send_json(500, {"success": False, "message": "injected outage"})
                return False
            if handler.command in _WRITE_METHODS:
                self.write_count += 1
        if handler.bearer_token() != self.admin_token:
            handler.send_json(401, {"success": False, "message": "unauthorized"})
            return False
        return True

    def _challenge_or_404(self, handler, rid: str) -> Optional[int]:
        rid_int = int(rid)
        if rid_int not in self.challenges:
            handler.send_json(404, {"success": False, "message": "challenge not found"})
            return None
        return rid_int

    # handlers ------------------------------------------------------------

    def _list_challenges(self, handler):
        if not self._gate(handler):
            return
        with self._lock:
            data = [
                dict(ch, tags=sorted(self.tags[rid].values()))
                for rid, ch in sorted(self.challenges.items())
            ]
        handler.send_json(200, {"success": True, "data": data})

    def _create_challenge(self, handler):
        if not self._gate(handler):
            return
        body = handler.read_json()
        with self._lock:
            rid = self._alloc_id()
            self.challenges[rid] = {
                "id": rid,
                "name": body.get("name", ""),
                "category": body.get("category", ""),
                "description": body.get("description", ""),
                "state": body.get("state", "visible"),
                "type": body.get("type", "standard"),
                "value": body.get("value"),
                "initial": body.get("initial"),
                "decay": body.get("decay"),
                "minimum": body.get("minimum"),
                "connection_info": body.get("connection_info"),
            }
            self.flags[rid] = {}
            self.files[rid] = {}
            # tags ride in the create body so the idempotency key lands
            # atomically with the challenge itself
            self.tags[rid] = {self._alloc_id(): str(t) for t in body.get("tags", [])}
            data = dict(self.challenges[rid])
        handler.send_json(200, {"success": True, "data": data})

    def _get_challenge(self, handler, rid):
        if not self._gate(handler):
            return
        rid_int = self._challenge_or_404(handler, rid)
        if rid_int is None:
            return
        with self._lock:
            data = dict(self.challenges[rid_int], tags=sorted(self.tags[rid_int].values()))
        handler.send_json(200, {"success": True, "data": data})

    def _patch_challenge(self, handler, rid):
        if not self._gate(handler):
            return
        rid_int = self._challenge_or_404(handler, rid)
        if rid_int is None:
            return
        body = handler.read_json()
        with self._lock:
            allowed = {"name", "category", "description", "state", "type",
                       "value", "initial", "decay", "minimum", "connection_info"}
            for key, value in body.items():
                if key in allowed:
                    self.challenges[rid_int][key] = value
            data = dict(self.challenges[rid_int])
        handler.send_json(200, {"success": True, "data": data})

    def _delete_challenge(self, handler, rid):
        if not self._gate(handler):
            return
        rid_int = self._challenge_or_404(handler, rid)
        if rid_int is None:
            return
        with self._lock:
            self.challenges.pop(rid_int)
            self.flags.pop(rid_int, None)
            self.files.pop(rid_int, None)
            self.tags.pop(rid_int, None)
        handler.send_json(200, {"success": True})

    def _list_subresource(self, handler, rid, store_name):
        if not self._gate(handler):
            return
        rid_int = self._challenge_or_404(handler, rid)
        if rid_int is None:
            return
        store = getattr(self, store_name)
        with self._lock:
            if store_name == "tags":
                data = [{"id": tid, "value": v} for tid, v in sorted(store[rid_int].items())]
            else:
                data = [dict(item, id=iid) for iid, item in sorted(store[rid_int].items())]
        handler.send_json(200, {"success": True, "data": data})

    def _post_flag(self, handler, rid):
        if not self._gate(handler):
            return
        rid_int = self._challenge_or_404(handler, rid)
        if rid_int is None:
            return
        body = handler.read_json()
        with self._lock:
            fid = self._alloc_id()
            self.flags[rid_int][fid] = {
                "match": body.get("match", "exact"),
                "value": body.get("value", ""),
                "case_insensitive": bool(body.get("case_insensitive", False)),
            }
        handler.send_json(200, {"success": True, "data": {"id": fid}})

    def _post_file(self, handler, rid):
        if not self._gate(handler):
            return
        rid_int = self._challenge_or_404(handler, rid)
        if rid_int is None:
            return
        body = handler.read_json()
        content = base64.b64decode(body.get("content_b64", ""))
        with self._lock:
            fid = self._alloc_id()
            self.files[rid_int][fid] = {
                "filename": body.get("filename", "file.bin"),
                "sha256": hashlib.sha256(content).hexdigest(),
                "size": len(content),
            }
        handler.send_json(200, {"success": True, "data": {"id": fid}})

    def _post_tag(self, handler, rid):
        if not self._gate(handler):
            return
        rid_int = self._challenge_or_404(handler, rid)
        if rid_int is None:
            return
        body = handler.read_json()
        with self._lock:
            tid = self._alloc_id()
            self.tags[rid_int][tid] = str(body.get("value", ""))
        handler.send_json(200, {"success": True, "data": {"id": tid}})

    def _delete_subresource(self, handler, rid, iid, store_name):
        if not self._gate(handler):
            return
        rid_int = self._challenge_or_404(handler, rid)
        if rid_int is None:
            return
        store = getattr(self, store_name)
        with self._lock:
            store[rid_int].pop(int(iid), None)
        handler.send_json(200, {"success": True})

    def routes(self):
        c = r"/api/v1/challenges"
        rid = r"(?P<rid>\d+)"
        iid = r"(?P<iid>\d+)"
        return make_routes([
            ("GET", c, self._list_challenges),
            ("POST", c, self._create_challenge),
            ("GET", f"{c}/{rid}", self._get_challenge),
            ("PATCH", f"{c}/{rid}", self._patch_challenge),
            ("DELETE", f"{c}/{rid}", self._delete_challenge),
            ("GET", f"{c}/{rid}/flags", lambda h, rid: self._list_subresource(h, rid, "flags")),
            ("POST", f"{c}/{rid}/flags", self._post_flag),
            ("DELETE", f"{c}/{rid}/flags/{iid}",
             lambda h, rid, iid: self._delete_subresource(h, rid, iid, "flags")),
            ("GET", f"{c}/{rid}/files", lambda h, rid: self._list_subresource(h, rid, "files")),
            ("POST", f"{c}/{rid}/files", self._post_file),
            ("DELETE", f"{c}/{rid}/files/{iid}",
             lambda h, rid, iid: self._delete_subresource(h, rid, iid, "files")),
            ("GET", f"{c}/{rid}/tags", lambda h, rid: self._list_subresource(h, rid, "tags")),
            ("POST", f"{c}/{rid}/tags", self._post_tag),
            ("DELETE", f"{c}/{rid}/tags/{iid}",
             lambda h, rid, iid: self._delete_subresource(h, rid, iid, "tags")),
        ])

    def serve(self, host: str = "127.0.0.1", port: int = 0) -> HttpService:
        return HttpService(host, port, self.routes()).start()
