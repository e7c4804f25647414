"""Archive determinism and build-plan tag stability."""

from __future__ import annotations

import os
import shutil
import zipfile
from io import BytesIO

import pytest
from hypothesis import given, settings, strategies as st

from ctfpilot.packager import (
    MissingHandoutFile,
    build_plan,
    package_handouts,
    write_build_plan,
)
from ctfpilot.schema import parse_challenge
from ctfpilot.state import snapshot
from conftest import write_challenge


class TestHandoutArchives:
    def test_no_handouts_means_no_archive(self, tmp_path):
        spec = parse_challenge(write_challenge(tmp_path, "web-1"))
        assert package_handouts(spec) is None

    def test_same_spec_packaged_twice_identical(self, tmp_path):
        spec = parse_challenge(write_challenge(
            tmp_path, "web-1",
            handouts={"dist/a.txt": b"alpha", "dist/b.bin": bytes(range(256))},
        ))
        first = package_handouts(spec)
        second = package_handouts(spec)
        assert first.data == second.data
        assert first.content_hash == second.content_hash
        assert first.filename == "web-1.zip"

    def test_timestamp_perturbed_copy_identical(self, tmp_path):
        src = tmp_path / "src"
        write_challenge(src, "web-1", handouts={"dist/a.txt": b"alpha",
                                                "notes.md": b"# hi"})
        dst = tmp_path / "dst"
        shutil.copytree(src, dst)
        for p in dst.rglob("*"):
            os.utime(p, (1234567890, 1234567890))
        a = package_handouts(parse_challenge(src / "web-1"))
        b = package_handouts(parse_challenge(dst / "web-1"))
        assert a.data == b.data

    def test_entries_path_sorted_and_normalized(self, tmp_path):
        spec = parse_challenge(write_challenge(
            tmp_path, "web-1",
            handouts={"z.txt": b"z", "a/deep.txt": b"d", "m.bin": b"m"},
        ))
        archive = package_handouts(spec)
        with zipfile.ZipFile(BytesIO(archive.data)) as zf:
            names = zf.namelist()
            assert names == sorted(names)
            for info in zf.infolist():
                assert info.date_time == (1980, 1, 1, 0, 0, 0)
                assert info.external_attr >> 16 == 0o644
                assert info.create_system == 0

    def test_content_extracts_correctly(self, tmp_path):
        spec = parse_challenge(write_challenge(
            tmp_path, "web-1", handouts={"dist/a.txt": b"alpha"}))
        archive = package_handouts(spec)
        with zipfile.ZipFile(BytesIO(archive.data)) as zf:
            assert zf.read("dist/a.txt") == b"alpha"

    def test_missing_file_raises(self, tmp_path):
        spec = parse_challenge(write_challenge(
            tmp_path, "web-1", handouts={"dist/a.txt": b"alpha"}))
        (tmp_path / "web-1" / "dist" / "a.txt").unlink()
        with pytest.raises(MissingHandoutFile):
            package_handouts(spec)

    @given(files=st.dictionaries(
        st.from_regex(r"[a-z]{1,8}(/[a-z]{1,8})?\.bin", fullmatch=True),
        st.binary(max_size=512), min_size=1, max_size=6,
    ))
    @settings(max_examples=20, deadline=None)
    def test_determinism_over_generated_trees(self, tmp_path_factory, files):
        base = tmp_path_factory.mktemp("gen")
        spec = parse_challenge(write_challenge(base, "web-1", handouts=files))
        assert package_handouts(spec).data == package_handouts(spec).data


class TestBuildPlan:
    def test_registry_only_images_empty_plan(self, tmp_path):
        write_challenge(tmp_path, "market", kind="shared")
        plan = build_plan(snapshot(tmp_path), "ghcr.io/event")
        assert plan.entries == []

    def test_single_context_entry_shape(self, tmp_path):
        write_challenge(tmp_path, "pwn-1", kind="instanced",
                        build_context={"Dockerfile": b"FROM scratch\n"})
        plan = build_plan(snapshot(tmp_path), "ghcr.io/event")
        assert len(plan.entries) == 1
        entry = plan.entries[0]
        assert entry.tag.startswith("ghcr.io/event/pwn-1/app:")
        digest = entry.tag.rsplit(":", 1)[1]
        assert len(digest) == 12 and all(c in "0123456789abcdef" for c in digest)

    def test_one_byte_edit_changes_exactly_one_tag(self, tmp_path):
        write_challenge(tmp_path, "pwn-1", kind="instanced",
                        build_context={"Dockerfile": b"FROM scratch\nCMD a\n"})
        write_challenge(tmp_path, "pwn-2", kind="instanced",
                        build_context={"Dockerfile": b"FROM scratch\nCMD b\n"})
        before = {e.challenge_id: e.tag for e in
                  build_plan(snapshot(tmp_path), "r.io").entries}
        target = tmp_path / "pwn-1" / "src" / "Dockerfile"
        target.write_bytes(b"FROM scratch\nCMD c\n")
        after = {e.challenge_id: e.tag for e in
                 build_plan(snapshot(tmp_path), "r.io").entries}
        assert before["pwn-1"] != after["pwn-1"]
        assert before["pwn-2"] == after["pwn-2"]

    def test_identical_contexts_identical_tags(self, tmp_path):
        ctx = {"Dockerfile": b"FROM scratch\n", "app.py": b"print(1)\n"}
        write_challenge(tmp_path, "pwn-1", kind="instanced", build_context=dict(ctx))
        write_challenge(tmp_path, "pwn-2", kind="instanced", build_context=dict(ctx))
        tags = {e.challenge_id: e.tag.rsplit(":", 1)[1]
                for e in build_plan(snapshot(tmp_path), "r.io").entries}
        assert tags["pwn-1"] == tags["pwn-2"]

    def test_written_plan_files(self, tmp_path):
        write_challenge(tmp_path, "pwn-1", kind="instanced",
                        build_context={"Dockerfile": b"FROM scratch\n"})
        plan = build_plan(snapshot(tmp_path), "r.io")
        json_path, sh_path = write_build_plan(plan, tmp_path / "out")
        assert json_path.exists() and sh_path.exists()
        assert "docker build" in sh_path.read_text()
        import json
        doc = json.loads(json_path.read_text())
        assert doc["entries"][0]["challenge_id"] == "pwn-1"
