"""Rejection completeness: corrupting any single field of a valid definition
must produce exactly one diagnostic naming that field's path."""

from __future__ import annotations

import yaml

from ctfpilot.schema import validate_repo
from conftest import write_challenge

# (file, path-to-set, new value, expected diagnostic path)
INFO_MUTATIONS = [
    (["id"], "Bad Slug!", "id"),
    (["id"], "-leading", "id"),
    (["id"], "x" * 70, "id"),
    (["name"], "", "name"),
    (["name"], "n" * 129, "name"),
    (["name"], 42, "name"),
    (["author"], ["not", "a", "string"], "author"),
    (["category"], {"oops": 1}, "category"),
    (["description"], 3.14, "description"),
    (["kind"], "banana", "kind"),
    (["kind"], 7, "kind"),
    (["scoring", "type"], "exponential", "scoring.type"),
    (["scoring", "points"], 0, "scoring.points"),
    (["scoring", "points"], -10, "scoring.points"),
    (["scoring", "points"], "many", "scoring.points"),
    (["flags"], [], "flags"),
    (["flags", 0, "match"], "fuzzy", "flags[0].match"),
    (["flags", 0, "value"], "", "flags[0].value"),
    (["flags", 0, "value"], 99, "flags[0].value"),
    (["flags", 0, "case_insensitive"], "maybe", "flags[0].case_insensitive"),
    (["handouts", 0], "../../etc/passwd", "handouts[0]"),
    (["handouts", 0], "dist/does-not-exist.bin", "handouts[0]"),
    (["visible"], "maybe", "visible"),
]

DYNAMIC_MUTATIONS = [
    (["scoring", "initial"], 0, "scoring.initial"),
    (["scoring", "minimum"], 9999, "scoring.minimum"),  # above initial
    (["scoring", "decay"], -1, "scoring.decay"),
]

DEPLOY_MUTATIONS = [
    (["containers"], [], "containers"),
    (["containers", 0, "name"], "NOT-A-SLUG", "containers[0].name"),
    (["containers", 0, "image"], "", "containers[0].image"),
    (["containers", 0, "image"], "../escape", "containers[0].image"),
    (["containers", 0, "ports", 0, "number"], 70000, "containers[0].ports[0].number"),
    (["containers", 0, "ports", 0, "number"], 0, "containers[0].ports[0].number"),
    (["containers", 0, "ports", 0, "protocol"], "udp", "containers[0].ports[0].protocol"),
    (["containers", 0, "env", "X"], "{{MYSTERY}}", "containers[0].env.X"),
    (["containers", 0, "resources", "cpu_millis"], 0, "containers[0].resources.cpu_millis"),
    (["containers", 0, "resources", "memory_mb"], -5, "containers[0].resources.memory_mb"),
    (["expose"], [], "expose"),
    (["expose", 0, "container"], "ghost", "expose[0]"),
    (["expose", 0, "port"], 9999, "expose[0]"),
    (["expose", 0, "kind"], "udp", "expose[0].kind"),
    (["ttl_seconds"], 0, "ttl_seconds"),
    (["ttl_seconds"], "soon", "ttl_seconds"),
]


def _set_path(doc, path, value):
    node = doc
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value


def _mutate(tmp_path, counter, filename, path, value, kind="static"):
    root = tmp_path / f"case-{counter}"
    d = write_challenge(
        root, "victim", kind=kind,
        handouts={"dist/file.bin": b"data"} if kind == "static" else None,
        scoring={"type": "dynamic", "initial": 500, "minimum": 100, "decay": 25}
        if path[0] == "scoring" and len(path) > 1 and path[1] in ("initial", "minimum", "decay")
        else None,
    )
    if kind == "instanced" and path[:2] == ["containers", 0] and path[2:3] == ["env"]:
        pass  # env key X is added below
    doc = yaml.safe_load((d / filename).read_text())
    if path[:3] == ["containers", 0, "env"]:
        doc["containers"][0].setdefault("env", {})
    _set_path(doc, path, value)
    (d / filename).write_text(yaml.safe_dump(doc, sort_keys=False))
    return root


def run_mutations(tmp_path):
    """Returns (total, exact_hits): cases where validation produced exactly
    one diagnostic naming the mutated path."""
    total = 0
    exact = 0
    counter = 0
    cases = (
        [("challenge.yaml", p, v, want, "static") for p, v, want in INFO_MUTATIONS]
        + [("challenge.yaml", p, v, want, "static") for p, v, want in DYNAMIC_MUTATIONS]
        + [("deployment.yaml", p, v, want, "instanced") for p, v, want in DEPLOY_MUTATIONS
           if p != ["ttl_seconds"] or True]
    )
    for filename, path, value, want, kind in cases:
        counter += 1
        root = _mutate(tmp_path, counter, filename, path, value, kind=kind)
        results = validate_repo(root)
        diags = [d for _, ds in results for d in ds]
        total += 1
        if len(diags) == 1 and diags[0].path == want:
            exact += 1
    return total, exact


def test_every_mutation_is_rejected(tmp_path):
    counter = 0
    for filename, muts, kind in (
        ("challenge.yaml", INFO_MUTATIONS, "static"),
        ("challenge.yaml", DYNAMIC_MUTATIONS, "static"),
        ("deployment.yaml", DEPLOY_MUTATIONS, "instanced"),
    ):
        for path, value, _ in muts:
            counter += 1
            root = _mutate(tmp_path, counter, filename, path, value, kind=kind)
            diags = [d for _, ds in validate_repo(root) for d in ds]
            assert diags, f"mutation {path}={value!r} was not rejected"


def test_mutations_name_the_field_path(tmp_path):
    total, exact = run_mutations(tmp_path)
    rate = exact / total
    assert rate >= 0.95, f"only {exact}/{total} mutations produced one exact-path diagnostic"


def test_shared_ttl_rejected(tmp_path):
    root = tmp_path / "shared-ttl"
    d = write_challenge(root, "victim", kind="shared")
    doc = yaml.safe_load((d / "deployment.yaml").read_text())
    doc["ttl_seconds"] = 300
    (d / "deployment.yaml").write_text(yaml.safe_dump(doc))
    diags = [d for _, ds in validate_repo(root) for d in ds]
    assert len(diags) == 1 and diags[0].path == "ttl_seconds"


def test_instanced_shared_host_rejected(tmp_path):
    root = tmp_path / "inst-host"
    d = write_challenge(root, "victim", kind="instanced")
    doc = yaml.safe_load((d / "deployment.yaml").read_text())
    doc["shared_host"] = "nope"
    (d / "deployment.yaml").write_text(yaml.safe_dump(doc))
    diags = [d for _, ds in validate_repo(root) for d in ds]
    assert len(diags) == 1 and diags[0].path == "shared_host"


def test_unknown_field_rejected(tmp_path):
    root = tmp_path / "unknown"
    d = write_challenge(root, "victim")
    doc = yaml.safe_load((d / "challenge.yaml").read_text())
    doc["surprise"] = True
    (d / "challenge.yaml").write_text(yaml.safe_dump(doc))
    diags = [d for _, ds in validate_repo(root) for d in ds]
    assert len(diags) == 1 and diags[0].path == "surprise"
