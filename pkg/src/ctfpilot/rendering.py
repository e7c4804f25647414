"""Template rendering: substitute identity placeholders and derive endpoint
hosts under the challenge wildcard domain.

Host rule: the first exposed endpoint gets the bare ``<base>.<domain>`` host;
every further endpoint is qualified as ``<base>-<name>.<domain>``. For
per-team instances the base is the instance id (which embeds the keyed team
slug, so other teams' hosts are not enumerable); for shared deployments it is
the ``shared_host`` label or the challenge id.
"""

from __future__ import annotations

import dataclasses

from .backend import RouteSpec, Workload
from .schema import (
    ChallengeSpec,
    ContainerSpec,
    DeploymentTemplate,
    ExposeSpec,
    Flag,
    FlagMatch,
)


def endpoint_hosts(base: str, expose: list[ExposeSpec], domain: str) -> dict[str, str]:
    hosts: dict[str, str] = {}
    for i, e in enumerate(expose):
        hosts[e.name] = f"{base}.{domain}" if i == 0 else f"{base}-{e.name}.{domain}"
    return hosts


def substitute(value: str, mapping: dict[str, str]) -> str:
    for key, repl in mapping.items():
        value = value.replace("{{%s}}" % key, repl)
    return value


def first_exact_flag(flags: list[Flag]) -> str | None:
    for f in flags:
        if f.match is FlagMatch.EXACT:
            return f.value
    return None


def _render_containers(template: DeploymentTemplate, mapping: dict[str, str]) -> list[ContainerSpec]:
    return [
        dataclasses.replace(c, env={k: substitute(v, mapping) for k, v in c.env.items()})
        for c in template.containers
    ]


def _routes(template: DeploymentTemplate, hosts: dict[str, str]) -> list[RouteSpec]:
    return [
        RouteSpec(name=e.name, host=hosts[e.name], kind=e.kind,
                  container=e.container, container_port=e.port)
        for e in template.expose
    ]


def render_instance_workload(
    challenge_id: str,
    template: DeploymentTemplate,
    flag: str | None,
    team_id: str,
    instance_id: str,
    domain: str,
) -> Workload:
    """Render one team's workload from a registered template."""
    hosts = endpoint_hosts(instance_id, template.expose, domain)
    primary = hosts[template.expose[0].name]
    mapping = {
        "TEAM_ID": team_id,
        "INSTANCE_ID": instance_id,
        "HOST": primary,
        "FLAG": flag or "",
    }
    return Workload(
        workload_id=instance_id,
        labels={"challenge": challenge_id, "team": team_id},
        containers=_render_containers(template, mapping),
        routes=_routes(template, hosts),
    )


def render_shared_workload(spec: ChallengeSpec, deploy_hash: bytes, domain: str) -> Workload:
    """Render the single shared deployment for a challenge."""
    template = spec.deployment
    assert template is not None
    base = template.shared_host or spec.id
    hosts = endpoint_hosts(base, template.expose, domain)
    primary = hosts[template.expose[0].name]
    mapping = {
        "HOST": primary,
        "FLAG": first_exact_flag(spec.info.flags) or "",
    }
    return Workload(
        workload_id=spec.id,
        labels={"challenge": spec.id, "role": "shared", "deploy-hash": deploy_hash.hex()},
        containers=_render_containers(template, mapping),
        routes=_routes(template, hosts),
    )
