"""Alert-stream compression and prompt assembly.

The rendered prompt is the single text surface the policy conditions on.
Its layout is versioned: checkpoints remember PROMPT_FORMAT_VERSION and
refuse to load against a different one, because the context hash of a
prompt (and therefore every learned table row) depends on the exact
rendering.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .core import AlertSummary, EnvironmentDescriptor, ToolSpec, fnv1a64
from .scenario import AlertStream

PROMPT_FORMAT_VERSION = 1

_SUMMARY_KEY = lambda s: (s.first_seen, s.attack_type, s.source, s.target)  # noqa: E731


def summarize(stream: AlertStream) -> list[AlertSummary]:
    """Compress a stream into one summary per (attack_type, source, target).

    Benign groups are dropped. Output is sorted by first_seen, then
    attack_type (then source/target for a total order).
    """
    groups: dict[tuple[str, str, str], list] = {}
    for alert in stream.alerts:
        if alert.is_benign:
            continue
        groups.setdefault((alert.attack_type, alert.source, alert.target), []).append(alert)
    summaries = []
    for (attack_type, source, target), alerts in groups.items():
        tags = frozenset(a.stage_tag for a in alerts if a.stage_tag is not None)
        summaries.append(
            AlertSummary(
                attack_type=attack_type,
                source=source,
                target=target,
                count=len(alerts),
                first_seen=min(a.timestamp for a in alerts),
                last_seen=max(a.timestamp for a in alerts),
                max_severity=max(a.severity for a in alerts),
                stage_tags=tags,
            )
        )
    summaries.sort(key=_SUMMARY_KEY)
    return summaries


@dataclass(frozen=True)
class Prompt:
    """Everything the policy sees for one episode, plus its hash bucket."""

    summaries: tuple[AlertSummary, ...]
    inventory_view: tuple[tuple[str, tuple[tuple[str, tuple[str, ...]], ...]], ...]
    environment_view: tuple[str, tuple[str, ...], str]
    rendered: str
    context_hash: int


def _render_summary(s: AlertSummary) -> str:
    # Deliberately omits count and first/last timestamps: they are pure
    # emission noise with no bearing on the right defense, and keeping
    # them out of the conditioning text stops the policy's context space
    # from fragmenting across episodes of the same scenario.
    tags = ",".join(sorted(t.value for t in s.stage_tags)) or "-"
    return (
        f"- type={s.attack_type} src={s.source} dst={s.target}"
        f" sev={s.max_severity.label} tags={tags}"
    )


def _render_tool(name: str, schema) -> str:
    params = " ".join(f"{p}:{{{'|'.join(domain)}}}" for p, domain in schema) or "-"
    return f"- {name} {params}"


def build_prompt(
    summaries: Sequence[AlertSummary],
    inventory: Sequence[ToolSpec],
    environment: EnvironmentDescriptor,
    buckets: int = 64,
) -> Prompt:
    """Render the canonical prompt text and compute its context bucket.

    Pure: identical inputs (in any summary order) produce identical text
    and hash. The bucket is fnv1a64(rendered) mod buckets.
    """
    if buckets < 1:
        raise ValueError("buckets must be >= 1")
    ordered = tuple(sorted(summaries, key=_SUMMARY_KEY))
    inventory_view = tuple(
        (spec.name, tuple((p, tuple(sorted(domain))) for p, domain in spec.param_schema))
        for spec in inventory
    )
    environment_view = (
        environment.name,
        tuple(environment.protected_services),
        environment.notes,
    )

    lines = ["ALERTS"]
    lines += [_render_summary(s) for s in ordered]
    lines.append("TOOLS")
    lines += [_render_tool(name, schema) for name, schema in inventory_view]
    lines.append("ENVIRONMENT")
    lines.append(
        f"name={environment.name} protected={','.join(environment.protected_services)}"
        f" services={','.join(f'{n}:{ep}' for n, ep in environment.services)}"
    )
    if environment.notes:
        lines.append(f"notes={environment.notes}")
    rendered = "\n".join(lines)

    return Prompt(
        summaries=ordered,
        inventory_view=inventory_view,
        environment_view=environment_view,
        rendered=rendered,
        context_hash=fnv1a64(rendered.encode("utf-8")) % buckets,
    )
