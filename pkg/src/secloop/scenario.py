"""Replayable attack scenarios and the simulated IDS alert stream.

A scenario file is a single JSON document with top-level keys
environment / tools / chain / noise (plus name, seed_salt and optional
verify_solvable). Loading fully validates every cross-reference and, for
scenarios flagged verify_solvable, brute-forces the existence of a
strategy that blocks the whole chain without disrupting service.
"""

from __future__ import annotations

import itertools
import json
import random
from dataclasses import dataclass, replace
from importlib import resources
from typing import Iterable, Mapping, Optional, Sequence

from .core import (
    AttackAlert,
    AttackTactic,
    EnvironmentDescriptor,
    Severity,
    ToolSpec,
    stable_hash,
)

# Allowed characters for tool names, param names, and value tokens. Keeps
# every token representable in the canonical strategy text and in the
# policy vocabulary.
_TOKEN_CHARS = frozenset("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-/:*")


class SchemaError(Exception):
    """Scenario file violates the schema; path points at the bad field."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class UnknownAttackType(Exception):
    pass


# Attack-type labels mapped onto the 13 adversarial tactic stages. Eleven
# stages are covered; resource development and privilege escalation are
# deliberately absent (they rarely surface in network traffic).
DEFAULT_TACTIC_MAPPING: dict[str, AttackTactic] = {
    "port_scan": AttackTactic.RECONNAISSANCE,
    "redis_unauthorized_write": AttackTactic.INITIAL_ACCESS,
    "nextjs_middleware_bypass": AttackTactic.INITIAL_ACCESS,
    "file_upload_webshell": AttackTactic.EXECUTION,
    "deserialization_attack": AttackTactic.EXECUTION,
    "tomcat_partial_put_rce": AttackTactic.EXECUTION,
    "webshell_control": AttackTactic.PERSISTENCE,
    "glibc_iconv_rce": AttackTactic.PERSISTENCE,
    "xss": AttackTactic.CREDENTIAL_ACCESS,
    "csrf": AttackTactic.CREDENTIAL_ACCESS,
    "sql_injection": AttackTactic.DISCOVERY,
    "lfi": AttackTactic.DISCOVERY,
    "rfi": AttackTactic.DISCOVERY,
    "ssrf": AttackTactic.DISCOVERY,
    "jenkins_cli_file_read": AttackTactic.DISCOVERY,
    "vite_arbitrary_file_read": AttackTactic.DISCOVERY,
    "smb_password_spray": AttackTactic.LATERAL_MOVEMENT,
    "c2_collection": AttackTactic.COLLECTION,
    "c2_beacon": AttackTactic.COMMAND_AND_CONTROL,
    "c2_exfiltration": AttackTactic.EXFILTRATION,
    "dns_hijack": AttackTactic.IMPACT,
    "dos": AttackTactic.IMPACT,
    "ddos": AttackTactic.IMPACT,
}


def tactic_of(
    attack_type: str, mapping: Mapping[str, AttackTactic] = DEFAULT_TACTIC_MAPPING
) -> AttackTactic:
    """Tactic stage for a known attack type; raises UnknownAttackType."""
    try:
        return mapping[attack_type]
    except KeyError:
        raise UnknownAttackType(attack_type) from None


@dataclass(frozen=True)
class MitigationPattern:
    """Matches an installed tool invocation.

    The tool name must match; every constrained param must equal the
    required value; unconstrained params are wildcards.
    """

    tool_name: str
    params: tuple[tuple[str, str], ...] = ()

    def matches(self, tool_name: str, call_params: Sequence[tuple[str, str]]) -> bool:
        if tool_name != self.tool_name:
            return False
        values = dict(call_params)
        return all(values.get(k) == v for k, v in self.params)


@dataclass(frozen=True)
class AttackStage:
    """One step of the attack chain and what blocks it."""

    index: int
    tactic: AttackTactic
    attack_type: str
    alert_templates: tuple[AttackAlert, ...]
    blocked_by: tuple[MitigationPattern, ...]


@dataclass(frozen=True)
class NoiseModel:
    """IDS emulation noise: duplication factor and benign alerts per stage."""

    duplication: int = 1
    benign_rate: int = 0


@dataclass(frozen=True)
class Scenario:
    name: str
    environment: EnvironmentDescriptor
    inventory: tuple[ToolSpec, ...]
    chain: tuple[AttackStage, ...]
    noise: NoiseModel = NoiseModel()
    seed_salt: int = 0
    verify_solvable: bool = False

    def tool(self, name: str) -> ToolSpec:
        for spec in self.inventory:
            if spec.name == name:
                return spec
        raise KeyError(name)


@dataclass(frozen=True)
class AlertStream:
    alerts: tuple[AttackAlert, ...]

    def __post_init__(self) -> None:
        ts = [a.timestamp for a in self.alerts]
        if any(a > b for a, b in zip(ts, ts[1:])):
            raise ValueError("alert timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.alerts)


# ---------------------------------------------------------------------------
# File loading


def _need(obj: Mapping, key: str, path: str):
    if key not in obj:
        raise SchemaError(path, f"missing key {key!r}")
    return obj[key]


def _check_token(value, path: str) -> str:
    if not isinstance(value, str) or not value:
        raise SchemaError(path, "must be a non-empty string")
    bad = set(value) - _TOKEN_CHARS
    if bad:
        raise SchemaError(path, f"characters not allowed in token: {sorted(bad)}")
    return value


def _parse_param_constraints(raw, path: str, schema: Mapping[str, frozenset[str]]):
    """Shared shape for disrupt_when / broad value maps: {param: [values]}."""
    if not isinstance(raw, dict):
        raise SchemaError(path, "must be an object of param -> value list")
    out = []
    for pname, values in raw.items():
        if pname not in schema:
            raise SchemaError(f"{path}.{pname}", "references unknown param")
        if not isinstance(values, list) or not values:
            raise SchemaError(f"{path}.{pname}", "must be a non-empty list")
        flagged = frozenset(_check_token(v, f"{path}.{pname}") for v in values)
        outside = flagged - schema[pname]
        if outside:
            raise SchemaError(f"{path}.{pname}", f"values outside domain: {sorted(outside)}")
        out.append((pname, flagged))
    return tuple(out)


def _parse_tool(raw, path: str) -> ToolSpec:
    name = _check_token(_need(raw, "name", path), f"{path}.name")
    schema_raw = raw.get("params", [])
    if not isinstance(schema_raw, list):
        raise SchemaError(f"{path}.params", "must be a list of [name, [values]] pairs")
    schema: list[tuple[str, frozenset[str]]] = []
    for i, entry in enumerate(schema_raw):
        ppath = f"{path}.params[{i}]"
        if not (isinstance(entry, list) and len(entry) == 2 and isinstance(entry[1], list)):
            raise SchemaError(ppath, "must be a [name, [values]] pair")
        pname = _check_token(entry[0], ppath)
        if not entry[1]:
            raise SchemaError(ppath, "value domain must be non-empty")
        domain = frozenset(_check_token(v, ppath) for v in entry[1])
        if pname in dict(schema):
            raise SchemaError(ppath, f"duplicate param {pname!r}")
        schema.append((pname, domain))
    schema_map = dict(schema)

    blocks = set()
    for i, entry in enumerate(raw.get("blocks", [])):
        bpath = f"{path}.blocks[{i}]"
        if not (isinstance(entry, list) and len(entry) == 2):
            raise SchemaError(bpath, "must be a [tactic, attack_type] pair")
        try:
            tactic = AttackTactic.from_name(entry[0])
        except ValueError as e:
            raise SchemaError(bpath, str(e)) from None
        blocks.add((tactic, _check_token(entry[1], bpath)))

    flaky = raw.get("flaky", 0.0)
    if not isinstance(flaky, (int, float)) or not 0.0 <= flaky < 1.0:
        raise SchemaError(f"{path}.flaky", "must be a number in [0, 1)")

    try:
        return ToolSpec(
            name=name,
            param_schema=tuple(schema),
            disrupt_when=_parse_param_constraints(
                raw.get("disrupt_when", {}), f"{path}.disrupt_when", schema_map
            ),
            always_disrupts=bool(raw.get("always_disrupts", False)),
            broad_values=_parse_param_constraints(
                raw.get("broad", {}), f"{path}.broad", schema_map
            ),
            blocks=frozenset(blocks),
            flaky=float(flaky),
        )
    except ValueError as e:
        raise SchemaError(path, str(e)) from None


def _parse_environment(raw, path: str) -> EnvironmentDescriptor:
    services_raw = _need(raw, "services", path)
    if not isinstance(services_raw, list) or not services_raw:
        raise SchemaError(f"{path}.services", "must be a non-empty list")
    services = []
    for i, entry in enumerate(services_raw):
        spath = f"{path}.services[{i}]"
        if not (isinstance(entry, list) and len(entry) == 2):
            raise SchemaError(spath, "must be a [service_name, endpoint] pair")
        services.append((_check_token(entry[0], spath), _check_token(entry[1], spath)))
    protected = _need(raw, "protected_services", path)
    if not isinstance(protected, list):
        raise SchemaError(f"{path}.protected_services", "must be a list")
    try:
        return EnvironmentDescriptor(
            name=_check_token(_need(raw, "name", path), f"{path}.name"),
            services=tuple(services),
            protected_services=tuple(protected),
            notes=str(raw.get("notes", "")),
        )
    except ValueError as e:
        raise SchemaError(path, str(e)) from None


def _parse_stage(raw, path: str, tools: Mapping[str, ToolSpec]) -> AttackStage:
    index = _need(raw, "index", path)
    if not isinstance(index, int) or index < 0:
        raise SchemaError(f"{path}.index", "must be a non-negative integer")
    try:
        tactic = AttackTactic.from_name(_need(raw, "tactic", path))
    except ValueError as e:
        raise SchemaError(f"{path}.tactic", str(e)) from None
    attack_type = _check_token(_need(raw, "attack_type", path), f"{path}.attack_type")
    if attack_type in DEFAULT_TACTIC_MAPPING and DEFAULT_TACTIC_MAPPING[attack_type] is not tactic:
        raise SchemaError(
            f"{path}.tactic",
            f"{attack_type!r} maps to {DEFAULT_TACTIC_MAPPING[attack_type].value!r}",
        )

    templates = []
    alerts_raw = _need(raw, "alerts", path)
    if not isinstance(alerts_raw, list) or not alerts_raw:
        raise SchemaError(f"{path}.alerts", "must be a non-empty list")
    for i, a in enumerate(alerts_raw):
        apath = f"{path}.alerts[{i}]"
        alert_type = _check_token(_need(a, "attack_type", apath), f"{apath}.attack_type")
        try:
            severity = Severity.from_name(_need(a, "severity", apath))
        except ValueError as e:
            raise SchemaError(f"{apath}.severity", str(e)) from None
        # Known attack types carry their mapped tactic; unknown (zero-day)
        # types inherit the declared stage tactic as degraded metadata.
        tag = DEFAULT_TACTIC_MAPPING.get(alert_type, tactic)
        try:
            templates.append(
                AttackAlert(
                    id=f"tpl-{index}-{i}",
                    timestamp=0,
                    attack_type=alert_type,
                    severity=severity,
                    source=_check_token(_need(a, "source", apath), f"{apath}.source"),
                    target=_check_token(_need(a, "target", apath), f"{apath}.target"),
                    stage_tag=tag,
                    payload_summary=str(a.get("payload_summary", "")),
                )
            )
        except ValueError as e:
            raise SchemaError(apath, str(e)) from None

    blocked_raw = _need(raw, "blocked_by", path)
    if not isinstance(blocked_raw, list) or not blocked_raw:
        raise SchemaError(f"{path}.blocked_by", "must be a non-empty list (every stage is defensible)")
    patterns = []
    for i, p in enumerate(blocked_raw):
        bpath = f"{path}.blocked_by[{i}]"
        tool_name = _need(p, "tool", bpath)
        spec = tools.get(tool_name)
        if spec is None:
            raise SchemaError(bpath, f"references tool {tool_name!r} absent from inventory")
        constraints = []
        for pname, value in _need(p, "params", bpath).items():
            if pname not in dict(spec.param_schema):
                raise SchemaError(f"{bpath}.params.{pname}", "unknown param for tool")
            if value not in spec.domain_of(pname):
                raise SchemaError(f"{bpath}.params.{pname}", f"value {value!r} outside domain")
            constraints.append((pname, value))
        patterns.append(MitigationPattern(tool_name=tool_name, params=tuple(constraints)))

    return AttackStage(
        index=index,
        tactic=tactic,
        attack_type=attack_type,
        alert_templates=tuple(templates),
        blocked_by=tuple(patterns),
    )


def parse_scenario(doc: Mapping, origin: str = "scenario") -> Scenario:
    """Validate a parsed scenario document into a Scenario."""
    name = _check_token(_need(doc, "name", origin), f"{origin}.name")
    environment = _parse_environment(_need(doc, "environment", origin), f"{origin}.environment")

    tools_raw = _need(doc, "tools", origin)
    if not isinstance(tools_raw, list) or not tools_raw:
        raise SchemaError(f"{origin}.tools", "must be a non-empty list")
    inventory = []
    for i, t in enumerate(tools_raw):
        spec = _parse_tool(t, f"{origin}.tools[{i}]")
        if any(s.name == spec.name for s in inventory):
            raise SchemaError(f"{origin}.tools[{i}].name", f"duplicate tool {spec.name!r}")
        inventory.append(spec)
    tool_map = {s.name: s for s in inventory}

    chain_raw = _need(doc, "chain", origin)
    if not isinstance(chain_raw, list) or not chain_raw:
        raise SchemaError(f"{origin}.chain", "chain must have at least one stage")
    chain = [_parse_stage(s, f"{origin}.chain[{i}]", tool_map) for i, s in enumerate(chain_raw)]
    for i in range(1, len(chain)):
        if chain[i].index <= chain[i - 1].index:
            raise SchemaError(
                f"{origin}.chain[{i}].index", "stage indices must be strictly increasing"
            )

    noise_raw = doc.get("noise", {})
    duplication = noise_raw.get("duplication", 1)
    benign_rate = noise_raw.get("benign_rate", 0)
    if not isinstance(duplication, int) or duplication < 1:
        raise SchemaError(f"{origin}.noise.duplication", "must be an integer >= 1")
    if not isinstance(benign_rate, int) or benign_rate < 0:
        raise SchemaError(f"{origin}.noise.benign_rate", "must be an integer >= 0")

    seed_salt = doc.get("seed_salt", 0)
    if not isinstance(seed_salt, int):
        raise SchemaError(f"{origin}.seed_salt", "must be an integer")

    scenario = Scenario(
        name=name,
        environment=environment,
        inventory=tuple(inventory),
        chain=tuple(chain),
        noise=NoiseModel(duplication=duplication, benign_rate=benign_rate),
        seed_salt=seed_salt,
        verify_solvable=bool(doc.get("verify_solvable", False)),
    )
    if scenario.verify_solvable and find_blocking_strategy(scenario) is None:
        raise SchemaError(
            f"{origin}.verify_solvable",
            "unsolvable: no strategy from the inventory blocks the chain "
            "while keeping service up",
        )
    return scenario


def load_scenario(path) -> Scenario:
    """Load and fully validate a scenario file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(str(path), f"not a valid document: {e}") from None
    if not isinstance(doc, dict):
        raise SchemaError(str(path), "top level must be an object")
    return parse_scenario(doc, origin=str(path))


def bundled_scenario_names() -> list[str]:
    files = resources.files("secloop.data")
    return sorted(p.name[: -len(".json")] for p in files.iterdir() if p.name.endswith(".json"))


def load_bundled(name: str) -> Scenario:
    """Load one of the scenarios shipped with the package."""
    ref = resources.files("secloop.data").joinpath(f"{name}.json")
    if not ref.is_file():
        raise SchemaError(name, f"no bundled scenario named {name!r}")
    doc = json.loads(ref.read_text(encoding="utf-8"))
    return parse_scenario(doc, origin=f"bundled:{name}")


# ---------------------------------------------------------------------------
# Solvability search


def iter_call_variants(inventory: Sequence[ToolSpec]):
    """Every (tool, full in-domain param assignment) invocation."""
    from .core import ToolCall

    for spec in inventory:
        domains = [sorted(domain) for _, domain in spec.param_schema]
        names = spec.param_names
        for combo in itertools.product(*domains):
            yield ToolCall(tool_name=spec.name, params=tuple(zip(names, combo)))


def find_blocking_strategy(scenario: Scenario, max_calls: int = 3):
    """Brute-force a strategy with rs_attack = 0 and rs_service = 1.

    Searches strategies of increasing length over all in-domain
    invocations; returns the first hit or None. Flaky tools are treated
    as reliable here (solvability is about the deterministic core).
    """
    variants = [
        call
        for call in iter_call_variants(scenario.inventory)
        if not scenario.tool(call.tool_name).disrupts(call.params)
    ]
    first = scenario.chain[0]
    for length in range(1, max_calls + 1):
        for combo in itertools.combinations(variants, length):
            installed = list(combo)
            # Chain-break: blocking the first stage fails the whole chain.
            blocked_first = any(
                pat.matches(c.tool_name, c.params) for pat in first.blocked_by for c in installed
            )
            if blocked_first:
                return installed
            # Otherwise every stage must be blocked individually.
            if all(
                any(pat.matches(c.tool_name, c.params) for pat in st.blocked_by for c in installed)
                for st in scenario.chain
            ):
                return installed
    return None


# ---------------------------------------------------------------------------
# IDS emulation

_BENIGN_KINDS = ("benign_cron", "benign_backup", "benign_heartbeat", "benign_dns_lookup")
_STAGE_WINDOW_MS = 1000


def emit_alerts(scenario: Scenario, rng_seed: int) -> AlertStream:
    """Deterministic noisy alert stream for one episode.

    Per stage, each template fires k times with k uniform in
    {1..duplication}; benign_rate benign alerts are spliced in at random
    positions inside the stage window. All alerts of stage j share the
    timestamp j * 1000 ms, so streams are non-decreasing by construction.
    """
    rng = random.Random(stable_hash(scenario.seed_salt, rng_seed, "alerts"))
    d = scenario.noise.duplication
    b = scenario.noise.benign_rate
    endpoints = [ep for _, ep in scenario.environment.services]
    alerts: list[AttackAlert] = []
    counter = 0
    for position, stage in enumerate(scenario.chain):
        events: list[AttackAlert] = []
        for tpl in stage.alert_templates:
            k = rng.randint(1, d)
            events.extend([tpl] * k)
        for _ in range(b):
            benign = AttackAlert(
                id="benign",
                timestamp=0,
                attack_type=rng.choice(_BENIGN_KINDS),
                severity=Severity.LOW,
                source="net_monitor",
                target=rng.choice(endpoints),
                stage_tag=None,
                payload_summary="routine activity",
            )
            events.insert(rng.randint(0, len(events)), benign)
        ts = position * _STAGE_WINDOW_MS
        for ev in events:
            alerts.append(replace(ev, id=f"al-{counter:04d}", timestamp=ts))
            counter += 1
    return AlertStream(alerts=tuple(alerts))
