"""Shared domain types and the canonical strategy text format.

Everything downstream (scenario replay, battlefield scoring, rewards,
policy decoding) speaks in these types. Score fields are exact rationals
(`fractions.Fraction`) so that independently recomputed feedback can be
compared bit-for-bit, with no float drift.

All types here are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from fractions import Fraction
from typing import Iterable, Optional, Sequence


# ---------------------------------------------------------------------------
# Stable hashing (64-bit FNV-1a)
#
# Used everywhere a cross-platform, cross-run deterministic hash is needed:
# prompt bucketing, per-instance seeds, per-trajectory sampling seeds.

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over raw bytes."""
    h = FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & _MASK64
    return h


def stable_hash(*parts: int | str | bytes) -> int:
    """Deterministic 64-bit hash of a mixed int/str/bytes tuple.

    Each part is encoded with a one-byte type tag and separated by 0x1F so
    that e.g. (1, 23) and (12, 3) cannot collide structurally.
    """
    buf = bytearray()
    for part in parts:
        if isinstance(part, bool):  # bool is an int subclass; be explicit
            part = int(part)
        if isinstance(part, int):
            buf += b"i" + str(part).encode("ascii")
        elif isinstance(part, str):
            buf += b"s" + part.encode("utf-8")
        elif isinstance(part, bytes):
            buf += b"b" + part
        else:
            raise TypeError(f"unhashable part type: {type(part)!r}")
        buf += b"\x1f"
    return fnv1a64(bytes(buf))


# ---------------------------------------------------------------------------
# Enumerations


class Severity(IntEnum):
    """Alert severity scale; ordering is meaningful (critical is worst)."""

    LOW = 0
    MEDIUM = 1
    HIGH = 2
    CRITICAL = 3

    @classmethod
    def from_name(cls, name: str) -> "Severity":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown severity {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


class AttackTactic(Enum):
    """The 13 adversarial tactic stages used to tag attack-chain steps."""

    RECONNAISSANCE = "reconnaissance"
    INITIAL_ACCESS = "initial_access"
    EXECUTION = "execution"
    PERSISTENCE = "persistence"
    PRIVILEGE_ESCALATION = "privilege_escalation"
    DEFENSE_EVASION = "defense_evasion"
    CREDENTIAL_ACCESS = "credential_access"
    DISCOVERY = "discovery"
    LATERAL_MOVEMENT = "lateral_movement"
    COLLECTION = "collection"
    COMMAND_AND_CONTROL = "command_and_control"
    EXFILTRATION = "exfiltration"
    IMPACT = "impact"

    @classmethod
    def from_name(cls, name: str) -> "AttackTactic":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown tactic {name!r}") from None


# ---------------------------------------------------------------------------
# Alerts and summaries


@dataclass(frozen=True)
class AttackAlert:
    """A single IDS alert."""

    id: str
    timestamp: int  # milliseconds since scenario start
    attack_type: str
    severity: Severity
    source: str
    target: str
    stage_tag: Optional[AttackTactic] = None
    payload_summary: str = ""

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise ValueError("alert timestamp must be >= 0")
        if not self.attack_type:
            raise ValueError("alert attack_type must be non-empty")
        if self.source == self.target:
            raise ValueError("alert source and target must differ")

    @property
    def is_benign(self) -> bool:
        return self.attack_type.startswith("benign_")


@dataclass(frozen=True)
class AlertSummary:
    """One deduplicated alert group: same (attack_type, source, target)."""

    attack_type: str
    source: str
    target: str
    count: int
    first_seen: int
    last_seen: int
    max_severity: Severity
    stage_tags: frozenset[AttackTactic] = frozenset()

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("summary count must be >= 1")
        if self.first_seen > self.last_seen:
            raise ValueError("summary first_seen must be <= last_seen")


# ---------------------------------------------------------------------------
# Tools and strategies


@dataclass(frozen=True)
class ToolSpec:
    """A defensive tool the policy may invoke.

    param_schema fixes the parameter order and, per parameter, the finite
    domain of legal value tokens. disrupt_when marks invocations that take
    protected services down (every listed parameter must hit one of its
    flagged values; a tool with always_disrupts is disruptive on any call).
    broad_values marks values that are judged overly broad (e.g. a
    0-prefix network). blocks lists the (tactic, attack_type) patterns the
    tool is meant to mitigate; the rule judge uses it to spot defenses
    with no matching alert.
    """

    name: str
    param_schema: tuple[tuple[str, frozenset[str]], ...] = ()
    disrupt_when: tuple[tuple[str, frozenset[str]], ...] = ()
    always_disrupts: bool = False
    broad_values: tuple[tuple[str, frozenset[str]], ...] = ()
    blocks: frozenset[tuple[AttackTactic, str]] = frozenset()
    flaky: float = 0.0

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("tool name must be non-empty")
        for pname, domain in self.param_schema:
            if not domain:
                raise ValueError(f"tool {self.name}: empty domain for param {pname!r}")
        if not 0.0 <= self.flaky < 1.0:
            raise ValueError(f"tool {self.name}: flaky must be in [0, 1)")

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p for p, _ in self.param_schema)

    def domain_of(self, param: str) -> frozenset[str]:
        for pname, domain in self.param_schema:
            if pname == param:
                return domain
        raise KeyError(param)

    @property
    def can_disrupt(self) -> bool:
        return self.always_disrupts or bool(self.disrupt_when)

    def disrupts(self, params: Sequence[tuple[str, str]]) -> bool:
        """True when this invocation is service-disrupting."""
        if self.always_disrupts:
            return True
        if not self.disrupt_when:
            return False
        values = dict(params)
        return all(values.get(p) in flagged for p, flagged in self.disrupt_when)

    def is_broad(self, param: str, value: str) -> bool:
        for pname, flagged in self.broad_values:
            if pname == param and value in flagged:
                return True
        return False


@dataclass(frozen=True)
class ToolCall:
    """One tool invocation: name plus ordered (param, value) pairs."""

    tool_name: str
    params: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class SecurityStrategy:
    """An ordered tool-call list plus the exact text it was parsed from."""

    calls: tuple[ToolCall, ...]
    raw_text: str

    @classmethod
    def from_calls(cls, calls: Iterable[ToolCall]) -> "SecurityStrategy":
        """Build a strategy whose raw_text is its own canonical serialization."""
        calls = tuple(calls)
        return cls(calls=calls, raw_text=_render_calls(calls))

    def __len__(self) -> int:
        return len(self.calls)


@dataclass(frozen=True)
class EnvironmentDescriptor:
    """The defended environment: services, which of them matter, free notes."""

    name: str
    services: tuple[tuple[str, str], ...]  # (service_name, endpoint)
    protected_services: tuple[str, ...]
    notes: str = ""

    def __post_init__(self) -> None:
        names = {s for s, _ in self.services}
        missing = [p for p in self.protected_services if p not in names]
        if missing:
            raise ValueError(f"protected services not in services: {missing}")
        if not self.protected_services:
            raise ValueError("at least one protected service is required")


# ---------------------------------------------------------------------------
# Feedback and rewards


@dataclass(frozen=True)
class FeedbackReport:
    """Per-episode battlefield outcome: tool results, stage results, service."""

    tool_outcomes: tuple[int, ...]
    stage_outcomes: tuple[int, ...]
    rs_exe: Fraction
    rs_attack: Fraction
    rs_service: Fraction
    feedback_sum: Fraction

    def __post_init__(self) -> None:
        if self.tool_outcomes:
            expect = Fraction(sum(self.tool_outcomes), len(self.tool_outcomes))
        else:
            expect = Fraction(0)  # empty strategy executed nothing
        if self.rs_exe != expect:
            raise ValueError("rs_exe inconsistent with tool_outcomes")
        if not self.stage_outcomes:
            raise ValueError("stage_outcomes must be non-empty")
        if self.rs_attack != Fraction(sum(self.stage_outcomes), len(self.stage_outcomes)):
            raise ValueError("rs_attack inconsistent with stage_outcomes")
        if self.rs_service not in (Fraction(0), Fraction(1)):
            raise ValueError("rs_service must be 0 or 1")
        if self.feedback_sum != self.rs_exe + self.rs_attack + self.rs_service:
            raise ValueError("feedback_sum must equal rs_exe + rs_attack + rs_service")

    @classmethod
    def build(
        cls,
        tool_outcomes: Sequence[int],
        stage_outcomes: Sequence[int],
        service_up: bool,
    ) -> "FeedbackReport":
        tool_outcomes = tuple(int(x) for x in tool_outcomes)
        stage_outcomes = tuple(int(x) for x in stage_outcomes)
        rs_exe = (
            Fraction(sum(tool_outcomes), len(tool_outcomes))
            if tool_outcomes
            else Fraction(0)
        )
        rs_attack = Fraction(sum(stage_outcomes), len(stage_outcomes))
        rs_service = Fraction(1 if service_up else 0)
        return cls(
            tool_outcomes=tool_outcomes,
            stage_outcomes=stage_outcomes,
            rs_exe=rs_exe,
            rs_attack=rs_attack,
            rs_service=rs_service,
            feedback_sum=rs_exe + rs_attack + rs_service,
        )

    def to_record(self) -> dict:
        """Single-line structured record for the metrics log."""
        return {
            "tool_outcomes": list(self.tool_outcomes),
            "stage_outcomes": list(self.stage_outcomes),
            "rs_exe": str(self.rs_exe),
            "rs_attack": str(self.rs_attack),
            "rs_service": str(self.rs_service),
            "feedback_sum": str(self.feedback_sum),
        }


@dataclass(frozen=True)
class RewardBreakdown:
    """The four reward components and their unit-weight aggregate."""

    r_format: Fraction
    r_exec: Fraction
    r_eva: Fraction
    penalty: Fraction
    total: Fraction
    gated: bool

    def __post_init__(self) -> None:
        for name in ("r_format", "r_exec", "r_eva", "penalty"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} out of [0, 1]: {v}")
        if self.gated and (self.r_exec != 0 or self.r_eva != 0):
            raise ValueError("gated breakdown must have r_exec = r_eva = 0")
        if self.total != self.r_format + self.r_exec + self.r_eva - self.penalty:
            raise ValueError("total must equal r_format + r_exec + r_eva - penalty")

    def to_record(self) -> dict:
        return {
            "r_format": str(self.r_format),
            "r_exec": str(self.r_exec),
            "r_eva": str(self.r_eva),
            "penalty": str(self.penalty),
            "total": str(self.total),
            "gated": self.gated,
        }


# ---------------------------------------------------------------------------
# Canonical strategy text
#
# The one and only strategy wire format:
#
#   {"tool_calls": [{"tool": NAME, "params": {KEY: VALUE, ...}}, ...]}
#
# Key order is fixed, separators are ", " and ": ", there is no other
# whitespace. Tokens (names, keys, values) are any non-empty run of
# characters other than '"' and '\'. The format is regular; the regex
# below accepts exactly the same language the parser does.

_TOKEN_PAT = r'[^"\\]+'
_PAIR_PAT = rf'"{_TOKEN_PAT}": "{_TOKEN_PAT}"'
_CALL_PAT = (
    rf'\{{"tool": "{_TOKEN_PAT}", '
    rf'"params": \{{(?:{_PAIR_PAT}(?:, {_PAIR_PAT})*)?\}}\}}'
)
STRATEGY_TEXT_RE = re.compile(
    rf'\{{"tool_calls": \[(?:{_CALL_PAT}(?:, {_CALL_PAT})*)?\]\}}'
)


class FormatError(Exception):
    """The text does not conform to the canonical strategy grammar."""

    def __init__(self, position: int, reason: str, text: str = ""):
        super().__init__(f"format error at offset {position}: {reason}")
        self.position = position
        self.reason = reason
        self.text = text


def _render_calls(calls: Sequence[ToolCall]) -> str:
    rendered = []
    for call in calls:
        pairs = ", ".join(f'"{k}": "{v}"' for k, v in call.params)
        rendered.append(f'{{"tool": "{call.tool_name}", "params": {{{pairs}}}}}')
    return '{"tool_calls": [' + ", ".join(rendered) + "]}"


def serialize_strategy(strategy: SecurityStrategy) -> str:
    """Canonical text for a strategy. Total: never raises.

    Round-trips through parse_strategy whenever every token stays off the
    two reserved characters ('"' and '\\').
    """
    return _render_calls(strategy.calls)


class _Cursor:
    """Tiny scanner over the canonical grammar; tracks the failure offset."""

    __slots__ = ("text", "pos")

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def expect(self, literal: str) -> None:
        end = self.pos + len(literal)
        if self.text[self.pos : end] != literal:
            # Report the first diverging offset inside the literal.
            for i, ch in enumerate(literal):
                at = self.pos + i
                if at >= len(self.text):
                    raise FormatError(len(self.text), "unexpected end of input", self.text)
                if self.text[at] != ch:
                    raise FormatError(at, f"expected {literal!r}", self.text)
        self.pos = end

    def peek(self) -> str:
        return self.text[self.pos : self.pos + 1]

    def token(self) -> str:
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in '"\\':
            self.pos += 1
        if self.pos == start:
            reason = "unexpected end of input" if self.pos >= len(self.text) else "empty token"
            raise FormatError(self.pos, reason, self.text)
        if self.pos < len(self.text) and self.text[self.pos] == "\\":
            raise FormatError(self.pos, "backslash not allowed in token", self.text)
        return self.text[start : self.pos]


def parse_strategy(text: str) -> SecurityStrategy:
    """Parse canonical strategy text; raise FormatError on any violation.

    Accepts exactly the canonical grammar: fixed key order, fixed
    separators, no stray whitespace, no extra keys.
    """
    cur = _Cursor(text)
    cur.expect('{"tool_calls": [')
    calls: list[ToolCall] = []
    if cur.peek() != "]":
        while True:
            cur.expect('{"tool": "')
            name = cur.token()
            cur.expect('", "params": {')
            params: list[tuple[str, str]] = []
            if cur.peek() != "}":
                while True:
                    cur.expect('"')
                    key = cur.token()
                    cur.expect('": "')
                    value = cur.token()
                    cur.expect('"')
                    params.append((key, value))
                    if cur.peek() == ",":
                        cur.expect(", ")
                    else:
                        break
            cur.expect("}}")
            calls.append(ToolCall(tool_name=name, params=tuple(params)))
            if cur.peek() == ",":
                cur.expect(", ")
            else:
                break
    cur.expect("]}")
    if cur.pos != len(text):
        raise FormatError(cur.pos, "trailing data after strategy object", text)
    return SecurityStrategy(calls=tuple(calls), raw_text=text)


def validate_against_inventory(
    strategy: SecurityStrategy, inventory: Sequence[ToolSpec]
) -> list[bool]:
    """Per-call validity: known tool, exact schema param order, in-domain values."""
    by_name = {spec.name: spec for spec in inventory}
    flags = []
    for call in strategy.calls:
        spec = by_name.get(call.tool_name)
        if spec is None:
            flags.append(False)
            continue
        if tuple(k for k, _ in call.params) != spec.param_names:
            flags.append(False)
            continue
        flags.append(all(v in spec.domain_of(k) for k, v in call.params))
    return flags
