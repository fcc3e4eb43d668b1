"""Four-stage reward pipeline: format, execution, evaluation, penalty.

Gating order is fixed: a malformed output receives r_format = 0, skips
the battlefield entirely (r_exec = r_eva = 0), and still passes through
the penalty stage. All components are exact rationals in [0, 1]; the
unit-weight aggregate is r_format + r_exec + r_eva - penalty.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Protocol, Sequence, Union

from .core import (
    STRATEGY_TEXT_RE,
    AlertSummary,
    FeedbackReport,
    FormatError,
    RewardBreakdown,
    SecurityStrategy,
    ToolSpec,
    parse_strategy,
)

log = logging.getLogger(__name__)

JudgeInput = Union[SecurityStrategy, FormatError]


@dataclass(frozen=True)
class JudgeVerdict:
    """How rational the output looks; penalty is 1 - rationality."""

    rationality: Fraction
    reasons: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= self.rationality <= 1:
            raise ValueError("rationality must lie in [0, 1]")
        if not self.reasons and self.rationality != 1:
            raise ValueError("a verdict without reasons must have rationality 1")

    @property
    def penalty(self) -> Fraction:
        return 1 - self.rationality


class StrategyJudge(Protocol):
    def judge(
        self,
        outcome: JudgeInput,
        summaries: Sequence[AlertSummary],
        inventory: Sequence[ToolSpec],
    ) -> JudgeVerdict: ...


class RuleJudge:
    """Deterministic rule-based judge.

    Each fired rule costs a fixed quantum (default 1/4) of rationality,
    floored at 0:

      R1  a call uses a value the tool spec flags as overly broad
      R2  a disruption-capable tool is invoked although no summarized
          alert matches anything in the tool's blocks set
      R3  the strategy exceeds max_calls tool calls
      R4  the output was unparseable
    """

    def __init__(self, max_calls: int = 8, quantum: Fraction = Fraction(1, 4)):
        self.max_calls = max_calls
        self.quantum = quantum

    def judge(self, outcome, summaries, inventory) -> JudgeVerdict:
        fired: list[str] = []
        if isinstance(outcome, FormatError):
            fired.append("R4")
        else:
            by_name = {spec.name: spec for spec in inventory}
            seen_types = {s.attack_type for s in summaries}
            r1 = r2 = False
            for call in outcome.calls:
                spec = by_name.get(call.tool_name)
                if spec is None:
                    continue
                if any(spec.is_broad(k, v) for k, v in call.params):
                    r1 = True
                if spec.can_disrupt and not {at for _, at in spec.blocks} & seen_types:
                    r2 = True
            if r1:
                fired.append("R1")
            if r2:
                fired.append("R2")
            if len(outcome.calls) > self.max_calls:
                fired.append("R3")
        rationality = max(Fraction(0), 1 - len(fired) * self.quantum)
        return JudgeVerdict(rationality=rationality, reasons=tuple(fired))


class ExternalJudge:
    """Adapter for a remote rationality-scoring endpoint.

    One request/response per output: the request body is a structured
    record {"strategy": ..., "prompt_context": ...}; the response must be
    {"rationality": number in [0, 1]}. The transport is injected (any
    callable from request text to response text). Transport errors,
    timeouts included, fail open: rationality 1 with a logged warning.
    """

    def __init__(self, transport: Callable[[str], str]):
        self.transport = transport

    def judge(self, outcome, summaries, inventory) -> JudgeVerdict:
        import json

        text = outcome.text if isinstance(outcome, FormatError) else outcome.raw_text
        context = "\n".join(
            f"{s.attack_type} {s.source} {s.target} x{s.count}" for s in summaries
        )
        request = json.dumps({"strategy": text, "prompt_context": context})
        try:
            response = json.loads(self.transport(request))
            rationality = Fraction(response["rationality"]).limit_denominator(10**6)
            if not 0 <= rationality <= 1:
                raise ValueError(f"rationality out of range: {rationality}")
        except Exception as exc:  # fail open
            log.warning("external judge unavailable, failing open: %s", exc)
            return JudgeVerdict(rationality=Fraction(1), reasons=())
        if rationality == 1:
            return JudgeVerdict(rationality=Fraction(1), reasons=())
        return JudgeVerdict(rationality=rationality, reasons=("external",))


# ---------------------------------------------------------------------------
# Reward components


def format_reward(raw_text: str) -> Fraction:
    """1 iff the text parses and matches the canonical-grammar regex."""
    try:
        parse_strategy(raw_text)
    except FormatError:
        return Fraction(0)
    return Fraction(1 if STRATEGY_TEXT_RE.fullmatch(raw_text) else 0)


def execution_reward(report: FeedbackReport) -> Fraction:
    """All-or-nothing: 1 only when every tool call executed."""
    return Fraction(1 if report.rs_exe == 1 else 0)


def evaluation_reward(report: FeedbackReport) -> Fraction:
    """(1 - rs_attack) * rs_service: full marks only for a clean full block."""
    return (1 - report.rs_attack) * report.rs_service


def penalty(
    outcome: JudgeInput,
    judge: StrategyJudge,
    summaries: Sequence[AlertSummary] = (),
    inventory: Sequence[ToolSpec] = (),
) -> JudgeVerdict:
    """Run the penalty stage; applies to well-formed and malformed outputs."""
    return judge.judge(outcome, summaries, inventory)


def total_reward(
    raw_text: str,
    report: Optional[FeedbackReport],
    judge: StrategyJudge,
    summaries: Sequence[AlertSummary] = (),
    inventory: Sequence[ToolSpec] = (),
) -> RewardBreakdown:
    """Aggregate the four stages for one output.

    `report` must be present exactly when the format check passed (the
    caller performs the gating and only then runs the battlefield).
    """
    try:
        strategy = parse_strategy(raw_text)
        error = None
    except FormatError as exc:
        strategy = None
        error = exc

    r_format = format_reward(raw_text)
    if r_format < 1:
        if report is not None:
            raise ValueError("gated output must not carry a battlefield report")
        verdict = penalty(error, judge, summaries, inventory)
        return RewardBreakdown(
            r_format=r_format,
            r_exec=Fraction(0),
            r_eva=Fraction(0),
            penalty=verdict.penalty,
            total=r_format - verdict.penalty,
            gated=True,
        )

    if report is None:
        raise ValueError("well-formed output requires a battlefield report")
    r_exec = execution_reward(report)
    r_eva = evaluation_reward(report)
    verdict = penalty(strategy, judge, summaries, inventory)
    return RewardBreakdown(
        r_format=r_format,
        r_exec=r_exec,
        r_eva=r_eva,
        penalty=verdict.penalty,
        total=r_format + r_exec + r_eva - verdict.penalty,
        gated=False,
    )
