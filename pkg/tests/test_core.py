"""Core types, canonical strategy text, and stable hashing."""

from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secloop.core import (
    STRATEGY_TEXT_RE,
    AttackAlert,
    AttackTactic,
    EnvironmentDescriptor,
    FeedbackReport,
    FormatError,
    RewardBreakdown,
    SecurityStrategy,
    Severity,
    ToolCall,
    ToolSpec,
    fnv1a64,
    parse_strategy,
    serialize_strategy,
    stable_hash,
    validate_against_inventory,
)

# Token alphabet matching what scenario files may contain.
token_st = st.text(
    alphabet="abcdefghijklmnopqrstuvwxyz0123456789_.-/:*", min_size=1, max_size=12
)
call_st = st.builds(
    ToolCall,
    tool_name=token_st,
    params=st.lists(st.tuples(token_st, token_st), max_size=4).map(tuple),
)
strategy_st = st.lists(call_st, max_size=5).map(SecurityStrategy.from_calls)


def test_serialize_empty():
    assert serialize_strategy(SecurityStrategy.from_calls([])) == '{"tool_calls": []}'


def test_serialize_single_call():
    s = SecurityStrategy.from_calls([ToolCall("block_ip", (("ip", "10.0.0.9"),))])
    assert (
        serialize_strategy(s)
        == '{"tool_calls": [{"tool": "block_ip", "params": {"ip": "10.0.0.9"}}]}'
    )


@settings(max_examples=150)
@given(strategy_st)
def test_round_trip(strategy):
    assert parse_strategy(serialize_strategy(strategy)) == strategy


@settings(max_examples=150)
@given(strategy_st)
def test_regex_accepts_canonical(strategy):
    assert STRATEGY_TEXT_RE.fullmatch(serialize_strategy(strategy))


def test_parse_empty_strategy():
    s = parse_strategy('{"tool_calls": []}')
    assert s.calls == ()


def test_parse_missing_params_key():
    with pytest.raises(FormatError):
        parse_strategy('{"tool_calls": [{"tool": "block_ip"}]}')


def test_parse_truncated_reports_end_of_input():
    text = '{"tool_calls": ['
    with pytest.raises(FormatError) as exc:
        parse_strategy(text)
    assert exc.value.position == len(text)


def test_parse_extra_top_level_key():
    with pytest.raises(FormatError):
        parse_strategy('{"tool_calls": [], "extra": "x"}')


def test_parse_rejects_prose():
    with pytest.raises(FormatError):
        parse_strategy("block the attacker's IP")


@pytest.mark.parametrize(
    "text",
    [
        '{"tool_calls":[]}',  # missing space after colon
        '{ "tool_calls": []}',  # stray space
        '{"tool_calls": [{"params": {}, "tool": "x"}]}',  # key order swapped
        '{"tool_calls": [{"tool": "x", "params": {}}ravel]}',  # junk
        '{"tool_calls": []} ',  # trailing whitespace
        '{"tool_calls": [{"tool": "", "params": {}}]}',  # empty token
    ],
)
def test_parse_rejects_non_canonical(text):
    with pytest.raises(FormatError):
        parse_strategy(text)
    assert STRATEGY_TEXT_RE.fullmatch(text) is None


@settings(max_examples=200)
@given(st.text(max_size=60))
def test_parser_and_regex_agree(text):
    try:
        parse_strategy(text)
        ok = True
    except FormatError:
        ok = False
    assert ok == bool(STRATEGY_TEXT_RE.fullmatch(text))


# ---------------------------------------------------------------------------
# Inventory validation

INVENTORY = [
    ToolSpec(
        name="block_ip",
        param_schema=(("ip", frozenset({"10.0.0.9", "0.0.0.0/0"})),),
    ),
    ToolSpec(name="enable_waf"),
]


def test_validate_known_tool_in_domain():
    s = SecurityStrategy.from_calls([ToolCall("block_ip", (("ip", "10.0.0.9"),))])
    assert validate_against_inventory(s, INVENTORY) == [True]


def test_validate_unknown_tool():
    s = SecurityStrategy.from_calls([ToolCall("firewalld", ())])
    assert validate_against_inventory(s, INVENTORY) == [False]


def test_validate_out_of_domain_value():
    s = SecurityStrategy.from_calls([ToolCall("block_ip", (("ip", "8.8.8.8"),))])
    assert validate_against_inventory(s, INVENTORY) == [False]


def test_validate_param_name_mismatch():
    s = SecurityStrategy.from_calls(
        [
            ToolCall("block_ip", ()),  # missing param
            ToolCall("block_ip", (("addr", "10.0.0.9"),)),  # wrong name
            ToolCall("enable_waf", (("x", "y"),)),  # extra param
        ]
    )
    assert validate_against_inventory(s, INVENTORY) == [False, False, False]


# ---------------------------------------------------------------------------
# Feedback / reward arithmetic


@given(
    st.lists(st.integers(0, 1), max_size=6),
    st.lists(st.integers(0, 1), min_size=1, max_size=6),
    st.booleans(),
)
def test_feedback_report_arithmetic(tools, stages, service_up):
    rep = FeedbackReport.build(tools, stages, service_up)
    if tools:
        assert rep.rs_exe == Fraction(sum(tools), len(tools))
    else:
        assert rep.rs_exe == 0
    assert rep.rs_attack == Fraction(sum(stages), len(stages))
    assert rep.feedback_sum == rep.rs_exe + rep.rs_attack + rep.rs_service
    assert 0 <= rep.feedback_sum <= 3


def test_feedback_report_rejects_bad_rs_exe():
    with pytest.raises(ValueError):
        FeedbackReport(
            tool_outcomes=(1, 0),
            stage_outcomes=(1,),
            rs_exe=Fraction(1),
            rs_attack=Fraction(1),
            rs_service=Fraction(1),
            feedback_sum=Fraction(3),
        )


def test_reward_breakdown_invariants():
    rb = RewardBreakdown(
        r_format=Fraction(1),
        r_exec=Fraction(1),
        r_eva=Fraction(1, 2),
        penalty=Fraction(1, 4),
        total=Fraction(9, 4),
        gated=False,
    )
    assert rb.total == rb.r_format + rb.r_exec + rb.r_eva - rb.penalty
    with pytest.raises(ValueError):
        RewardBreakdown(
            r_format=Fraction(0),
            r_exec=Fraction(1),
            r_eva=Fraction(0),
            penalty=Fraction(0),
            total=Fraction(1),
            gated=True,
        )


def test_feedback_record_is_flat_and_parseable():
    rep = FeedbackReport.build([1, 0, 1], [1, 0], True)
    rec = rep.to_record()
    assert Fraction(rec["rs_exe"]) == Fraction(2, 3)
    assert Fraction(rec["feedback_sum"]) == rep.feedback_sum


# ---------------------------------------------------------------------------
# Domain type invariants


def test_alert_invariants():
    with pytest.raises(ValueError):
        AttackAlert("a", -1, "port_scan", Severity.LOW, "x", "y")
    with pytest.raises(ValueError):
        AttackAlert("a", 0, "", Severity.LOW, "x", "y")
    with pytest.raises(ValueError):
        AttackAlert("a", 0, "port_scan", Severity.LOW, "x", "x")


def test_environment_invariants():
    with pytest.raises(ValueError):
        EnvironmentDescriptor("e", (("web", "10.0.0.5"),), ("db",))
    with pytest.raises(ValueError):
        EnvironmentDescriptor("e", (("web", "10.0.0.5"),), ())


def test_tool_spec_rejects_empty_domain():
    with pytest.raises(ValueError):
        ToolSpec(name="t", param_schema=(("p", frozenset()),))


def test_tactic_enum_is_closed():
    assert len(AttackTactic) == 13
    with pytest.raises(ValueError):
        AttackTactic.from_name("resource_development")


# ---------------------------------------------------------------------------
# Stable hash


def test_fnv1a64_known_vectors():
    # Independent recomputation of the FNV-1a definition.
    def slow(data: bytes) -> int:
        h = 0xCBF29CE484222325
        for b in data:
            h = ((h ^ b) * 0x100000001B3) % 2**64
        return h

    for probe in (b"", b"a", b"foobar", b"secloop", bytes(range(64))):
        assert fnv1a64(probe) == slow(probe)
    assert fnv1a64(b"") == 0xCBF29CE484222325


def test_stable_hash_structural_separation():
    assert stable_hash(1, 23) != stable_hash(12, 3)
    assert stable_hash("ab", "c") != stable_hash("a", "bc")
    assert stable_hash(1) != stable_hash("1")
    assert stable_hash(7, "x") == stable_hash(7, "x")
