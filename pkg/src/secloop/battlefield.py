"""Simulated red/blue evaluation engine.

Each strategy is executed in its own single-use EnvInstance: the blue
side installs mitigations first, then the red side replays the attack
chain against them. Stage semantics are kill-chain style: a blocked
stage fails every downstream stage. Dispatch of a strategy group runs at
most n_env instances concurrently; results never depend on n_env.
"""

from __future__ import annotations

import math
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import (
    FeedbackReport,
    SecurityStrategy,
    ToolCall,
    stable_hash,
    validate_against_inventory,
)
from .scenario import AttackTactic, Scenario

# Global count of environment instances ever created. The reward pipeline
# is format-gated; tests use this to prove malformed outputs never reach
# the battlefield.
_instance_lock = threading.Lock()
_instances_created = 0


def instances_created() -> int:
    with _instance_lock:
        return _instances_created


class _ConcurrencyMeter:
    """Tracks the high-water mark of concurrently running instances."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._active = 0
        self.peak = 0

    def __enter__(self):
        with self._lock:
            self._active += 1
            self.peak = max(self.peak, self._active)
        return self

    def __exit__(self, *exc):
        with self._lock:
            self._active -= 1
        return False


class EnvInstance:
    """One disposable red/blue environment pair bound to a scenario.

    Single use: apply_blue once, then run_red once, then evaluate.
    """

    def __init__(self, scenario: Scenario, instance_seed: int):
        global _instances_created
        with _instance_lock:
            _instances_created += 1
        self.scenario = scenario
        self.instance_seed = instance_seed
        self.blue_state: list[ToolCall] = []  # successfully executed calls
        self.red_state: list[int] = []
        self.service_up = True
        self._tool_outcomes: Optional[list[int]] = None
        self._rng = random.Random(instance_seed)

    def apply_blue(self, strategy: SecurityStrategy) -> list[int]:
        """Execute the strategy's calls in order; failures are data (0)."""
        if self._tool_outcomes is not None:
            raise RuntimeError("EnvInstance is single-use; apply_blue already ran")
        flags = validate_against_inventory(strategy, self.scenario.inventory)
        outcomes = []
        for call, valid in zip(strategy.calls, flags):
            ok = valid
            if ok:
                spec = self.scenario.tool(call.tool_name)
                if spec.flaky > 0.0 and self._rng.random() < spec.flaky:
                    ok = False
                else:
                    self.blue_state.append(call)
                    if spec.disrupts(call.params):
                        self.service_up = False
            outcomes.append(1 if ok else 0)
        self._tool_outcomes = outcomes
        return outcomes

    def run_red(self) -> list[int]:
        """Replay the attack chain against the installed mitigations."""
        if self._tool_outcomes is None:
            raise RuntimeError("run_red requires apply_blue first")
        if self.red_state:
            raise RuntimeError("EnvInstance is single-use; run_red already ran")
        prior_ok = True
        for stage in self.scenario.chain:
            blocked = any(
                pattern.matches(call.tool_name, call.params)
                for pattern in stage.blocked_by
                for call in self.blue_state
            )
            success = prior_ok and not blocked
            self.red_state.append(1 if success else 0)
            if success and stage.tactic is AttackTactic.IMPACT:
                self.service_up = False
            prior_ok = success
        return list(self.red_state)

    def evaluate(self) -> FeedbackReport:
        if self._tool_outcomes is None or not self.red_state:
            raise RuntimeError("evaluate requires apply_blue and run_red")
        return FeedbackReport.build(self._tool_outcomes, self.red_state, self.service_up)


def run_instance(scenario: Scenario, strategy: SecurityStrategy, instance_seed: int) -> FeedbackReport:
    """Full blue-then-red cycle for one strategy in a fresh instance."""
    inst = EnvInstance(scenario, instance_seed)
    inst.apply_blue(strategy)
    inst.run_red()
    return inst.evaluate()


@dataclass(frozen=True)
class DispatchStats:
    group_size: int
    n_env: int
    waves: int
    peak_concurrent: int
    wall_ms: float

    def __post_init__(self) -> None:
        if self.waves != math.ceil(self.group_size / self.n_env):
            raise ValueError("waves must equal ceil(group_size / n_env)")


def run_group(
    scenario: Scenario,
    strategies: Sequence[SecurityStrategy],
    n_env: int,
    run_seed: int,
) -> tuple[list[FeedbackReport], DispatchStats]:
    """Evaluate a group of strategies across at most n_env parallel instances.

    Instance i is seeded with stable_hash(run_seed, i), so the report list
    is a pure function of (scenario, strategies, run_seed); n_env only
    shapes the dispatch.
    """
    if not strategies:
        raise ValueError("run_group requires at least one strategy")
    if n_env < 1:
        raise ValueError("n_env must be >= 1")
    started = time.perf_counter()
    meter = _ConcurrencyMeter()

    def job(index: int, strategy: SecurityStrategy) -> FeedbackReport:
        with meter:
            return run_instance(scenario, strategy, stable_hash(run_seed, index))

    if n_env == 1:
        reports = [job(i, s) for i, s in enumerate(strategies)]
    else:
        with ThreadPoolExecutor(max_workers=n_env) as pool:
            reports = list(pool.map(job, range(len(strategies)), strategies))

    stats = DispatchStats(
        group_size=len(strategies),
        n_env=n_env,
        waves=math.ceil(len(strategies) / n_env),
        peak_concurrent=meter.peak,
        wall_ms=(time.perf_counter() - started) * 1000.0,
    )
    return reports, stats


def is_correct(report: FeedbackReport) -> bool:
    """Fully executed, whole chain blocked, service untouched."""
    return report.rs_exe == 1 and report.rs_attack == 0 and report.rs_service == 1
