"""Group-relative policy optimization with security-aware rewards.

Per step: snapshot the policy, sample a group of outputs per prompt,
score each through the format-gated reward pipeline (malformed outputs
never reach the battlefield), subtract the group-mean reward to get
per-output advantages, and ascend the asymmetrically clipped surrogate.

Deviations from stock group-relative optimization, by design: advantages
are not divided by the group's standard deviation, the KL term is absent
(kl_coeff defaults to 0; the reference-policy blend is maintained but
loss-inert), and the clip range is asymmetric (clip_high > clip_low).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from . import battlefield, policy, rewards
from .core import FormatError, SecurityStrategy, parse_strategy, stable_hash
from .rewards import RuleJudge, StrategyJudge
from .scenario import Scenario, emit_alerts
from .summarizer import Prompt, build_prompt, summarize


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 7  # outputs sampled per prompt
    clip_low: float = 0.2
    clip_high: float = 0.28
    inner_iters: int = 1  # ascent updates per sampled batch
    steps: int = 200
    prompts_per_step: int = 4
    learning_rate: float = 1.0
    n_env: int = 4
    max_len: int = 24
    temperature: float = 1.0
    reward_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    ref_sync_steps: int = 512
    ref_mix: float = 0.6
    kl_coeff: float = 0.0
    run_seed: int = 0
    prompt_buckets: int = 64
    markov_order: int = 2

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not self.clip_low > 0:
            raise ValueError("clip_low must be > 0")
        if self.clip_high < self.clip_low:
            raise ValueError("clip_high must be >= clip_low")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff must be >= 0")
        if len(self.reward_weights) != 4:
            raise ValueError("reward_weights must have four entries")


@dataclass(frozen=True)
class GroupBatch:
    """One prompt's sampled group with rewards and mean-centred advantages."""

    prompt: Prompt
    trajectories: tuple[policy.Trajectory, ...]
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]


def compute_advantages(group_rewards: Sequence) -> list[float]:
    """Reward minus group mean; deliberately no standard-deviation division.

    Computed in exact rational arithmetic so the zero-sum and
    shift-invariance laws hold exactly, then returned as floats.
    """
    if len(group_rewards) < 2:
        raise ValueError("a group needs at least two rewards")
    exact = [Fraction(r) for r in group_rewards]
    mean = sum(exact) / len(exact)
    return [float(r - mean) for r in exact]


def make_group(prompt: Prompt, trajectories, scalar_rewards) -> GroupBatch:
    return GroupBatch(
        prompt=prompt,
        trajectories=tuple(trajectories),
        rewards=tuple(float(Fraction(r)) for r in scalar_rewards),
        advantages=tuple(compute_advantages(scalar_rewards)),
    )


def importance_ratio(
    theta: policy.PolicyWeights,
    theta_old: policy.PolicyWeights,
    prompt: Prompt,
    tokens: Sequence[int],
    t: int,
) -> float:
    """Per-token probability ratio new/old, computed in log space."""
    _, new_lps = policy.logprob(theta, prompt, tokens)
    _, old_lps = policy.logprob(theta_old, prompt, tokens)
    return math.exp(new_lps[t] - old_lps[t])


def clipped_term(gamma: float, advantage: float, clip_low: float, clip_high: float) -> float:
    """One token's surrogate contribution: min(g*A, clip(g)*A)."""
    clipped = min(max(gamma, 1.0 - clip_low), 1.0 + clip_high)
    return min(gamma * advantage, clipped * advantage)


def _group_token_terms(theta, theta_old, group: GroupBatch):
    """Yield (ctx_row, token, gamma, advantage, new_softmax) per token."""
    v = len(theta.vocab)
    for traj, adv in zip(group.trajectories, group.advantages):
        ctxs = theta.context_ids(group.prompt.context_hash, traj.tokens)
        for ctx, tok in zip(ctxs, traj.tokens):
            new_probs = policy._softmax(theta.logits[ctx])
            old_probs = policy._softmax(theta_old.logits[ctx])
            new_lp = math.log(max(float(new_probs[tok]), policy.PROB_FLOOR))
            old_lp = math.log(max(float(old_probs[tok]), policy.PROB_FLOOR))
            yield ctx, tok, math.exp(new_lp - old_lp), adv, new_probs


def surrogate_objective(
    theta: policy.PolicyWeights,
    theta_old: policy.PolicyWeights,
    batch: Sequence[GroupBatch],
    config: TrainConfig,
) -> float:
    """Clipped surrogate: per group (1/G) sum over outputs and tokens of
    min(gamma*A, clip(gamma)*A); the batch value averages over groups.
    Token sums are intentionally not length-normalized."""
    values = []
    for group in batch:
        acc = 0.0
        for _, _, gamma, adv, _ in _group_token_terms(theta, theta_old, group):
            acc += clipped_term(gamma, adv, config.clip_low, config.clip_high)
        values.append(acc / len(group.trajectories))
    return float(sum(values) / len(values))


def objective_gradient(
    theta: policy.PolicyWeights,
    theta_old: policy.PolicyWeights,
    batch: Sequence[GroupBatch],
    config: TrainConfig,
) -> tuple[dict[int, np.ndarray], float]:
    """Exact gradient of the surrogate w.r.t. theta's logits.

    A token contributes gamma * A * grad(log pi) when the unclipped branch
    attains the min (ties included); inside the clipped branch the term is
    constant in theta, so the gradient is zero. Also returns the fraction
    of tokens whose ratio sat outside the clip range.
    """
    grad: dict[int, np.ndarray] = {}
    scale = 1.0 / len(batch)
    tokens_total = 0
    tokens_clipped = 0
    for group in batch:
        g = len(group.trajectories)
        for ctx, tok, gamma, adv, new_probs in _group_token_terms(theta, theta_old, group):
            tokens_total += 1
            if gamma < 1.0 - config.clip_low or gamma > 1.0 + config.clip_high:
                tokens_clipped += 1
            clipped = min(max(gamma, 1.0 - config.clip_low), 1.0 + config.clip_high)
            if gamma * adv > clipped * adv:  # clipped branch is strictly smaller
                continue
            coeff = scale * gamma * adv / g
            if coeff == 0.0:
                continue
            row = grad.get(ctx)
            if row is None:
                row = np.zeros(len(theta.vocab), dtype=np.float64)
                grad[ctx] = row
            row -= coeff * new_probs
            row[tok] += coeff
    clip_fraction = tokens_clipped / tokens_total if tokens_total else 0.0
    return grad, clip_fraction


def gradient_norm(grad: dict[int, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(row, row)) for row in grad.values()))


# ---------------------------------------------------------------------------
# Scoring one decoded output through the gated pipeline


def score_output(
    scenario: Scenario,
    raw_text: str,
    instance_seed: int,
    judge: StrategyJudge,
    summaries,
):
    """Format-gate, battlefield-evaluate, and reward one decoded output.

    Returns (RewardBreakdown, FeedbackReport | None). Malformed outputs
    never construct a battlefield instance.
    """
    if rewards.format_reward(raw_text) < 1:
        breakdown = rewards.total_reward(raw_text, None, judge, summaries, scenario.inventory)
        return breakdown, None
    strategy = parse_strategy(raw_text)
    report = battlefield.run_instance(scenario, strategy, instance_seed)
    breakdown = rewards.total_reward(raw_text, report, judge, summaries, scenario.inventory)
    return breakdown, report


def weighted_total(breakdown, weights: tuple[float, float, float, float]) -> Fraction:
    """Scalar training reward: per-component weights over the breakdown."""
    wf, wx, we, wp = (Fraction(w).limit_denominator(10**6) for w in weights)
    return (
        wf * breakdown.r_format
        + wx * breakdown.r_exec
        + we * breakdown.r_eva
        - wp * breakdown.penalty
    )


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainState:
    weights: policy.PolicyWeights
    ref_weights: policy.PolicyWeights
    step: int = 0


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mean_reward: float
    accuracy: float
    objective: float
    grad_norm: float
    clip_fraction: float
    waves: int
    wall_ms: float
    n_trajectories: int
    n_gated: int

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "mean_reward": self.mean_reward,
            "accuracy": self.accuracy,
            "objective": self.objective,
            "grad_norm": self.grad_norm,
            "clip_fraction": self.clip_fraction,
            "waves": self.waves,
            "wall_ms": self.wall_ms,
        }


def init_state(scenarios: Sequence[Scenario], config: TrainConfig) -> TrainState:
    vocab = policy.Vocabulary.from_scenarios(scenarios)
    weights = policy.PolicyWeights.uniform(
        vocab, buckets=config.prompt_buckets, order=config.markov_order
    )
    return TrainState(weights=weights, ref_weights=weights.copy(), step=0)


def build_step_prompts(
    scenarios: Sequence[Scenario], config: TrainConfig, step: int
) -> list[tuple[Scenario, Prompt]]:
    """B (scenario, prompt) tasks for one step, from step-derived seeds."""
    tasks = []
    for b in range(config.prompts_per_step):
        scenario = scenarios[(step * config.prompts_per_step + b) % len(scenarios)]
        alert_seed = stable_hash(config.run_seed, "train_alerts", step, b)
        summaries = summarize(emit_alerts(scenario, alert_seed))
        prompt = build_prompt(
            summaries, scenario.inventory, scenario.environment, config.prompt_buckets
        )
        tasks.append((scenario, prompt))
    return tasks


def train_step(
    state: TrainState,
    tasks: Sequence[tuple[Scenario, Prompt]],
    config: TrainConfig,
    judge: Optional[StrategyJudge] = None,
) -> StepMetrics:
    """One optimization step over a batch of prompts (mutates state)."""
    if not tasks:
        raise ValueError("train_step needs at least one prompt")
    judge = judge or RuleJudge()
    started = time.perf_counter()
    theta = state.weights
    theta_old = theta.copy()
    step = state.step

    groups: list[GroupBatch] = []
    correct = 0
    gated = 0
    for prompt_index, (scenario, prompt) in enumerate(tasks):
        trajectories = [
            policy.sample(
                theta_old,
                prompt,
                max_len=config.max_len,
                temperature=config.temperature,
                rng_seed=stable_hash(config.run_seed, step, prompt_index, i),
            )
            for i in range(config.group_size)
        ]
        texts = [
            policy.decode(traj.tokens, theta_old.vocab, scenario.inventory)
            for traj in trajectories
        ]
        passing = [i for i, text in enumerate(texts) if rewards.format_reward(text) == 1]
        reports: dict[int, object] = {}
        if passing:
            group_seed = stable_hash(config.run_seed, "battlefield", step, prompt_index)
            strategies = [parse_strategy(texts[i]) for i in passing]
            group_reports, _ = battlefield.run_group(
                scenario, strategies, config.n_env, group_seed
            )
            reports = dict(zip(passing, group_reports))

        scalars = []
        for i, text in enumerate(texts):
            report = reports.get(i)
            breakdown = rewards.total_reward(
                text, report, judge, tasks[prompt_index][1].summaries, scenario.inventory
            )
            scalars.append(weighted_total(breakdown, config.reward_weights))
            if breakdown.gated:
                gated += 1
            if report is not None and battlefield.is_correct(report):
                correct += 1
        groups.append(make_group(prompt, trajectories, scalars))

    clip_fraction = 0.0
    grad: dict[int, np.ndarray] = {}
    for _ in range(config.inner_iters):
        grad, clip_fraction = objective_gradient(theta, theta_old, groups, config)
        for ctx, row in grad.items():
            theta.logits[ctx] += config.learning_rate * row

    state.step += 1
    if config.ref_sync_steps > 0 and state.step % config.ref_sync_steps == 0:
        state.ref_weights.logits *= 1.0 - config.ref_mix
        state.ref_weights.logits += config.ref_mix * theta.logits

    n_traj = len(tasks) * config.group_size
    return StepMetrics(
        step=state.step,
        mean_reward=float(np.mean([r for g in groups for r in g.rewards])),
        accuracy=correct / n_traj,
        objective=surrogate_objective(theta, theta_old, groups, config),
        grad_norm=gradient_norm(grad),
        clip_fraction=clip_fraction,
        waves=math.ceil(config.group_size / config.n_env),
        wall_ms=(time.perf_counter() - started) * 1000.0,
        n_trajectories=n_traj,
        n_gated=gated,
    )


def train(
    config: TrainConfig,
    scenarios: Sequence[Scenario],
    judge: Optional[StrategyJudge] = None,
    checkpoint_cb: Optional[Callable[[TrainState], None]] = None,
    checkpoint_interval: int = 0,
    state: Optional[TrainState] = None,
) -> tuple[TrainState, list[StepMetrics]]:
    """Run the outer loop for config.steps steps; deterministic in run_seed."""
    if not scenarios:
        raise ValueError("train requires at least one scenario")
    if state is None:
        state = init_state(scenarios, config)
    metrics: list[StepMetrics] = []
    for step in range(state.step, state.step + config.steps):
        tasks = build_step_prompts(scenarios, config, step)
        metrics.append(train_step(state, tasks, config, judge))
        if checkpoint_cb and checkpoint_interval > 0 and state.step % checkpoint_interval == 0:
            checkpoint_cb(state)
    if checkpoint_cb:
        checkpoint_cb(state)
    return state, metrics
