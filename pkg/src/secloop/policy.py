"""Trainable strategy generator: a tabular autoregressive policy.

The policy is categorical over a small strategy-token vocabulary,
conditioned on (prompt bucket, last k tokens). Log-probabilities and
gradients are closed-form, so the optimizer above it can be verified
against finite differences instead of trusted.

Token sequences frame a strategy as BEGIN call (CALL_SEP call)* END,
where a call is a tool-name token followed by PARAM_SEP-separated value
tokens filling the tool's param schema positionally.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import SecurityStrategy, ToolCall, ToolSpec, serialize_strategy
from .summarizer import PROMPT_FORMAT_VERSION, Prompt

CHECKPOINT_MAGIC = b"SLPW"
CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-12

BEGIN, END, CALL_SEP, PARAM_SEP = 0, 1, 2, 3
STRUCTURAL_TOKENS = ("<begin>", "<end>", "<next>", "<arg>")


class UnknownToken(Exception):
    pass


class CheckpointError(Exception):
    pass


class PromptVersionMismatch(CheckpointError):
    """Checkpoint was trained against a different prompt rendering."""


@dataclass(frozen=True)
class Vocabulary:
    """Structural tokens, then tool names, then parameter value tokens."""

    tokens: tuple[str, ...]
    index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if self.tokens[: len(STRUCTURAL_TOKENS)] != STRUCTURAL_TOKENS:
            raise ValueError("vocabulary must start with the structural tokens")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_inventory(cls, inventory: Sequence[ToolSpec]) -> "Vocabulary":
        names = sorted({spec.name for spec in inventory})
        values = sorted(
            {v for spec in inventory for _, domain in spec.param_schema for v in domain}
            - set(names)
        )
        return cls(tokens=STRUCTURAL_TOKENS + tuple(names) + tuple(values))

    @classmethod
    def from_scenarios(cls, scenarios) -> "Vocabulary":
        specs = [spec for sc in scenarios for spec in sc.inventory]
        return cls.from_inventory(specs)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class PolicyWeights:
    """Dense logit table over (prompt bucket x k-token history) contexts."""

    vocab: Vocabulary
    buckets: int  # prompt hash buckets (H)
    order: int  # Markov order (k)
    logits: np.ndarray  # shape (buckets * V**order, V), float64
    version: int = CHECKPOINT_VERSION
    prompt_format_version: int = PROMPT_FORMAT_VERSION

    def __post_init__(self) -> None:
        v = len(self.vocab)
        expected = (self.buckets * v**self.order, v)
        if self.logits.shape != expected:
            raise ValueError(f"logit table must have shape {expected}")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @classmethod
    def uniform(cls, vocab: Vocabulary, buckets: int = 64, order: int = 2) -> "PolicyWeights":
        v = len(vocab)
        return cls(
            vocab=vocab,
            buckets=buckets,
            order=order,
            logits=np.zeros((buckets * v**order, v), dtype=np.float64),
        )

    def copy(self) -> "PolicyWeights":
        return PolicyWeights(
            vocab=self.vocab,
            buckets=self.buckets,
            order=self.order,
            logits=self.logits.copy(),
            version=self.version,
            prompt_format_version=self.prompt_format_version,
        )

    def context_ids(self, bucket: int, tokens: Sequence[int]) -> list[int]:
        """Context row visited before emitting each token.

        History is the last `order` tokens, left-padded with END at the
        sequence boundary.
        """
        v = len(self.vocab)
        if not 0 <= bucket < self.buckets:
            raise ValueError(f"bucket {bucket} out of range")
        history = [END] * self.order
        ids = []
        for tok in tokens:
            if not 0 <= tok < v:
                raise UnknownToken(tok)
            ctx = 0
            for h in history:
                ctx = ctx * v + h
            ids.append(bucket * v**self.order + ctx)
            if self.order:
                history = history[1:] + [tok]
        return ids


def _softmax(row: np.ndarray) -> np.ndarray:
    z = np.exp(row - row.max())
    return z / z.sum()


def _floored_log(p: float) -> float:
    return float(np.log(max(p, PROB_FLOOR)))


@dataclass(frozen=True)
class Trajectory:
    """One generated token sequence with its exact log-probabilities."""

    prompt: Prompt
    tokens: tuple[int, ...]
    per_token_logprob: tuple[float, ...]
    total_logprob: float


def sample(
    weights: PolicyWeights,
    prompt: Prompt,
    max_len: int = 24,
    temperature: float = 1.0,
    rng_seed: int = 0,
) -> Trajectory:
    """Autoregressive sampling, deterministic in rng_seed.

    Temperature skews the sampling distribution only; the recorded
    log-probabilities are always the policy's own (temperature-1) values,
    so importance ratios stay well-defined.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    rng = random.Random(rng_seed)
    v = len(weights.vocab)
    bucket = prompt.context_hash
    history = [END] * weights.order
    tokens: list[int] = []
    logps: list[float] = []
    for _ in range(max_len):
        ctx = 0
        for h in history:
            ctx = ctx * v + h
        row = weights.logits[bucket * v**weights.order + ctx]
        probs = _softmax(row / temperature) if temperature != 1.0 else _softmax(row)
        u = rng.random()
        acc = 0.0
        tok = v - 1
        for i, p in enumerate(probs):
            acc += p
            if u < acc:
                tok = i
                break
        true_probs = probs if temperature == 1.0 else _softmax(row)
        tokens.append(tok)
        logps.append(_floored_log(float(true_probs[tok])))
        if weights.order:
            history = history[1:] + [tok]
        if tok == END:
            break
    return Trajectory(
        prompt=prompt,
        tokens=tuple(tokens),
        per_token_logprob=tuple(logps),
        total_logprob=float(sum(logps)),
    )


def greedy(weights: PolicyWeights, prompt: Prompt, max_len: int = 24) -> Trajectory:
    """Deterministic argmax decoding (ties take the lowest token index)."""
    v = len(weights.vocab)
    bucket = prompt.context_hash
    history = [END] * weights.order
    tokens: list[int] = []
    logps: list[float] = []
    for _ in range(max_len):
        ctx = 0
        for h in history:
            ctx = ctx * v + h
        row = weights.logits[bucket * v**weights.order + ctx]
        tok = int(np.argmax(row))
        tokens.append(tok)
        logps.append(_floored_log(float(_softmax(row)[tok])))
        if weights.order:
            history = history[1:] + [tok]
        if tok == END:
            break
    return Trajectory(
        prompt=prompt,
        tokens=tuple(tokens),
        per_token_logprob=tuple(logps),
        total_logprob=float(sum(logps)),
    )


def logprob(
    weights: PolicyWeights, prompt: Prompt, tokens: Sequence[int]
) -> tuple[float, list[float]]:
    """Exact autoregressive log-probability of a token sequence."""
    per_token = []
    for ctx, tok in zip(weights.context_ids(prompt.context_hash, tokens), tokens):
        probs = _softmax(weights.logits[ctx])
        per_token.append(_floored_log(float(probs[tok])))
    return float(sum(per_token)), per_token


def grad_logprob(
    weights: PolicyWeights, prompt: Prompt, tokens: Sequence[int]
) -> dict[int, np.ndarray]:
    """Exact gradient of logprob w.r.t. the logit table, sparse by row.

    Each visited context contributes one-hot(token) - softmax(row);
    repeated visits accumulate. Unvisited rows are absent (zero).
    """
    grad: dict[int, np.ndarray] = {}
    for ctx, tok in zip(weights.context_ids(prompt.context_hash, tokens), tokens):
        row = grad.get(ctx)
        if row is None:
            row = np.zeros(len(weights.vocab), dtype=np.float64)
            grad[ctx] = row
        row -= _softmax(weights.logits[ctx])
        row[tok] += 1.0
    return grad


# ---------------------------------------------------------------------------
# Decoding token sequences into strategy text


def _malformed(words: Sequence[str], reason: str) -> str:
    return f"!malformed[{reason}] " + " ".join(words)


def decode(tokens: Sequence[int], vocab: Vocabulary, inventory: Sequence[ToolSpec]) -> str:
    """Map a token sequence to strategy text.

    Structurally valid sequences produce canonical text (so the format
    check passes even if a call later fails validation); any structural
    violation produces deliberately malformed text instead of raising.
    """
    words = [vocab.tokens[t] if 0 <= t < len(vocab) else f"<bad:{t}>" for t in tokens]
    if any(not 0 <= t < len(vocab) for t in tokens):
        return _malformed(words, "unknown-token")
    if len(tokens) < 2 or tokens[0] != BEGIN or tokens[-1] != END:
        return _malformed(words, "frame")
    interior = list(tokens[1:-1])
    if BEGIN in interior or END in interior:
        return _malformed(words, "frame")

    groups: list[list[int]] = [[]]
    for tok in interior:
        if tok == CALL_SEP:
            groups.append([])
        else:
            groups[-1].append(tok)
    if interior and any(not g for g in groups):
        return _malformed(words, "empty-call")
    if not interior:
        groups = []

    by_name = {spec.name: spec for spec in inventory}
    calls = []
    for group in groups:
        # Expected shape: word (PARAM_SEP word)*
        if group[0] == PARAM_SEP or len(group) % 2 == 0:
            return _malformed(words, "call-shape")
        if any(group[i] != PARAM_SEP for i in range(1, len(group), 2)):
            return _malformed(words, "call-shape")
        if any(group[i] == PARAM_SEP for i in range(0, len(group), 2)):
            return _malformed(words, "call-shape")
        name = vocab.tokens[group[0]]
        values = [vocab.tokens[t] for t in group[2::2]]
        spec = by_name.get(name)
        if spec is not None and len(values) == len(spec.param_schema):
            params = tuple(zip(spec.param_names, values))
        else:
            # Unknown tool or wrong arity: still canonical text, but the
            # call will fail inventory validation downstream.
            params = tuple((f"arg{i}", v) for i, v in enumerate(values))
        calls.append(ToolCall(tool_name=name, params=params))
    return serialize_strategy(SecurityStrategy.from_calls(calls))


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian):
#   "SLPW" | u32 version | u32 prompt_format_version | u32 buckets |
#   u32 order | u32 V | V x (u16 len + utf-8 bytes) | rows*V f64


def save_checkpoint(weights: PolicyWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIII",
                weights.version,
                weights.prompt_format_version,
                weights.buckets,
                weights.order,
                len(weights.vocab),
            )
        )
        for token in weights.vocab.tokens:
            raw = token.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(weights.logits, dtype="<f8").tobytes())


def load_checkpoint(path) -> PolicyWeights:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a policy checkpoint")
        version, pfv, buckets, order, v = struct.unpack("<IIIII", fh.read(20))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        if pfv != PROMPT_FORMAT_VERSION:
            raise PromptVersionMismatch(
                f"{path}: checkpoint prompt format v{pfv} != current v{PROMPT_FORMAT_VERSION}"
            )
        tokens = []
        for _ in range(v):
            (n,) = struct.unpack("<H", fh.read(2))
            tokens.append(fh.read(n).decode("utf-8"))
        rows = buckets * v**order
        data = fh.read(rows * v * 8)
        if len(data) != rows * v * 8 or fh.read(1):
            raise CheckpointError(f"{path}: truncated or oversized logit table")
        logits = np.frombuffer(data, dtype="<f8").reshape(rows, v).copy()
    return PolicyWeights(
        vocab=Vocabulary(tokens=tuple(tokens)),
        buckets=buckets,
        order=order,
        logits=logits,
        version=version,
        prompt_format_version=pfv,
    )
