"""Constant-memory streaming inference and throughput benchmarking.

A Session owns one stream's per-layer state (recurrent state for Mamba
layers, KV ring for attention layers, nothing for MLPs). Prefill processes
the prompt with full-sequence layer forwards in window-sized chunks, landing
in exactly the state a token-by-token replay would produce; decode then
advances one token at a time through the layer step functions. The state
footprint never grows with tokens seen.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .layers import mamba_step, swa_step
from .model import Model
from .numerics import sigmoid_np, softmax_np


class Session:
    def __init__(self, model: Model, chunk: int | None = None):
        self.model = model
        self.states = model.fresh_states()
        self.tokens_seen = 0
        self.chunk = chunk if chunk is not None else model.config.w
        if self.chunk < 1:
            raise ContractError(f"chunk must be >= 1, got {self.chunk}")

    def state_nbytes(self) -> int:
        return sum(s.nbytes() for s in self.states if s is not None)


def _forward_chunk(session: Session, tokens: np.ndarray, recorder=None) -> np.ndarray:
    logits = session.model.forward(
        tokens, states=session.states, pos_offset=session.tokens_seen, recorder=recorder
    )
    session.tokens_seen += len(tokens)
    return logits.data


def full_logits(session: Session, tokens, recorder=None) -> np.ndarray:
    """All-position logits for ``tokens``, computed in bounded-memory chunks."""
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise ContractError("full_logits: empty token sequence")
    pieces = [
        _forward_chunk(session, tokens[s : s + session.chunk], recorder=recorder)
        for s in range(0, tokens.size, session.chunk)
    ]
    return np.concatenate(pieces, axis=0)


def prefill(session: Session, prompt) -> np.ndarray:
    """Process the prompt, depositing stream state; returns last-position logits."""
    prompt = np.asarray(prompt)
    if prompt.size == 0:
        raise ContractError("prefill: empty prompt")
    return full_logits(session, prompt)[-1]


def _rmsnorm_row(x: np.ndarray, gamma: np.ndarray, eps: float) -> np.ndarray:
    return x * (1.0 / np.sqrt((x * x).mean() + eps)) * gamma


def _mlp_row(x: np.ndarray, p) -> np.ndarray:
    g = x @ p.w_gate.data
    return (g * sigmoid_np(g) * (x @ p.w_up.data)) @ p.w_down.data


def decode_step(session: Session, token: int) -> np.ndarray:
    """One token through all layer step functions; returns logits over V."""
    model = session.model
    cfg = model.config
    if not 0 <= token < cfg.vocab_size:
        raise IndexError(f"decode_step: token {token} out of range [0, {cfg.vocab_size})")
    x = model.embed.data[token].copy()
    for idx, slot in enumerate(model.layers):
        h = _rmsnorm_row(x, slot.gamma.data, cfg.rms_eps)
        if slot.kind == "mamba":
            y, _ = mamba_step(h, slot.params, session.states[idx])
        elif slot.kind == "swa":
            y, _ = swa_step(h, slot.params, session.states[idx])
        else:
            y = _mlp_row(h, slot.params)
        x = x + y
    x = _rmsnorm_row(x, model.final_gamma.data, cfg.rms_eps)
    session.tokens_seen += 1
    return x @ model.head.data


@dataclass
class GenerateConfig:
    mode: str = "greedy"  # greedy | nucleus
    temperature: float = 0.2
    top_p: float = 0.95
    max_new_tokens: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("greedy", "nucleus"):
            raise ContractError(f"mode must be greedy|nucleus, got {self.mode!r}")
        if not 0 < self.top_p <= 1:
            raise ContractError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.mode == "nucleus" and self.temperature <= 0:
            raise ContractError(f"temperature must be > 0 in nucleus mode")
        if self.max_new_tokens < 0:
            raise ContractError("max_new_tokens must be >= 0")


def select_token(logits: np.ndarray, cfg: GenerateConfig, rng: np.random.Generator) -> int:
    if cfg.mode == "greedy":
        return int(np.argmax(logits))  # lowest index wins ties
    p = softmax_np(logits / cfg.temperature)
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    cut = min(int(np.searchsorted(cum, cfg.top_p)) + 1, order.size)
    keep = order[:cut]
    weights = p[keep] / p[keep].sum()
    return int(rng.choice(keep, p=weights))


def generate(session: Session, prompt, cfg: GenerateConfig) -> list[int]:
    """Prefill the prompt, then decode max_new_tokens per the sampling config."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6E4]))
    logits = prefill(session, prompt)
    out: list[int] = []
    for _ in range(cfg.max_new_tokens):
        token = select_token(logits, cfg, rng)
        out.append(token)
        logits = decode_step(session, token)
    return out


# ---------------------------------------------------------------------------
# throughput benchmarks
# ---------------------------------------------------------------------------


@dataclass
class BenchRow:
    kind: str
    length: int
    run: int
    tokens_per_s: float
    wall_ms: float


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    latencies: dict[int, np.ndarray] = field(default_factory=dict)

    def summary(self) -> list[tuple[int, float, float]]:
        """(length, mean tokens/s, stdev) per benchmarked length."""
        by_len: dict[int, list[float]] = {}
        for r in self.rows:
            by_len.setdefault(r.length, []).append(r.tokens_per_s)
        return [
            (length, float(np.mean(v)), float(np.std(v)))
            for length, v in sorted(by_len.items())
        ]


def decode_latency_profile(model: Model, steps: int, prompt=(0,)) -> np.ndarray:
    """Per-token decode wall times (seconds) over a single greedy run."""
    session = Session(model)
    logits = prefill(session, np.asarray(prompt))
    token = int(np.argmax(logits))
    times = np.empty(steps)
    for i in range(steps):
        t0 = time.perf_counter()
        logits = decode_step(session, token)
        times[i] = time.perf_counter() - t0
        token = int(np.argmax(logits))
    return times


def bench_decode(model: Model, gen_lengths, repeats: int = 10) -> BenchReport:
    """Greedy decode throughput per generation length, repeated and averaged."""
    if list(gen_lengths) != sorted(gen_lengths):
        raise ContractError("bench_decode: lengths must be ascending")
    report = BenchReport()
    for length in gen_lengths:
        for run in range(repeats):
            times = decode_latency_profile(model, length)
            wall = float(times.sum())
            report.rows.append(BenchRow("decode", length, run, length / wall, wall * 1e3))
            if run == 0:
                report.latencies[length] = times
    return report


def bench_prefill(model: Model, prompt_lengths, repeats: int = 10, seed: int = 0) -> BenchReport:
    """Prompt-processing throughput per prompt length (chunked, bounded memory)."""
    if list(prompt_lengths) != sorted(prompt_lengths):
        raise ContractError("bench_prefill: lengths must be ascending")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBE9C]))
    report = BenchReport()
    for length in prompt_lengths:
        prompt = rng.integers(0, model.config.vocab_size, size=length)
        for run in range(repeats):
            session = Session(model)
            t0 = time.perf_counter()
            prefill(session, prompt)
            wall = time.perf_counter() - t0
            report.rows.append(BenchRow("prefill", length, run, length / wall, wall * 1e3))
    return report
