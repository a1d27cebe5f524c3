"""Evaluation methodology at desk scale.

Perplexity vs context length, sliding-window perplexity, passkey retrieval
(generation, grid evaluation, fine-tuning), phonebook retrieval, and the
attention/selection entropy diagnostics. Evaluation text is byte-tokenized
like everything else; "document length" is measured in bytes.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .inference import GenerateConfig, Session, full_logits, generate
from .model import Model
from .training import AdamWState, TrainConfig, accumulate_gradients, optimizer_step


def worker_count() -> int:
    env = os.environ.get("SAMBA_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parallel_map(fn, items):
    """Ordered map over independent work items; SAMBA_THREADS caps workers."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# perplexity
# ---------------------------------------------------------------------------


@dataclass
class PplRow:
    context_length: int
    perplexity: float
    token_count: int


@dataclass
class PplReport:
    arch: str
    rows: list[PplRow]


def _nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return lse - logits[np.arange(len(targets)), targets]


def _bytes_to_ids(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def ppl_at_lengths(model: Model, data: bytes, lengths) -> PplReport:
    """exp(mean NLL) over non-overlapping L-sized chunks, per length L."""
    ids = _bytes_to_ids(data)
    rows = []
    for length in lengths:
        if length < 2:
            raise ConfigError(f"context length must be >= 2, got {length}")
        n_chunks = ids.size // length
        if n_chunks < 1:
            raise ConfigError(
                f"insufficient data: {ids.size} bytes for context length {length}"
            )
        def chunk_nll(c, length=length):
            chunk = ids[c * length : (c + 1) * length]
            logits = full_logits(Session(model), chunk[:-1])
            return float(_nll(logits, chunk[1:]).sum())
        totals = parallel_map(chunk_nll, range(n_chunks))
        count = n_chunks * (length - 1)
        rows.append(PplRow(length, float(np.exp(sum(totals) / count)), count))
    return PplReport(model.config.arch, rows)


def ppl_sliding(model: Model, data: bytes, eval_window: int, stride: int) -> float:
    """Overlapping-window perplexity scoring the last ``stride`` targets per window.

    The first window scores all its targets (it has no predecessor).
    """
    if eval_window < stride:
        raise ContractError(f"eval_window {eval_window} < stride {stride}")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    ids = _bytes_to_ids(data)
    if ids.size < eval_window:
        raise ConfigError(f"insufficient data: {ids.size} bytes for window {eval_window}")
    total = 0.0
    count = 0
    start = 0
    while start + eval_window <= ids.size:
        win = ids[start : start + eval_window]
        logits = full_logits(Session(model), win[:-1])
        nll = _nll(logits, win[1:])
        scored = nll if start == 0 else nll[-stride:]
        total += float(scored.sum())
        count += scored.size
        start += stride
    return float(np.exp(total / count))


# ---------------------------------------------------------------------------
# passkey retrieval
# ---------------------------------------------------------------------------

FILLER = ("The grass is green. The sky is blue. The sun is yellow. "
          "Here we go. There and back again. ")
KEY_SENTENCE = "The pass key is {key}. Remember it. {key} is the pass key."
QUERY = "What is the pass key? The pass key is"
PASSKEY_DEPTHS = tuple(round(i / 10, 1) for i in range(11))
_KEY_SENTENCE_LEN = len(KEY_SENTENCE.format(key="00000"))


def passkey_make(doc_len: int, depth: float, rng: np.random.Generator) -> tuple[bytes, str]:
    """Filler document with the key sentence inserted at floor(depth*doc_len)."""
    if not 0.0 <= depth <= 1.0:
        raise ContractError(f"depth must be in [0, 1], got {depth}")
    if doc_len < _KEY_SENTENCE_LEN:
        raise ConfigError(
            f"doc_len {doc_len} too short for the key sentence ({_KEY_SENTENCE_LEN} bytes)"
        )
    key = f"{rng.integers(10000, 100000)}"
    sentence = KEY_SENTENCE.format(key=key)
    reps = doc_len // len(FILLER) + 1
    filler = (FILLER * reps)[:doc_len]
    pos = int(np.floor(depth * doc_len))
    prompt = filler[:pos] + "\n" + sentence + "\n" + filler[pos:] + "\n" + QUERY
    return prompt.encode("ascii"), key


def passkey_score(generated: bytes, answer: str) -> bool:
    """Exact match of the 5-digit string, whitespace stripped."""
    return generated.decode("ascii", errors="replace").strip()[:5] == answer


@dataclass
class PasskeyGrid:
    lengths: list[int]
    depths: tuple[float, ...]
    acc: np.ndarray  # (len(lengths), len(depths))
    trials: int

    def mean_at(self, length: int) -> float:
        return float(self.acc[self.lengths.index(length)].mean())


def passkey_eval(model: Model, lengths, trials: int = 5, seed: int = 0,
                 max_new: int = 8) -> PasskeyGrid:
    """Greedy-decode accuracy per (document length, depth) cell."""
    lengths = list(lengths)
    cells = [(i, j) for i in range(len(lengths)) for j in range(len(PASSKEY_DEPTHS))]

    def run_cell(cell):
        i, j = cell
        hits = 0
        for trial in range(trials):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, 0x9A55, lengths[i], j, trial])
            )
            prompt, answer = passkey_make(lengths[i], PASSKEY_DEPTHS[j], rng)
            session = Session(model)
            out = generate(session, _bytes_to_ids(prompt),
                           GenerateConfig(mode="greedy", max_new_tokens=max_new))
            hits += passkey_score(bytes(out), answer)
        return hits / trials

    flat = parallel_map(run_cell, cells)
    acc = np.array(flat).reshape(len(lengths), len(PASSKEY_DEPTHS))
    return PasskeyGrid(lengths, PASSKEY_DEPTHS, acc, trials)


def passkey_finetune(model: Model, train_doc_len: int, steps: int, cfg: TrainConfig,
                     log=None) -> list[float]:
    """Fine-tune on on-the-fly passkey documents, loss masked to the answer digits.

    Uses cfg.batch_size / optimizer settings; the schedule runs over ``steps``
    (cfg.total_steps is overridden). Returns the per-step loss log.
    """
    cfg = TrainConfig(**{**cfg.to_dict(), "total_steps": steps})
    cfg.validate()
    opt = AdamWState(model)
    losses: list[float] = []
    for step in range(1, steps + 1):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF17E, step]))
        rows = []
        masks = []
        for _ in range(cfg.batch_size):
            prompt, answer = passkey_make(train_doc_len, float(rng.uniform(0, 1)), rng)
            seq = _bytes_to_ids(prompt + b" " + answer.encode("ascii"))
            mask = np.zeros(seq.size - 1)
            mask[-5:] = 1.0  # score only the five digit targets
            rows.append(seq)
            masks.append(mask)
        model.zero_grad()
        loss = accumulate_gradients(model, np.stack(rows), masks=masks)
        optimizer_step(model, opt, cfg, step)
        losses.append(loss)
        if log is not None and (step % cfg.log_every == 0 or step == steps):
            log(step, loss)
    return losses


# ---------------------------------------------------------------------------
# phonebook retrieval
# ---------------------------------------------------------------------------

_FIRST = ("Ada Ben Cay Dee Eli Fay Gus Hal Ida Jan Kim Lee Mia Ned Ora Pia "
          "Quin Rex Sue Tod Una Val Wes Xan Yve Zed").split()
_LAST = ("Ash Bell Cole Dane Eads Fox Gray Hart Iver Jones King Lane Moss "
         "Nash Orr Pike Reed Shaw Tate Vance West York Zinn Cruz Bond Hale").split()


def phonebook_make(n_pairs: int, rng: np.random.Generator) -> tuple[bytes, str]:
    """Name/number directory plus a query for one uniformly chosen entry."""
    if n_pairs < 2:
        raise ContractError(f"phonebook needs >= 2 pairs, got {n_pairs}")
    capacity = len(_FIRST) * len(_LAST)
    if n_pairs > capacity:
        raise ConfigError(f"phonebook supports at most {capacity} distinct names")
    picks = rng.choice(capacity, size=n_pairs, replace=False)
    names = [f"{_FIRST[i % len(_FIRST)]} {_LAST[i // len(_FIRST)]}" for i in picks]
    numbers: list[str] = []
    seen = set()
    while len(numbers) < n_pairs:
        num = (f"{rng.integers(200, 1000)}-{rng.integers(0, 1000):03d}-"
               f"{rng.integers(0, 10000):04d}")
        if num not in seen:
            seen.add(num)
            numbers.append(num)
    book = "".join(f"{name}: {num}\n" for name, num in zip(names, numbers))
    qi = int(rng.integers(n_pairs))
    prompt = book + f"What is {names[qi]}'s phone number? {names[qi]}'s phone number is"
    return prompt.encode("ascii"), numbers[qi]


def phonebook_eval(model: Model, pair_counts, trials: int = 5, seed: int = 0) -> list[tuple[int, float]]:
    """Greedy-decode accuracy per phonebook size (exact number match)."""
    def run(n_pairs):
        hits = 0
        for trial in range(trials):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9B00, n_pairs, trial]))
            prompt, answer = phonebook_make(n_pairs, rng)
            out = generate(Session(model), _bytes_to_ids(prompt),
                           GenerateConfig(mode="greedy", max_new_tokens=14))
            hits += bytes(out).decode("ascii", errors="replace").strip()[: len(answer)] == answer
        return hits / trials

    return [(n, acc) for n, acc in zip(pair_counts, parallel_map(run, list(pair_counts)))]


# ---------------------------------------------------------------------------
# entropy diagnostics
# ---------------------------------------------------------------------------


class DiagRecorder:
    """Collects per-layer attention row entropies and selective gates.

    Hooks only copy values produced by the forward pass, so recording never
    perturbs the computation.
    """

    def __init__(self):
        self.row_entropies: dict[int, list[np.ndarray]] = {}
        self.deltas: dict[int, list[np.ndarray]] = {}

    def probs_hook(self, layer_idx: int):
        def hook(probs: np.ndarray) -> None:
            self.row_entropies.setdefault(layer_idx, []).append(entropy_rows(probs))
        return hook

    def delta_hook(self, layer_idx: int):
        def hook(delta: np.ndarray) -> None:
            self.deltas.setdefault(layer_idx, []).append(delta)
        return hook

    def layer_row_entropies(self, layer_idx: int) -> np.ndarray:
        return np.concatenate(self.row_entropies[layer_idx], axis=1)

    def layer_delta(self, layer_idx: int) -> np.ndarray:
        return np.concatenate(self.deltas[layer_idx], axis=0)


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy of each attention row: (heads, rows, keys) -> (heads, rows)."""
    terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return -terms.sum(axis=2)


def attention_entropy_from_rows(row_entropies: np.ndarray, l: int) -> float:
    """Average of the last l rows over heads: (heads, n) -> scalar."""
    h, n = row_entropies.shape
    return float(row_entropies[:, n - l :].sum() / (l * h))


def selection_entropy_from_delta(delta: np.ndarray) -> float:
    """Entropy of the time-normalized gate per channel, averaged over channels."""
    dn = delta / delta.sum(axis=0, keepdims=True)
    terms = np.where(dn > 0, dn * np.log(np.where(dn > 0, dn, 1.0)), 0.0)
    return float(-terms.sum(axis=0).mean())


@dataclass
class EntropyEntry:
    layer_idx: int
    layer_kind: str
    entropy: float


@dataclass
class EntropyReport:
    entries: list[EntropyEntry]
    l: int
    h: int


def _record_forward(model: Model, tokens) -> DiagRecorder:
    recorder = DiagRecorder()
    full_logits(Session(model), np.asarray(tokens), recorder=recorder)
    return recorder


def attention_entropy(model: Model, tokens, l: int) -> EntropyReport:
    """Mean attention entropy of the last l positions, per attention layer."""
    tokens = np.asarray(tokens)
    n = tokens.size
    if l >= n or l < 1:
        raise ContractError(f"attention_entropy: need 1 <= l < n, got l={l}, n={n}")
    recorder = _record_forward(model, tokens)
    entries = [
        EntropyEntry(idx, "swa",
                     attention_entropy_from_rows(recorder.layer_row_entropies(idx), l))
        for idx, slot in enumerate(model.layers) if slot.kind == "swa"
    ]
    return EntropyReport(entries, l=l, h=model.config.n_q_heads)


def selection_entropy(model: Model, tokens) -> EntropyReport:
    """Mean time-normalized gate entropy over channels, per Mamba layer."""
    tokens = np.asarray(tokens)
    if tokens.size < 1:
        raise ContractError("selection_entropy: empty token sequence")
    recorder = _record_forward(model, tokens)
    entries = [
        EntropyEntry(idx, "mamba", selection_entropy_from_delta(recorder.layer_delta(idx)))
        for idx, slot in enumerate(model.layers) if slot.kind == "mamba"
    ]
    return EntropyReport(entries, l=0, h=model.config.n_q_heads)


def entropy_report(model: Model, tokens, l: int) -> EntropyReport:
    """Both diagnostics from a single recorded forward, ordered by layer."""
    tokens = np.asarray(tokens)
    n = tokens.size
    if l >= n or l < 1:
        raise ContractError(f"entropy_report: need 1 <= l < n, got l={l}, n={n}")
    recorder = _record_forward(model, tokens)
    entries = []
    for idx, slot in enumerate(model.layers):
        if slot.kind == "swa":
            entries.append(EntropyEntry(
                idx, "swa",
                attention_entropy_from_rows(recorder.layer_row_entropies(idx), l)))
        elif slot.kind == "mamba":
            entries.append(EntropyEntry(
                idx, "mamba", selection_entropy_from_delta(recorder.layer_delta(idx))))
    return EntropyReport(entries, l=l, h=model.config.n_q_heads)
