"""Byte-level training: AdamW, warmup-cosine schedule, clipping, checkpoints.

Determinism contract: all randomness in a run flows from TrainConfig.seed.
Each step's batch is drawn from a generator keyed by (seed, step), so the
"batching RNG state" needed for exact resume is just the step counter, which
the checkpoint stores. Checkpoints hold f32 tensors; to keep resumed runs
bit-identical to straight-through runs, the live parameters and optimizer
moments are rounded through f32 at every checkpoint cadence before saving.
"""

from __future__ import annotations

import dataclasses
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    NumericError,
)
from .model import Model, ModelConfig, build
from .numerics import Tape, assert_finite, backward, recording

MAGIC = b"SMBC"
VERSION = 1
DTYPE_F32 = 0
OPT_TABLE_TAG = 0x4F


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    batch_size: int = 4
    seq_len: int = 256
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    log_every: int = 50

    def validate(self) -> None:
        problems = []
        if self.warmup_steps > self.total_steps:
            problems.append(
                f"warmup_steps={self.warmup_steps} > total_steps={self.total_steps}"
            )
        for name in ("peak_lr", "clip_norm", "adam_eps"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be > 0")
        for name in ("total_steps", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.seq_len < 2:
            problems.append("seq_len must be >= 2")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.warmup_steps < 0:
            problems.append("weight_decay and warmup_steps must be >= 0")
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls) if f.name in d})


@dataclass
class Corpus:
    data: bytes
    name: str = "corpus"

    @property
    def length(self) -> int:
        return len(self.data)

    def tokens(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8).astype(np.int64)


def load_corpus(path) -> Corpus:
    path = Path(path)
    return Corpus(path.read_bytes(), name=path.name)


class AdamWState:
    """First/second moments per parameter plus the shared step counter."""

    def __init__(self, model: Model):
        self.m = {p.name: np.zeros_like(p.tensor.data) for p in model.parameters()}
        self.v = {p.name: np.zeros_like(p.tensor.data) for p in model.parameters()}
        self.step = 0


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to 0.1*peak at total_steps."""
    if step < 0 or step > cfg.total_steps:
        raise ConfigError(f"lr_at: step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span if span > 0 else 1.0
    return cfg.peak_lr * (0.1 + 0.45 * (1.0 + np.cos(np.pi * progress)))


def global_grad_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_global_norm(grads, max_norm: float = 1.0) -> float:
    """Scale all grads so the global L2 norm is at most max_norm; returns the scale."""
    norm = global_grad_norm(grads)
    if not np.isfinite(norm):
        bad = [i for i, g in enumerate(grads) if not np.isfinite(g).all()]
        raise NumericError(f"clip_global_norm: non-finite gradients in tensors {bad[:8]}")
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= scale
    return scale


def adamw_step(params, state: AdamWState, lr: float, cfg: TrainConfig) -> None:
    """Decoupled AdamW with bias correction; decay skips tagged parameters."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for spec in params:
        g = spec.tensor.grad
        if g is None:
            continue
        p = spec.tensor.data
        if spec.decay and cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        m = state.m[spec.name]
        v = state.v[spec.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def batch_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C4, step]))


def sample_batch(corpus: Corpus, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform random windows of seq_len+1 byte ids, shape (batch, seq_len+1)."""
    n = corpus.length
    need = cfg.seq_len + 1
    if n < need:
        raise ConfigError(f"corpus {corpus.name!r} has {n} bytes; needs >= {need}")
    ids = corpus.tokens()
    starts = rng.integers(0, n - need + 1, size=cfg.batch_size)
    return np.stack([ids[s : s + need] for s in starts])


@dataclass
class StepMetrics:
    step: int
    loss: float
    lr: float
    grad_norm: float
    tok_per_s: float
    wall_ms: float


METRICS_HEADER = "step,loss,lr,grad_norm,tok_per_s,wall_ms"


def accumulate_gradients(model: Model, rows: np.ndarray, masks=None) -> float:
    """Backprop each row on its own tape, summing grads; returns mean loss.

    Rows are processed in order (fixed reduction order); grads are then
    scaled by 1/batch so the result is the gradient of the mean loss.
    """
    nrows = rows.shape[0]
    losses = []
    for i in range(nrows):
        tape = Tape()
        with recording(tape):
            loss = model.loss(rows[i], mask=None if masks is None else masks[i])
        assert_finite(loss, f"loss (row {i})")
        backward(loss, tape)
        losses.append(loss.item())
    inv = 1.0 / nrows
    for spec in model.parameters():
        if spec.tensor.grad is not None:
            spec.tensor.grad *= inv
    return float(np.mean(losses))


def optimizer_step(model: Model, opt: AdamWState, cfg: TrainConfig, step: int) -> tuple[float, float]:
    """Clip + AdamW at the step's scheduled lr. Returns (grad_norm, lr)."""
    grads = [p.tensor.grad for p in model.parameters() if p.tensor.grad is not None]
    norm = global_grad_norm(grads)
    if not np.isfinite(norm):
        raise NumericError(f"step {step}: gradient norm is not finite")
    clip_global_norm(grads, cfg.clip_norm)
    lr = lr_at(step, cfg)
    adamw_step(model.parameters(), opt, lr, cfg)
    return norm, lr


def quantize_live_state(model: Model, opt: AdamWState | None) -> None:
    """Round live params and moments through f32 (checkpoint precision)."""
    for spec in model.parameters():
        spec.tensor.data = spec.tensor.data.astype(np.float32).astype(np.float64)
    if opt is not None:
        for table in (opt.m, opt.v):
            for name in table:
                table[name] = table[name].astype(np.float32).astype(np.float64)


def train_loop(model: Model, corpus: Corpus, cfg: TrainConfig, out_dir=None,
               opt_state: AdamWState | None = None, start_step: int = 0,
               log=None) -> list[StepMetrics]:
    """Run optimization steps start_step+1 .. total_steps.

    Writes metrics.csv and periodic checkpoints under out_dir (when given).
    A non-finite loss aborts with NumericError; checkpoints already written
    stay on disk.
    """
    cfg.validate()
    opt = opt_state if opt_state is not None else AdamWState(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        fresh = not metrics_path.exists() or start_step == 0
        metrics_file = open(metrics_path, "w" if fresh else "a")
        if fresh:
            print(METRICS_HEADER, file=metrics_file, flush=True)

    history: list[StepMetrics] = []
    try:
        for step in range(start_step + 1, cfg.total_steps + 1):
            t0 = time.perf_counter()
            rows = sample_batch(corpus, cfg, batch_rng(cfg.seed, step))
            model.zero_grad()
            try:
                loss = accumulate_gradients(model, rows)
                norm, lr = optimizer_step(model, opt, cfg, step)
            except NumericError as exc:
                raise NumericError(
                    f"aborting at step {step}: {exc} (last checkpoint retained)"
                ) from exc
            wall = time.perf_counter() - t0
            rec = StepMetrics(step, loss, lr, norm,
                              cfg.batch_size * cfg.seq_len / wall, wall * 1e3)
            history.append(rec)
            if metrics_file is not None:
                print(f"{rec.step},{rec.loss:.6f},{rec.lr:.8g},{rec.grad_norm:.6g},"
                      f"{rec.tok_per_s:.1f},{rec.wall_ms:.2f}",
                      file=metrics_file, flush=True)
            if log is not None and (step % cfg.log_every == 0 or step == cfg.total_steps):
                log(rec)
            at_cadence = cfg.checkpoint_every and step % cfg.checkpoint_every == 0
            if at_cadence or step == cfg.total_steps:
                # rounding before save keeps resumed and straight-through runs
                # bit-identical at f32 checkpoint precision
                quantize_live_state(model, opt)
                if out_dir is not None:
                    name = f"ckpt_{step:06d}.smbc" if at_cadence else "ckpt_final.smbc"
                    save_checkpoint(model, opt, cfg, out_dir / name, step=step)
                    if at_cadence and step == cfg.total_steps:
                        save_checkpoint(model, opt, cfg, out_dir / "ckpt_final.smbc",
                                        step=step)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return history


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------
#
# magic "SMBC" | u32 version | u64 blob_len + key=value lines (utf-8)
# | u64 tensor count | records | u8 0x4F | u64 opt tensor count | records
# record: u16 name_len, name, u8 rank, u64 dims..., u8 dtype (0=f32), payload


def _encode_blob(model_cfg: ModelConfig, train_cfg: TrainConfig | None, step: int,
                 adam_step: int) -> bytes:
    lines = [f"model.{k}={v}" for k, v in model_cfg.to_dict().items()]
    if train_cfg is not None:
        lines += [f"train.{k}={v}" for k, v in train_cfg.to_dict().items()]
    lines.append(f"meta.step={step}")
    lines.append(f"meta.adam_step={adam_step}")
    return "\n".join(lines).encode("utf-8")


def _parse_typed(fields, raw: dict) -> dict:
    out = {}
    for f in fields:
        if f.name not in raw:
            continue
        v = raw[f.name]
        if f.type in ("int", int):
            out[f.name] = int(v)
        elif f.type in ("float", float):
            out[f.name] = float(v)
        elif f.type in ("bool", bool):
            out[f.name] = v == "True"
        else:
            out[f.name] = v
    return out


def _decode_blob(blob: bytes) -> tuple[ModelConfig, TrainConfig | None, dict]:
    sections: dict[str, dict] = {"model": {}, "train": {}, "meta": {}}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        prefix, _, name = key.partition(".")
        sections.setdefault(prefix, {})[name] = value
    model_cfg = ModelConfig(**_parse_typed(dataclasses.fields(ModelConfig), sections["model"]))
    train_cfg = None
    if sections["train"]:
        train_cfg = TrainConfig(**_parse_typed(dataclasses.fields(TrainConfig), sections["train"]))
    meta = {k: int(v) for k, v in sections["meta"].items()}
    return model_cfg, train_cfg, meta


def _write_record(out: bytearray, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    out += struct.pack("<H", len(nb))
    out += nb
    out += struct.pack("<B", arr.ndim)
    for dim in arr.shape:
        out += struct.pack("<Q", dim)
    out += struct.pack("<B", DTYPE_F32)
    out += np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated at byte {self.pos} (needed {n} more)"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def record(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u16()).decode("utf-8")
        rank = self.u8()
        dims = tuple(self.u64() for _ in range(rank))
        dtype = self.u8()
        if dtype != DTYPE_F32:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {dtype}")
        count = int(np.prod(dims)) if dims else 1
        raw = self.take(4 * count)
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
        return name, arr


def save_checkpoint(model: Model, opt_state: AdamWState | None, train_cfg: TrainConfig | None,
                    path, step: int = 0) -> None:
    """Serialize model (and optimizer) tensors as f32 in registry order."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    blob = _encode_blob(model.config, train_cfg, step,
                        opt_state.step if opt_state is not None else 0)
    out += struct.pack("<Q", len(blob))
    out += blob
    params = model.parameters()
    out += struct.pack("<Q", len(params))
    for spec in params:
        _write_record(out, spec.name, spec.tensor.data)
    out += struct.pack("<B", OPT_TABLE_TAG)
    if opt_state is None:
        out += struct.pack("<Q", 0)
    else:
        out += struct.pack("<Q", 2 * len(params))
        for spec in params:
            _write_record(out, f"adam.m.{spec.name}", opt_state.m[spec.name])
        for spec in params:
            _write_record(out, f"adam.v.{spec.name}", opt_state.v[spec.name])
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, cfg: ModelConfig | None = None):
    """Read a checkpoint -> (model, opt_state or None, train_cfg or None, meta).

    With ``cfg`` the model is built from the caller's config and every stored
    tensor must match its shape (CheckpointShapeError otherwise); without it
    the stored config is used.
    """
    rd = _Reader(Path(path).read_bytes())
    if rd.take(4) != MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint (bad magic)")
    version = rd.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    model_cfg, train_cfg, meta = _decode_blob(rd.take(rd.u64()))
    model = build(cfg if cfg is not None else model_cfg)
    by_name = {p.name: p.tensor for p in model.parameters()}

    n_model = rd.u64()
    for _ in range(n_model):
        name, arr = rd.record()
        if name not in by_name:
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
        target = by_name[name]
        if arr.shape != target.data.shape:
            raise CheckpointShapeError(
                f"tensor {name!r}: stored shape {arr.shape} != model shape {target.data.shape}"
            )
        target.data = arr

    if rd.u8() != OPT_TABLE_TAG:
        raise CheckpointError("missing optimizer table separator")
    n_opt = rd.u64()
    opt_state = None
    if n_opt:
        opt_state = AdamWState(model)
        opt_state.step = meta.get("adam_step", 0)
        for _ in range(n_opt):
            name, arr = rd.record()
            if name.startswith("adam.m."):
                table, pname = opt_state.m, name[len("adam.m."):]
            elif name.startswith("adam.v."):
                table, pname = opt_state.v, name[len("adam.v."):]
            else:
                raise CheckpointError(f"unexpected optimizer tensor {name!r}")
            if pname not in table:
                raise CheckpointError(f"optimizer tensor {name!r} has no matching parameter")
            if arr.shape != table[pname].shape:
                raise CheckpointShapeError(
                    f"tensor {name!r}: stored shape {arr.shape} != expected {table[pname].shape}"
                )
            table[pname] = arr
    return model, opt_state, train_cfg, meta


# ---------------------------------------------------------------------------
# deterministic synthetic corpus
# ---------------------------------------------------------------------------

_NOUNS = (
    "river valley mountain forest harbor garden lantern engine library bridge "
    "market tower meadow island cavern mill orchard workshop archive furnace "
    "compass ledger telescope granary canal quarry vineyard lighthouse "
    "observatory windmill"
).split()
_ADJS = (
    "quiet ancient bright narrow broad distant frozen amber hollow patient "
    "restless gilded weathered humble vast crooked silver mossy tranquil stormy"
).split()
_VERBS_I = (
    "waits sleeps endures shimmers crumbles stands drifts turns hums settles"
).split()
_VERBS_T = (
    "guards overlooks feeds shelters mirrors crosses borders records restores powers"
).split()
_NAMES = (
    "Aldren Berin Calla Doran Elsin Fenra Garet Hollis Imre Jessa Kiran Lorin "
    "Maren Nolan Orla Petra Quill Rowan Senna Tovin"
).split()
_TIMES = "dawn dusk noon midnight spring autumn harvest winter".split()

_TEMPLATES = (
    "The {adj} {noun} {vi} beyond the {noun2}.",
    "{name} walked from the {noun} to the {noun2} at {time}.",
    "At {time} the {noun} {vt} the {adj} {noun2}.",
    "Every {time}, {name} tends the {adj} {noun}.",
    "The {noun} near the {noun2} is {adj} and {adj2}.",
    "{name} told {name2} about the {adj} {noun} by the {noun2}.",
    "No one remembers why the {noun} {vi} at {time}.",
    "Between the {noun} and the {noun2} lies a {adj} path.",
    "The ledger records {num} barrels and {num2} crates.",
    "{name} counted {num} lanterns before {time}.",
    "In the year {year} the {noun} sheltered {num} travelers.",
)


def synthetic_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic English-like filler text with sentence/paragraph structure.

    A slice of the templates carries numbers so all byte values that later
    evaluations rely on (digits included) are in-distribution.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0395]))
    parts: list[str] = []
    total = 0
    while total < n_bytes:
        sentences = []
        for _ in range(int(rng.integers(3, 8))):
            t = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
            sentences.append(t.format(
                adj=_ADJS[int(rng.integers(len(_ADJS)))],
                adj2=_ADJS[int(rng.integers(len(_ADJS)))],
                noun=_NOUNS[int(rng.integers(len(_NOUNS)))],
                noun2=_NOUNS[int(rng.integers(len(_NOUNS)))],
                vi=_VERBS_I[int(rng.integers(len(_VERBS_I)))],
                vt=_VERBS_T[int(rng.integers(len(_VERBS_T)))],
                name=_NAMES[int(rng.integers(len(_NAMES)))],
                name2=_NAMES[int(rng.integers(len(_NAMES)))],
                time=_TIMES[int(rng.integers(len(_TIMES)))],
                num=int(rng.integers(2, 10000)),
                num2=int(rng.integers(2, 10000)),
                year=int(rng.integers(1200, 2000)),
            ))
        para = " ".join(sentences) + "\n\n"
        parts.append(para)
        total += len(para)
    return "".join(parts).encode("ascii")[:n_bytes]
