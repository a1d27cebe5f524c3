"""Single entry-point command line: train, evaluate, generate, bench, verify, plot.

Config files are flat ``key=value`` lines whose keys mirror ModelConfig and
TrainConfig field names; flags override config values. Exit codes: 0 ok,
1 usage, 2 I/O, 3 numeric failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
)
from .evalsuite import (
    entropy_report,
    passkey_eval,
    passkey_finetune,
    phonebook_eval,
    ppl_at_lengths,
    ppl_sliding,
)
from .inference import GenerateConfig, Session, bench_decode, bench_prefill, generate
from .model import ModelConfig, build
from .training import (
    TrainConfig,
    load_checkpoint,
    load_corpus,
    save_checkpoint,
    train_loop,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_config_file(path: Path) -> dict[str, str]:
    """Flat key=value lines; unknown keys are rejected with their line number."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _MODEL_FIELDS and key not in _TRAIN_FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        raw[key] = value.strip()
    return raw


def _coerce(field, value: str):
    if field.type in ("int", int):
        return int(value)
    if field.type in ("float", float):
        return float(value)
    if field.type in ("bool", bool):
        if value not in ("True", "False", "true", "false", "1", "0"):
            raise UsageError(f"{field.name}: expected a boolean, got {value!r}")
        return value in ("True", "true", "1")
    return value


def split_config(raw: dict[str, str]) -> tuple[dict, dict]:
    model_kwargs, train_kwargs = {}, {}
    for key, value in raw.items():
        if key in _MODEL_FIELDS:
            model_kwargs[key] = _coerce(_MODEL_FIELDS[key], value)
        if key in _TRAIN_FIELDS:  # 'seed' feeds both configs
            train_kwargs[key] = _coerce(_TRAIN_FIELDS[key], value)
    return model_kwargs, train_kwargs


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _write_csv(path: str | None, header: str, lines) -> None:
    out = sys.stdout if path in (None, "-") else open(path, "w")
    try:
        print(header, file=out)
        for line in lines:
            print(line, file=out)
    finally:
        if out is not sys.stdout:
            out.close()


def _load_model(ckpt: str):
    model, _opt, train_cfg, meta = load_checkpoint(ckpt)
    return model, train_cfg, meta


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    raw = parse_config_file(Path(args.config)) if args.config else {}
    model_kwargs, train_kwargs = split_config(raw)
    flag_over = {
        "arch": args.arch, "seed": args.seed, "w": args.window,
        "n_layers": args.n_layers, "d_m": args.d_m,
    }
    for key, value in flag_over.items():
        if value is not None:
            model_kwargs[key] = value
    for key, value in (("total_steps", args.steps), ("seed", args.seed),
                       ("batch_size", args.batch_size), ("seq_len", args.seq_len),
                       ("peak_lr", args.peak_lr), ("warmup_steps", args.warmup),
                       ("checkpoint_every", args.checkpoint_every)):
        if value is not None:
            train_kwargs[key] = value

    corpus = load_corpus(args.corpus)
    if args.resume:
        model, opt, stored_cfg, meta = load_checkpoint(args.resume)
        cfg = TrainConfig(**{**(stored_cfg.to_dict() if stored_cfg else {}), **train_kwargs})
        start = meta.get("step", 0)
    else:
        model = build(ModelConfig(**model_kwargs))
        cfg = TrainConfig(**train_kwargs)
        opt, start = None, 0

    def log(rec):
        print(f"step {rec.step:6d}  loss {rec.loss:.4f}  lr {rec.lr:.3g}  "
              f"grad_norm {rec.grad_norm:.3g}  tok/s {rec.tok_per_s:.0f}")

    history = train_loop(model, corpus, cfg, out_dir=args.out_dir, opt_state=opt,
                         start_step=start, log=log)
    final = history[-1].loss if history else float("nan")
    print(f"done: {len(history)} steps, final loss {final:.4f}, "
          f"params {model.param_count()}")
    return 0


def cmd_eval_ppl(args) -> int:
    model, _, _ = _load_model(args.ckpt)
    data = Path(args.data).read_bytes()
    if args.sliding:
        if args.window is None or args.stride is None:
            raise UsageError("--sliding requires --window and --stride")
        value = ppl_sliding(model, data, args.window, args.stride)
        _write_csv(args.out, "arch,ctx_len,ppl",
                   [f"{model.config.arch},{args.window},{value:.6f}"])
        return 0
    report = ppl_at_lengths(model, data, _parse_ints(args.lengths))
    _write_csv(args.out, "arch,ctx_len,ppl",
               [f"{report.arch},{r.context_length},{r.perplexity:.6f}" for r in report.rows])
    return 0


def cmd_generate(args) -> int:
    model, _, _ = _load_model(args.ckpt)
    if (args.prompt is None) == (args.prompt_file is None):
        raise UsageError("provide exactly one of --prompt / --prompt-file")
    prompt = (Path(args.prompt_file).read_bytes() if args.prompt_file
              else args.prompt.encode("utf-8"))
    if not prompt:
        raise UsageError("empty prompt")
    tokens = np.frombuffer(prompt, dtype=np.uint8).astype(np.int64)
    cfg = GenerateConfig(mode=args.mode, temperature=args.temp, top_p=args.top_p,
                         max_new_tokens=args.max_new, seed=args.seed)
    out = generate(Session(model), tokens, cfg)
    sys.stdout.buffer.write(bytes(out))
    sys.stdout.buffer.flush()
    return 0


def cmd_passkey(args) -> int:
    model, train_cfg, _ = _load_model(args.ckpt)
    if args.mode == "finetune":
        cfg = train_cfg if train_cfg is not None else TrainConfig()
        cfg = TrainConfig(**{**cfg.to_dict(), "batch_size": args.batch_size,
                             "peak_lr": args.peak_lr, "warmup_steps": args.warmup,
                             "seed": args.seed})
        losses = passkey_finetune(
            model, args.train_len, args.steps, cfg,
            log=lambda step, loss: print(f"step {step:5d}  loss {loss:.4f}"))
        if args.out_ckpt:
            save_checkpoint(model, None, cfg, args.out_ckpt, step=args.steps)
        print(f"finetune done: {len(losses)} steps, final loss {losses[-1]:.4f}")
        return 0
    grid = passkey_eval(model, _parse_ints(args.lengths), trials=args.trials,
                        seed=args.seed)
    lines = [
        f"{grid.lengths[i]},{grid.depths[j]},{grid.acc[i, j]:.3f},{grid.trials}"
        for i in range(len(grid.lengths)) for j in range(len(grid.depths))
    ]
    _write_csv(args.out, "length,depth,acc,trials", lines)
    return 0


def cmd_phonebook(args) -> int:
    model, _, _ = _load_model(args.ckpt)
    try:
        start, stop, step = (int(x) for x in args.pairs_range.split(":"))
    except ValueError as exc:
        raise UsageError(f"--pairs-range expects start:stop:step, got {args.pairs_range!r}") from exc
    counts = list(range(start, stop + 1, step))
    rows = phonebook_eval(model, counts, trials=args.trials, seed=args.seed)
    _write_csv(args.out, "n_pairs,acc,trials",
               [f"{n},{acc:.3f},{args.trials}" for n, acc in rows])
    return 0


def cmd_entropy(args) -> int:
    model, _, _ = _load_model(args.ckpt)
    data = Path(args.data).read_bytes()
    tokens = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    report = entropy_report(model, tokens, args.last_l)
    _write_csv(args.out, "layer_idx,layer_kind,entropy",
               [f"{e.layer_idx},{e.layer_kind},{e.entropy:.6f}" for e in report.entries])
    return 0


def cmd_bench(args) -> int:
    model, _, _ = _load_model(args.ckpt)
    lengths = _parse_ints(args.lengths)
    if args.kind == "decode":
        report = bench_decode(model, lengths, repeats=args.repeats)
    else:
        report = bench_prefill(model, lengths, repeats=args.repeats)
    _write_csv(args.out, "kind,length,run,tokens_per_s,wall_ms",
               [f"{r.kind},{r.length},{r.run},{r.tokens_per_s:.2f},{r.wall_ms:.3f}"
                for r in report.rows])
    for length, mean, std in report.summary():
        print(f"# {args.kind} len {length}: {mean:.1f} +/- {std:.1f} tokens/s",
              file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    from .verify import run_suite

    checks = run_suite(args.suite)
    failed = 0
    for check in checks:
        status = "PASS" if check.ok else "FAIL"
        print(f"{status} {check.name}" + (f": {check.detail}" if check.detail else ""))
        failed += not check.ok
    if failed:
        print(f"{failed}/{len(checks)} checks failed")
        return 4
    print(f"all {len(checks)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# SVG line charts
# ---------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
            "#17becf", "#7f7f7f")


def render_line_svg(rows: list[dict], x_col: str, y_col: str,
                    series_col: str | None = None,
                    width: int = 640, height: int = 400) -> str:
    """Minimal standalone SVG line chart: one polyline per series."""
    if not rows:
        raise UsageError("no data rows to plot")
    for col in (x_col, y_col) + ((series_col,) if series_col else ()):
        if col not in rows[0]:
            raise UsageError(f"column {col!r} not in CSV header {sorted(rows[0])}")
    groups: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        key = row[series_col] if series_col else y_col
        groups.setdefault(key, []).append((float(row[x_col]), float(row[y_col])))
    xs = [p[0] for pts in groups.values() for p in pts]
    ys = [p[1] for pts in groups.values() for p in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0
    ml, mr, mt, mb = 60, 20, 20, 45

    def px(x):
        return ml + (x - x_lo) / x_span * (width - ml - mr)

    def py(y):
        return height - mb - (y - y_lo) / y_span * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
        f'<text x="{ml}" y="{height - mb + 16}" font-size="11">{x_lo:g}</text>',
        f'<text x="{width - mr - 30}" y="{height - mb + 16}" font-size="11">{x_hi:g}</text>',
        f'<text x="4" y="{height - mb}" font-size="11">{y_lo:g}</text>',
        f'<text x="4" y="{mt + 10}" font-size="11">{y_hi:g}</text>',
        f'<text x="{width // 2}" y="{height - 8}" font-size="12">{escape(x_col)}</text>',
    ]
    for i, (key, pts) in enumerate(sorted(groups.items())):
        color = _PALETTE[i % len(_PALETTE)]
        pts = sorted(pts)
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        parts.append(
            f'<polyline data-series="{escape(key, {chr(34): "&quot;"})}" fill="none" '
            f'stroke="{color}" stroke-width="1.5" points="{coords}"/>'
        )
        parts.append(
            f'<text x="{width - mr - 120}" y="{mt + 14 + 14 * i}" font-size="11" '
            f'fill="{color}">{escape(key)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_plot(args) -> int:
    with open(args.csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    svg = render_line_svg(rows, args.x, args.y, args.series)
    Path(args.out).write_text(svg)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="sambalm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a byte corpus")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--arch")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--peak-lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--d-m", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-ppl", help="perplexity at context lengths")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lengths", default="256,512,1024")
    p.add_argument("--sliding", action="store_true")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_ppl)

    p = sub.add_parser("generate", help="generate bytes from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt")
    p.add_argument("--prompt-file")
    p.add_argument("--mode", choices=("greedy", "nucleus"), default="greedy")
    p.add_argument("--temp", type=float, default=0.2)
    p.add_argument("--top-p", type=float, default=0.95)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("passkey", help="passkey retrieval finetune / eval")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("finetune", "eval"), required=True)
    p.add_argument("--train-len", type=int, default=256)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lengths", default="256,512")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--peak-lr", type=float, default=5e-4)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--out-ckpt")
    p.set_defaults(func=cmd_passkey)

    p = sub.add_parser("phonebook", help="phonebook retrieval accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs-range", default="20:480:20")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_phonebook)

    p = sub.add_parser("entropy", help="attention/selection entropy per layer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--last-l", type=int, default=16)
    p.add_argument("--out")
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("bench", help="prefill/decode throughput")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--kind", choices=("prefill", "decode"), required=True)
    p.add_argument("--lengths", default="64,128,256")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run oracle self-checks")
    p.add_argument("--suite", default="all",
                   choices=("gradcheck", "scan", "streaming", "all"))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot", help="render a CSV as an SVG line chart")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--series")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ContractError, DimensionError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
