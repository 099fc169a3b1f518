"""``damamba`` command line: generate / train / eval / bench.

Every subcommand accepts ``--config FILE`` (JSON) and repeatable
``--override key=value``; dotted keys address a section explicitly
(``model.partner_fusion=false``), bare keys work when unambiguous.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from damamba import __version__
from damamba import bench as B
from damamba import config as C
from damamba.errors import ConfigError, DaMambaError, DataError, UsageError, exit_code_for
from damamba.features import generate_synthetic_session, read_session, session_seed, write_session

log = logging.getLogger("damamba")

EVAL_FIELDS = ["name", "kind", "ccc"]


def _summary(name: str, s) -> str:
    y = s.labels
    return f"{name}: M={s.M} n={s.n} label mean={y.mean():.4f} std={y.std():.4f} min={y.min():.4f} max={y.max():.4f}"


def find_sessions(root: str | Path) -> list[Path]:
    """``root`` itself if it is a session directory, else its session subdirectories."""
    p = Path(root)
    if not p.is_dir():
        raise DataError(f"session directory not found: {p}")
    if (p / "meta").is_file():
        return [p]
    return sorted(d for d in p.iterdir() if (d / "meta").is_file())


def load_sessions(root: str | Path, what: str):
    dirs = find_sessions(root)
    if not dirs:
        raise UsageError(f"no sessions under {root} ({what})")
    return [read_session(d) for d in dirs]


# -- subcommands ------------------------------------------------------------------------


def cmd_generate(args, cfg: C.Config) -> int:
    d = cfg.data
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    if d.participants < 2:
        raise ConfigError("a dialogue needs a partner: participants must be >= 2")
    count = args.sessions if args.sessions is not None else d.train_sessions
    for i in range(count):
        name = f"session_{i:03d}"
        s = generate_synthetic_session(session_seed(d.seed, i), d.participants, d.frames, noise=d.noise, name=name)
        write_session(out / name, s)
        print(_summary(name, s))
    return 0


def cmd_train(args, cfg: C.Config) -> int:
    from damamba.training import train

    train_dir = args.train_dir or cfg.data.train_dir
    val_dir = args.val_dir or cfg.data.val_dir
    if not train_dir or not val_dir:
        raise UsageError("train needs --train-dir and --val-dir (or data.train_dir / data.val_dir)")
    tr = load_sessions(train_dir, "training")
    va = load_sessions(val_dir, "validation")
    result = train(cfg, tr, va, args.out, resume=args.resume, max_steps=args.max_steps)
    print(f"steps={result.final_step} best_val_ccc={result.best_val_ccc:.6f}")
    print(f"checkpoint: {Path(args.out) / 'best'}")
    return 0


def write_eval_csv(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_FIELDS)
        for name, kind, v in rows:
            w.writerow([name, kind, repr(float(v))])


def read_eval_csv(path: str | Path) -> list[tuple[str, str, float]]:
    with open(path, newline="") as fh:
        return [(r["name"], r["kind"], float(r["ccc"])) for r in csv.DictReader(fh)]


def cmd_eval(args, cfg: C.Config) -> int:
    from damamba.model import check_config
    from damamba.training import evaluate, load_checkpoint

    params, ckpt_cfg, _, _ = load_checkpoint(args.checkpoint)
    if args.override:
        # overrides may only touch evaluation-side settings; the model is fixed by the checkpoint
        C.apply_overrides(ckpt_cfg, [o for o in args.override if not o.startswith("model.")])
    check_config(params, ckpt_cfg.model)
    sessions = load_sessions(args.sessions, "evaluation")
    report = evaluate(params, ckpt_cfg, sessions)
    for name, kind, v in report.rows():
        print(f"{kind:<8}{name:<24}{v: .6f}")
    if args.csv:
        write_eval_csv(args.csv, report.rows())
    return 0


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_bench(args, cfg: C.Config) -> int:
    b = cfg.bench
    lengths = _ints(args.lengths or b.lengths)
    cap = args.cap_bytes if args.cap_bytes is not None else b.cap_bytes
    variants = args.variants.split(",") if args.variants else [B.HYBRID, B.FULL]
    unknown = set(variants) - {B.HYBRID, B.FULL}
    if unknown:
        raise ConfigError(f"unknown variants {sorted(unknown)}")
    rows = B.run_scaling_benchmark(
        lengths, b.d, b.chunk_size, b.repeats, warmups=b.warmups, cap_bytes=cap, variants=variants,
        dtype=b.dtype, seed=args.seed or 0,
    )
    if args.partners:
        rows += B.partner_scaling_benchmark(
            _ints(b.partners), b.partner_frames, k=b.d, chunk_size=b.chunk_size, repeats=b.repeats,
            warmups=b.warmups, dtype=b.dtype,
        )
    if args.kernels:
        rows += B.kernel_benchmark(repeats=b.repeats, warmups=b.warmups)
    print(B.format_table(rows))
    if args.out:
        B.write_csv(rows, args.out)
        print(f"wrote {args.out}")
    return 0


# -- parser -------------------------------------------------------------------------------


def _apply_seed(cfg: C.Config, command: str, seed: int | None) -> None:
    if seed is None:
        return
    if command == "generate":
        cfg.data.seed = seed
    elif command == "train":
        cfg.train.seed = seed
        cfg.model.init_seed = seed


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (default) [published value]:\n" + C.describe()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int, default=None, help="seed for this subcommand")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(
        prog="damamba",
        description="Dialogue-aware engagement estimation with hybrid SSM/attention blocks.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    kw = dict(parents=[common], epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)

    g = sub.add_parser("generate", help="write synthetic sessions", **kw)
    g.add_argument("--out", required=True)
    g.add_argument("--participants", type=int, help="participants per session (data.participants)")
    g.add_argument("--frames", type=int, help="frames per session at the top rate (data.frames)")
    g.add_argument("--sessions", type=int, help="number of sessions (default data.train_sessions)")
    g.add_argument("--noise", type=float, help="cue noise scale (data.noise)")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model", **kw)
    t.add_argument("--train-dir")
    t.add_argument("--val-dir")
    t.add_argument("--out", required=True, help="run directory (metrics.csv, best/, last/)")
    t.add_argument("--resume", help="checkpoint directory (a previous run's last/)")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", aliases=["evaluate"], help="CCC report for a checkpoint", **kw)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--sessions", required=True, help="session directory or a directory of sessions")
    e.add_argument("--csv", help="write the report as CSV")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="scaling benchmark", **kw)
    b.add_argument("--out", help="CSV path")
    b.add_argument("--lengths", help="comma-separated sequence lengths (bench.lengths)")
    b.add_argument("--variants", help=f"comma-separated subset of {B.HYBRID},{B.FULL}")
    b.add_argument("--cap-bytes", type=int, help="allocation cap; larger runs become OOM rows")
    b.add_argument("--partners", action="store_true", help="also run the partner-count sweep")
    b.add_argument("--kernels", action="store_true", help="also compare scan kernel backends")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load(args.config)
        command = "eval" if args.command == "evaluate" else args.command
        if command != "eval":
            C.apply_overrides(cfg, args.override)
        if command == "generate":
            for key in ("participants", "frames", "noise"):
                if getattr(args, key) is not None:
                    setattr(cfg.data, key, getattr(args, key))
        _apply_seed(cfg, command, args.seed)
        return args.func(args, cfg)
    except (DaMambaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc) if isinstance(exc, DaMambaError) else 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
