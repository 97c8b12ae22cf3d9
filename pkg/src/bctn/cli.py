"""``bctn`` command line: synth, train, eval, generate, gradcheck, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from .checkpoint import CheckpointMissing, DimMismatch, load_checkpoint, save_checkpoint
from .config import Config, tiny_config
from .data import Vocab, encode_example, generate_toy_corpus, load_jsonl, save_jsonl
from .training import DivergedLoss, IncompatibleDims, stage1_train, stage2_train

log = logging.getLogger("bctn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class UnwritablePath(OSError):
    pass


def _version() -> str:
    try:
        return metadata.version("bctn")
    except metadata.PackageNotFoundError:
        return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UnwritablePath(f"cannot create {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise UnwritablePath(f"{out} is not writable")
    return out


def _parse_set(items) -> dict:
    """``--set model.h=16`` style overrides; values parse as JSON when they can."""
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_config(args) -> Config:
    """Config file first, then explicit flags; flags win."""
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    flags = {}
    for flag, key in (("seed", "train.seed"), ("epochs", "train.epochs"), ("lr", "train.lr"),
                      ("batch", "train.batch"), ("max_steps", "train.max_steps")):
        value = getattr(args, flag, None)
        if value is not None:
            flags[key] = value
    flags.update(_parse_set(getattr(args, "set", None)))
    try:
        cfg.update(flags)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    if out.parent != Path(""):
        _out_dir(out.parent)
    examples = generate_toy_corpus(args.seed, args.n)
    try:
        save_jsonl(examples, out)
    except OSError as exc:
        raise UnwritablePath(f"cannot write {out}: {exc}") from None
    print(f"wrote {len(examples)} examples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.stage == 2 and not args.init:
        raise UsageError("stage 2 needs --init <stage-1 checkpoint>")
    cfg = _load_config(args)
    out = _out_dir(args.out)
    started = _now()
    raw = load_jsonl(args.data)
    theta = None
    if args.stage == 2:
        theta = load_checkpoint(args.init)
        vocab = Vocab(theta.config["vocab"][6:])
    else:
        vocab = Vocab.for_examples(raw)
    examples = [encode_example(e, vocab, cfg.model.max_len) for e in raw]
    if args.stage == 1:
        result = stage1_train(examples, cfg, vocab)
    else:
        result = stage2_train(examples, theta, cfg, vocab)
    ckpt_path = out / f"stage{args.stage}.ckpt"
    loss_path = out / f"stage{args.stage}_loss.csv"
    manifest_path = out / f"stage{args.stage}_manifest.json"
    save_checkpoint(result.checkpoint, ckpt_path)
    with open(loss_path.with_name(loss_path.name + ".tmp"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in enumerate(result.losses):
            w.writerow([step, repr(float(loss))])
    os.replace(loss_path.with_name(loss_path.name + ".tmp"), loss_path)
    manifest = {
        "command": ["bctn", *sys.argv[1:]] if args.argv is None else ["bctn", *args.argv],
        "stage": args.stage,
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "version": _version(),
        "started": started,
        "finished": _now(),
        "inputs": {"data": str(args.data), "init": str(args.init) if args.init else None},
        "outputs": {"checkpoint": str(ckpt_path), "loss_log": str(loss_path)},
        "steps": len(result.losses),
        "final_loss": result.losses[-1] if result.losses else None,
    }
    _write_atomic(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"stage {args.stage}: {len(result.losses)} steps, final loss "
          f"{result.losses[-1]:.4f}; checkpoint {ckpt_path}")
    return EXIT_OK


def _load_model(path):
    from .training import model_from_checkpoint
    ckpt = load_checkpoint(path)
    if ckpt.stage != 2:
        raise UsageError(f"{path} is a stage-{ckpt.stage} checkpoint; answers need stage 2")
    return model_from_checkpoint(ckpt)


def cmd_eval(args) -> int:
    from .ablation import evaluate_tokens
    model, vocab = _load_model(args.ckpt)
    raw = load_jsonl(args.data)
    examples = [encode_example(e, vocab, model.config.model.max_len) for e in raw]
    report, preds = evaluate_tokens(model, vocab, examples)
    report_path = Path(args.report)
    if report_path.parent != Path(""):
        _out_dir(report_path.parent)
    _write_atomic(report_path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.per_example:
        with open(args.per_example, "w", encoding="utf-8") as fh:
            for row, pred, ex in zip(report.per_example, preds, raw):
                fh.write(json.dumps({**row, "prediction": vocab.detokenize(pred),
                                     "reference": ex.answer}) + "\n")
    print(f"rouge_l={report.rouge_l:.4f} bleu_4={report.bleu_4:.4f} n={report.n}")
    return EXIT_OK


def cmd_generate(args) -> int:
    model, vocab = _load_model(args.ckpt)
    passage = vocab.tokenize(args.passage)
    question = vocab.tokenize(args.question)
    limit = model.config.model.max_len - len(passage) - 3
    if len(question) > limit:
        raise UsageError(f"question longer than the {limit} tokens the encoder can take")
    ids = model.generate(2, question, passage, max_len=args.max_len, beam=args.beam)
    print(vocab.detokenize(ids))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_stage
    cfg = Config.load(args.config) if args.config else tiny_config()
    worst = 0.0
    for stage in (1, 2):
        t0 = time.perf_counter()
        res = check_stage(stage, cfg, max_coords=None if args.all else args.coords, seed=args.seed)
        worst = max(worst, res.max_rel_error)
        print(f"stage {stage}: max_rel_error={res.max_rel_error:.3e} checked={res.n_checked} "
              f"skipped_kink={res.n_skipped_kink} skipped_small={res.n_skipped_small} "
              f"({time.perf_counter() - t0:.1f}s)")
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst < 1e-3 else EXIT_FAIL


def cmd_ablate(args) -> int:
    from .ablation import DEFAULT_GRID, load_grid, run_grid, write_table
    from .data import train_test_split
    cfg = _load_config(args)
    grid, seeds = (DEFAULT_GRID, None) if not args.grid else load_grid(args.grid)
    seeds = args.seeds or seeds or [0]
    if args.data:
        raw = load_jsonl(args.data)
    else:
        raw = generate_toy_corpus(args.corpus_seed, args.n_train + args.n_test)
    if len(raw) <= args.n_train:
        raise UsageError(f"need more than --n-train={args.n_train} examples, have {len(raw)}")
    train, test = train_test_split(raw, args.n_train)
    test = test[: args.n_test]
    results = run_grid(cfg, grid, seeds, train, test)
    out = Path(args.out)
    if out.parent != Path(""):
        _out_dir(out.parent)
    write_table(results, out)
    for r in results:
        print(f"{r.name}: rouge_l={r.mean_rouge_l:.4f} bleu_4={r.mean_bleu_4:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bctn", description="Two-stage reverse/inertial reading comprehension.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic JSONL corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    def train_flags(q):
        q.add_argument("--config")
        q.add_argument("--seed", type=int)
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--batch", type=int)
        q.add_argument("--max-steps", dest="max_steps", type=int)
        q.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, repeatable")

    t = sub.add_parser("train", help="train stage 1 or stage 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="stage-1 checkpoint (required for stage 2)")
    train_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score greedy answers with ROUGE-L and BLEU-4")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--per-example", dest="per_example")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("generate", help="answer one question")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--passage", required=True)
    g.add_argument("--question", required=True)
    g.add_argument("--max-len", dest="max_len", type=int)
    g.add_argument("--beam", type=int)
    g.set_defaults(fn=cmd_generate)

    c = sub.add_parser("gradcheck", help="finite-difference check of both stage losses")
    c.add_argument("--config")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--coords", type=int, default=64, help="coordinates sampled per tensor")
    c.add_argument("--all", action="store_true", help="check every coordinate")
    c.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and score a grid of ablations")
    a.add_argument("--grid", help="JSON grid file; defaults to the built-in grid")
    a.add_argument("--out", default="ablation.csv")
    a.add_argument("--data", help="JSONL corpus; the first --n-train rows train")
    a.add_argument("--corpus-seed", dest="corpus_seed", type=int, default=11)
    a.add_argument("--n-train", dest="n_train", type=int, default=500)
    a.add_argument("--n-test", dest="n_test", type=int, default=100)
    a.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")])
    train_flags(a)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"bctn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedLoss as exc:
        print(f"bctn: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (CheckpointMissing, DimMismatch, IncompatibleDims, UnwritablePath,
            FileNotFoundError, ValueError, KeyError) as exc:
        print(f"bctn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
