"""Command-line entry point: ``python -m inattention <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import accounting, data_io, training
from .masks import MaskSpec
from .model import Sampler, generate, init_params, param_breakdown, param_count

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(flag: str):
    def parse(text: str) -> list[int]:
        try:
            values = [int(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects comma-separated integers, got {text!r}") from None
        if not values:
            raise argparse.ArgumentTypeError(f"{flag} is empty")
        return values

    return parse


def _resolve(base: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p


def _load_config(path: str) -> tuple[data_io.RunConfig, Path]:
    cfg_path = Path(path)
    return data_io.RunConfig.load(cfg_path), cfg_path.resolve().parent


def cmd_train(args) -> int:
    cfg, base = _load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    corpus = data_io.read_corpus(args.corpus or _resolve(base, cfg.paths.train_corpus))
    params = init_params(cfg.model, cfg.train.seed)
    result = training.train(params, corpus, cfg.train, args.out)
    print(f"wrote {result.checkpoints[-1]} after {cfg.train.steps} steps, final loss {result.curve[-1][2]:.6f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, base = _load_config(args.config)
    ckpt = data_io.load_checkpoint(args.ckpt)
    corpus = data_io.read_corpus(args.corpus or _resolve(base, cfg.paths.train_corpus))
    cl = args.context_length or cfg.train.context_length
    result = training.finetune(ckpt, corpus, cl, cfg.train, args.out, lr_init=args.lr, steps=args.steps)
    if result.checkpoints:
        print(f"wrote {result.checkpoints[-1]} at context length {cl}")
    else:
        print("steps=0: nothing written")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = data_io.load_checkpoint(args.ckpt)
    corpus = data_io.read_corpus(args.corpus)
    report = training.eval_sweep(ckpt.params, corpus, args.lengths, args.batch_size, checkpoint=str(args.ckpt))
    if args.out:
        report.write_csv(args.out)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["context_length", "mean_loss", "token_count"])
        for cl, loss, n in report.rows:
            w.writerow([cl, repr(loss), n])
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt = data_io.load_checkpoint(args.ckpt)
    prompt = Path(args.prompt_file).read_bytes()
    ids = data_io.tokenize(prompt)
    mode = "greedy" if args.mode == "greedy" else "temperature"
    sampler = Sampler(mode, args.temperature, args.seed)
    out = generate(ckpt.params, ids, args.n, sampler, args.policy)
    sys.stdout.buffer.write(data_io.detokenize(out))
    sys.stdout.buffer.flush()
    return EXIT_OK


def cmd_params(args) -> int:
    cfg, _ = _load_config(args.config)
    model = cfg.model.with_variant(args.variant) if args.variant else cfg.model
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["block", "params"])
    for block, n in param_breakdown(model).items():
        w.writerow([block, n])
    w.writerow(["total", param_count(model)])
    return EXIT_OK


def cmd_count_pairs(args) -> int:
    try:
        mask = MaskSpec.parse(args.mask, args.T)
    except ValueError as exc:
        raise UsageError(f"--mask: {exc}") from None
    rep = accounting.pair_count(mask, args.L, args.phase)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["mask", "T", "L", "phase", "per_layer", "total"])
    w.writerow([args.mask, rep.T, rep.L, rep.phase, rep.per_layer[0], rep.total])
    return EXIT_OK


def cmd_bench_mem(args) -> int:
    cfg, _ = _load_config(args.config)
    report = accounting.scaling_report(cfg.model, args.variants.split(","), args.lengths, args.budget_bytes, args.seed)
    if args.out:
        report.write_csv(args.out)
    else:
        sys.stdout.write(report.to_csv())
    crossover = report.crossover()
    print(f"crossover (dense >= 2x inattention): {crossover if crossover is not None else 'none'}", file=sys.stderr)
    return EXIT_OK


def cmd_build_corpus(args) -> int:
    train_path, eval_path = data_io.build_reference_corpus(args.out, args.train_bytes, args.eval_every)
    print(f"wrote {train_path} and {eval_path}")
    return EXIT_OK


def cmd_inspect_ckpt(args) -> int:
    header, payload_start = data_io.read_header(Path(args.ckpt).read_bytes())
    header = {**header, "payload_offset": payload_start}
    json.dump(header, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="inattention", description="InAttention toy language models: train, evaluate, measure.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="pretrain from a YAML run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--corpus", help="override paths.train_corpus")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("finetune", help="context-length extension from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--corpus", help="override paths.train_corpus")
    s.add_argument("--context-length", type=int, help="default: train.context_length from the config")
    s.add_argument("--lr", type=float, help="default: pretraining lr_init / 10")
    s.add_argument("--steps", type=int, help="default: train.steps from the config")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("eval", help="mean next-token loss at several context lengths")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--lengths", required=True, type=_int_list("--lengths"))
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("generate", help="sample bytes after a prompt")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt-file", required=True)
    s.add_argument("--n", required=True, type=int)
    s.add_argument("--mode", choices=("greedy", "temp"), default="greedy")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--policy", choices=("embeddings", "kv"), help="decode cache policy")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("params", help="parameter count and per-block breakdown")
    s.add_argument("--config", required=True)
    s.add_argument("--variant", choices=("dense", "inattention"), help="override model.variant")
    s.set_defaults(fn=cmd_params)

    s = sub.add_parser("count-pairs", help="attention pairs for a mask")
    s.add_argument("--mask", required=True, help="dense | sliding:<w> | inattention")
    s.add_argument("--T", required=True, type=int)
    s.add_argument("--L", required=True, type=int)
    s.add_argument("--phase", required=True, choices=accounting.PHASES)
    s.set_defaults(fn=cmd_count_pairs)

    s = sub.add_parser("bench-mem", help="peak-memory scaling report")
    s.add_argument("--config", required=True)
    s.add_argument("--lengths", required=True, type=_int_list("--lengths"))
    s.add_argument("--budget-bytes", type=int, default=accounting.DEFAULT_BUDGET)
    s.add_argument("--variants", default="dense,inattention")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(fn=cmd_bench_mem)

    s = sub.add_parser("build-corpus", help="write the reference train/eval text corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--train-bytes", type=int, default=1_000_000)
    s.add_argument("--eval-every", type=int, default=10)
    s.set_defaults(fn=cmd_build_corpus)

    s = sub.add_parser("inspect-ckpt", help="dump a checkpoint header and tensor manifest")
    s.add_argument("--ckpt", required=True)
    s.set_defaults(fn=cmd_inspect_ckpt)
    return p


_MINIMUMS = {"n": 0, "steps": 0, "T": 1, "L": 1, "batch_size": 1, "budget_bytes": 1, "train_bytes": 1, "eval_every": 2, "context_length": 2}


def _check_usage(args) -> None:
    for attr, lo in _MINIMUMS.items():
        value = getattr(args, attr, None)
        if value is not None and value < lo:
            raise UsageError(f"--{attr.replace('_', '-')} must be >= {lo}, got {value}")
    if getattr(args, "variants", None):
        for v in args.variants.split(","):
            if v not in ("dense", "inattention"):
                raise UsageError(f"--variants: unknown variant {v!r}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _check_usage(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ArithmeticError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
