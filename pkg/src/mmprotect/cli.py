"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (bad arguments or config, failed
verification), 2 stage failure (I/O or runtime error, partially skipped input).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import torch
from pydantic import ValidationError

from .config import RunConfig, config_hash, load_config

log = logging.getLogger("mmprotect")

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def _get_formatter(self):
        # fixed width so the generated reference page does not depend on the terminal
        return self.formatter_class(prog=self.prog, width=100)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--seed", type=int, help="master seed for data, protection and attack RNGs", **({"default": None} | kw))
    p.add_argument("--config", type=Path, help="RunConfig JSON; unknown keys are rejected",
                   **({"default": None} | kw))
    p.add_argument("--workers", type=int, help="per-sample worker processes", **({"default": 1} | kw))
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging", **({"default": False} | kw))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmprotect", description="Protect multimodal VQA training data and probe it with fine-tuning attackers.", parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_global_flags(True)]

    p = sub.add_parser("gen-toy-data", parents=common, help="write the synthetic shape/color VQA splits")
    p.add_argument("--out", type=Path, required=True, help="output directory (train/ and eval/ are created)")
    p.add_argument("--n-train", type=int, default=None, help="training samples (config default 256)")
    p.add_argument("--n-eval", type=int, default=None, help="evaluation samples (config default 128)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("protect", parents=common, help="protect a dataset and write the release")
    p.add_argument("--data", type=Path, required=True, help="clean dataset directory")
    p.add_argument("--out", type=Path, required=True, help="release directory")
    p.add_argument("--variant", choices=("bph", "crs"), default=None, help="binding loss")
    p.add_argument("--objective", choices=("minmin", "max"), default=None, help="training-loss direction")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("attack", parents=common, help="fine-tune on a (protected) set and score on clean eval")
    p.add_argument("--data", type=Path, required=True, help="training set the attacker scraped")
    p.add_argument("--eval", type=Path, required=True, help="clean evaluation set")
    p.add_argument("--clean", type=Path, default=None, help="clean counterpart of --data, needed for mixing")
    p.add_argument("--recipe", choices=("full", "projector_only", "low_rank"), default=None)
    p.add_argument("--rank", type=int, choices=(2, 4, 8), default=None, help="low_rank adapter rank")
    p.add_argument("--transforms", default=None, help="comma list of quantize4,blur3,croppad2,punct,case,whitespace")
    p.add_argument("--mix-ratio", type=float, default=None, help="fraction of protected samples kept")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="AttackReport JSON path")
    p.add_argument("--save-model", type=Path, default=None, help="write the fine-tuned checkpoint here")

    p = sub.add_parser("evaluate", parents=common, help="exact-match accuracy of a checkpoint on a clean set")
    p.add_argument("--model", type=Path, required=True, help="checkpoint written by attack --save-model")
    p.add_argument("--eval", type=Path, required=True, help="clean evaluation set")
    p.add_argument("--out", type=Path, default=None, help="optional JSON report path")

    p = sub.add_parser("diagnose", parents=common, help="stealth metrics and attention-routing reports")
    p.add_argument("--protected", type=Path, required=True, help="release directory")
    p.add_argument("--clean", type=Path, required=True, help="clean dataset directory")
    p.add_argument("--out", type=Path, required=True, help="report JSON path")
    p.add_argument("--csv", type=Path, default=None, help="directory for stealth/routing/loss-curve CSVs")
    p.add_argument("--model", type=Path, default=None, help="checkpoint to trace (default: base surrogate)")
    p.add_argument("--attack-report", type=Path, action="append", default=[],
                   help="AttackReport JSON whose loss curve goes into loss_curves.csv (repeatable)")

    p = sub.add_parser("verify", parents=common, help="run the oracle suites")
    p.add_argument("--suite", action="append", choices=("lemma1", "proposition", "theorem", "gradients", "pinsker"),
                   help="suite to run (repeatable; default all)")
    p.add_argument("--out", type=Path, default=None, help="optional JSON report path")

    p = sub.add_parser("end-to-end", parents=common, help="gen -> protect -> attack -> evaluate -> diagnose")
    p.add_argument("--profile", choices=("smoke", "full-desk"), default="smoke")
    p.add_argument("--out", type=Path, default=None, help="artifact directory")
    return parser


# ---------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={
            "data": cfg.data.model_copy(update={"seed": args.seed}),
            "protection": cfg.protection.model_copy(update={"seed": args.seed}),
            "attack": cfg.attack.model_copy(update={"seed": args.seed}),
        })
    return RunConfig.model_validate(cfg.model_dump())


def _write_json(path: Path | None, obj) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True, default=str)
    if path is None:
        print(text)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")


def _update(model, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return model.model_validate({**model.model_dump(), **changes}) if changes else model


# ---------------------------------------------------------------- commands


def cmd_gen_toy_data(args, cfg: RunConfig) -> int:
    from .data import gen_toy_data

    n_train = args.n_train if args.n_train is not None else cfg.data.n_train
    n_eval = args.n_eval if args.n_eval is not None else cfg.data.n_eval
    if n_train < 1 or n_eval < 1:
        raise UsageError("n_train and n_eval must be >= 1")
    tr, ev = gen_toy_data(n_train, n_eval, cfg.data.seed, args.out, force=args.force)
    print(json.dumps({"train": str(tr), "eval": str(ev), "seed": cfg.data.seed}))
    return EXIT_OK


def cmd_protect(args, cfg: RunConfig) -> int:
    from .data import load_dataset
    from .optimizer import protect_dataset

    errors: list = []
    data = load_dataset(args.data, skip_bad=True, errors=errors)
    for sid, msg in errors:
        log.error("skipped unreadable sample %s: %s", sid, msg)
    pcfg = _update(cfg.protection, binding=args.variant, objective=args.objective)
    _, manifest = protect_dataset(data, pcfg, args.out, workers=args.workers, force=args.force)
    print(json.dumps({"release": str(args.out), "samples": len(manifest["samples"]),
                      "violations": manifest["total_violations"], "skipped": len(errors),
                      "config_hash": manifest["config_hash"]}))
    if manifest["total_violations"]:
        return EXIT_STAGE
    return EXIT_STAGE if errors else EXIT_OK


def cmd_attack(args, cfg: RunConfig) -> int:
    from .attack import parse_transforms, run_attack
    from .data import load_dataset
    from .model import build_model, save_checkpoint

    transforms = parse_transforms(args.transforms) if args.transforms is not None else None
    acfg = _update(cfg.attack, recipe=args.recipe, rank=args.rank, transforms=transforms,
                   mix_ratio=args.mix_ratio, epochs=args.epochs)
    train = load_dataset(args.data)
    evals = load_dataset(args.eval)
    clean = load_dataset(args.clean) if args.clean is not None else None
    if acfg.mix_ratio < 1 and clean is None:
        raise UsageError("--mix-ratio below 1 needs --clean")
    if train.tokenizer.hash != evals.tokenizer.hash:
        raise UsageError("training and evaluation sets use different tokenizers")
    base = build_model(train.tokenizer.vocab_size, acfg.model_seed)
    report, model = run_attack(base, train, evals, acfg, clean_train=clean, max_new_tokens=cfg.eval.max_new_tokens)
    out = report.to_json()
    out["config"] = cfg.model_copy(update={"attack": acfg}).model_dump(mode="json")
    out["config_hash"] = config_hash(acfg)
    _write_json(args.out, out)
    if args.save_model is not None:
        save_checkpoint(model, args.save_model, tokenizer_hash=train.tokenizer.hash)
    print(json.dumps({"accuracy": report.accuracy, "final_train_loss": report.final_train_loss}))
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .attack import evaluate_accuracy
    from .data import load_dataset
    from .model import load_checkpoint

    model, header = load_checkpoint(args.model)
    evals = load_dataset(args.eval)
    if header.get("tokenizer_hash") and header["tokenizer_hash"] != evals.tokenizer.hash:
        raise UsageError("checkpoint and evaluation set use different tokenizers")
    model.eval()
    acc = evaluate_accuracy(model, evals, cfg.eval.max_new_tokens)
    rep = {"accuracy": acc, "n_eval": len(evals), "model": str(args.model)}
    _write_json(args.out, rep)
    if args.out is not None:
        print(json.dumps(rep))
    return EXIT_OK


def cmd_diagnose(args, cfg: RunConfig) -> int:
    from .diagnose import diagnose_dirs, write_csvs
    from .model import load_checkpoint

    model = None
    if args.model is not None:
        model, _ = load_checkpoint(args.model)
        model.eval()
    report = diagnose_dirs(args.protected, args.clean, model)
    _write_json(args.out, report)
    if args.csv is not None:
        curves = {}
        for path in args.attack_report:
            rep = json.loads(path.read_text())
            curves[path.stem] = rep["loss_curve"]
        write_csvs(report, args.csv, curves or None)
    print(json.dumps(report["stealth"]["summary"]))
    return EXIT_OK


def cmd_verify(args, cfg: RunConfig) -> int:
    from .verify import SUITES, run_verify

    suites = tuple(args.suite) if args.suite else SUITES
    seed = args.seed if args.seed is not None else 0
    rep = run_verify(suites, seed)
    _write_json(args.out, rep)
    for r in rep["suites"]:
        print(f"{r['suite']:12s} {'PASS' if r['passed'] else 'FAIL'}  {r['seconds']:.2f}s")
    return EXIT_OK if rep["passed"] else EXIT_INVALID


def cmd_end_to_end(args, cfg: RunConfig) -> int:
    from .pipeline import end_to_end

    summary = end_to_end(args.profile, cfg, args.out, workers=args.workers)
    print(json.dumps(summary["criteria"], indent=1))
    if args.profile == "smoke":
        ok = all(v["violations"] == 0 for v in summary["variants"].values())
        return EXIT_OK if ok else EXIT_STAGE
    return EXIT_OK if summary["criteria"]["all"] else EXIT_INVALID


COMMANDS = {
    "gen-toy-data": cmd_gen_toy_data,
    "protect": cmd_protect,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "verify": cmd_verify,
    "end-to-end": cmd_end_to_end,
}


def main(argv: Sequence[str] | None = None) -> int:
    from .data import DatasetError
    from .pipeline import StageError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = _config(args)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: [{exc.stage}] {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except (DatasetError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return EXIT_STAGE


# ---------------------------------------------------------------- reference page


def reference_markdown() -> str:
    """Markdown reference generated from the argparse definitions."""
    parser = build_parser()
    lines = ["# mmprotect command reference", "",
             "Generated from the argument parser (`python -m mmprotect.cli --reference`).", "",
             "Exit codes: `0` success, `1` validation failure, `2` stage failure.", "",
             "## Global flags", "", "```", parser.format_help().rstrip(), "```", ""]
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, p in sub.choices.items():
        lines += [f"## {name}", "", "```", p.format_help().rstrip(), "```", ""]
    return "\n".join(lines)


if __name__ == "__main__":
    if sys.argv[1:] == ["--reference"]:
        print(reference_markdown())
        sys.exit(0)
    sys.exit(main())
