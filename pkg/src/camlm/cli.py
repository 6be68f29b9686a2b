"""Command-line entry point: ``camlm <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 threshold failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, load as load_config
from .corpus import make_dataset, read_dataset, speaker_xvec, write_dataset
from .pipeline import STRATEGIES, context_cost, synthesize_paragraph
from .tensor import ContractError
from .train import (evaluate, free_running_eval, grad_check_config, gradient_report, group_report,
                    load_training_checkpoint, train, validation_data)

EXIT_OK, EXIT_CONFIG, EXIT_THRESHOLD, EXIT_IO = 0, 2, 3, 4
GRAD_TOL = 1e-4

ABLATIONS = (
    ("full", {}),
    ("w/o Mem-T", {"use_mem_t": False}),
    ("w/o Mem-S", {"use_mem_s": False}),
    ("w/o prefix mask", {"mask_kind": "causal"}),
)

log = logging.getLogger("camlm")


def _overrides(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _config(args, **extra) -> RunConfig:
    overrides = _overrides(getattr(args, "set", None))
    overrides.update({k: str(v) for k, v in extra.items() if v is not None})
    return load_config(getattr(args, "config", None), overrides)


def table(rows: list[list], header: list[str]) -> str:
    """Left-aligned plain-text table."""
    cells = [[str(c) for c in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_corpus(args) -> int:
    cfg = _config(args)
    samples = make_dataset(cfg.corpus_config(), args.count, seed=cfg.seed)
    write_dataset(samples, cfg.corpus_config(), args.out)
    print(f"wrote {len(samples)} paragraphs ({cfg.mode} mode) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    models = adam = None
    if args.resume:
        cfg, models, adam = load_training_checkpoint(args.resume)
        cfg = cfg.replace(**{k: v for k, v in vars(_config(args)).items()
                             if k in ("steps", "eval_interval")})
    else:
        cfg = _config(args)
    cfg = cfg.replace(dataset=args.data or cfg.dataset, checkpoint=args.out_ckpt or cfg.checkpoint,
                      metrics=args.metrics or cfg.metrics)
    res = train(cfg, models=models, adam=adam)
    last = [r for r in res.records if r.get("event") == "eval"]
    if last:
        r = last[-1]
        print(f"step {r['step']}: val_loss {r['val_loss']:.4f} token_accuracy {r['token_accuracy']:.4f}")
    return EXIT_OK


def _eval_report(models, samples) -> dict:
    tf = evaluate(models, samples)
    fr = free_running_eval(models, samples)
    return {**tf, **fr}


def cmd_eval(args) -> int:
    cfg, models, _ = load_training_checkpoint(args.ckpt)
    samples = read_dataset(args.data)[0] if args.data else validation_data(cfg)
    rep = _eval_report(models, samples)
    if args.json:
        print(json.dumps(rep, sort_keys=True))
        return EXIT_OK
    print(f"paragraphs: {len(samples)}")
    print(f"teacher-forced loss      {rep['val_loss']:.4f}")
    print(f"teacher-forced accuracy  {rep['token_accuracy']:.4f}")
    print(f"greedy accuracy          {rep['free_running_accuracy']:.4f}")
    rows = [[n + 1, f"{a:.4f}", f"{f:.4f}", f"{g:.4f}"] for n, (a, f, g) in enumerate(zip(
        rep["per_sentence_accuracy"], rep["first_token_accuracy"], rep["free_running_per_sentence"]))]
    print(table(rows, ["sentence", "tf_acc", "tf_first_token", "greedy_acc"]))
    return EXIT_OK


def _parse_paragraph(text: str) -> list[list[int]]:
    """``"1 2 3 | 4 5"`` -> ``[[1, 2, 3], [4, 5]]``."""
    sentences = [[int(t) for t in part.replace(",", " ").split()] for part in text.split("|")]
    if not sentences or any(not s for s in sentences):
        raise ConfigError("text", "every sentence needs at least one token")
    return sentences


def cmd_infer(args) -> int:
    cfg, models, _ = load_training_checkpoint(args.ckpt)
    sentences = _parse_paragraph(args.text)
    if any(t < 0 or t >= cfg.text_vocab for s in sentences for t in s):
        raise ConfigError("text", f"tokens must lie in [0, {cfg.text_vocab})")
    if not 0 <= args.speaker < cfg.n_speakers:
        raise ConfigError("speaker", f"must lie in [0, {cfg.n_speakers})")
    rng = np.random.default_rng(args.seed)
    speech, report = synthesize_paragraph(sentences, speaker_xvec(args.speaker, cfg.d_xvec), models, rng,
                                          args.temperature)
    print(json.dumps({"speech": speech, "cost": report.to_json()}, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = grad_check_config(_config(args))
    report = gradient_report(cfg, max_coords=args.max_coords)
    groups = group_report(report)
    for name, err in sorted(groups.items()):
        print(f"{name:8s} max relative error {err:.3e}")
    worst = max(report, key=report.get)
    print(f"worst tensor: {worst} ({report[worst]:.3e})")
    return EXIT_OK if max(groups.values()) < args.tol else EXIT_THRESHOLD


def cost_rows(reports) -> list[list]:
    rows = []
    for r in reports:
        num = r.num_contexts[0] if len(set(r.num_contexts)) == 1 else "/".join(map(str, r.num_contexts))
        prefix = f"Fixed: {r.prefix_len_fixed}" if r.prefix_len_fixed is not None else "Variable"
        rows.append([r.strategy, num, prefix, " ".join(map(str, r.prefix_lens)),
                     r.totals["prefix_tokens"]])
    return rows


def cmd_cost_report(args) -> int:
    cfg = _config(args)
    samples = read_dataset(args.data)[0]
    if not samples:
        raise ConfigError("data", "dataset is empty")
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError("strategies", f"unknown strategy {s!r}")
    paragraph = samples[args.index]
    reports = [context_cost(s, paragraph, cfg.lm_config()) for s in strategies]
    print(json.dumps([r.to_json() for r in reports], sort_keys=True))
    print(table(cost_rows(reports), ["strategy", "num", "prefix_len", "per_sentence", "total_prefix"]))
    return EXIT_OK


def run_ablation(cfg: RunConfig, train_samples=None, val_samples=None) -> list[dict]:
    """Train every ablation with the same seed and data; return one row per configuration."""
    rows = []
    for name, change in ABLATIONS:
        c = cfg.replace(checkpoint="", metrics="", **change)
        res = train(c, train_samples=train_samples, val_samples=val_samples)
        ev = evaluate(res.models, val_samples if val_samples is not None else validation_data(c))
        rows.append({"config": name, "val_loss": ev["val_loss"], "token_accuracy": ev["token_accuracy"],
                     "state_accuracy": ev["state_accuracy"], "accuracy_from3": ev["accuracy_from3"],
                     "state_accuracy_from3": ev["state_accuracy_from3"]})
    return rows


def cmd_ablate(args) -> int:
    cfg = _config(args, steps=args.steps)
    train_samples = read_dataset(args.data)[0] if args.data else None
    rows = run_ablation(cfg, train_samples)
    print(json.dumps(rows, sort_keys=True))
    keys = ["val_loss", "token_accuracy", "state_accuracy", "accuracy_from3"]
    print(table([[r["config"]] + [f"{r[k]:.4f}" for k in keys] for r in rows], ["config"] + keys))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="camlm", description="Train, evaluate and run the memory-conditioned speech-token LM.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key=value run configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    sp = with_config(sub.add_parser("gen-corpus", help="write a synthetic paragraph dataset"))
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_corpus)

    sp = with_config(sub.add_parser("train", help="train the full model"))
    sp.add_argument("--data", help="training dataset (JSONL); generated from the config when omitted")
    sp.add_argument("--out-ckpt")
    sp.add_argument("--metrics")
    sp.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="teacher-forced and greedy accuracy of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", help="evaluation dataset; the held-out split when omitted")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="synthesize speech tokens for a paragraph")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--text", required=True, help='sentences separated by "|", e.g. "1 2 3 | 4 5"')
    sp.add_argument("--speaker", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--temperature", type=float, default=None)
    sp.set_defaults(func=cmd_infer)

    sp = with_config(sub.add_parser("grad-check", help="finite-difference gradient verification"))
    sp.add_argument("--max-coords", type=int, default=16, help="coordinates checked per tensor")
    sp.add_argument("--tol", type=float, default=GRAD_TOL)
    sp.set_defaults(func=cmd_grad_check)

    sp = with_config(sub.add_parser("cost-report", help="context cost per strategy"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--strategies", default=",".join(STRATEGIES))
    sp.add_argument("--index", type=int, default=0, help="which paragraph of the dataset")
    sp.set_defaults(func=cmd_cost_report)

    sp = with_config(sub.add_parser("ablate", help="train the four ablation configurations"))
    sp.add_argument("--data")
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, ValueError, IndexError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, checkpoint.CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
